"""One-for-all domain adaptation: synthesize a labeled source from text
prompts, transfer to an unlabeled target with UDA, then discard the synthetic
data and self-train on a confidence-split target domain."""

__version__ = "0.1.0"
