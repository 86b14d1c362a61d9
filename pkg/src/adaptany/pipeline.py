"""End-to-end orchestration: prompts -> synthesis -> inter-domain transfer ->
confidence split -> intra-domain self-training -> evaluation.

Every stage persists its artifacts under the output root and records content
checksums, so an interrupted run resumes from the last completed stage and
reproduces the uninterrupted run byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import llm as llm_mod
from .evaluation import dump_embeddings, evaluate
from .manifest import DatasetManifest, load_manifest, write_manifest
from .nnkit import load_checkpoint, save_checkpoint
from .prompt_engine import build_prompt_set, load_prompt_set, write_prompt_set
from .semisl import SemiConfig, build_semisl_inputs, train_semisl
from .splitter import (load_partition, pseudo_label, split_by_category_mean,
                       write_partition)
from .synthesis import (DEFAULT_IMAGE_SHAPE, STYLE_TABLE, ProceduralT2IClient,
                        RemoteT2IClient, inject_label_noise, synthesize)
from .tasks import TaskSpec
from .uda import UdaConfig, run_uda

STAGES = ("prompts", "synth", "uda", "split", "semisl", "eval")


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"pipeline halted at stage {stage!r}: {cause}")


@dataclass
class PipelineConfig:
    task: TaskSpec
    target_manifest_path: str
    out_root: str
    prompt_mechanism: str = "simple"
    prompt_count_per_category: int = 8
    generator: str = "mock:flat"  # mock:<style> or remote:<endpoint>
    per_category: int = 200
    noise_rate: float = 0.0
    image_shape: tuple[int, int, int] = DEFAULT_IMAGE_SHAPE
    uda: UdaConfig = field(default_factory=UdaConfig)
    semi: SemiConfig = field(default_factory=SemiConfig)
    seed: int = 0
    eval_manifest_path: str | None = None
    llm_replay_log: str | None = None
    llm_endpoint: str | None = None

    def __post_init__(self):
        if not Path(self.target_manifest_path).exists():
            raise FileNotFoundError(self.target_manifest_path)
        if self.per_category < 1:
            raise ValueError("per_category must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        data["task"] = TaskSpec(
            task_id=data["task"]["task_id"],
            category_names=tuple(data["task"]["category_names"]),
            category_descriptions=data["task"].get("category_descriptions", {}),
            domain_name=data["task"].get("domain_name", ""),
            domain_description=data["task"].get("domain_description", ""))
        data["uda"] = UdaConfig(**data.get("uda", {}))
        data["semi"] = SemiConfig(**data.get("semi", {}))
        if "image_shape" in data:
            data["image_shape"] = tuple(data["image_shape"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"]["category_names"] = list(self.task.category_names)
        d["image_shape"] = list(self.image_shape)
        return d


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_checksums(root: Path, skip=("timing.json",)) -> dict:
    sums = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            sums[str(p.relative_to(root))] = _sha256(p)
    return sums


class _State:
    def __init__(self, out_root: Path):
        self.path = out_root / "state.json"
        self.data = (json.loads(self.path.read_text())
                     if self.path.exists() else {"completed": {}})

    def is_complete(self, stage: str, stage_dir: Path) -> bool:
        entry = self.data["completed"].get(stage)
        if entry is None or not stage_dir.exists():
            return False
        if _tree_checksums(stage_dir) != entry["checksums"]:
            raise PipelineError(stage, "artifact checksums do not match "
                                       "state.json; refusing to resume")
        return True

    def mark_complete(self, stage: str, stage_dir: Path) -> None:
        self.data["completed"][stage] = {
            "checksums": _tree_checksums(stage_dir)}
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True)
                             + "\n")


def _make_generator(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "mock":
        style = arg or "flat"
        if style not in STYLE_TABLE:
            raise ValueError(f"unknown style {style!r}; have "
                             f"{sorted(STYLE_TABLE)}")
        return ProceduralT2IClient(style)
    if kind == "remote":
        return RemoteT2IClient(endpoint=arg)
    raise ValueError(f"unknown generator spec {spec!r}")


def _make_llm(config: PipelineConfig):
    if config.llm_replay_log:
        return llm_mod.ReplayLlmClient(config.llm_replay_log)
    if config.llm_endpoint:
        return llm_mod.HttpLlmClient(config.llm_endpoint)
    return None


def _write_timing(stage_dir: Path, seconds: float) -> None:
    (stage_dir / "timing.json").write_text(
        json.dumps({"wall_clock_s": seconds}) + "\n")


def run_pipeline(config: PipelineConfig, resume: bool = True) -> dict:
    """Execute all stages; returns a bundle of artifact paths and metrics."""
    import time

    out_root = Path(config.out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    state = _State(out_root)
    dirs = {stage: out_root / stage for stage in STAGES}

    def run_stage(stage, fn):
        stage_dir = dirs[stage]
        if resume and state.is_complete(stage, stage_dir):
            return
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True)
        start = time.monotonic()
        try:
            fn(stage_dir)
        except Exception as err:
            raise PipelineError(stage, err) from err
        _write_timing(stage_dir, time.monotonic() - start)
        state.mark_complete(stage, stage_dir)

    target = load_manifest(config.target_manifest_path)
    target_unlabeled = (target.without_labels() if target.has_labels()
                        else target)

    # stage 1a: prompts
    def stage_prompts(d):
        prompt_set = build_prompt_set(
            config.task, config.prompt_mechanism,
            count_per_category=config.prompt_count_per_category,
            llm=_make_llm(config))
        write_prompt_set(prompt_set, d / "prompts.jsonl")

    run_stage("prompts", stage_prompts)
    prompts = load_prompt_set(dirs["prompts"] / "prompts.jsonl")

    # stage 1b: synthesis (+ optional label noise)
    def stage_synth(d):
        manifest = synthesize(prompts, _make_generator(config.generator),
                              config.per_category, d, config.seed,
                              image_shape=config.image_shape)
        if config.noise_rate > 0:
            manifest = inject_label_noise(manifest, config.noise_rate,
                                          config.seed)
            write_manifest(manifest, d / "manifest_noisy.jsonl")

    run_stage("synth", stage_synth)
    source_path = dirs["synth"] / ("manifest_noisy.jsonl"
                                   if config.noise_rate > 0
                                   else "manifest.jsonl")

    # stage 2: inter-domain transfer
    def stage_uda(d):
        source = load_manifest(source_path)
        model, report = run_uda(config.uda.trainer_id, source,
                                target_unlabeled, config.uda)
        save_checkpoint(model, d / "ckpt")
        report.write(d / "report.json")

    run_stage("uda", stage_uda)

    # stage 2b: confidence split
    def stage_split(d):
        model = load_checkpoint(dirs["uda"] / "ckpt")
        # checkpoint id is relative to the run root so artifacts stay
        # byte-identical across output locations
        table = pseudo_label(model, target_unlabeled, checkpoint_id="uda/ckpt")
        partition = split_by_category_mean(table)
        write_partition(partition, d / "partition.jsonl")

    run_stage("split", stage_split)

    # stage 3: intra-domain transfer (synthetic data is not an input)
    def stage_semisl(d):
        model = load_checkpoint(dirs["uda"] / "ckpt")
        partition = load_partition(dirs["split"] / "partition.jsonl")
        labeled, unlabeled = build_semisl_inputs(target_unlabeled, partition)
        final, report = train_semisl(model, labeled, unlabeled, config.semi)
        save_checkpoint(final, d / "ckpt")
        report.write(d / "report.json")

    run_stage("semisl", stage_semisl)

    # evaluation on the held-out labeled manifest
    def stage_eval(d):
        eval_manifest = load_manifest(config.eval_manifest_path or
                                      config.target_manifest_path)
        stage2_model = load_checkpoint(dirs["uda"] / "ckpt")
        final_model = load_checkpoint(dirs["semisl"] / "ckpt")
        if eval_manifest.has_labels():
            evaluate(stage2_model, eval_manifest).write(
                d / "metrics_stage2.json")
            metrics = evaluate(final_model, eval_manifest)
            metrics.write(d / "metrics.json")
            (d / "report.txt").write_text(metrics.table_text() + "\n")
        dump_embeddings(final_model, target_unlabeled, d / "embeddings.tsv")

    run_stage("eval", stage_eval)

    bundle = {"out_root": str(out_root),
              "stage_dirs": {k: str(v) for k, v in dirs.items()}}
    metrics_path = dirs["eval"] / "metrics.json"
    if metrics_path.exists():
        bundle["metrics"] = json.loads(metrics_path.read_text())
        bundle["metrics_stage2"] = json.loads(
            (dirs["eval"] / "metrics_stage2.json").read_text())
    return bundle


def ablate_image_count(config: PipelineConfig, counts: list[int],
                       seeds: list[int] | None = None) -> list[dict]:
    """Run the pipeline per image count with shared prompts and seeds.

    Returns one row per count with per-seed and mean final accuracies.
    """
    if counts != sorted(counts):
        raise ValueError("counts must be sorted ascending")
    if len(set(counts)) != len(counts):
        raise ValueError("duplicate counts are not allowed")
    seeds = seeds or [config.seed]
    out_root = Path(config.out_root)

    rows = []
    for count in counts:
        accs = []
        for seed in seeds:
            sub = json.loads(json.dumps(config.to_dict()))
            sub["per_category"] = count
            sub["seed"] = seed
            sub["uda"]["seed"] = seed
            sub["semi"]["seed"] = seed
            sub["out_root"] = str(out_root / f"count_{count}_seed_{seed}")
            sub_config = PipelineConfig(
                task=config.task,
                **{k: v for k, v in sub.items() if k != "task"})
            sub_config.uda = UdaConfig(**sub["uda"])
            sub_config.semi = SemiConfig(**sub["semi"])
            sub_config.image_shape = tuple(sub["image_shape"])
            bundle = run_pipeline(sub_config)
            accs.append(bundle["metrics"]["overall_accuracy"])
        rows.append({"count": count, "per_seed_accuracy": accs,
                     "mean_accuracy": float(sum(accs) / len(accs))})
    (out_root / "ablation.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return rows
