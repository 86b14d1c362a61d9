"""Command line interface: one subcommand per pipeline operation."""

from __future__ import annotations

import json
from pathlib import Path

import click

from . import llm as llm_mod
from .evaluation import dump_embeddings, evaluate
from .manifest import load_manifest, write_manifest
from .nnkit import load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, ablate_image_count, run_pipeline
from .prompt_engine import build_prompt_set, load_prompt_set, write_prompt_set
from .semisl import SemiConfig, build_semisl_inputs, train_semisl
from .splitter import (load_partition, pseudo_label, split_by_category_mean,
                       write_partition)
from .synthesis import inject_label_noise, synthesize
from .pipeline import _make_generator
from .tasks import load_task
from .uda import UdaConfig, run_uda


@click.group()
def main():
    """Adapt a classifier to an unlabeled target domain from text prompts."""


@main.command()
@click.option("--mechanism", type=click.Choice(["simple", "domain", "gpt"]),
              required=True)
@click.option("--task", "task_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--count", default=8, show_default=True,
              help="prompts per category (gpt mechanism)")
@click.option("--replay", "replay_log", type=click.Path(exists=True),
              help="LLM replay log; forces offline replay")
@click.option("--llm-endpoint", help="live LLM endpoint (gpt mechanism)")
def prompts(mechanism, task_path, out_path, count, replay_log, llm_endpoint):
    """Generate labeled text prompts for a task."""
    task = load_task(task_path)
    llm = None
    if replay_log:
        llm = llm_mod.ReplayLlmClient(replay_log)
    elif llm_endpoint:
        llm = llm_mod.HttpLlmClient(llm_endpoint)
    prompt_set = build_prompt_set(task, mechanism, count_per_category=count,
                                  llm=llm)
    write_prompt_set(prompt_set, out_path)
    click.echo(f"wrote {len(prompt_set.records)} prompts to {out_path}")


@main.command()
@click.option("--prompts", "prompts_path", required=True,
              type=click.Path(exists=True))
@click.option("--generator", default="mock:flat", show_default=True,
              help="mock:<style> or remote:<endpoint>")
@click.option("--per-category", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth(prompts_path, generator, per_category, seed, out_dir):
    """Render a labeled synthetic manifest from a prompt set."""
    prompt_set = load_prompt_set(prompts_path)
    manifest = synthesize(prompt_set, _make_generator(generator),
                          per_category, out_dir, seed)
    click.echo(f"wrote {len(manifest.records)} samples under {out_dir}")


@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--rate", required=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def noise(manifest_path, rate, seed, out_path):
    """Resample a fraction of synthetic labels to other categories."""
    manifest = load_manifest(manifest_path)
    noisy = inject_label_noise(manifest, rate, seed)
    write_manifest(noisy, out_path)
    click.echo(f"wrote noisy manifest to {out_path}")


@main.command("train-uda")
@click.option("--trainer", required=True)
@click.option("--source", "source_path", required=True,
              type=click.Path(exists=True))
@click.option("--target", "target_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file with UdaConfig fields")
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_uda(trainer, source_path, target_path, config_path, out_dir):
    """Inter-domain knowledge transfer (stage 2)."""
    overrides = (json.loads(Path(config_path).read_text())
                 if config_path else {})
    overrides["trainer_id"] = trainer
    config = UdaConfig(**overrides)
    source = load_manifest(source_path)
    target = load_manifest(target_path) if target_path else None
    if target is not None and target.has_labels():
        target = target.without_labels()
    model, report = run_uda(trainer, source, target, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "ckpt")
    report.write(out_dir / "report.json")
    click.echo(f"final losses: "
               f"{ {k: v[-1] for k, v in report.losses.items()} }")


@main.command()
@click.option("--checkpoint", "ckpt_dir", required=True,
              type=click.Path(exists=True))
@click.option("--target", "target_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def split(ckpt_dir, target_path, out_path):
    """Pseudo-label the target and split at per-category mean confidence."""
    model = load_checkpoint(ckpt_dir)
    target = load_manifest(target_path)
    if target.has_labels():
        target = target.without_labels()
    table = pseudo_label(model, target, checkpoint_id=str(ckpt_dir))
    partition = split_by_category_mean(table)
    write_partition(partition, out_path)
    click.echo(f"confident {len(partition.confident_ids)} / "
               f"unconfident {len(partition.unconfident_ids)}")


@main.command("train-semi")
@click.option("--method", type=click.Choice(["mixmatch", "fixmatch"]),
              required=True)
@click.option("--init", "init_dir", required=True, type=click.Path(exists=True))
@click.option("--partition", "partition_path", required=True,
              type=click.Path(exists=True))
@click.option("--target", "target_path", required=True,
              type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file with SemiConfig fields")
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_semi(method, init_dir, partition_path, target_path, config_path,
               out_dir):
    """Intra-domain self-training (stage 3); synthetic data is not an input."""
    overrides = (json.loads(Path(config_path).read_text())
                 if config_path else {})
    overrides["method"] = method
    config = SemiConfig(**overrides)
    init = load_checkpoint(init_dir)
    target = load_manifest(target_path)
    if target.has_labels():
        target = target.without_labels()
    partition = load_partition(partition_path)
    labeled, unlabeled = build_semisl_inputs(target, partition)
    model, report = train_semisl(init, labeled, unlabeled, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "ckpt")
    report.write(out_dir / "report.json")
    click.echo(f"final losses: "
               f"{ {k: v[-1] for k, v in report.losses.items()} }")


@main.command("eval")
@click.option("--checkpoint", "ckpt_dir", required=True,
              type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path())
def eval_cmd(ckpt_dir, manifest_path, out_path):
    """Evaluate a checkpoint on a labeled manifest."""
    model = load_checkpoint(ckpt_dir)
    metrics = evaluate(model, load_manifest(manifest_path))
    if out_path:
        metrics.write(out_path)
    click.echo(metrics.table_text())


@main.command("dump-embeddings")
@click.option("--checkpoint", "ckpt_dir", required=True,
              type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def dump_embeddings_cmd(ckpt_dir, manifest_path, out_path):
    """Write per-sample feature vectors for external projection."""
    model = load_checkpoint(ckpt_dir)
    dump_embeddings(model, load_manifest(manifest_path), out_path)
    click.echo(f"wrote embeddings to {out_path}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--seed", type=int, help="override the config seed")
@click.option("--out", "out_root", type=click.Path(),
              help="override the config output root")
@click.option("--no-resume", is_flag=True, help="rerun all stages")
def pipeline(config_path, seed, out_root, no_resume):
    """Run all stages end to end."""
    config = PipelineConfig.from_json(config_path)
    if seed is not None:
        config.seed = seed
        config.uda.seed = seed
        config.semi.seed = seed
    if out_root:
        config.out_root = out_root
    bundle = run_pipeline(config, resume=not no_resume)
    if "metrics" in bundle:
        click.echo(json.dumps(bundle["metrics"], indent=2, sort_keys=True))
    click.echo(f"artifacts under {bundle['out_root']}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--counts", required=True,
              help="comma-separated ascending image counts, e.g. 50,100,200")
@click.option("--seeds", help="comma-separated seeds (default: config seed)")
def ablate(config_path, counts, seeds):
    """Pipeline runs over several per-category image counts."""
    config = PipelineConfig.from_json(config_path)
    count_list = [int(c) for c in counts.split(",")]
    seed_list = [int(s) for s in seeds.split(",")] if seeds else None
    rows = ablate_image_count(config, count_list, seeds=seed_list)
    click.echo(json.dumps(rows, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
