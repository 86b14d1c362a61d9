import dataclasses
import json
from pathlib import Path

import pytest

from adaptany.benchmark import make_procedural_manifest
from adaptany.pipeline import (PipelineConfig, PipelineError, _make_generator,
                               ablate_image_count, run_pipeline)
from adaptany.semisl import SemiConfig
from adaptany.synthesis import ProceduralT2IClient, RemoteT2IClient
from adaptany.tasks import TaskSpec
from adaptany.uda import UdaConfig

CATEGORIES = ("alpha", "beta", "gamma", "delta")


@pytest.fixture(scope="module")
def target_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe-target")
    make_procedural_manifest("textured", list(CATEGORIES), 6, root, 11)
    return str(root / "manifest.jsonl")


def _config(target_path, out_root, **overrides):
    base = dict(
        task=TaskSpec(task_id="pipe-test", category_names=CATEGORIES),
        target_manifest_path=target_path,
        out_root=str(out_root),
        prompt_mechanism="simple",
        generator="mock:flat",
        per_category=6,
        uda=UdaConfig(trainer_id="source_only", epochs=2, batch_size=16,
                      seed=0),
        semi=SemiConfig(method="mixmatch", epochs=1, batch_size=16, seed=0),
        seed=0)
    base.update(overrides)
    return PipelineConfig(**base)


def test_make_generator():
    assert isinstance(_make_generator("mock:flat"), ProceduralT2IClient)
    assert isinstance(_make_generator("remote:http://x"), RemoteT2IClient)
    with pytest.raises(ValueError):
        _make_generator("mock:unknown-style")
    with pytest.raises(ValueError):
        _make_generator("what:ever")


def test_config_validates_inputs(target_path, tmp_path):
    with pytest.raises(FileNotFoundError):
        _config(str(tmp_path / "missing.jsonl"), tmp_path)
    with pytest.raises(ValueError):
        _config(target_path, tmp_path, noise_rate=1.5)
    with pytest.raises(ValueError):
        _config(target_path, tmp_path, per_category=0)


def test_pipeline_end_to_end(target_path, tmp_path):
    config = _config(target_path, tmp_path / "run")
    bundle = run_pipeline(config)
    out = Path(bundle["out_root"])
    for stage in ("prompts", "synth", "uda", "split", "semisl", "eval"):
        assert (out / stage).is_dir()
        assert (out / stage / "timing.json").exists()
    assert (out / "eval" / "metrics.json").exists()
    assert (out / "eval" / "metrics_stage2.json").exists()
    assert (out / "eval" / "embeddings.tsv").exists()
    assert 0.0 <= bundle["metrics"]["overall_accuracy"] <= 1.0


def test_pipeline_resume_skips_completed_stages(target_path, tmp_path):
    config = _config(target_path, tmp_path / "run")
    run_pipeline(config)
    # resuming must not rewrite completed stage artifacts
    synth_manifest = Path(config.out_root) / "synth" / "manifest.jsonl"
    before = synth_manifest.stat().st_mtime_ns
    run_pipeline(config)
    assert synth_manifest.stat().st_mtime_ns == before


def test_pipeline_resume_detects_tampering(target_path, tmp_path):
    config = _config(target_path, tmp_path / "run")
    run_pipeline(config)
    prompts_file = Path(config.out_root) / "prompts" / "prompts.jsonl"
    prompts_file.write_text(prompts_file.read_text() + "\n")
    with pytest.raises(PipelineError):
        run_pipeline(config)


def test_pipeline_unknown_trainer_halts_at_uda(target_path, tmp_path):
    config = _config(target_path, tmp_path / "run")
    config.uda = dataclasses.replace(config.uda, trainer_id="symnets")
    with pytest.raises(PipelineError) as err:
        run_pipeline(config)
    assert err.value.stage == "uda"
    out = Path(config.out_root)
    assert (out / "synth" / "manifest.jsonl").exists()
    assert not (out / "semisl").exists()


def test_pipeline_noise_rate_uses_noisy_manifest(target_path, tmp_path):
    config = _config(target_path, tmp_path / "run", noise_rate=0.25)
    run_pipeline(config)
    out = Path(config.out_root)
    assert (out / "synth" / "manifest_noisy.jsonl").exists()


def test_pipeline_config_json_roundtrip(target_path, tmp_path):
    config = _config(target_path, tmp_path / "run")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config.to_dict()))
    loaded = PipelineConfig.from_json(path)
    assert loaded.to_dict() == config.to_dict()


def test_ablate_rejects_bad_counts(target_path, tmp_path):
    config = _config(target_path, tmp_path / "ab")
    with pytest.raises(ValueError):
        ablate_image_count(config, [8, 4])
    with pytest.raises(ValueError):
        ablate_image_count(config, [4, 4, 8])


def test_ablate_writes_rows(target_path, tmp_path):
    config = _config(target_path, tmp_path / "ab")
    rows = ablate_image_count(config, [4, 6], seeds=[0])
    assert [r["count"] for r in rows] == [4, 6]
    for row in rows:
        assert len(row["per_seed_accuracy"]) == 1
        assert 0.0 <= row["mean_accuracy"] <= 1.0
    data = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert data == rows
