import json

import pytest
import yaml

from damp.cli import main
from damp.errors import ConfigError
from damp.pipeline import STAGES, PipelineConfig, full_pipeline, run_stage

SMALL = {
    "seed": 0,
    "deterministic": True,
    "occupations": ["doctor", "nurse", "travel agent"],
    "corpus": {"size": 3000, "heldout_size": 300},
    "train": {"epochs": 2},
    "templates": {"n": 6},
    "debias": {"n": 6, "m": 10},
}


def write_config(tmp_path, **overrides):
    cfg = {**SMALL, **overrides}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig.from_dict({**SMALL, "out": str(out)})
    return out, full_pipeline(cfg)


def test_full_pipeline_artifacts(small_run):
    out, summary = small_run
    for stage in STAGES:
        assert (out / f"{stage}.manifest.json").exists(), stage
    head = summary["headline"]
    assert head["fingerprint_equal"] is True
    assert head["debiased_words"] == 3
    assert head["mean_tde_before"] is not None and head["mean_tde_after"] is not None
    for name in ("tde.csv", "debias.csv", "geometry_before.csv", "geometry_neighbors.svg", "summary.csv"):
        assert (out / name).stat().st_size > 0


def test_tde_report_has_before_after_and_identity(small_run):
    out, _ = small_run
    rep = json.loads((out / "tde.json").read_text())
    for occ in SMALL["occupations"]:
        e = rep["per_occupation"][occ]
        assert {"tde_before", "tde_after", "te", "tde", "nie"} <= set(e)
        assert abs(e["te"] - (e["tde"] + e["nie"])) < 1e-9


def test_manifest_records_digests(small_run):
    out, _ = small_run
    m = json.loads((out / "debias.manifest.json").read_text())
    assert m["seed"] == 0 and len(m["config_hash"]) == 64
    assert "model_biased.ckpt" in m["inputs"] and "model_debiased.ckpt" in m["outputs"]
    import hashlib
    assert m["outputs"]["debias.json"] == hashlib.sha256((out / "debias.json").read_bytes()).hexdigest()


def test_rerun_is_byte_identical(small_run, tmp_path):
    out, _ = small_run
    cfg = PipelineConfig.from_dict({**SMALL, "out": str(tmp_path)})
    for stage in ("synth", "train", "templates", "debias"):
        run_stage(stage, cfg)
    for name in ("corpus_biased.txt", "model_biased.ckpt", "templates.jsonl", "model_debiased.ckpt",
                 "debias.json", "debias.manifest.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_json_reports_are_sorted(small_run):
    out, _ = small_run
    text = (out / "summary.json").read_text()
    data = json.loads(text)
    assert text == json.dumps(data, sort_keys=True, indent=2) + "\n"


def test_missing_upstream_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["--config", str(cfg), "--stage", "debias", "--out", str(tmp_path / "empty")])
    assert code == 3
    assert "run stage 'synth'" in capsys.readouterr().err


def test_missing_upstream_names_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "partial"
    assert main(["--config", str(cfg), "--stage", "synth", "--out", str(out)]) == 0
    assert main(["--config", str(cfg), "--stage", "templates", "--out", str(out)]) == 3
    assert "run stage 'train'" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path):
    assert main(["--config", str(write_config(tmp_path, debias={"m": 0})), "--stage", "synth",
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["--config", str(write_config(tmp_path, bogus=1)), "--out", str(tmp_path / "o")]) == 2
    assert main(["--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["--config", str(write_config(tmp_path, profile="/no/such/file.yaml"))]) == 2
    assert not (tmp_path / "o").exists()


def test_flags_override_file(tmp_path):
    cfg = PipelineConfig.load(write_config(tmp_path))
    assert cfg.jobs == 1 and cfg.deterministic
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"backend": "gpu"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"train": {"seed": 3}})


def test_empty_occupation_list(tmp_path):
    cfg = PipelineConfig.from_dict({**SMALL, "occupations": [], "out": str(tmp_path)})
    summary = full_pipeline(cfg)
    head = summary["headline"]
    assert head["debiased_words"] == 0
    assert head["fingerprint_equal"] is True
    assert head["mean_tde_before"] is None


def test_adapter_backend_stages(tmp_path):
    pytest.importorskip("transformers")
    cfg = write_config(tmp_path, occupations=["doctor"], corpus={"size": 1500, "heldout_size": 100},
                       train={"epochs": 2}, templates={"n": 3, "s": 0.05}, debias={"n": 3, "m": 3})
    out = tmp_path / "adapter"
    for stage in ("synth", "train", "templates", "debias", "tde"):
        assert main(["--config", str(cfg), "--stage", stage, "--backend", "adapter", "--out", str(out)]) == 0
    assert json.loads((out / "debias.json").read_text())["fingerprint_equal"] is True
