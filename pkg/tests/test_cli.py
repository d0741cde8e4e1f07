import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from spt.cli import main, make_run_dir
from spt.config import RunConfig


def spt(*args, env=None):
    proc = subprocess.run([sys.executable, "-m", "spt.cli", *map(str, args)], capture_output=True, text=True,
                          env=env, timeout=600)
    return proc


def run_dir(proc) -> Path:
    assert proc.returncode == 0, proc.stderr
    return Path(proc.stdout.strip().splitlines()[-1])


def manifest(d: Path) -> dict:
    return json.loads((d / "manifest.json").read_text())


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """synth -> pretrain -> train (1 epoch) -> eval on the default desk config, timed."""
    root = tmp_path_factory.mktemp("cli")
    start = time.perf_counter()
    data = run_dir(spt("synth", "--out", root / "synth"))
    paths = [f"--set=data.{s}_path={data / f'{s}.jsonl'}" for s in ("train", "valid", "pretrain")]
    backbone = run_dir(spt("pretrain", *paths, "--out", root / "pretrain")) / "backbone.sptb"
    train_args = [*paths, f"--set=backbone.path={backbone}", "--set=train.epochs=1"]
    trained = run_dir(spt("train", *train_args, "--out", root / "train"))
    evaluated = run_dir(spt("eval", *train_args, f"--set=eval.checkpoint={trained / 'checkpoint.sptr'}",
                            "--out", root / "eval"))
    seconds = time.perf_counter() - start
    return dict(root=root, data=data, paths=paths, backbone=backbone, train_args=train_args, trained=trained,
                evaluated=evaluated, seconds=seconds)


def test_end_to_end_smoke_under_five_minutes(smoke):
    assert smoke["seconds"] < 300
    metrics = json.loads((smoke["evaluated"] / "metrics.json").read_text())
    assert metrics["ppl"] > 1 and "generation" in metrics
    for d in (smoke["data"], smoke["trained"], smoke["evaluated"]):
        assert manifest(d)["status"] == "ok"


def test_run_directory_contents_and_manifest(smoke):
    for d in (smoke["data"], smoke["backbone"].parent, smoke["trained"], smoke["evaluated"]):
        names = {p.name for p in d.iterdir()}
        assert {"manifest.json", "config.json", "log.jsonl", "metrics.json"} <= names
        assert sum(1 for p in d.rglob("manifest.json")) == 1
        m = manifest(d)
        assert m["config_hash"] == RunConfig.model_validate(json.loads((d / "config.json").read_text())).hash()
        for name, digest in m["artifact_hashes"].items():
            from spt.cli import sha256_file
            assert sha256_file(d / name) == digest
    m = manifest(smoke["trained"])
    assert set(m["inputs"]) >= {"backbone", "train_corpus", "valid_corpus"}
    assert "checkpoint.sptr" in m["outputs"]


def test_train_metrics_report_frozen_backbone(smoke):
    metrics = json.loads((smoke["trained"] / "metrics.json").read_text())
    assert metrics["backbone_hash_before"] == metrics["backbone_hash_after"]
    assert metrics["trainable_parameters"] == metrics["trainable_parameters_closed_form"]
    assert len(metrics["epochs"]) == 1


def test_rerun_gives_bitwise_equal_metrics(smoke):
    again = run_dir(spt("train", *smoke["train_args"], "--out", smoke["root"] / "train"))
    assert again.name == "train-1"
    assert (again / "metrics.json").read_bytes() == (smoke["trained"] / "metrics.json").read_bytes()
    assert (again / "log.jsonl").read_bytes() == (smoke["trained"] / "log.jsonl").read_bytes()


def test_set_override_reaches_the_objective(smoke):
    d = run_dir(spt("train", *smoke["train_args"], "--set", "objective.lambda2=0", "--out", smoke["root"] / "nosl"))
    assert json.loads((d / "config.json").read_text())["objective"]["lambda2"] == 0
    base = [json.loads(x) for x in (smoke["trained"] / "log.jsonl").read_text().splitlines()]
    ablated = [json.loads(x) for x in (d / "log.jsonl").read_text().splitlines()]
    step = next(r for r in ablated if "total" in r)
    ref = next(r for r in base if "total" in r)
    assert step["selection"] == ref["selection"] and step["total"] != ref["total"]


def test_generate_writes_generations(smoke):
    d = run_dir(spt("generate", *smoke["train_args"], f"--set=eval.checkpoint={smoke['trained'] / 'checkpoint.sptr'}",
                    "--set=decode.max_new_tokens=4", "--out", smoke["root"] / "gen"))
    lines = (d / "generations.jsonl").read_text().splitlines()
    assert len(lines) == 40 and {"index", "prompt", "text", "regime"} <= set(json.loads(lines[0]))


def test_ablate_table_has_one_row_per_variant(smoke, capsys):
    out = smoke["root"] / "ablate"
    code = main(["ablate", *smoke["train_args"], "--set=ablate.k_sweep=[1,2]", "--set=eval.generate=false",
                 "--out", str(out)])
    assert code == 0
    table = (out / "ablation.md").read_text()
    rows = [line for line in table.splitlines()[2:] if line.startswith("|")]
    assert [r.split("|")[1].strip() for r in rows] == ["full", "wo_cl", "wo_fusion", "wo_sl", "K=1", "K=2"]
    variants = sorted(p.name for p in (out / "variants").iterdir())
    assert variants == sorted(["full", "wo_cl", "wo_fusion", "wo_sl", "K1", "K2"])
    assert all(manifest(out / "variants" / v)["status"] == "ok" for v in variants)
    assert table.strip() in capsys.readouterr().out


@pytest.mark.parametrize("override,field", [
    ("objective.lambda1=-1", "objective.lambda1"),
    ("prompt.K=0", "prompt.K"),
    ("train.nope=1", "train.nope"),
])
def test_invalid_config_exits_2_with_field(tmp_path, override, field):
    proc = spt("synth", "--set", override, "--out", tmp_path / "x")
    assert proc.returncode == 2
    assert field in proc.stderr


def test_missing_reference_exits_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "t")]) == 2
    assert "backbone.path" in capsys.readouterr().err
    assert main(["eval", f"--set=backbone.path={tmp_path / 'none.sptb'}", "--out", str(tmp_path / "e")]) == 2


def test_bad_log_level_exits_2(tmp_path):
    import os
    env = dict(os.environ, SPT_LOG_LEVEL="loud")
    assert spt("synth", "--out", tmp_path / "x", env=env).returncode == 2


def test_runtime_failure_exits_1_with_component(tmp_path, smoke, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    out = tmp_path / "fail"
    code = main(["train", f"--set=backbone.path={smoke['backbone']}", f"--set=data.train_path={bad}",
                 "--out", str(out)])
    assert code == 1
    assert "error (data)" in capsys.readouterr().err
    m = manifest(out)
    assert m["status"] == "failed" and "error" in m and not (out / "metrics.json").exists()


def test_run_dirs_are_never_reused(tmp_path):
    dirs = [make_run_dir(tmp_path / "r") for _ in range(3)]
    assert [d.name for d in dirs] == ["r", "r-1", "r-2"]


def test_seed_flag_feeds_the_command_seed(tmp_path):
    d = run_dir(spt("synth", "--seed", "11", "--set=synth.pretrain_per_regime=2", "--out", tmp_path / "s"))
    assert json.loads((d / "config.json").read_text())["synth"]["seed"] == 11
    assert manifest(d)["seed"] == 11
