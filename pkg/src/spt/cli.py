"""Command-line entry point.

Every command writes into its own run directory: ``manifest.json``,
``config.json``, ``log.jsonl``, ``metrics.json`` plus command-specific
artifacts. ``metrics.json`` holds no timings, so reruns with the same inputs
are byte-identical; wall-clock data lives in the manifest.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from . import numeric as nx
from . import pipeline as pl
from .config import RunConfig, build_config, load_config
from .errors import CheckpointError, ConfigError, IngestionError, SPTError, TrainingError
from .text import write_corpus
from .trainer import SPTTrainer, trainable_parameter_count

log = logging.getLogger("spt")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
COMMANDS = ("synth", "pretrain", "train", "eval", "generate", "ablate")
# which config field --seed feeds for each command
SEED_FIELD = {"synth": "synth.seed", "pretrain": "pretrain.seed", "train": "train.seed", "eval": "decode.seed",
              "generate": "decode.seed", "ablate": "train.seed"}


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def make_run_dir(base: str | Path) -> Path:
    """Claim ``base`` if unused, else the first free ``base-N``. Never reuses a directory."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    candidates = [base] + [base.with_name(f"{base.name}-{k}") for k in range(1, 10_000)]
    for cand in candidates:
        try:
            cand.mkdir()
            return cand
        except FileExistsError:
            continue
    raise SPTError(f"no free run directory next to {base}")


class Run:
    """Bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out: str | Path, seed: int | None):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.dir = make_run_dir(out)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()
        (self.dir / "config.json").write_text(_dump(cfg.to_dict()), encoding="utf-8")
        self._log = (self.dir / "log.jsonl").open("w", encoding="utf-8")

    def path(self, name: str) -> Path:
        return self.dir / name

    def add_input(self, key: str, path: str | None):
        if path:
            self.inputs[key] = str(path)

    def add_output(self, name: str):
        self.outputs.append(name)

    def log(self, record: dict):
        self._log.write(json.dumps(record, sort_keys=True) + "\n")

    def timed(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = time.perf_counter() - self.t

        return _Timer()

    def finish(self, metrics: dict) -> Path:
        self._log.close()
        (self.dir / "metrics.json").write_text(_dump(metrics), encoding="utf-8")
        return self._manifest(["config.json", "log.jsonl", "metrics.json"] + self.outputs, "ok")

    def fail(self, message: str) -> Path:
        """Failed runs still get a manifest, marked as such, and no metrics."""
        if not self._log.closed:
            self._log.close()
        outputs = [f for f in self.outputs if (self.dir / f).is_file()]
        return self._manifest(["config.json", "log.jsonl"] + outputs, "failed", message)

    def _manifest(self, files: list[str], status: str, error: str | None = None) -> Path:
        self.timings["total"] = time.perf_counter() - self._t0
        manifest = {
            "status": status,
            "command": self.command,
            "version": __version__,
            "config_hash": self.cfg.hash(),
            "seed": self.seed,
            "inputs": {k: {"path": v, "sha256": sha256_file(Path(v)) if Path(v).is_file() else None}
                       for k, v in sorted(self.inputs.items())},
            "outputs": sorted(files),
            "artifact_hashes": {f: sha256_file(self.dir / f) for f in sorted(files)},
            "timings": self.timings,
        }
        if error is not None:
            manifest["error"] = error
        (self.dir / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
        return self.dir


def _setup_runtime(cfg: RunConfig):
    torch.set_num_threads(cfg.train.threads)
    nx.set_default_dtype(cfg.train.dtype)


# --- commands -----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, run: Run) -> dict:
    with run.timed("synth"):
        records = pl.synth_records(cfg)
    counts = {}
    for split, recs in records.items():
        name = f"{split}.jsonl"
        counts[split] = write_corpus(recs, run.path(name))
        run.add_output(name)
    run.log({"event": "synth", **counts})
    return {"counts": counts, "regimes": cfg.synth.regimes, "seed": cfg.synth.seed}


def cmd_pretrain(cfg: RunConfig, run: Run) -> dict:
    records = pl.load_records(cfg, required=("pretrain",))
    for split in records:
        run.add_input(f"{split}_corpus", getattr(cfg.data, f"{split}_path"))
    losses = []

    def on_step(step, loss):
        losses.append(loss)
        run.log({"step": step, "loss": loss})

    with run.timed("pretrain"):
        bb = pl.pretrain_backbone(cfg, records, on_step)
    bb.save(run.path("backbone.sptb"))
    run.add_output("backbone.sptb")
    tail = losses[-50:]
    return {"steps": len(losses), "final_loss": sum(tail) / len(tail) if tail else None,
            "vocab_size": len(bb.vocab), "backbone_hash": bb.param_hash()}


def _trained(cfg: RunConfig, run: Run, backbone, records) -> tuple[SPTTrainer, list]:
    data = pl.encode_records(records, backbone.vocab, cfg)
    trainer = SPTTrainer(backbone, cfg)
    every = cfg.train.checkpoint_every
    history = []

    def on_epoch(stats):
        history.append(stats.to_dict())
        run.log({"event": "epoch", **stats.to_dict()})
        if every and (stats.epoch + 1) % every == 0:
            name = f"checkpoints/epoch-{stats.epoch + 1}.sptr"
            run.path("checkpoints").mkdir(exist_ok=True)
            trainer.save(run.path(name))
            run.add_output(name)

    with run.timed("train"):
        trainer.fit(data["train"], log_fn=run.log, epoch_fn=on_epoch)
    trainer.save(run.path("checkpoint.sptr"))
    run.add_output("checkpoint.sptr")
    return trainer, history


def cmd_train(cfg: RunConfig, run: Run) -> dict:
    _setup_runtime(cfg)
    backbone = pl.load_backbone(cfg)
    run.add_input("backbone", cfg.backbone.path)
    records = pl.load_records(cfg, required=("train",))
    records.pop("pretrain", None)
    for split in records:
        run.add_input(f"{split}_corpus", getattr(cfg.data, f"{split}_path"))
    hash_before = backbone.param_hash()
    trainer, history = _trained(cfg, run, backbone, records)
    metrics = {
        "epochs": history,
        "trainable_parameters": trainer.num_trainable(),
        "trainable_parameters_closed_form": trainable_parameter_count(cfg.prompt.K, cfg.prompt.L,
                                                                      backbone.d_model, cfg.retriever.proj_dim),
        "backbone_hash_before": hash_before,
        "backbone_hash_after": backbone.param_hash(),
    }
    if "valid" in records:
        valid = pl.encode_records({"valid": records["valid"]}, backbone.vocab, cfg)["valid"]
        with run.timed("eval"):
            metrics["valid"], _ = pl.evaluate(trainer, valid, generate=False)
    return metrics


def _restore(cfg: RunConfig, run: Run) -> SPTTrainer:
    backbone = pl.load_backbone(cfg)
    run.add_input("backbone", cfg.backbone.path)
    path = cfg.eval.checkpoint
    if path is None:
        raise ConfigError("a trained checkpoint is required", "eval.checkpoint")
    if not Path(path).is_file():
        raise ConfigError(f"no such file {path!r}", "eval.checkpoint")
    run.add_input("checkpoint", path)
    return SPTTrainer(backbone, cfg).load(path)


def _eval_examples(cfg: RunConfig, run: Run, trainer: SPTTrainer):
    split = cfg.eval.split
    records = pl.load_records(cfg, required=(split,))
    run.add_input(f"{split}_corpus", getattr(cfg.data, f"{split}_path"))
    return pl.encode_records({split: records[split]}, trainer.backbone.vocab, cfg)[split]


def cmd_eval(cfg: RunConfig, run: Run) -> dict:
    _setup_runtime(cfg)
    trainer = _restore(cfg, run)
    examples = _eval_examples(cfg, run, trainer)
    with run.timed("eval"):
        metrics, generations = pl.evaluate(trainer, examples, generate=cfg.eval.generate)
    for g in generations:
        run.log({"event": "generation", **g})
    table = metrics.pop("generation_table", None)
    print(f"perplexity {metrics['ppl']:.4f}  selection entropy {metrics['selection_entropy']:.4f}")
    if table:
        print(table)
    return metrics


def cmd_generate(cfg: RunConfig, run: Run) -> dict:
    _setup_runtime(cfg)
    trainer = _restore(cfg, run)
    examples = _eval_examples(cfg, run, trainer)
    gen = torch.Generator().manual_seed(cfg.decode.seed)
    with run.timed("generate"), run.path("generations.jsonl").open("w", encoding="utf-8") as fh:
        for k, ex in enumerate(examples):
            text, i_star = trainer.generate_text(ex, generator=gen)
            rec = {"index": k, "prompt": i_star, "text": text, "regime": ex.regime}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            run.log({"event": "generation", **rec})
            print(text)
    run.add_output("generations.jsonl")
    return {"count": len(examples), "usage": trainer.bank.usage_report()}


def _ablation_job(job: tuple) -> dict:
    name, overrides, raw, out = job
    cfg = build_config(raw, overrides)
    _setup_runtime(cfg)
    run = Run("train", cfg, out, cfg.train.seed)
    try:
        backbone = pl.load_backbone(cfg)
        records = pl.load_records(cfg, required=("train", "valid"))
        records.pop("pretrain", None)
        trainer, history = _trained(cfg, run, backbone, records)
        valid = pl.encode_records({"valid": records["valid"]}, backbone.vocab, cfg)["valid"]
        metrics, _ = pl.evaluate(trainer, valid, generate=cfg.eval.generate)
    except Exception as exc:
        run.fail(f"{type(exc).__name__}: {exc}")
        raise
    metrics.pop("generation_table", None)
    metrics["epochs"] = history
    run.finish(metrics)
    return pl.ablation_row(name, cfg, metrics)


def cmd_ablate(cfg: RunConfig, run: Run) -> dict:
    # validate references up front so a bad path fails with exit 2 before any work
    pl.load_backbone(cfg)
    pl.load_records(cfg, required=("train", "valid"))
    run.add_input("backbone", cfg.backbone.path)
    for split in ("train", "valid"):
        run.add_input(f"{split}_corpus", getattr(cfg.data, f"{split}_path"))
    plan = pl.ablation_plan(cfg)
    run.path("variants").mkdir()
    raw = cfg.to_dict()
    jobs = [(name, ov, raw, run.path("variants") / name.replace("=", "")) for name, ov in plan]
    with run.timed("ablate"):
        if cfg.ablate.workers > 1:
            with ProcessPoolExecutor(cfg.ablate.workers) as ex:
                rows = list(ex.map(_ablation_job, jobs))
        else:
            rows = [_ablation_job(j) for j in jobs]
    for row in rows:
        run.log({"event": "variant", **row})
    table = pl.format_table(rows)
    run.path("ablation.md").write_text(table + "\n", encoding="utf-8")
    run.add_output("ablation.md")
    print(table)
    return {"rows": rows}


HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "generate": cmd_generate, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spt", description="Selective prompt tuning over a frozen LM.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, repeatable (wins over the file)")
        p.add_argument("--seed", type=int, help=f"shortcut for --set {SEED_FIELD[name]}=N")
        p.add_argument("--out", help=f"run directory (default runs/{name}; suffixed if taken)")
    return parser


def _component(exc: SPTError) -> str:
    if isinstance(exc, TrainingError) and exc.component:
        return exc.component
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, IngestionError):
        return "data"
    return type(exc).__name__


def _configure_logging() -> None:
    level_name = os.environ.get("SPT_LOG_LEVEL", "info").lower()
    if level_name not in LOG_LEVELS:
        raise ConfigError(f"must be one of {sorted(LOG_LEVELS)}, got {level_name!r}", "SPT_LOG_LEVEL")
    logging.basicConfig(level=LOG_LEVELS[level_name], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    run = None
    try:
        _configure_logging()
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"{SEED_FIELD[args.command]}={args.seed}")
        cfg = load_config(args.config, overrides)
        seed = int(_config_value(cfg, SEED_FIELD[args.command]))
        run = Run(args.command, cfg, args.out or f"runs/{args.command}", seed)
        if args.config:
            run.add_input("config", args.config)
        metrics = HANDLERS[args.command](cfg, run)
        out = run.finish(metrics)
        log.info("%s finished: %s", args.command, out)
        print(out)
        return 0
    except ConfigError as exc:
        message, code = f"config error: {exc}", 2
    except SPTError as exc:
        message, code = f"error ({_component(exc)}): {exc}", 1
    except Exception as exc:  # noqa: BLE001 - scripted callers only see the exit code
        message, code = f"error (runtime): {type(exc).__name__}: {exc}", 1
    print(message, file=sys.stderr)
    log.debug("traceback", exc_info=True)
    if run is not None:
        run.fail(message)
    return code


def _config_value(cfg: RunConfig, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = getattr(node, part)
    return node


if __name__ == "__main__":
    sys.exit(main())
