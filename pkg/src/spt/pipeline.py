"""Steps shared by the command-line entry points and the acceptance runs:
corpus loading, backbone pretraining, prompt training and evaluation."""
from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Callable, Sequence

import torch

from .backbone import Backbone, BackboneConfig, pretrain
from .config import RunConfig
from .errors import ConfigError, ContractError
from .metrics import evaluate_corpus
from .synth import synthesize
from .text import DialogueContext, EncodedExample, Vocabulary, build_vocabulary, encode_corpus, load_corpus
from .trainer import SPTTrainer

SPLITS = ("pretrain", "train", "valid")


def synth_records(cfg: RunConfig) -> dict[str, list[DialogueContext]]:
    s = cfg.synth
    return synthesize(s.regimes, s.dialogues_per_regime, s.valid_per_regime, s.pretrain_per_regime, s.seed)


def load_records(cfg: RunConfig, required: Sequence[str] = ()) -> dict[str, list[DialogueContext]]:
    records = {}
    for split in SPLITS:
        path = getattr(cfg.data, f"{split}_path")
        if path is None:
            if split in required:
                raise ConfigError("required but not set", f"data.{split}_path")
            continue
        if not Path(path).is_file():
            raise ConfigError(f"no such file {path!r}", f"data.{split}_path")
        records[split] = load_corpus(path)
    return records


def encode_records(records: dict[str, list[DialogueContext]], vocab: Vocabulary,
                   cfg: RunConfig) -> dict[str, list[EncodedExample]]:
    d = cfg.data
    return {k: encode_corpus(v, vocab, d.max_context_len, d.max_target_len)[0] for k, v in records.items()}


def corpus_vocabulary(records: dict[str, list[DialogueContext]], cfg: RunConfig) -> Vocabulary:
    # every split goes in so that prompt training never meets an unknown token
    every = [r for split in SPLITS for r in records.get(split, [])]
    return build_vocabulary(every, cfg.data.min_count)


def build_backbone(cfg: RunConfig, vocab: Vocabulary) -> Backbone:
    b = cfg.backbone
    bc = BackboneConfig(len(vocab), b.d_model, b.n_layers, b.n_heads, b.d_ff, b.max_positions, b.dropout)
    return Backbone(bc, vocab, seed=b.seed)


def pretrain_backbone(cfg: RunConfig, records: dict[str, list[DialogueContext]],
                      callback: Callable[[int, float], None] | None = None) -> Backbone:
    if not records.get("pretrain"):
        raise ConfigError("a pretraining corpus is required", "data.pretrain_path")
    vocab = corpus_vocabulary(records, cfg)
    encoded = encode_records({"pretrain": records["pretrain"]}, vocab, cfg)["pretrain"]
    bb = build_backbone(cfg, vocab)
    p = cfg.pretrain
    return pretrain(bb, encoded, p.steps, p.lr, p.batch_size, p.seed, p.loss_on, log_every=100, callback=callback)


def load_backbone(cfg: RunConfig) -> Backbone:
    path = cfg.backbone.path
    if path is None:
        raise ConfigError("a pretrained backbone is required", "backbone.path")
    if not Path(path).is_file():
        raise ConfigError(f"no such file {path!r}", "backbone.path")
    bb = Backbone.load(path)
    if bb.vocab is None:
        raise ConfigError("backbone file carries no vocabulary", "backbone.path")
    return bb.freeze()


def selection_agreement(selections: Sequence[int], regimes: Sequence[int | None],
                        majority: dict[int, int] | None = None) -> dict:
    """How consistently each regime is routed to one prompt.

    ``agreement`` is the fraction of contexts whose selected prompt equals
    their regime's majority prompt. Passing ``majority`` scores against a
    fixed mapping (e.g. the noiseless one) instead of recomputing it.
    """
    pairs = [(s, r) for s, r in zip(selections, regimes) if r is not None]
    if not pairs:
        raise ContractError("no regime labels to audit")
    if majority is None:
        majority = {}
        for r in sorted({r for _, r in pairs}):
            counts = Counter(s for s, rr in pairs if rr == r)
            # ties resolved toward the lower prompt index
            majority[r] = min(counts, key=lambda i: (-counts[i], i))
    hits = sum(1 for s, r in pairs if majority.get(r) == s)
    usage = Counter(s for s, _ in pairs)
    return {"agreement": hits / len(pairs), "majority": {str(k): v for k, v in majority.items()},
            "usage_fraction": {str(k): usage[k] / len(pairs) for k in sorted(usage)}}


def evaluate(trainer: SPTTrainer, examples: Sequence[EncodedExample], generate: bool = True,
             score_noise: float = 0.0, generator: torch.Generator | None = None) -> tuple[dict, list[dict]]:
    """Perplexity, routing audit and (optionally) generation metrics.

    Returns ``(metrics, generations)``.
    """
    ppl = trainer.perplexity(examples, score_noise, generator)
    metrics = {k: ppl[k] for k in ("nll", "ppl", "usage", "selection_entropy", "selections")}
    regimes = [ex.regime for ex in examples]
    if any(r is not None for r in regimes):
        metrics["routing"] = selection_agreement(ppl["selections"], regimes)
    generations = []
    if generate:
        dc = trainer.config.decode
        gen = torch.Generator().manual_seed(dc.seed)
        for k, ex in enumerate(examples):
            text, i_star = trainer.generate_text(ex, generator=gen)
            generations.append({"index": k, "prompt": i_star, "text": text,
                                "reference": ex.source.target if ex.source else None, "regime": ex.regime})
        refs = [g["reference"] for g in generations]
        personas = [list(ex.source.persona) for ex in examples] if all(ex.source for ex in examples) else None
        report = evaluate_corpus([g["text"] for g in generations], refs, personas,
                                 trainer.config.eval.bleu_level, trainer.config.eval.f1_scale)
        metrics["generation"] = report.to_dict()
        metrics["generation_table"] = report.table()
    return metrics, generations


ABLATION_VARIANTS = {
    "full": [],
    "wo_cl": ["objective.lambda1=0"],
    "wo_fusion": ["objective.lambda3=0"],
    "wo_sl": ["objective.lambda2=0"],
}


def ablation_plan(cfg: RunConfig) -> list[tuple[str, list[str]]]:
    plan = []
    for name in cfg.ablate.variants:
        if name not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(ABLATION_VARIANTS)}",
                              "ablate.variants")
        plan.append((name, list(ABLATION_VARIANTS[name])))
    for k in cfg.ablate.k_sweep:
        if k < 1:
            raise ConfigError(f"K must be positive, got {k}", "ablate.k_sweep")
        plan.append((f"K={k}", [f"prompt.K={k}"]))
    return plan


ABLATION_COLUMNS = ("variant", "K", "ppl", "selection_entropy", "agreement", "f1", "bleu", "dist1", "dist2")


def ablation_row(name: str, cfg: RunConfig, metrics: dict) -> dict:
    gen = metrics.get("generation", {})
    return {"variant": name, "K": cfg.prompt.K, "ppl": metrics["ppl"],
            "selection_entropy": metrics["selection_entropy"],
            "agreement": metrics.get("routing", {}).get("agreement"),
            "f1": gen.get("f1"), "bleu": gen.get("bleu"), "dist1": gen.get("dist1"), "dist2": gen.get("dist2")}


def format_table(rows: Sequence[dict], columns: Sequence[str] = ABLATION_COLUMNS) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(columns, widths)) + " |",
             "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += ["| " + " | ".join(v.ljust(w) for v, w in zip(b, widths)) + " |" for b in body]
    return "\n".join(lines)
