"""Text-generation metrics: unigram F1, BLEU, ROUGE, DIST-n, persona overlap."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

from .errors import ContractError
from .text import tokenize

SMOOTHING_EPS = 1e-9


def _toks(x: str | Sequence[str]) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def unigram_f1(pred, ref) -> float:
    p, r = _toks(pred), _toks(ref)
    if not r:
        raise ContractError("unigram F1 needs a non-empty reference")
    overlap = sum((Counter(p) & Counter(r)).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(p), overlap / len(r)
    return 2 * precision * recall / (precision + recall)


def modified_precision(pred: Sequence[str], ref: Sequence[str], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total candidate n-grams."""
    cand = ngrams(pred, n)
    clipped = sum((cand & ngrams(ref, n)).values())
    return clipped, sum(cand.values())


def brevity_penalty(pred_len: int, ref_len: int) -> float:
    if pred_len == 0:
        return 0.0
    return 1.0 if pred_len >= ref_len else math.exp(1 - ref_len / pred_len)


def _geo_bleu(matches: Sequence[int], totals: Sequence[int], ref_totals: Sequence[int], bp: float, n: int,
              eps: float) -> float:
    logs = []
    for m, t, rt in zip(matches[:n], totals[:n], ref_totals[:n]):
        if t == 0 and rt == 0:
            # neither side is long enough for this order: a vacuous exact match, so bleu(x, x) = 100
            logs.append(0.0)
        else:
            logs.append(math.log(m / t) if m > 0 and t > 0 else math.log(eps))
    return 100.0 * bp * math.exp(sum(logs) / n)


def bleu(pred, ref, max_n: int = 4, smoothing: float = SMOOTHING_EPS) -> dict:
    """Sentence BLEU on the 0-100 scale.

    ``bleu_n`` is the cumulative score over orders 1..n with uniform weights;
    ``bleu`` is ``bleu_{max_n}``. Zero counts are smoothed with ``smoothing``;
    an order for which neither sentence has any n-gram counts as a full match.
    """
    p, r = _toks(pred), _toks(ref)
    if not r:
        raise ContractError("BLEU needs a non-empty reference")
    out = {f"bleu_{n}": 0.0 for n in range(1, max_n + 1)}
    out["precisions"] = [0.0] * max_n
    if not p:
        out["bleu"] = 0.0
        return out
    counts = [modified_precision(p, r, n) for n in range(1, max_n + 1)]
    matches = [m for m, _ in counts]
    totals = [t for _, t in counts]
    ref_totals = [max(len(r) - n + 1, 0) for n in range(1, max_n + 1)]
    bp = brevity_penalty(len(p), len(r))
    for n in range(1, max_n + 1):
        out[f"bleu_{n}"] = _geo_bleu(matches, totals, ref_totals, bp, n, smoothing)
    out["precisions"] = [m / t if t else 0.0 for m, t in counts]
    out["bleu"] = out[f"bleu_{max_n}"]
    return out


def corpus_bleu(preds: Sequence, refs: Sequence, max_n: int = 4, smoothing: float = SMOOTHING_EPS) -> dict:
    matches, totals, ref_totals = [0] * max_n, [0] * max_n, [0] * max_n
    pred_len = ref_len = 0
    for pred, ref in zip(preds, refs):
        p, r = _toks(pred), _toks(ref)
        pred_len += len(p)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            m, t = modified_precision(p, r, n)
            matches[n - 1] += m
            totals[n - 1] += t
            ref_totals[n - 1] += max(len(r) - n + 1, 0)
    bp = brevity_penalty(pred_len, ref_len)
    out = {f"bleu_{n}": _geo_bleu(matches, totals, ref_totals, bp, n, smoothing) if pred_len else 0.0
           for n in range(1, max_n + 1)}
    out["bleu"] = out[f"bleu_{max_n}"]
    return out


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f(overlap: float, n_pred: int, n_ref: int) -> float:
    if overlap == 0 or n_pred == 0 or n_ref == 0:
        return 0.0
    precision, recall = overlap / n_pred, overlap / n_ref
    return 2 * precision * recall / (precision + recall)


def rouge(pred, ref) -> dict:
    """ROUGE-1/2 and ROUGE-L F-measures on the 0-1 scale.

    When neither side has a bigram, ROUGE-2 takes the ROUGE-1 value instead
    of an undefined 0/0.
    """
    p, r = _toks(pred), _toks(ref)
    if not r:
        raise ContractError("ROUGE needs a non-empty reference")
    out = {}
    for n in (1, 2):
        cp, cr = ngrams(p, n), ngrams(r, n)
        if n > 1 and not cp and not cr:
            out[f"rouge{n}"] = out[f"rouge{n - 1}"]
            continue
        out[f"rouge{n}"] = _f(sum((cp & cr).values()), sum(cp.values()), sum(cr.values()))
    out["rougeL"] = _f(lcs_length(p, r), len(p), len(r))
    return out


def distinct_n(predictions: Sequence, n: int) -> float:
    seen: set = set()
    total = 0
    for pred in predictions:
        grams = ngrams(_toks(pred), n)
        seen.update(grams)
        total += sum(grams.values())
    if total == 0:
        raise ContractError(f"no {n}-grams in predictions")
    return len(seen) / total


def persona_overlap(predictions: Sequence, personas: Sequence[Sequence[str]]) -> dict:
    if len(predictions) != len(personas):
        raise ContractError("predictions and personas must be aligned")
    sums = {f"bleu_{n}": 0.0 for n in range(1, 5)}
    for pred, persona in zip(predictions, personas):
        ref = " ".join(persona) if not isinstance(persona, str) else persona
        scores = bleu(pred, ref)
        for k in sums:
            sums[k] += scores[k]
    count = max(len(predictions), 1)
    return {k: v / count for k, v in sums.items()}


@lru_cache(maxsize=65536)
def _sym_bleu(a: str, b: str) -> float:
    return max(bleu(a, b)["bleu"], bleu(b, a)["bleu"])


def context_similarity(a: str, b: str) -> float:
    """Order-independent sentence BLEU (0-100) between two raw context texts."""
    return _sym_bleu(a, b) if a <= b else _sym_bleu(b, a)


@dataclass
class MetricReport:
    f1: float
    bleu: float
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge1: float
    rouge2: float
    rougeL: float
    dist1: float
    dist2: float
    dist_avg: float
    bleu_to_persona: dict
    bleu_level: str = "sentence"
    count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if isinstance(v, float)]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v:8.3f}" for k, v in rows]
        lines += [f"{'persona ' + k:<{width}}  {v:8.3f}" for k, v in self.bleu_to_persona.items()]
        lines.append(f"(bleu level: {self.bleu_level}, n={self.count})")
        return "\n".join(lines)


def evaluate_corpus(predictions: Sequence[str], references: Sequence[str],
                    personas: Sequence[Sequence[str]] | None = None, bleu_level: str = "sentence",
                    f1_scale: float = 1.0) -> MetricReport:
    """Example-level metrics are averaged in order; DIST-n is corpus-level."""
    if len(predictions) != len(references) or not references:
        raise ContractError("predictions and references must be aligned and non-empty")
    n = len(references)
    f1 = sum(unigram_f1(p, r) for p, r in zip(predictions, references)) / n
    if bleu_level == "sentence":
        per = [bleu(p, r) for p, r in zip(predictions, references)]
        b = {k: sum(x[k] for x in per) / n for k in ("bleu", "bleu_1", "bleu_2", "bleu_3", "bleu_4")}
    elif bleu_level == "corpus":
        b = corpus_bleu(predictions, references)
    else:
        raise ContractError(f"bleu_level must be 'sentence' or 'corpus', got {bleu_level!r}")
    rs = [rouge(p, r) for p, r in zip(predictions, references)]
    rg = {k: 100.0 * sum(x[k] for x in rs) / n for k in ("rouge1", "rouge2", "rougeL")}

    def _dist(k: int) -> float:
        try:
            return 100.0 * distinct_n(predictions, k)
        except ContractError:
            return 0.0

    d1, d2 = _dist(1), _dist(2)
    overlap = persona_overlap(predictions, personas) if personas is not None else {}
    return MetricReport(f1=f1 * f1_scale, **b, **rg, dist1=d1, dist2=d2, dist_avg=(d1 + d2) / 2,
                        bleu_to_persona=overlap, bleu_level=bleu_level, count=n)
