"""Tokenization, corpus ingestion and context serialization."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, IngestionError, ParseError, ValidationError

PAD, UNK, BOS, EOS, PERSONA_SEP, TURN_SEP, SPEAKER_H, SPEAKER_M = range(8)
RESERVED = ["<pad>", "<unk>", "<bos>", "<eos>", "<psep>", "<tsep>", "<h>", "<m>"]
HUMAN, MACHINE = "human", "machine"
_SPEAKER_ALIASES = {"human": HUMAN, "h": HUMAN, "user": HUMAN, "machine": MACHINE, "m": MACHINE,
                    "bot": MACHINE, "model": MACHINE}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str


@dataclass(frozen=True)
class DialogueContext:
    persona: tuple[str, ...]
    history: tuple[Utterance, ...]
    target: str = ""
    regime: int | None = None  # evaluation-only label, never encoded
    control: str | None = None  # pretraining-only prefix token

    def __post_init__(self):
        if len(self.persona) < 1:
            raise ContractError("persona needs at least one sentence")
        if not self.history:
            raise ContractError("history needs at least one utterance")
        if self.history[0].speaker != HUMAN:
            raise ContractError("history must start with a human utterance")
        for prev, cur in zip(self.history, self.history[1:]):
            if prev.speaker == cur.speaker:
                raise ContractError("speakers must alternate")

    @property
    def turn_index(self) -> int:
        """1-based index of the human turn the response answers."""
        return sum(1 for u in self.history if u.speaker == HUMAN)

    def raw_text(self) -> str:
        # shared by the contrastive gate and every report; keep in one place
        return " ".join(list(self.persona) + [u.text for u in self.history])


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def decode(self, ids: Sequence[int], skip_special: bool = False) -> str:
        out = []
        for i in ids:
            if skip_special and i < len(RESERVED):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def to_list(self) -> list[str]:
        return list(self.itos[len(RESERVED):])

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def _record_texts(ctx: DialogueContext) -> list[str]:
    texts = list(ctx.persona) + [u.text for u in ctx.history]
    if ctx.target:
        texts.append(ctx.target)
    if ctx.control:
        texts.append(ctx.control)
    return texts


def build_vocabulary(corpus: Iterable[DialogueContext | str], min_count: int = 1) -> Vocabulary:
    counts: Counter[str] = Counter()
    seen = 0
    for item in corpus:
        seen += 1
        texts = [item] if isinstance(item, str) else _record_texts(item)
        for text in texts:
            counts.update(tokenize(text))
    if seen == 0:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    # first-seen order keeps ids stable for a given corpus
    return Vocabulary(t for t in counts if counts[t] >= min_count)


@dataclass
class SerializeStats:
    truncated: int = 0
    dropped_turns: int = 0


def serialize_context(ctx: DialogueContext, max_context_len: int = 256,
                      stats: SerializeStats | None = None) -> list[str]:
    """Flatten persona and history into a token sequence.

    Layout: ``<bos> p1 <psep> p2 ... <tsep> <h> u1 <m> u2 ...``. Oldest turns
    are dropped first when the result exceeds ``max_context_len``; the persona
    and the final human turn are always kept.
    """
    head = [RESERVED[BOS]]
    for k, sentence in enumerate(ctx.persona):
        if k:
            head.append(RESERVED[PERSONA_SEP])
        head.extend(tokenize(sentence))
    head.append(RESERVED[TURN_SEP])
    turns = [[RESERVED[SPEAKER_H] if u.speaker == HUMAN else RESERVED[SPEAKER_M]] + tokenize(u.text)
             for u in ctx.history]
    start = 0
    while start < len(turns) - 1 and len(head) + sum(map(len, turns[start:])) > max_context_len:
        start += 1
    if stats is not None and start:
        stats.truncated += 1
        stats.dropped_turns += start
    return head + [t for turn in turns[start:] for t in turn]


@dataclass
class EncodedExample:
    context_ids: list[int]
    target_ids: list[int]
    raw_context_text: str
    turn_index: int = 1
    regime: int | None = None
    control_id: int | None = None
    source: DialogueContext | None = field(default=None, repr=False)


def encode_example(ctx: DialogueContext, vocab: Vocabulary, max_context_len: int = 256,
                   max_target_len: int = 32, stats: SerializeStats | None = None) -> EncodedExample:
    context_ids = vocab.encode_tokens(serialize_context(ctx, max_context_len, stats))
    target_ids = vocab.encode(ctx.target)[: max_target_len - 1] + [EOS] if ctx.target else []
    control_id = vocab.encode(ctx.control)[0] if ctx.control else None
    return EncodedExample(context_ids, target_ids, ctx.raw_text(), ctx.turn_index, ctx.regime,
                          control_id, ctx)


def encode_corpus(records: Sequence[DialogueContext], vocab: Vocabulary, max_context_len: int = 256,
                  max_target_len: int = 32) -> tuple[list[EncodedExample], SerializeStats]:
    stats = SerializeStats()
    return [encode_example(r, vocab, max_context_len, max_target_len, stats) for r in records], stats


def parse_record(obj: dict, line: int | None = None, require_response: bool = True) -> DialogueContext:
    if not isinstance(obj, dict):
        raise ValidationError("record must be a JSON object", line)
    for key in ("persona", "history") + (("response",) if require_response else ()):
        if key not in obj:
            raise ValidationError(f"missing field '{key}'", line, key)
    persona = obj["persona"]
    if not isinstance(persona, list) or not persona or not all(isinstance(p, str) for p in persona):
        raise ValidationError("'persona' must be a non-empty list of strings", line, "persona")
    history = []
    if not isinstance(obj["history"], list):
        raise ValidationError("'history' must be a list", line, "history")
    for k, turn in enumerate(obj["history"]):
        if not isinstance(turn, dict) or "speaker" not in turn or "text" not in turn:
            raise ValidationError(f"history[{k}] needs 'speaker' and 'text'", line, f"history[{k}]")
        speaker = _SPEAKER_ALIASES.get(str(turn["speaker"]).lower())
        if speaker is None:
            raise ValidationError(f"history[{k}] has unknown speaker {turn['speaker']!r}", line,
                                  f"history[{k}].speaker")
        history.append(Utterance(speaker, str(turn["text"])))
    response = obj.get("response", "")
    if require_response and (not isinstance(response, str) or not response.strip()):
        raise ValidationError("'response' must be a non-empty string", line, "response")
    # partner persona fields (self-persona setting) are ignored on purpose
    try:
        return DialogueContext(tuple(persona), tuple(history), response or "",
                               obj.get("regime"), obj.get("control"))
    except ContractError as exc:
        raise ValidationError(str(exc), line, "history") from exc


@dataclass
class IngestReport:
    records: list[DialogueContext]
    errors: list[IngestionError]


def read_corpus(path: str | Path, require_response: bool = True) -> IngestReport:
    """Parse a JSONL corpus, collecting per-line errors instead of stopping."""
    path = Path(path)
    records: list[DialogueContext] = []
    errors: list[IngestionError] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(ParseError(f"malformed JSON ({exc.msg})", lineno))
                continue
            try:
                records.append(parse_record(obj, lineno, require_response))
            except ValidationError as exc:
                errors.append(exc)
    return IngestReport(records, errors)


def load_corpus(path: str | Path, format: str = "jsonl", require_response: bool = True) -> list[DialogueContext]:
    if format != "jsonl":
        raise IngestionError(f"unsupported corpus format {format!r}")
    report = read_corpus(path, require_response)
    if report.errors:
        raise report.errors[0]
    if not report.records:
        raise IngestionError(f"{path}: corpus is empty")
    return report.records


def record_to_json(ctx: DialogueContext) -> dict:
    obj = {
        "persona": list(ctx.persona),
        "history": [{"speaker": u.speaker, "text": u.text} for u in ctx.history],
        "response": ctx.target,
    }
    if ctx.regime is not None:
        obj["regime"] = ctx.regime
    if ctx.control is not None:
        obj["control"] = ctx.control
    return obj


def write_corpus(records: Iterable[DialogueContext], path: str | Path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for ctx in records:
            fh.write(json.dumps(record_to_json(ctx), sort_keys=True) + "\n")
            n += 1
    return n


def convert_convai2(lines: Iterable[str]) -> list[dict]:
    """Map ConvAI2 ``self_original`` text lines into corpus records.

    Expected input lines look like ``1 your persona: i like dogs.`` and
    ``3 hello there\\thi , how are you?\\t\\tcand1|cand2``. Each machine reply
    becomes one record whose history is everything said before it. The
    dataset itself is not bundled.
    """
    out: list[dict] = []
    persona: list[str] = []
    history: list[dict] = []
    for raw in lines:
        raw = raw.rstrip("\n")
        if not raw.strip():
            continue
        num, _, rest = raw.partition(" ")
        if num == "1":
            persona, history = [], []
        if rest.startswith("your persona:"):
            persona.append(rest[len("your persona:"):].strip())
            continue
        if rest.startswith("partner's persona:"):
            continue
        parts = rest.split("\t")
        if len(parts) < 2:
            continue
        human, machine = parts[0].strip(), parts[1].strip()
        history.append({"speaker": HUMAN, "text": human})
        if persona:
            out.append({"persona": list(persona), "history": list(history), "response": machine})
        history.append({"speaker": MACHINE, "text": machine})
    return out
