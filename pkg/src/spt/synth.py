"""Synthetic multi-regime persona dialogues.

Each regime owns a disjoint pseudo-word lexicon covering persona sentences,
human utterances, short machine acknowledgements, a response style and a
turn-position word list. Earlier machine turns in the history are
acknowledgements, so the history never reveals the response style. Train and
validation records answer in their own regime's style. The pretraining
corpus decouples the two: a control token ``ctlN`` at the start of each
record decides the response style independently of the persona regime, so a
frozen backbone learns that the leading slot steers style. Soft prompts later
occupy that slot.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .text import HUMAN, MACHINE, DialogueContext, Utterance

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch", "th", "br", "kl",
           "tr", "gr", "pl", "st", "dr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee", "oo"]

PERSONA_POOL = 6
PERSONA_SIZE = 4
HUMAN_POOL = 4
ACK_POOL = 3
STAGES = 3
PHRASES = 2
MAX_TURNS = 3


@dataclass
class Lexicon:
    persona: list[list[str]]  # sentences; last word is the content noun
    human: list[list[str]]
    ack: list[list[str]]
    stage: list[str]
    phrases: list[list[str]]

    def words(self) -> set[str]:
        out = {w for s in self.persona + self.human + self.ack + self.phrases for w in s}
        return out | set(self.stage)


def _word(rng: random.Random, used: set[str]) -> str:
    while True:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.choice((2, 3))))
        if w not in used:
            used.add(w)
            return w


def make_lexicons(regimes: int, seed: int) -> list[Lexicon]:
    rng = random.Random(f"lexicon-{seed}")
    used: set[str] = set()
    lexicons = []
    for _ in range(regimes):
        pool = [_word(rng, used) for _ in range(10)]
        persona = [[rng.choice(pool[:3]), rng.choice(pool[3:6]), rng.choice(pool[6:]), rng.choice(pool[6:]),
                    _word(rng, used)] for _ in range(PERSONA_POOL)]
        human = [[rng.choice(pool[:3])] + [_word(rng, used) for _ in range(3)] for _ in range(HUMAN_POOL)]
        ack = [[_word(rng, used) for _ in range(3)] for _ in range(ACK_POOL)]
        stage = [_word(rng, used) for _ in range(STAGES)]
        phrases = [[_word(rng, used) for _ in range(3)] for _ in range(PHRASES)]
        lexicons.append(Lexicon(persona, human, ack, stage, phrases))
    return lexicons


def _response(rng: random.Random, style: Lexicon, turn: int, nouns: list[str]) -> str:
    words = [style.stage[min(turn, STAGES) - 1]] + rng.choice(style.phrases) + [rng.choice(nouns)]
    return " ".join(words)


def make_dialogue(rng: random.Random, lexicons: list[Lexicon], regime: int, style: int | None = None,
                  control: bool = False) -> DialogueContext:
    lex = lexicons[regime]
    style = regime if style is None else style
    sentences = rng.sample(lex.persona, PERSONA_SIZE)
    nouns = [s[-1] for s in sentences]
    turns = rng.randint(1, MAX_TURNS)
    history = []
    for t in range(1, turns + 1):
        history.append(Utterance(HUMAN, " ".join(rng.choice(lex.human))))
        if t < turns:
            history.append(Utterance(MACHINE, " ".join(rng.choice(lex.ack))))
    return DialogueContext(
        persona=tuple(" ".join(s) for s in sentences),
        history=tuple(history),
        target=_response(rng, lexicons[style], turns, nouns),
        regime=regime,
        control=f"ctl{style}" if control else None,
    )


def synthesize(regimes: int = 2, dialogues_per_regime: int = 50, valid_per_regime: int = 20,
               pretrain_per_regime: int = 1000, seed: int = 7) -> dict[str, list[DialogueContext]]:
    """Return ``{"train", "valid", "pretrain"}`` record lists."""
    if regimes < 1:
        raise ValueError("need at least one regime")
    lexicons = make_lexicons(regimes, seed)
    out = {}
    for split, per in (("train", dialogues_per_regime), ("valid", valid_per_regime)):
        rng = random.Random(f"{split}-{seed}")
        out[split] = [make_dialogue(rng, lexicons, r) for r in range(regimes) for _ in range(per)]
    rng = random.Random(f"pretrain-{seed}")
    pre = []
    for r in range(regimes):
        for _ in range(pretrain_per_regime):
            pre.append(make_dialogue(rng, lexicons, r, style=rng.randrange(regimes), control=True))
    rng.shuffle(pre)
    out["pretrain"] = pre
    return out
