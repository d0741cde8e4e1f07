"""Dense retriever scoring each soft prompt against a context."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from . import numeric as nx
from .errors import ContractError, DegenerateInputError
from .prompts import SoftPromptBank


@dataclass
class SimilarityScores:
    """Scores for one context (``[K]``) or a batch (``[B, K]``)."""

    raw: torch.Tensor
    scores: torch.Tensor
    distribution: torch.Tensor

    def __getitem__(self, b: int) -> "SimilarityScores":
        return SimilarityScores(self.raw[b], self.scores[b], self.distribution[b])

    def __len__(self) -> int:
        return self.raw.shape[0] if self.raw.dim() == 2 else 1


class Retriever(nn.Module):
    def __init__(self, D: int, proj_dim: int | None = None, seed: int = 0, normalization: str = "sum"):
        super().__init__()
        if normalization not in ("sum", "softmax"):
            raise ContractError(f"score normalization must be 'sum' or 'softmax', got {normalization!r}")
        proj_dim = proj_dim or D
        self.D, self.proj_dim, self.normalization = D, proj_dim, normalization
        self.lin_C = nn.Linear(D, proj_dim)
        self.lin_sp = nn.Linear(D, proj_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.lin_C, self.lin_sp):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen) / D ** 0.5)
                lin.bias.zero_()

    def num_parameters(self) -> int:
        return 2 * (self.D * self.proj_dim + self.proj_dim)

    def _finish(self, raw: torch.Tensor) -> SimilarityScores:
        scores = nx.softplus(raw)
        if self.normalization == "sum":
            dist = scores / scores.sum(dim=-1, keepdim=True)
        else:
            dist = nx.softmax(raw)
        return SimilarityScores(raw, scores, dist)

    def prompt_vectors(self, bank: SoftPromptBank) -> torch.Tensor:
        if bank.D != self.D:
            raise ContractError(f"bank dim {bank.D} does not match retriever dim {self.D}")
        return self.lin_sp(bank.weight).mean(dim=1)  # [K, D']

    def score(self, context_embedding: torch.Tensor, bank: SoftPromptBank) -> SimilarityScores:
        if context_embedding.dim() != 2 or context_embedding.shape[0] < 1:
            raise ContractError(f"context embedding must be [M>=1, D], got {tuple(context_embedding.shape)}")
        v_c = self.lin_C(context_embedding).mean(dim=0)
        raw = nx.cosine_similarity(v_c.unsqueeze(0), self.prompt_vectors(bank))
        return self._finish(raw)

    def score_batch(self, embeddings: Sequence[torch.Tensor], bank: SoftPromptBank) -> SimilarityScores:
        """Score a list of ``[M_b, D]`` context embeddings at once: ``[B, K]``."""
        lengths = [e.shape[0] for e in embeddings]
        if min(lengths) < 1:
            raise ContractError("empty context embedding")
        padded = nn.utils.rnn.pad_sequence(list(embeddings), batch_first=True)
        mask = (torch.arange(padded.shape[1]).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1))
        v = self.lin_C(padded) * mask.unsqueeze(-1)
        v_c = v.sum(dim=1) / torch.tensor(lengths, dtype=v.dtype).unsqueeze(1)
        v_sp = self.prompt_vectors(bank)
        raw = nx.cosine_similarity(v_c.unsqueeze(1), v_sp.unsqueeze(0))
        return self._finish(raw)


def select(scores: SimilarityScores | torch.Tensor) -> int | list[int]:
    """Argmax with ties going to the lowest index."""
    s = scores.scores if isinstance(scores, SimilarityScores) else torch.as_tensor(scores)
    if s.shape[-1] < 1:
        raise DegenerateInputError("no prompts to select from")
    if s.dim() == 1:
        # torch.argmax returns the first maximal index
        return int(torch.argmax(s))
    return [int(i) for i in torch.argmax(s, dim=-1)]
