"""The bank of K trainable soft prompts and its selection counters."""
from __future__ import annotations

import threading
from collections import Counter, defaultdict

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError


class SoftPromptBank(nn.Module):
    def __init__(self, K: int, L: int, D: int, seed: int = 0, backbone_dim: int | None = None):
        super().__init__()
        if K < 1 or L < 1:
            raise ContractError(f"bank needs K>=1 and L>=1, got K={K}, L={L}")
        if backbone_dim is not None and backbone_dim != D:
            raise ConfigError(f"prompt dim {D} does not match backbone hidden dim {backbone_dim}", "prompt.D")
        self.K, self.L, self.D = K, L, D
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn((K, L, D), generator=gen, dtype=torch.get_default_dtype()))
        self._lock = threading.Lock()
        self._counts = [0] * K
        self._by_turn: dict[int, Counter] = defaultdict(Counter)

    @classmethod
    def init(cls, K: int, L: int, D: int, seed: int = 0, backbone_dim: int | None = None) -> "SoftPromptBank":
        return cls(K, L, D, seed, backbone_dim)

    def _check(self, i: int) -> None:
        if not 0 <= i < self.K:
            raise ContractError(f"prompt index {i} out of range for K={self.K}")

    def get(self, i: int) -> torch.Tensor:
        """Live view of prompt ``i`` (gradients flow back into the bank)."""
        self._check(i)
        return self.weight[i]

    @property
    def prompts(self) -> list[torch.Tensor]:
        return [self.weight[i] for i in range(self.K)]

    def num_parameters(self) -> int:
        return self.K * self.L * self.D

    def record_selection(self, i: int, turn: int | None = None) -> None:
        self._check(i)
        with self._lock:
            self._counts[i] += 1
            self._by_turn[turn if turn is not None else 0][i] += 1

    def usage_report(self) -> dict:
        with self._lock:
            return {
                "counts": list(self._counts),
                "by_turn": {int(t): [c[i] for i in range(self.K)] for t, c in sorted(self._by_turn.items())},
            }

    def reset_counters(self) -> None:
        with self._lock:
            self._counts = [0] * self.K
            self._by_turn = defaultdict(Counter)

    def counter_arrays(self) -> dict[str, torch.Tensor]:
        report = self.usage_report()
        turns = sorted(report["by_turn"])
        table = [[t] + report["by_turn"][t] for t in turns]
        return {
            "bank.counts": torch.tensor(report["counts"], dtype=torch.long),
            "bank.by_turn": torch.tensor(table, dtype=torch.long).reshape(len(turns), self.K + 1),
        }

    def load_counter_arrays(self, arrays) -> None:
        counts = [int(c) for c in arrays["bank.counts"].reshape(-1)]
        if len(counts) != self.K:
            raise ContractError("counter array does not match bank size")
        by_turn = defaultdict(Counter)
        for row in arrays["bank.by_turn"].reshape(-1, self.K + 1):
            by_turn[int(row[0])] = Counter({i: int(row[i + 1]) for i in range(self.K) if int(row[i + 1])})
        with self._lock:
            self._counts = counts
            self._by_turn = by_turn
