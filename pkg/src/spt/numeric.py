"""Differentiable array primitives with explicit contracts.

Autograd and storage come from PyTorch (float64 by default); this module adds
the shape/value checks the rest of the package relies on, the numerically
stable forms used by the losses, and an independent central-difference
gradient checker.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

DEFAULT_DTYPE = torch.float64
NORM_EPS = 1e-12
KL_FLOOR = 1e-12
DIST_TOL = 1e-9


def set_default_dtype(name: str) -> torch.dtype:
    dtype = {"float64": torch.float64, "float32": torch.float32}[name]
    torch.set_default_dtype(dtype)
    return dtype


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> torch.Tensor:
    return torch.tensor(data, dtype=dtype or torch.get_default_dtype(), requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def mean(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.mean(dim=axis)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ContractError(f"token id out of range for vocabulary of size {table.shape[0]}")
    return F.embedding(ids, table)


def concat(parts: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    return torch.cat(list(parts), dim=axis)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def _require_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite input to {what}")


def softmax(x: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    if not temperature > 0:
        raise ContractError(f"softmax temperature must be positive, got {temperature}")
    _require_finite(x, "softmax")
    z = x / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def softplus(x: torch.Tensor) -> torch.Tensor:
    # each branch only ever exponentiates a non-positive number; the split at 0
    # keeps the gradient there exactly 1/2
    pos = x + torch.log1p(torch.exp(-torch.clamp(x, min=0)))
    neg = torch.log1p(torch.exp(torch.clamp(x, max=0)))
    return torch.where(x > 0, pos, neg)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Cosine along the last axis; leading axes broadcast."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na <= eps).any()) or bool((nb <= eps).any()):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def nll(log_probs: torch.Tensor, targets: torch.Tensor, ignore_index: int = 0) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise ``log_probs``."""
    if log_probs.dim() != 2 or targets.dim() != 1 or targets.shape[0] != log_probs.shape[0]:
        raise DimensionError(f"nll expects [T,V] and [T], got {tuple(log_probs.shape)} and {tuple(targets.shape)}")
    mask = targets != ignore_index
    if not bool(mask.any()):
        raise DegenerateInputError("nll over an empty target span")
    vocab = log_probs.shape[1]
    if int(targets[mask].max()) >= vocab or int(targets[mask].min()) < 0:
        raise ContractError("target index outside vocabulary")
    picked = log_probs[mask].gather(1, targets[mask].unsqueeze(1)).squeeze(1)
    return -picked.mean()


def _check_distribution(p: torch.Tensor, name: str) -> None:
    p = p.detach()
    sums = p.sum(dim=-1)
    if bool((p < 0).any()) or float((sums - 1).abs().max()) > DIST_TOL:
        raise ContractError(f"{name} is not a probability distribution")


def kl_divergence(p: torch.Tensor, q: torch.Tensor, floor: float = KL_FLOOR) -> torch.Tensor:
    """KL(p || q) along the last axis, with ``0 ln 0 = 0`` and q floored."""
    if p.shape != q.shape:
        raise DimensionError(f"kl shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    qf = torch.clamp(q, min=floor)
    positive = p > 0
    safe_p = torch.where(positive, p, torch.ones_like(p))
    terms = torch.where(positive, p * (torch.log(safe_p) - torch.log(qf)), torch.zeros_like(p))
    return terms.sum(dim=-1)


def entropy(p: Sequence[float] | torch.Tensor) -> float:
    t = torch.as_tensor(p, dtype=torch.float64)
    total = float(t.sum())
    if total <= 0:
        return 0.0
    t = t / total
    t = t[t > 0]
    return max(0.0, float(-(t * torch.log(t)).sum()))


@dataclass
class GradientReport:
    max_rel_error: float
    per_param: list[float] = field(default_factory=list)
    analytic: list[torch.Tensor] = field(default_factory=list)
    numeric: list[torch.Tensor] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def finite_difference(f: Callable[[], torch.Tensor], param: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. every element of ``param``."""
    grad = torch.zeros_like(param, dtype=torch.float64)
    flat = param.data.view(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = float(f().detach())
            flat[idx] = orig - h
            down = float(f().detach())
            flat[idx] = orig
            grad.view(-1)[idx] = (up - down) / (2 * h)
    return grad


def check_gradients(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5,
                    atol: float = 1e-6, numeric_f: Callable[[], torch.Tensor] | None = None) -> GradientReport:
    """Compare tape gradients of ``f`` against central finite differences.

    Relative error is ``|a - n| / max(|a|, |n|, atol)``; ``atol`` keeps
    vanishing gradients from dividing by zero. When ``f`` detaches part of
    its graph, pass ``numeric_f``: the same value with the detached part
    frozen as a constant, which is what the tape differentiates.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.requires_grad:
        grads = torch.autograd.grad(out, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    analytic = [torch.zeros_like(p) if g is None else g.detach().clone() for p, g in zip(params, grads)]
    report = GradientReport(max_rel_error=0.0)
    for p, a in zip(params, analytic):
        n = finite_difference(numeric_f or f, p, h)
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=atol)
        err = float(((a - n).abs() / denom).max()) if p.numel() else 0.0
        report.per_param.append(err)
        report.analytic.append(a)
        report.numeric.append(n)
        report.max_rel_error = max(report.max_rel_error, err)
    return report
