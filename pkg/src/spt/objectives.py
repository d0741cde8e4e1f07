"""The four training losses and their weighted composition."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from . import numeric as nx
from .backbone import Backbone, batch_nll
from .config import ObjectiveConfig
from .errors import ContractError, NumericError
from .metrics import context_similarity
from .prompts import SoftPromptBank
from .retriever import Retriever, SimilarityScores
from .text import EncodedExample


@dataclass
class LossBundle:
    per_prompt: torch.Tensor  # [K], batch-reduced
    selection: torch.Tensor
    contrastive: torch.Tensor
    fusion: torch.Tensor
    total: torch.Tensor
    scores: SimilarityScores | None = field(default=None, repr=False)
    per_example: torch.Tensor | None = field(default=None, repr=False)  # [K, B] NLL, detached
    n_pairs: int = 0

    def record(self) -> dict:
        return {
            "per_prompt": self.per_prompt.detach().tolist(),
            "selection": self.selection.item(),
            "contrastive": self.contrastive.item(),
            "fusion": self.fusion.item(),
            "total": self.total.item(),
        }


def prompt_conditioned_log_probs(backbone: Backbone, bank: SoftPromptBank, examples: Sequence[EncodedExample]):
    """Target-span log-probs for every (prompt, example) pair: ``[K, B, T, V]``."""
    if bank.D != backbone.d_model:
        raise ContractError(f"bank dim {bank.D} does not match backbone dim {backbone.d_model}")
    return backbone.target_log_probs(bank.weight, examples)


def fused_nll(logp: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """NLL of the probability-space average over the leading prompt axis: ``[B]``."""
    K = logp.shape[0]
    fused = torch.logsumexp(logp, dim=0) - math.log(K)  # [B, T, V]
    return batch_nll(fused.unsqueeze(0), targets, mask)[0]


def soft_prompt_losses(backbone: Backbone, bank: SoftPromptBank, example: EncodedExample) -> torch.Tensor:
    logp, targets, mask = prompt_conditioned_log_probs(backbone, bank, [example])
    return batch_nll(logp, targets, mask)[:, 0]


def fusion_loss(backbone: Backbone, bank: SoftPromptBank, example: EncodedExample) -> torch.Tensor:
    logp, targets, mask = prompt_conditioned_log_probs(backbone, bank, [example])
    return fused_nll(logp, targets, mask)[0]


def guidance_distribution(per_prompt: torch.Tensor, tau_g: float = 1.0, stop_grad: bool = True,
                          noise: float = 0.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """Softmax of negative per-prompt losses, optionally perturbed by Gaussian noise."""
    g = nx.softmax(-per_prompt, tau_g, dim=-1)
    if stop_grad:
        g = nx.stop_gradient(g)
    if noise:
        g = g + noise * torch.randn(g.shape, generator=generator, dtype=g.dtype)
        # additive noise leaves the simplex; project back so KL stays defined
        g = torch.clamp(g, min=nx.KL_FLOOR)
        g = g / g.sum(dim=-1, keepdim=True)
    return g


def selection_loss(scores: SimilarityScores, per_prompt: torch.Tensor, tau_g: float = 1.0,
                   stop_grad: bool = True, kl_direction: str = "scores_first", noise: float = 0.0,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """KL between the retriever's score distribution and the loss guidance."""
    guidance = guidance_distribution(per_prompt, tau_g, stop_grad, noise, generator)
    if kl_direction == "scores_first":
        return nx.kl_divergence(scores.distribution, guidance)
    if kl_direction == "guidance_first":
        return nx.kl_divergence(guidance, scores.distribution)
    raise ContractError(f"kl_direction must be 'scores_first' or 'guidance_first', got {kl_direction!r}")


def contrastive_value(vec_i: torch.Tensor, vec_j: torch.Tensor, similar: bool) -> torch.Tensor:
    cos = nx.cosine_similarity(vec_i, vec_j)
    return 1 - cos if similar else torch.clamp(cos, min=0)


def contrastive_loss(scores_i: SimilarityScores, scores_j: SimilarityScores, text_i: str, text_j: str,
                     gamma: float = 20.0, metric: Callable[[str, str], float] = context_similarity,
                     on: str = "scores") -> torch.Tensor:
    """Pull score vectors of textually similar contexts together, push others apart."""
    vi, vj = (scores_i.scores, scores_j.scores) if on == "scores" else (scores_i.raw, scores_j.raw)
    if vi.shape != vj.shape:
        raise ContractError("score vectors must have equal length")
    return contrastive_value(vi, vj, metric(text_i, text_j) > gamma)


def pairwise_contrastive(scores: SimilarityScores, texts: Sequence[str], gamma: float = 20.0,
                         metric: Callable[[str, str], float] = context_similarity,
                         on: str = "scores") -> tuple[torch.Tensor, int]:
    """Sum over all ordered pairs ``i != j`` in the batch, and the pair count."""
    B = len(texts)
    vecs = scores.scores if on == "scores" else scores.raw
    if B < 2:
        return vecs.sum() * 0, 0
    similar = torch.zeros((B, B), dtype=torch.bool)
    for i in range(B):
        for j in range(B):
            if i != j:
                similar[i, j] = metric(texts[i], texts[j]) > gamma
    cos = nx.cosine_similarity(vecs.unsqueeze(1), vecs.unsqueeze(0))
    values = torch.where(similar, 1 - cos, torch.clamp(cos, min=0))
    off_diag = ~torch.eye(B, dtype=torch.bool)
    return values[off_diag].sum(), B * (B - 1)


def total_loss(per_prompt: torch.Tensor, contrastive: torch.Tensor, selection: torch.Tensor,
               fusion: torch.Tensor, config: ObjectiveConfig) -> torch.Tensor:
    return (per_prompt.sum() + config.lambda1 * contrastive + config.lambda2 * selection
            + config.lambda3 * fusion)


@contextmanager
def _component(name: str):
    try:
        yield
    except NumericError as exc:
        if getattr(exc, "component", None) is None:
            exc.component = name
        raise


def compute_batch_losses(backbone: Backbone, bank: SoftPromptBank, retriever: Retriever,
                         examples: Sequence[EncodedExample], config: ObjectiveConfig,
                         generator: torch.Generator | None = None,
                         metric: Callable[[str, str], float] = context_similarity) -> LossBundle:
    """All loss components for one batch, tape-connected to prompts and retriever.

    A ``NumericError`` raised inside a component carries that component's name
    in its ``component`` attribute.
    """
    with _component("per_prompt"):
        logp, targets, mask = prompt_conditioned_log_probs(backbone, bank, examples)
        per_example = batch_nll(logp, targets, mask)  # [K, B]
    with _component("fusion"):
        fusion_per = fused_nll(logp, targets, mask)  # [B]
    with _component("selection"):
        with torch.no_grad():
            embeddings = [backbone.embed(ex.context_ids) for ex in examples]
        scores = retriever.score_batch(embeddings, bank)
        guidance_in = per_example.transpose(0, 1)  # [B, K]
        sel_per = selection_loss(scores, guidance_in, config.tau_g, config.stop_guidance_grad,
                                 config.kl_direction, config.guidance_noise, generator)  # [B]
    with _component("contrastive"):
        con_sum, n_pairs = pairwise_contrastive(scores, [ex.raw_context_text for ex in examples],
                                                config.gamma, metric, config.contrastive_on)

    if config.loss_reduction == "mean":
        per_prompt = per_example.mean(dim=1)
        selection, fusion = sel_per.mean(), fusion_per.mean()
        contrastive = con_sum / n_pairs if n_pairs else con_sum
    elif config.loss_reduction == "sum":
        per_prompt = per_example.sum(dim=1)
        selection, fusion, contrastive = sel_per.sum(), fusion_per.sum(), con_sum
    else:
        raise ContractError(f"loss_reduction must be 'mean' or 'sum', got {config.loss_reduction!r}")
    total = total_loss(per_prompt, contrastive, selection, fusion, config)
    return LossBundle(per_prompt, selection, contrastive, fusion, total,
                      scores=SimilarityScores(scores.raw.detach(), scores.scores.detach(),
                                              scores.distribution.detach()),
                      per_example=per_example.detach(), n_pairs=n_pairs)
