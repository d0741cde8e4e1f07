"""Miniature decoder-only causal transformer used as the frozen language model."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from . import numeric as nx
from .container import hash_arrays, read_container, write_container
from .errors import CheckpointError, ContractError, TrainingError
from .text import EOS, PAD, EncodedExample, Vocabulary

log = logging.getLogger(__name__)

MAGIC = b"SPTB"
VERSION = 1


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        hd = D // self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~mask, float("-inf"))
        att = self.drop(torch.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model), nn.Dropout(cfg.dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class Backbone(nn.Module):
    """Pre-LN GPT with learned absolute positions and an untied output head.

    Soft prompts are fed as rows of input embeddings and receive positional
    embeddings like ordinary tokens.
    """

    def __init__(self, cfg: BackboneConfig, vocab: Vocabulary | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg
        self.vocab = vocab
        gen = torch.Generator().manual_seed(seed)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.frozen = False
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "ln" in name:
                    p.fill_(1.0)
                elif name.startswith("tok_emb"):
                    # same scale as the N(0,1) soft prompts that share its input slot
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype))
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.02)

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def param_hash(self) -> str:
        return hash_arrays({k: v for k, v in self.state_dict().items()})

    # --- forward passes -------------------------------------------------

    def embed(self, ids: Sequence[int] | torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        return nx.embedding_lookup(self.tok_emb.weight, ids)

    def forward_embeds(self, x: torch.Tensor) -> torch.Tensor:
        """Logits for a batch of input-embedding sequences ``[B, T, D]``."""
        T = x.shape[1]
        if T > self.config.max_positions:
            raise ContractError(f"sequence length {T} exceeds max_positions={self.config.max_positions}")
        h = x + self.pos_emb.weight[:T]
        for block in self.blocks:
            h = block(h)
        return self.head(self.ln_f(h))

    def forward_with_prompt(self, prompt: torch.Tensor | None, context_ids: Sequence[int],
                            target_ids: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Log-probabilities over ``[prompt; context; target]`` and the target-span NLL."""
        L = 0 if prompt is None else prompt.shape[0]
        M, T = len(context_ids), len(target_ids)
        if L + M + T > self.config.max_positions:
            raise ContractError(f"length {L}+{M}+{T} exceeds max_positions={self.config.max_positions}")
        tokens = self.embed(list(context_ids) + list(target_ids))
        x = tokens if prompt is None else torch.cat([prompt, tokens], dim=0)
        log_probs = nx.log_softmax(self.forward_embeds(x.unsqueeze(0))[0])
        # row p predicts token p+1, so the target span is read one row early
        labels = torch.full((L + M + T,), PAD, dtype=torch.long)
        if T:
            labels[L + M - 1: L + M + T - 1] = torch.as_tensor(list(target_ids), dtype=torch.long)
        loss = nx.nll(log_probs, labels, ignore_index=PAD) if T else torch.zeros(())
        return log_probs, loss

    def target_log_probs(self, prompts: torch.Tensor | None, examples: Sequence[EncodedExample]):
        """Batched target-position log-probabilities.

        ``prompts`` is ``[P, L, D]`` (or None for no prompt). Every prompt is
        paired with every example; returns ``(logp [P, B, T, V], targets [B, T],
        mask [B, T])`` where ``T`` is the longest target span.
        """
        P = 1 if prompts is None else prompts.shape[0]
        L = 0 if prompts is None else prompts.shape[1]
        B = len(examples)
        seqs = [ex.context_ids + ex.target_ids for ex in examples]
        S = max(map(len, seqs))
        Tmax = max(len(ex.target_ids) for ex in examples)
        if L + S > self.config.max_positions:
            raise ContractError(f"length {L + S} exceeds max_positions={self.config.max_positions}")
        ids = torch.full((B, S), PAD, dtype=torch.long)
        targets = torch.full((B, Tmax), PAD, dtype=torch.long)
        rows = torch.zeros((B, Tmax), dtype=torch.long)
        for b, (ex, seq) in enumerate(zip(examples, seqs)):
            ids[b, : len(seq)] = torch.as_tensor(seq)
            T = len(ex.target_ids)
            targets[b, :T] = torch.as_tensor(ex.target_ids)
            rows[b, :T] = torch.arange(T) + L + len(ex.context_ids) - 1
        mask = targets != PAD
        tok = self.embed(ids.view(-1)).view(B, S, -1)
        if prompts is None:
            x = tok
        else:
            x = torch.cat([prompts.unsqueeze(1).expand(P, B, L, prompts.shape[2]),
                           tok.unsqueeze(0).expand(P, B, S, tok.shape[2])], dim=2).reshape(P * B, L + S, -1)
        logp = nx.log_softmax(self.forward_embeds(x)).view(P, B, L + S, -1)
        idx = rows.view(1, B, Tmax, 1).expand(P, B, Tmax, logp.shape[-1])
        return logp.gather(2, idx), targets, mask

    @torch.no_grad()
    def decode(self, prompt: torch.Tensor | None, context_ids: Sequence[int], strategy: str = "greedy",
               max_new_tokens: int = 32, temperature: float = 1.0, top_k: int = 0,
               generator: torch.Generator | None = None) -> list[int]:
        if strategy not in ("greedy", "sample"):
            raise ContractError(f"unknown decode strategy {strategy!r}")
        L = 0 if prompt is None else prompt.shape[0]
        out: list[int] = []
        for _ in range(max_new_tokens):
            if L + len(context_ids) + len(out) >= self.config.max_positions:
                break
            tokens = self.embed(list(context_ids) + out)
            x = tokens if prompt is None else torch.cat([prompt, tokens], dim=0)
            logits = self.forward_embeds(x.unsqueeze(0))[0, -1]
            if strategy == "greedy":
                nxt = int(torch.argmax(logits))
            else:
                if top_k and top_k < logits.shape[0]:
                    kth = torch.topk(logits, top_k).values[-1]
                    logits = logits.masked_fill(logits < kth, float("-inf"))
                probs = nx.softmax(logits.masked_fill(torch.isinf(logits), -1e300), temperature)
                nxt = int(torch.multinomial(probs, 1, generator=generator))
            if nxt == EOS:
                break
            out.append(nxt)
        return out

    # --- persistence ----------------------------------------------------

    def save(self, path: str | Path) -> str:
        header = {"config": asdict(self.config), "frozen": self.frozen,
                  "vocab": self.vocab.to_list() if self.vocab is not None else None}
        return write_container(path, MAGIC, VERSION, header, self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Backbone":
        _, header, arrays = read_container(path, MAGIC)
        try:
            cfg = BackboneConfig(**header["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad backbone config block ({exc})") from exc
        vocab = Vocabulary.from_list(header["vocab"]) if header.get("vocab") is not None else None
        model = cls(cfg, vocab)
        state = {k: torch.from_numpy(v).to(torch.get_default_dtype()) for k, v in arrays.items()}
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameter mismatch ({exc})") from exc
        if header.get("frozen"):
            model.freeze()
        return model


def batch_nll(logp: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-sequence mean NLL from ``target_log_probs`` output: ``[P, B]``."""
    picked = logp.gather(-1, targets.unsqueeze(0).unsqueeze(-1).expand(logp.shape[0], -1, -1, 1)).squeeze(-1)
    picked = picked * mask
    return -picked.sum(-1) / mask.sum(-1)


def pretrain(backbone: Backbone, examples: Sequence[EncodedExample], steps: int, lr: float,
             batch_size: int = 32, seed: int = 0, loss_on: str = "target", log_every: int = 100,
             callback=None) -> Backbone:
    """Next-token training without soft prompts, then freeze.

    A record's ``control_id`` (if any) is placed in front of its context, in the
    slot soft prompts occupy later.
    """
    if not examples:
        raise ContractError("pretraining corpus is empty")
    if loss_on not in ("target", "all"):
        raise ContractError(f"loss_on must be 'target' or 'all', got {loss_on!r}")
    gen = torch.Generator().manual_seed(seed)
    backbone.train()
    opt = torch.optim.Adam(backbone.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    prepared = []
    for ex in examples:
        prefix = [ex.control_id] if ex.control_id is not None else []
        seq = prefix + ex.context_ids + ex.target_ids
        start = len(seq) - len(ex.target_ids) if loss_on == "target" else 1
        prepared.append((seq, start))
    for step in range(steps):
        idx = torch.randint(len(prepared), (batch_size,), generator=gen).tolist()
        S = max(len(prepared[i][0]) for i in idx)
        ids = torch.full((len(idx), S), PAD, dtype=torch.long)
        labels = torch.full((len(idx), S), PAD, dtype=torch.long)
        for b, i in enumerate(idx):
            seq, start = prepared[i]
            ids[b, : len(seq)] = torch.as_tensor(seq)
            labels[b, start - 1: len(seq) - 1] = torch.as_tensor(seq[start:])
        logits = backbone.forward_embeds(backbone.tok_emb(ids))
        logp = nx.log_softmax(logits)
        mask = labels != PAD
        loss = -(logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1) * mask).sum() / mask.sum()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"pretraining diverged at step {step}", step=step, component="pretrain")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if callback is not None:
            callback(step, value)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("pretrain step %d loss %.4f", step, value)
    return backbone.freeze()
