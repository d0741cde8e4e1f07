"""Joint training of the prompt bank and retriever, checkpointing and inference."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numeric as nx
from .backbone import Backbone, batch_nll
from .config import RunConfig
from .container import read_container, write_container
from .errors import CheckpointError, ConfigError, ContractError, NumericError, TrainingError
from .objectives import LossBundle, compute_batch_losses
from .prompts import SoftPromptBank
from .retriever import Retriever, SimilarityScores, select
from .text import DialogueContext, EncodedExample, encode_example

log = logging.getLogger(__name__)

MAGIC = b"SPTR"
VERSION = 1
COMPONENTS = ("per_prompt", "selection", "contrastive", "fusion", "total")


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_losses: dict
    selection_entropy: float
    usage: list[int]
    nonfinite: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "steps": self.steps, "mean_losses": self.mean_losses,
                "selection_entropy": self.selection_entropy, "usage": self.usage}


def trainable_parameter_count(K: int, L: int, D: int, proj_dim: int | None = None) -> int:
    """Closed form: K*L*D prompt entries plus two D x D' projections with biases."""
    proj = proj_dim or D
    return K * L * D + 2 * (D * proj + proj)


class SPTTrainer:
    def __init__(self, backbone: Backbone, config: RunConfig):
        if not backbone.frozen:
            raise ContractError("backbone must be frozen before prompt training")
        self.backbone = backbone
        self.config = config
        tc, pc = config.train, config.prompt
        D = backbone.d_model
        needed = pc.L + config.data.max_context_len + config.data.max_target_len
        if backbone.config.max_positions < needed:
            raise ConfigError(f"backbone max_positions={backbone.config.max_positions} < {needed}",
                              "backbone.max_positions")
        self.bank = SoftPromptBank(pc.K, pc.L, D, seed=tc.seed, backbone_dim=D)
        self.retriever = Retriever(D, config.retriever.proj_dim, seed=tc.seed + 1,
                                   normalization=config.objective.score_normalization)
        groups = [{"params": [self.bank.weight], "lr": tc.lr},
                  {"params": list(self.retriever.parameters()),
                   "lr": config.retriever.lr if config.retriever.lr is not None else tc.lr}]
        self.optimizer = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)
        self.noise_gen = torch.Generator().manual_seed(tc.seed + 2)
        self.epoch = 0
        self.cursor = 0
        self.step = 0

    # --- parameter bookkeeping -------------------------------------------

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [p for g in self.optimizer.param_groups for p in g["params"]]

    def num_trainable(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    # --- training ----------------------------------------------------------

    def epoch_order(self, n: int, epoch: int) -> list[int]:
        gen = torch.Generator().manual_seed(self.config.train.seed * 1_000_003 + epoch)
        return torch.randperm(n, generator=gen).tolist()

    def losses(self, batch: Sequence[EncodedExample]) -> LossBundle:
        return compute_batch_losses(self.backbone, self.bank, self.retriever, batch, self.config.objective,
                                    self.noise_gen)

    def train_step(self, batch: Sequence[EncodedExample], batch_index: int = 0) -> LossBundle:
        try:
            bundle = self.losses(batch)
        except NumericError as exc:
            name = getattr(exc, "component", None)
            raise TrainingError(f"non-finite {name} loss at step {self.step}, batch {batch_index}: {exc}",
                                step=self.step, batch=batch_index, component=name) from exc
        for name in COMPONENTS:
            value = getattr(bundle, name)
            if not bool(torch.isfinite(value).all()):
                raise TrainingError(f"non-finite {name} loss at step {self.step}, batch {batch_index}",
                                    step=self.step, batch=batch_index, component=name)
        self.optimizer.zero_grad(set_to_none=True)
        bundle.total.backward()
        if self.config.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.trainable_parameters(), self.config.train.grad_clip)
        self.optimizer.step()
        self.step += 1
        return bundle

    def train_epoch(self, dataset: Sequence[EncodedExample], log_fn: Callable[[dict], None] | None = None,
                    max_batches: int | None = None) -> EpochStats | None:
        """Run (the rest of) the current epoch.

        With ``max_batches`` the loop may stop mid-epoch; the cursor is kept so
        a later call (possibly after a checkpoint round trip) resumes exactly.
        Returns stats only when the epoch completes.
        """
        if not dataset:
            raise ContractError("empty training set")
        order = self.epoch_order(len(dataset), self.epoch)
        bs = self.config.train.batch_size
        n_batches = math.ceil(len(order) / bs)
        if self.cursor == 0:
            self._acc = {k: 0.0 for k in COMPONENTS}
            self._acc_pp = torch.zeros(self.bank.K, dtype=torch.float64)
            self._usage = [0] * self.bank.K
            self._batches = 0
        done = 0
        while self.cursor < n_batches:
            if max_batches is not None and done >= max_batches:
                return None
            b = self.cursor
            batch = [dataset[i] for i in order[b * bs:(b + 1) * bs]]
            bundle = self.train_step(batch, b)
            rec = bundle.record()
            for k in ("selection", "contrastive", "fusion", "total"):
                self._acc[k] += rec[k]
            self._acc_pp += bundle.per_prompt.detach().to(torch.float64)
            for i in select(bundle.scores):
                self._usage[i] += 1
            self._batches += 1
            if log_fn is not None:
                log_fn({"step": self.step, "epoch": self.epoch, "batch": b, **rec})
            self.cursor += 1
            done += 1
        means = {k: self._acc[k] / self._batches for k in ("selection", "contrastive", "fusion", "total")}
        means["per_prompt"] = (self._acc_pp / self._batches).tolist()
        stats = EpochStats(self.epoch, self._batches, means, nx.entropy(self._usage), list(self._usage))
        self.epoch += 1
        self.cursor = 0
        return stats

    def fit(self, dataset: Sequence[EncodedExample], epochs: int | None = None,
            log_fn: Callable[[dict], None] | None = None,
            epoch_fn: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
        history = []
        for _ in range(self.config.train.epochs if epochs is None else epochs):
            stats = self.train_epoch(dataset, log_fn)
            history.append(stats)
            if epoch_fn is not None:
                epoch_fn(stats)
        return history

    # --- inference ---------------------------------------------------------

    @torch.no_grad()
    def score(self, examples: Sequence[EncodedExample]) -> SimilarityScores:
        embeddings = [self.backbone.embed(ex.context_ids) for ex in examples]
        return self.retriever.score_batch(embeddings, self.bank)

    @torch.no_grad()
    def select_prompts(self, examples: Sequence[EncodedExample], score_noise: float = 0.0,
                       generator: torch.Generator | None = None) -> list[int]:
        scores = self.score(examples).scores
        if score_noise:
            scores = scores + score_noise * torch.randn(scores.shape, generator=generator, dtype=scores.dtype)
        return select(scores)

    @torch.no_grad()
    def perplexity(self, dataset: Sequence[EncodedExample], score_noise: float = 0.0,
                   generator: torch.Generator | None = None, batch_size: int = 32) -> dict:
        """Token-level perplexity of targets under the hard-selected prompt."""
        total_nll, total_tokens, chosen = 0.0, 0, []
        for start in range(0, len(dataset), batch_size):
            batch = list(dataset[start:start + batch_size])
            idx = self.select_prompts(batch, score_noise, generator)
            logp, targets, mask = self.backbone.target_log_probs(self.bank.weight, batch)
            nll = batch_nll(logp, targets, mask)  # [K, B]
            for b, i in enumerate(idx):
                n_tok = int(mask[b].sum())
                total_nll += float(nll[i, b]) * n_tok
                total_tokens += n_tok
            chosen.extend(idx)
        usage = [chosen.count(i) for i in range(self.bank.K)]
        mean = total_nll / total_tokens
        return {"nll": mean, "ppl": math.exp(mean), "selections": chosen, "usage": usage,
                "selection_entropy": nx.entropy(usage)}

    def encode(self, context: DialogueContext | EncodedExample) -> EncodedExample:
        if isinstance(context, EncodedExample):
            return context
        if self.backbone.vocab is None:
            raise ContractError("backbone carries no vocabulary; pass an encoded example")
        return encode_example(context, self.backbone.vocab, self.config.data.max_context_len,
                              self.config.data.max_target_len)

    @torch.no_grad()
    def generate(self, context: DialogueContext | EncodedExample, strategy: str | None = None,
                 max_new_tokens: int | None = None, temperature: float | None = None, top_k: int | None = None,
                 score_noise: float | None = None, generator: torch.Generator | None = None) -> tuple[list[int], int]:
        """Pick a prompt by argmax score, then decode with it prepended."""
        dc = self.config.decode
        ex = self.encode(context)
        noise = dc.score_noise if score_noise is None else score_noise
        i_star = self.select_prompts([ex], noise, generator)[0]
        self.bank.record_selection(i_star, ex.turn_index)
        ids = self.backbone.decode(self.bank.get(i_star).detach(), ex.context_ids,
                                   strategy or dc.strategy, max_new_tokens or dc.max_new_tokens,
                                   temperature or dc.temperature, dc.top_k if top_k is None else top_k, generator)
        return ids, i_star

    def generate_text(self, context, **kwargs) -> tuple[str, int]:
        ids, i_star = self.generate(context, **kwargs)
        return self.backbone.vocab.decode(ids, skip_special=True), i_star

    # --- checkpoints ---------------------------------------------------------

    def _arrays(self) -> dict:
        arrays = {"bank.weight": self.bank.weight.detach()}
        for name, p in self.retriever.named_parameters():
            arrays[f"retriever.{name}"] = p.detach()
        for k, p in enumerate(self.trainable_parameters()):
            st = self.optimizer.state.get(p)
            if st:
                arrays[f"adam.{k}.exp_avg"] = st["exp_avg"]
                arrays[f"adam.{k}.exp_avg_sq"] = st["exp_avg_sq"]
                arrays[f"adam.{k}.step"] = np.array([float(st["step"])])
        arrays["rng.noise"] = self.noise_gen.get_state()
        arrays.update(self.bank.counter_arrays())
        return arrays

    def save(self, path: str | Path) -> str:
        header = {"config": self.config.to_dict(), "step": self.step, "epoch": self.epoch, "cursor": self.cursor,
                  "backbone_hash": self.backbone.param_hash(), "K": self.bank.K, "L": self.bank.L,
                  "D": self.bank.D, "proj_dim": self.retriever.proj_dim}
        if self.cursor:
            header["partial_epoch"] = {"acc": self._acc, "per_prompt": self._acc_pp.tolist(),
                                       "usage": self._usage, "batches": self._batches}
        return write_container(path, MAGIC, VERSION, header, self._arrays())

    def load(self, path: str | Path) -> "SPTTrainer":
        _, header, arrays = read_container(path, MAGIC)
        if header.get("backbone_hash") != self.backbone.param_hash():
            raise CheckpointError(f"{path}: backbone hash mismatch")
        for key, want in (("K", self.bank.K), ("L", self.bank.L), ("D", self.bank.D),
                          ("proj_dim", self.retriever.proj_dim)):
            if header.get(key) != want:
                raise CheckpointError(f"{path}: checkpoint {key}={header.get(key)} but config has {want}")
        dtype = torch.get_default_dtype()
        with torch.no_grad():
            self.bank.weight.copy_(torch.from_numpy(arrays["bank.weight"]).to(dtype))
            for name, p in self.retriever.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"retriever.{name}"]).to(dtype))
        self.optimizer.state.clear()
        for k, p in enumerate(self.trainable_parameters()):
            if f"adam.{k}.step" in arrays:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[f"adam.{k}.step"][0]), dtype=torch.float32),
                    "exp_avg": torch.from_numpy(arrays[f"adam.{k}.exp_avg"]).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam.{k}.exp_avg_sq"]).to(p.dtype),
                }
        self.noise_gen.set_state(torch.from_numpy(arrays["rng.noise"]))
        self.bank.load_counter_arrays(arrays)
        self.step, self.epoch, self.cursor = header["step"], header["epoch"], header["cursor"]
        partial = header.get("partial_epoch")
        if partial:
            self._acc = dict(partial["acc"])
            self._acc_pp = torch.tensor(partial["per_prompt"], dtype=torch.float64)
            self._usage = list(partial["usage"])
            self._batches = partial["batches"]
        return self

    @classmethod
    def from_checkpoint(cls, path: str | Path, backbone: Backbone, config: RunConfig | None = None) -> "SPTTrainer":
        if config is None:
            _, header, _ = read_container(path, MAGIC)
            config = RunConfig.model_validate(header["config"])
        return cls(backbone, config).load(path)
