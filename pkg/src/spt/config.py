"""Run configuration: schema, file loading and dotted-path overrides."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    pretrain_path: Optional[str] = None
    max_context_len: int = Field(256, ge=8)
    max_target_len: int = Field(32, ge=2)
    min_count: int = Field(1, ge=1)


class BackboneSection(_Section):
    path: Optional[str] = None
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(256, ge=1)
    max_positions: int = Field(512, ge=2)
    dropout: float = Field(0.0, ge=0, lt=1)
    seed: int = 0


class PretrainConfig(_Section):
    steps: int = Field(1000, ge=0)
    lr: float = Field(3e-3, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    loss_on: Literal["target", "all"] = "target"


class PromptConfig(_Section):
    K: int = Field(4, ge=1)
    L: int = Field(1, ge=1)


class RetrieverConfig(_Section):
    proj_dim: Optional[int] = Field(None, ge=1)
    lr: Optional[float] = Field(None, ge=0)


class ObjectiveConfig(_Section):
    tau_g: float = Field(1.0, gt=0)
    gamma: float = 20.0
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    lambda3: float = Field(1.0, ge=0)
    loss_reduction: Literal["mean", "sum"] = "mean"
    score_normalization: Literal["sum", "softmax"] = "sum"
    kl_direction: Literal["scores_first", "guidance_first"] = "scores_first"
    stop_guidance_grad: bool = True
    contrastive_on: Literal["scores", "raw"] = "scores"
    guidance_noise: float = Field(0.0, ge=0)


class TrainConfig(_Section):
    lr: float = Field(0.01, ge=0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(10, ge=0)
    seed: int = 0
    grad_clip: Optional[float] = Field(None, gt=0)
    threads: int = Field(1, ge=1)
    dtype: Literal["float64", "float32"] = "float64"
    checkpoint_every: int = Field(0, ge=0)


class DecodeConfig(_Section):
    strategy: Literal["greedy", "sample"] = "greedy"
    max_new_tokens: int = Field(24, ge=1)
    temperature: float = Field(1.0, gt=0)
    top_k: int = Field(0, ge=0)
    score_noise: float = Field(0.0, ge=0)
    seed: int = 0


class EvalConfig(_Section):
    checkpoint: Optional[str] = None
    split: Literal["valid", "train"] = "valid"
    generate: bool = True
    bleu_level: Literal["sentence", "corpus"] = "sentence"
    f1_scale: float = Field(1.0, gt=0)


class SynthConfig(_Section):
    regimes: int = Field(2, ge=1)
    dialogues_per_regime: int = Field(50, ge=1)
    valid_per_regime: int = Field(20, ge=0)
    pretrain_per_regime: int = Field(1000, ge=0)
    seed: int = 7


class AblateConfig(_Section):
    variants: list[str] = ["full", "wo_cl", "wo_fusion", "wo_sl"]
    k_sweep: list[int] = [1, 2, 4, 8]
    workers: int = Field(1, ge=1)


class RunConfig(_Section):
    data: DataConfig = DataConfig()
    backbone: BackboneSection = BackboneSection()
    pretrain: PretrainConfig = PretrainConfig()
    prompt: PromptConfig = PromptConfig()
    retriever: RetrieverConfig = RetrieverConfig()
    objective: ObjectiveConfig = ObjectiveConfig()
    train: TrainConfig = TrainConfig()
    decode: DecodeConfig = DecodeConfig()
    eval: EvalConfig = EvalConfig()
    synth: SynthConfig = SynthConfig()
    ablate: AblateConfig = AblateConfig()

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` strings (values parsed as JSON, else string)."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", item)
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot descend into a non-section value", key)
        node[parts[-1]] = _parse_value(value)
    return out


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}", str(path)) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping", str(path))
    return data


def build_config(raw: dict | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    merged = apply_overrides(raw or {}, overrides)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], ".".join(str(x) for x in err["loc"])) from exc


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Precedence: overrides > file > defaults."""
    return build_config(read_config_file(path) if path else {}, overrides)
