import random
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import spt  # noqa: E402,F401  (sets the float64 default)
from spt.backbone import Backbone, BackboneConfig  # noqa: E402
from spt.text import EOS, EncodedExample  # noqa: E402


def make_toy_backbone(V=16, D=8, n_layers=1, n_heads=2, d_ff=16, max_positions=64, seed=0, scale=None):
    """Randomly initialized frozen backbone; ``scale`` widens the weights so outputs are far from uniform."""
    bb = Backbone(BackboneConfig(V, D, n_layers, n_heads, d_ff, max_positions), seed=seed)
    if scale is not None:
        gen = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for name, p in bb.named_parameters():
                if p.dim() == 2 and not name.startswith("tok_emb"):
                    p.copy_(torch.randn(p.shape, generator=gen) * scale)
    return bb.freeze()


def make_toy_examples(V=16, n=3, seed=0, texts=None, ctx_len=(3, 6), tgt_len=(2, 4)):
    rng = random.Random(seed)
    out = []
    for k in range(n):
        ctx = [rng.randrange(8, V) for _ in range(rng.randint(*ctx_len))]
        tgt = [rng.randrange(8, V) for _ in range(rng.randint(*tgt_len) - 1)] + [EOS]
        text = texts[k] if texts else " ".join(f"w{t}" for t in ctx)
        out.append(EncodedExample(ctx, tgt, text, turn_index=1 + k % 3, regime=k % 2))
    return out


@pytest.fixture
def toy_backbone():
    return make_toy_backbone()


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """Default synthetic corpus (seed 7) and a backbone pretrained on it, built once per session."""
    from spt import pipeline
    from spt.config import build_config

    cfg = build_config({}, [])
    start = time.perf_counter()
    records = pipeline.synth_records(cfg)
    backbone = pipeline.pretrain_backbone(cfg, records)
    path = tmp_path_factory.mktemp("backbone") / "backbone.sptb"
    backbone.save(path)
    data = pipeline.encode_records(records, backbone.vocab, cfg)
    return SimpleNamespace(cfg=cfg, records=records, backbone=backbone, data=data, path=path,
                           seconds=time.perf_counter() - start)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
