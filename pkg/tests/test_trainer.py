import json
import math

import pytest
import torch

from conftest import make_toy_backbone, make_toy_examples
from spt.config import build_config
from spt.errors import CheckpointError, ConfigError, ContractError, TrainingError
from spt.trainer import COMPONENTS, SPTTrainer, trainable_parameter_count

TOY = ["data.max_context_len=8", "data.max_target_len=4", "train.batch_size=2", "prompt.K=2", "prompt.L=1"]


def toy_trainer(*overrides, backbone=None):
    cfg = build_config({}, TOY + list(overrides))
    return SPTTrainer(backbone or make_toy_backbone(), cfg)


def params_of(trainer):
    return [p.detach().clone() for p in trainer.trainable_parameters()]


def test_requires_frozen_backbone_and_room_for_inputs():
    from spt.backbone import Backbone, BackboneConfig
    with pytest.raises(ContractError):
        SPTTrainer(Backbone(BackboneConfig(16, 8, 1, 2, 16, 64)), build_config({}, TOY))
    with pytest.raises(ConfigError) as info:
        SPTTrainer(make_toy_backbone(max_positions=10), build_config({}, TOY))
    assert info.value.path == "backbone.max_positions"


def test_trainable_count_closed_form_and_backbone_excluded():
    tr = toy_trainer("prompt.K=3", "prompt.L=2", "retriever.proj_dim=5")
    assert tr.num_trainable() == trainable_parameter_count(3, 2, 8, 5) == 3 * 2 * 8 + 2 * (8 * 5 + 5)
    backbone_ids = {id(p) for p in tr.backbone.parameters()}
    assert not backbone_ids & {id(p) for p in tr.trainable_parameters()}


def test_zero_lr_leaves_parameters_unchanged():
    tr = toy_trainer("train.lr=0")
    before = params_of(tr)
    tr.fit(make_toy_examples(n=6), epochs=2)
    assert all(torch.equal(a, b) for a, b in zip(before, params_of(tr)))


def test_backbone_hash_constant_across_epochs():
    tr = toy_trainer()
    start = tr.backbone.param_hash()
    hashes = []
    tr.fit(make_toy_examples(n=6), epochs=3, epoch_fn=lambda s: hashes.append(tr.backbone.param_hash()))
    assert hashes == [start] * 3


def test_same_seed_bitwise_identical_runs():
    def run():
        tr = toy_trainer("objective.guidance_noise=0.1")
        logs = []
        history = tr.fit(make_toy_examples(n=7), epochs=2, log_fn=logs.append)
        return json.dumps(logs), json.dumps([h.to_dict() for h in history]), params_of(tr)

    a, b = run(), run()
    assert a[0] == b[0] and a[1] == b[1]
    assert all(torch.equal(x, y) for x, y in zip(a[2], b[2]))


def test_epoch_stats_shape():
    tr = toy_trainer()
    logs = []
    stats = tr.train_epoch(make_toy_examples(n=5), log_fn=logs.append)
    assert stats.steps == 3 and len(logs) == 3 and sum(stats.usage) == 5
    assert set(stats.mean_losses) == set(COMPONENTS)
    assert len(stats.mean_losses["per_prompt"]) == 2
    assert 0 <= stats.selection_entropy <= math.log(2) + 1e-12
    with pytest.raises(ContractError):
        tr.train_epoch([])


def test_single_prompt_always_selected():
    tr = toy_trainer("prompt.K=1")
    examples = make_toy_examples(n=6)
    tr.fit(examples, epochs=1)
    assert tr.select_prompts(examples) == [0] * 6
    assert tr.select_prompts(examples, score_noise=1.0, generator=torch.Generator().manual_seed(0)) == [0] * 6
    assert tr.generate(examples[0], max_new_tokens=3)[1] == 0


def test_zero_score_noise_matches_noiseless():
    tr = toy_trainer("prompt.K=3")
    examples = make_toy_examples(n=8)
    tr.fit(examples, epochs=1)
    assert tr.select_prompts(examples, 0.0, torch.Generator().manual_seed(1)) == tr.select_prompts(examples)


def test_generate_records_usage_and_is_deterministic():
    tr = toy_trainer()
    ex = make_toy_examples(n=1)[0]
    first = tr.generate(ex, max_new_tokens=4)
    assert first == tr.generate(ex, max_new_tokens=4)
    assert sum(tr.bank.usage_report()["counts"]) == 2


def test_nonfinite_loss_names_component():
    tr = toy_trainer()
    with torch.no_grad():
        tr.bank.weight[0, 0, 0] = float("nan")
    with pytest.raises(TrainingError) as info:
        tr.train_epoch(make_toy_examples(n=4))
    assert info.value.component in COMPONENTS and info.value.step == 0 and info.value.batch == 0
    assert info.value.component in str(info.value)


def test_checkpoint_round_trip_then_step_is_bitwise(tmp_path):
    examples = make_toy_examples(n=6)
    bb = make_toy_backbone()
    ref = toy_trainer(backbone=bb)
    ref.fit(examples, epochs=1)
    path = tmp_path / "a.sptr"
    ref.save(path)
    restored = SPTTrainer.from_checkpoint(path, bb)
    assert all(torch.equal(a, b) for a, b in zip(params_of(ref), params_of(restored)))
    sa, sb = ref.train_epoch(examples), restored.train_epoch(examples)
    assert json.dumps(sa.to_dict()) == json.dumps(sb.to_dict())
    assert all(torch.equal(a, b) for a, b in zip(params_of(ref), params_of(restored)))


def test_mid_epoch_resume_is_bitwise(tmp_path):
    examples = make_toy_examples(n=9)
    bb = make_toy_backbone()
    straight = toy_trainer("objective.guidance_noise=0.05", backbone=bb)
    logs_a = []
    stats_a = straight.fit(examples, epochs=2, log_fn=logs_a.append)

    first = toy_trainer("objective.guidance_noise=0.05", backbone=bb)
    logs_b = []
    stats_b = [first.train_epoch(examples, logs_b.append)]
    assert first.train_epoch(examples, logs_b.append, max_batches=2) is None
    path = tmp_path / "mid.sptr"
    first.save(path)
    resumed = SPTTrainer.from_checkpoint(path, bb)
    stats_b.append(resumed.train_epoch(examples, logs_b.append))
    assert json.dumps(logs_a) == json.dumps(logs_b)
    assert json.dumps([s.to_dict() for s in stats_a]) == json.dumps([s.to_dict() for s in stats_b])
    assert all(torch.equal(a, b) for a, b in zip(params_of(straight), params_of(resumed)))


def test_checkpoint_rejections(tmp_path):
    bb = make_toy_backbone()
    path = tmp_path / "k4.sptr"
    digest = toy_trainer("prompt.K=4", backbone=bb).save(path)
    assert len(digest) == 64
    with pytest.raises(CheckpointError, match="K=4"):
        toy_trainer("prompt.K=2", backbone=bb).load(path)
    with pytest.raises(CheckpointError, match="backbone hash"):
        toy_trainer("prompt.K=4", backbone=make_toy_backbone(seed=1)).load(path)
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"XXXX"
    bad = tmp_path / "bad.sptr"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        toy_trainer("prompt.K=4", backbone=bb).load(bad)
    truncated = tmp_path / "short.sptr"
    truncated.write_bytes(bytes(raw[: len(raw) // 2]).replace(b"XXXX", b"SPTR", 1))
    with pytest.raises(CheckpointError):
        toy_trainer("prompt.K=4", backbone=bb).load(truncated)


def test_total_loss_falls_on_synthetic_corpus(synthetic):
    cfg = build_config({}, ["prompt.K=2"])
    tr = SPTTrainer(synthetic.backbone, cfg)
    history = tr.fit(synthetic.data["train"], epochs=5)
    assert history[4].mean_losses["total"] < history[0].mean_losses["total"]
