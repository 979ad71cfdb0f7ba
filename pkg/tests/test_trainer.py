import math

import pytest
import torch

from conftest import tiny_config
from hcpc.numerics import RngStreams
from hcpc.segmenter import ReinforceBaseline
from hcpc.trainer import (
    CHECKPOINT_VERSION,
    CheckpointError,
    Trainer,
    checkpoint_path,
    load_checkpoint,
    make_batch,
    model_from_checkpoint,
    read_metrics,
    total_loss,
)

VOLATILE = ("wall_clock",)


def stream(records):
    return [{k: v for k, v in r.items() if k not in VOLATILE} for r in records]


def one_batch_losses(cfg, data_dir, tmp_path, phase):
    tr = Trainer(cfg, data_dir, tmp_path)
    batch = make_batch(tr.train_set[:4], tr.dtype)
    return total_loss(batch, tr.model, phase, RngStreams(0), ReinforceBaseline())


def test_pretrain_uses_only_frame_loss(tiny_data, tmp_path):
    out = one_batch_losses(tiny_config(), tiny_data, tmp_path, "pretrain")
    assert set(out.parts) == {"L_L"}
    assert out.total.item() == pytest.approx(out.parts["L_L"].item())


def test_joint_policy_has_all_terms(tiny_data, tmp_path):
    out = one_batch_losses(tiny_config(), tiny_data, tmp_path, "joint")
    assert set(out.parts) == {"L_L", "L_H", "L_Q", "L_pi", "L_reg"}


def test_oracle_mode_has_no_policy_terms(tiny_data, tmp_path):
    out = one_batch_losses(tiny_config("segmenter.mode=oracle"), tiny_data, tmp_path, "joint")
    assert "L_pi" not in out.parts and "L_reg" not in out.parts


def test_no_quant_drops_codebook_loss(tiny_data, tmp_path):
    cfg = tiny_config().with_ablation("no_quant")
    out = one_batch_losses(cfg, tiny_data, tmp_path, "joint")
    assert "L_Q" not in out.parts


def test_unknown_phase(tiny_data, tmp_path):
    with pytest.raises(ValueError, match="unknown phase"):
        one_batch_losses(tiny_config(), tiny_data, tmp_path, "finetune")


def test_fit_writes_checkpoints_and_metrics(tiny_data, tmp_path):
    tr = Trainer(tiny_config(), tiny_data, tmp_path)
    records = tr.fit()
    assert [r["phase"] for r in records] == ["pretrain", "joint", "joint"]
    for e in (1, 2, 3):
        assert checkpoint_path(tmp_path, e).exists()
    assert not list(tmp_path.glob("*.tmp"))
    logged = read_metrics(tmp_path)
    assert stream(logged) == stream(records)
    assert all(math.isfinite(r["L_L"]) for r in logged)
    assert "mean_p" in logged[-1] and "L_H" in logged[-1]


def test_same_seed_same_metric_stream(tiny_data, tmp_path):
    a = Trainer(tiny_config(), tiny_data, tmp_path / "a").fit()
    b = Trainer(tiny_config(), tiny_data, tmp_path / "b").fit()
    assert stream(a) == stream(b)
    c = Trainer(tiny_config("train.seed=1"), tiny_data, tmp_path / "c").fit()
    assert stream(a) != stream(c)


def test_resume_matches_uninterrupted_run_in_float64(tiny_data, tmp_path):
    cfg = tiny_config("train.dtype=float64")
    full = Trainer(cfg, tiny_data, tmp_path / "full").fit()
    first = Trainer(cfg, tiny_data, tmp_path / "split", max_epochs=2)
    first.fit()
    second = Trainer(cfg, tiny_data, tmp_path / "split")
    assert second.resume()
    assert second.state.epoch == 2
    rest = second.fit()
    assert stream(rest) == stream(full[2:])


def test_resume_rejects_changed_config(tiny_data, tmp_path):
    Trainer(tiny_config(), tiny_data, tmp_path, max_epochs=1).fit()
    with pytest.raises(CheckpointError, match="resume mismatch"):
        Trainer(tiny_config("train.lr=1e-3"), tiny_data, tmp_path).resume()
    # the epoch budget may grow without invalidating the run
    assert Trainer(tiny_config("train.joint_epochs=5"), tiny_data, tmp_path).resume()


def test_warm_start_takes_learning_rate_from_new_config(tiny_data, tmp_path):
    Trainer(tiny_config(), tiny_data, tmp_path / "pre", max_epochs=1).fit()
    tr = Trainer(tiny_config("train.policy_lr_mult=10"), tiny_data, tmp_path / "joint")
    tr.warm_start(checkpoint_path(tmp_path / "pre", 1))
    assert tr.state.epoch == 1
    rates = [g["base_lr"] for g in tr.optimizer.param_groups]
    assert rates[1] == pytest.approx(10 * rates[0])


def test_warm_start_needs_pretrain_checkpoint(tiny_data, tmp_path):
    Trainer(tiny_config(), tiny_data, tmp_path / "run").fit()
    tr = Trainer(tiny_config(), tiny_data, tmp_path / "other")
    with pytest.raises(CheckpointError, match="pretrain phase"):
        tr.warm_start(checkpoint_path(tmp_path / "run", 3))


def test_checkpoint_round_trip(tiny_data, tmp_path):
    tr = Trainer(tiny_config(), tiny_data, tmp_path, max_epochs=1)
    tr.fit()
    model = model_from_checkpoint(load_checkpoint(checkpoint_path(tmp_path, 1)))
    for k, v in tr.model.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])


def test_missing_corrupt_and_version_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.pt")
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(bad)
    old = tmp_path / "old.pt"
    torch.save({"version": CHECKPOINT_VERSION + 1}, old)
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        load_checkpoint(old)


def test_non_finite_steps_are_rolled_back(tiny_data, tmp_path):
    tr = Trainer(tiny_config("train.max_rollbacks=1000"), tiny_data, tmp_path)
    before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    batch = make_batch(tr.train_set[:8], tr.dtype)
    batch.samples[0, 5] = float("nan")
    assert tr.train_step(batch, "pretrain", 3) is None
    assert tr.state.rollbacks == 1 and tr.state.step == 0
    for k, v in tr.model.state_dict().items():
        assert torch.equal(v, before[k])


def test_warm_start_reproduces_a_from_scratch_run(tiny_data, tmp_path):
    full = Trainer(tiny_config(), tiny_data, tmp_path / "full").fit()
    Trainer(tiny_config(), tiny_data, tmp_path / "pre", max_epochs=1).fit()
    tr = Trainer(tiny_config(), tiny_data, tmp_path / "joint")
    tr.warm_start(checkpoint_path(tmp_path / "pre", 1))
    assert stream(tr.fit()) == stream(full[1:])


def test_warm_start_accepts_different_unit_settings(tiny_data, tmp_path):
    Trainer(tiny_config(), tiny_data, tmp_path / "pre", max_epochs=1).fit()
    tr = Trainer(tiny_config("unit.codebook_size=4"), tiny_data, tmp_path / "joint")
    tr.warm_start(checkpoint_path(tmp_path / "pre", 1))
    assert len(tr.fit()) == 2


def test_too_many_rollbacks_collapse(tiny_data, tmp_path):
    from hcpc.trainer import TrainingError

    tr = Trainer(tiny_config("train.max_rollbacks=0"), tiny_data, tmp_path)
    batch = make_batch(tr.train_set[:8], tr.dtype)
    batch.samples[:] = float("nan")
    with pytest.raises(TrainingError, match="collapsed"):
        tr.train_step(batch, "pretrain", 3)
