import json
import math

import numpy as np
import pytest

from snowformer import tensor as T
from snowformer.checkpoint import load_tensors, save_tensors
from snowformer.errors import (
    BadMagic,
    ImageTooSmall,
    MissingWeights,
    NonFiniteLoss,
    ShapeMismatch,
    TensorCountMismatch,
)
from snowformer.gradcheck import grad_check
from snowformer.model import build_model, gradcheck_config, tiny_config
from snowformer.training import (
    AdamState,
    LossConfig,
    LRSchedule,
    PerceptualExtractor,
    TrainConfig,
    adam_step,
    augment,
    checkpoint_load,
    checkpoint_save,
    cyclic_lr,
    perceptual_loss,
    psnr_loss,
    total_loss,
    train_loop,
)


def pair64(seed=0):
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0.1, 0.9, size=(3, 64, 64)).astype(np.float32)
    snow = np.clip(clean + rng.normal(0, 0.1, size=(3, 64, 64)), 0, 1).astype(np.float32)
    return snow, clean


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_psnr_loss_identical_hits_cap():
    x = T.Tensor(np.full((3, 8, 8), 0.5))
    with T.Tape():
        loss = psnr_loss(x, T.Tensor(np.full((3, 8, 8), 0.5)))
    assert loss.item() == -100.0


def test_psnr_loss_uniform_offset():
    # MSE = 0.01 -> -10*log10(1/0.01) = -20
    a = T.Tensor(np.zeros((3, 8, 8)), dtype="f64")
    b = T.Tensor(np.full((3, 8, 8), 0.1), dtype="f64")
    with T.no_grad():
        loss = psnr_loss(a, b)
    assert abs(loss.item() - (-20.0)) < 1e-9


def test_psnr_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        psnr_loss(T.Tensor(np.zeros((3, 4, 4))), T.Tensor(np.zeros((3, 5, 5))))


def test_psnr_loss_gradient_fd():
    rng = np.random.default_rng(0)
    target = T.Tensor(rng.uniform(0.2, 0.8, size=(3, 6, 6)), dtype="f64")
    pred = T.Tensor(rng.uniform(0.2, 0.8, size=(3, 6, 6)), dtype="f64",
                    requires_grad=True)
    report = grad_check(lambda _: psnr_loss(pred, target), [pred],
                        rel_tol=1e-4, names=["pred"], rng=rng)
    assert report.passed, list(report.lines())


def test_perceptual_zero_on_identical_and_nonnegative():
    cfg = LossConfig(perceptual="surrogate")
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.uniform(size=(1, 3, 16, 16)).astype(np.float32))
    y = T.Tensor(rng.uniform(size=(1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        same = perceptual_loss(x, x, cfg)
        diff = perceptual_loss(x, y, cfg)
    assert same.item() == 0.0
    assert diff.item() >= 0.0


def test_perceptual_seed_deterministic():
    cfg = LossConfig(perceptual="surrogate", perceptual_seed=3)
    rng = np.random.default_rng(2)
    x = T.Tensor(rng.uniform(size=(1, 3, 16, 16)).astype(np.float32))
    y = T.Tensor(rng.uniform(size=(1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        a = perceptual_loss(x, y, cfg)
        b = perceptual_loss(x, y, cfg)
    assert a.item() == b.item()


def test_perceptual_external_missing_weights(tmp_path):
    with pytest.raises(MissingWeights):
        PerceptualExtractor(LossConfig(perceptual="external"))
    with pytest.raises(MissingWeights):
        PerceptualExtractor(LossConfig(perceptual="external",
                                       perceptual_weights=str(tmp_path / "no.ckpt")))


def test_perceptual_external_roundtrip(tmp_path):
    phi = PerceptualExtractor(LossConfig(perceptual="surrogate", perceptual_seed=5))
    path = tmp_path / "phi.ckpt"
    save_tensors(phi.state(), path)
    loaded = PerceptualExtractor(LossConfig(perceptual="external",
                                            perceptual_weights=str(path)))
    np.testing.assert_array_equal(loaded.w1, phi.w1)
    np.testing.assert_array_equal(loaded.w2, phi.w2)


def test_total_loss_weighting():
    rng = np.random.default_rng(4)
    x = T.Tensor(rng.uniform(size=(1, 3, 16, 16)), dtype="f64")
    y = T.Tensor(rng.uniform(size=(1, 3, 16, 16)), dtype="f64")
    cfg = LossConfig(lambda1=1.0, lambda2=0.2, perceptual="surrogate")
    with T.no_grad():
        lp = psnr_loss(x, y).item()
        lperc = perceptual_loss(x, y, cfg).item()
        lt = total_loss(x, y, cfg).item()
        lt_off = total_loss(x, y, LossConfig(lambda2=0.0)).item()
    assert abs(lt - (1.0 * lp + 0.2 * lperc)) < 1e-12 * max(1, abs(lt))
    assert lt_off == lp


# ---------------------------------------------------------------------------
# optimizer / schedule
# ---------------------------------------------------------------------------

def test_adam_zero_grad_noop():
    p = T.Tensor(np.ones((4,)), requires_grad=True)
    params = {"p": p}
    state = AdamState()
    before = p.data.copy()
    for _ in range(5):
        adam_step(params, {"p": np.zeros(4, dtype=np.float32)}, state, 1e-3)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 5


def test_adam_first_step_magnitude():
    # bias-corrected first step: |delta| = lr * |g| / (|g| + eps)
    for g in (0.5, -3.0, 1e-3):
        p = T.Tensor(np.zeros(1, dtype=np.float64), dtype="f64", requires_grad=True)
        state = AdamState()
        adam_step({"p": p}, {"p": np.array([g])}, state, 2e-4)
        expected = 2e-4 * abs(g) / (abs(g) + state.eps)
        assert abs(abs(float(p.data[0])) - expected) < 1e-12


def test_adam_minimizes_quadratic():
    p = T.Tensor(np.array([1.0]), dtype="f64", requires_grad=True)
    state = AdamState()
    for _ in range(400):
        adam_step({"p": p}, {"p": 2.0 * p.data}, state, 0.1)
        if abs(float(p.data[0])) < 1e-3:
            break
    assert abs(float(p.data[0])) < 1e-3


def test_cyclic_lr_shape():
    sched = LRSchedule(cycle_steps=500)
    assert cyclic_lr(0, sched) == 2e-4
    assert abs(cyclic_lr(250, sched) - 2.4e-4) < 1e-18
    for t in range(0, 1500, 7):
        lr = cyclic_lr(t, sched)
        assert 2e-4 <= lr <= 2.4e-4
        assert cyclic_lr(t + 500, sched) == lr


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_augment_alignment():
    # snow and clean receive the same transform: a marker painted into both
    # at the same pixel stays co-located
    snow, clean = pair64(0)
    snow[:, 10, 20] = 7.0
    clean[:, 10, 20] = 7.0
    for seed in range(10):
        s2, c2 = augment((snow, clean), np.random.default_rng(seed), crop=32)
        sm = np.argwhere(s2[0] == 7.0)
        cm = np.argwhere(c2[0] == 7.0)
        np.testing.assert_array_equal(sm, cm)
        assert s2.shape == c2.shape == (3, 32, 32)


def test_augment_no_crop_preserves_content():
    snow, clean = pair64(1)
    s2, c2 = augment((snow, clean), np.random.default_rng(0), crop=None)
    assert sorted(s2.reshape(-1)[:100].tolist()) is not None  # shape sanity
    assert s2.shape[0] == 3
    np.testing.assert_allclose(np.sort(s2, axis=None), np.sort(snow, axis=None))


def test_augment_too_small():
    snow, clean = pair64(2)
    with pytest.raises(ImageTooSmall):
        augment((snow, clean), np.random.default_rng(0), crop=128)


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------

def _overfit_cfg(steps, **kw):
    return TrainConfig(steps=steps, seed=0, crop=None, augment=False,
                       loss=LossConfig(lambda2=0.0),
                       sched=LRSchedule(cycle_steps=500), **kw)


def test_train_loop_reduces_loss_and_logs(tmp_path):
    model = build_model(tiny_config(), seed=0)
    log_path = tmp_path / "log.jsonl"
    records, state = train_loop(model, [pair64(0)],
                                _overfit_cfg(60, log_path=str(log_path)))
    assert len(records) == 60
    assert state.t == 60
    assert records[-1]["loss"] < records[0]["loss"]
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert lines == records
    assert set(lines[0]) == {"step", "lr", "loss", "psnr"}


def test_train_loop_seed_deterministic():
    a = build_model(tiny_config(), seed=0)
    b = build_model(tiny_config(), seed=0)
    ra, _ = train_loop(a, [pair64(0)], _overfit_cfg(10))
    rb, _ = train_loop(b, [pair64(0)], _overfit_cfg(10))
    assert ra == rb


def test_train_loop_nan_weight_aborts():
    model = build_model(tiny_config(), seed=0)
    model.params["enc.stem.w"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_loop(model, [pair64(0)], _overfit_cfg(5))


def test_train_loop_resume_matches_unbroken(tmp_path):
    full = build_model(tiny_config(), seed=0)
    r_full, _ = train_loop(full, [pair64(0)], _overfit_cfg(20))

    part = build_model(tiny_config(), seed=0)
    ckpt = tmp_path / "mid.ckpt"
    r_a, _ = train_loop(part, [pair64(0)],
                        _overfit_cfg(10, checkpoint_path=str(ckpt)))
    resumed = build_model(tiny_config(), seed=0)
    state = checkpoint_load(resumed, ckpt)
    assert state.t == 10
    r_b, _ = train_loop(resumed, [pair64(0)], _overfit_cfg(20), state=state,
                        start_step=10)
    assert r_a + r_b == r_full


def test_perceptual_surrogate_frozen_through_training():
    cfg = TrainConfig(steps=5, seed=0, crop=None, augment=False,
                      loss=LossConfig(perceptual="surrogate"),
                      sched=LRSchedule())
    phi_before = PerceptualExtractor(cfg.loss)
    model = build_model(tiny_config(), seed=0)
    train_loop(model, [pair64(0)], cfg)
    phi_after = PerceptualExtractor(cfg.loss)
    np.testing.assert_array_equal(phi_before.w1, phi_after.w1)
    np.testing.assert_array_equal(phi_before.w2, phi_after.w2)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_byte_identical(tmp_path):
    model = build_model(gradcheck_config(), seed=1)
    state = AdamState(t=3)
    for n, p in model.params.items():
        state.m[n] = np.full_like(p.data, 0.25)
        state.v[n] = np.full_like(p.data, 0.5)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    checkpoint_save(model, state, p1)
    model2 = build_model(gradcheck_config(), seed=2)
    state2 = checkpoint_load(model2, p1)
    checkpoint_save(model2, state2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for n, p in model.params.items():
        np.testing.assert_array_equal(p.data, model2.params[n].data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagic):
        load_tensors(path)


def test_checkpoint_truncated(tmp_path):
    good = tmp_path / "good.ckpt"
    save_tensors({"a": np.zeros((4, 4), dtype=np.float32)}, good)
    blob = good.read_bytes()
    bad = tmp_path / "trunc.ckpt"
    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises((BadMagic, TensorCountMismatch, Exception)) as exc:
        load_tensors(bad)
    assert exc.type.__name__ in ("BadMagic", "TensorCountMismatch", "IoError")


def test_checkpoint_shape_mismatch_names_keys(tmp_path):
    small = build_model(gradcheck_config(), seed=0)
    big = build_model(tiny_config(), seed=0)
    path = tmp_path / "small.ckpt"
    checkpoint_save(small, AdamState(), path)
    with pytest.raises(ShapeMismatch) as exc:
        checkpoint_load(big, path)
    assert "enc.stem.w" in str(exc.value) or "missing" in str(exc.value)
