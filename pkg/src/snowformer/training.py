"""Losses, Adam, cyclic LR schedule, augmentation, and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import (
    ImageTooSmall,
    InvalidConfig,
    MissingWeights,
    NonFiniteError,
    NonFiniteLoss,
    ShapeMismatch,
)

_LN10 = math.log(10.0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.2
    psnr_cap_db: float = 100.0
    perceptual: str = "off"          # off | surrogate | external
    perceptual_seed: int = 0
    perceptual_weights: str | None = None  # checkpoint path for external mode

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("loss lambdas must be >= 0")
        if not math.isfinite(self.psnr_cap_db):
            raise InvalidConfig("psnr_cap_db must be finite")
        if self.perceptual not in ("off", "surrogate", "external"):
            raise InvalidConfig(f"unknown perceptual mode {self.perceptual!r}")

    def to_dict(self):
        return {"lambda1": self.lambda1, "lambda2": self.lambda2,
                "psnr_cap_db": self.psnr_cap_db, "perceptual": self.perceptual,
                "perceptual_seed": self.perceptual_seed,
                "perceptual_weights": self.perceptual_weights}


def psnr_loss(pred: T.Tensor, target: T.Tensor, cap_db: float = 100.0) -> T.Tensor:
    """Negated PSNR: -min(10*log10(1/MSE), cap). Differentiable for MSE > 0."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"psnr_loss: {pred.shape} vs {target.shape}")
    mse = T.mean(T.square(T.sub(pred, target)))
    if mse.item() <= 10.0 ** (-cap_db / 10.0):
        # cap binds: constant -cap with a zero gradient, still on the tape
        return T.add(T.scale(mse, 0.0),
                     T.Tensor(np.asarray(-cap_db), dtype=pred.dtype))
    return T.scale(T.log(mse), 10.0 / _LN10)


class PerceptualExtractor:
    """Frozen 2-stage conv feature pyramid standing in for a pretrained net.

    Stage 1: 3x3 conv (3 -> 16) + GELU at full resolution.
    Stage 2: 2x2 average pool, 3x3 conv (16 -> 32) + GELU.
    """

    CH = (16, 32)

    def __init__(self, cfg: LossConfig):
        if cfg.perceptual == "external":
            if not cfg.perceptual_weights:
                raise MissingWeights("external perceptual mode needs a weights path")
            try:
                tensors = ckpt.load_tensors(cfg.perceptual_weights)
            except Exception as e:
                raise MissingWeights(
                    f"cannot load perceptual weights {cfg.perceptual_weights}: {e}") from e
            try:
                self.w1, self.b1 = tensors["stage1.w"], tensors["stage1.b"]
                self.w2, self.b2 = tensors["stage2.w"], tensors["stage2.b"]
            except KeyError as e:
                raise MissingWeights(f"perceptual weights missing tensor {e}") from e
        else:
            rng = np.random.default_rng(np.random.SeedSequence(cfg.perceptual_seed))
            self.w1 = self._init(rng, (self.CH[0], 3, 3, 3))
            self.b1 = np.zeros(self.CH[0], dtype=np.float32)
            self.w2 = self._init(rng, (self.CH[1], self.CH[0], 3, 3))
            self.b2 = np.zeros(self.CH[1], dtype=np.float32)

    @staticmethod
    def _init(rng, shape):
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def _params(self, dtype):
        # frozen: requires_grad stays False so training never touches them
        return [T.Tensor(a, dtype=dtype) for a in (self.w1, self.b1, self.w2, self.b2)]

    def features(self, x: T.Tensor) -> list:
        w1, b1, w2, b2 = self._params(x.dtype)
        f1 = T.gelu(T.conv2d(x, w1, b1, pad=1))
        f2 = T.gelu(T.conv2d(T.avgpool2d(f1, 2, 2), w2, b2, pad=1))
        return [f1, f2]

    def state(self) -> dict:
        return {"stage1.w": self.w1, "stage1.b": self.b1,
                "stage2.w": self.w2, "stage2.b": self.b2}


def perceptual_loss(pred: T.Tensor, target: T.Tensor, cfg: LossConfig,
                    extractor: PerceptualExtractor | None = None) -> T.Tensor:
    """Sum over stages of mean-normalized L1 feature distance."""
    if cfg.perceptual == "off":
        raise InvalidConfig("perceptual_loss called with perceptual=off")
    phi = extractor or PerceptualExtractor(cfg)
    total = None
    for fp, ft in zip(phi.features(pred), phi.features(target)):
        term = T.mean(T.abs_(T.sub(fp, ft)))
        total = term if total is None else T.add(total, term)
    return total


def total_loss(pred: T.Tensor, target: T.Tensor, cfg: LossConfig,
               extractor: PerceptualExtractor | None = None) -> T.Tensor:
    loss = T.scale(psnr_loss(pred, target, cfg.psnr_cap_db), cfg.lambda1)
    if cfg.perceptual != "off" and cfg.lambda2 > 0:
        loss = T.add(loss, T.scale(perceptual_loss(pred, target, cfg, extractor),
                                   cfg.lambda2))
    return loss


# ---------------------------------------------------------------------------
# optimizer / schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.data.shape} ({name})")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


@dataclass
class LRSchedule:
    lr_min: float = 2e-4
    lr_max: float = 2.4e-4
    cycle_steps: int = 500

    def validate(self):
        if self.cycle_steps < 1 or self.lr_max < self.lr_min or self.lr_min <= 0:
            raise InvalidConfig("bad LR schedule")

    def to_dict(self):
        return {"lr_min": self.lr_min, "lr_max": self.lr_max,
                "cycle_steps": self.cycle_steps}


def cyclic_lr(t: int, sched: LRSchedule) -> float:
    """Triangular wave: lr_min at phase 0 and cycle end, lr_max at half-cycle."""
    frac = (t % sched.cycle_steps) / sched.cycle_steps
    tri = 1.0 - abs(2.0 * frac - 1.0)
    return sched.lr_min + (sched.lr_max - sched.lr_min) * tri


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(pair, rng, crop: int | None = 256):
    """Shared flip / 90-degree rotation / crop applied to both images."""
    snow, clean = pair
    if rng.random() < 0.5:
        snow, clean = snow[:, :, ::-1], clean[:, :, ::-1]
    k = int(rng.integers(4))
    snow = np.rot90(snow, k, axes=(1, 2))
    clean = np.rot90(clean, k, axes=(1, 2))
    if crop is not None:
        _, h, w = snow.shape
        if h < crop or w < crop:
            raise ImageTooSmall(f"augment: {h}x{w} smaller than crop {crop}")
        oy = int(rng.integers(h - crop + 1))
        ox = int(rng.integers(w - crop + 1))
        snow = snow[:, oy:oy + crop, ox:ox + crop]
        clean = clean[:, oy:oy + crop, ox:ox + crop]
    return np.ascontiguousarray(snow), np.ascontiguousarray(clean)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    crop: int | None = None
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    sched: LRSchedule = field(default_factory=LRSchedule)
    log_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # 0: final checkpoint only (if path given)
    checkpoint_extra: dict | None = None  # extra named tensors (e.g. config meta)

    def validate(self):
        if self.steps < 0:
            raise InvalidConfig("steps must be >= 0")
        self.loss.validate()
        self.sched.validate()


def _pair(dataset, idx):
    if hasattr(dataset, "pair"):
        return dataset.pair(idx)
    return dataset[idx]


def _step_rng(seed: int, step: int):
    # per-step streams make resumed runs bitwise-match unbroken ones
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))


def train_loop(model, dataset, cfg: TrainConfig, state: AdamState | None = None,
               start_step: int = 0):
    """SGD driver: sample -> augment -> forward -> loss -> backward -> Adam.

    Returns (log_records, state). Deterministic for a fixed (cfg.seed, dataset)
    in single-worker mode; emits one JSON object per step to cfg.log_path.
    """
    cfg.validate()
    n = len(dataset)
    if n == 0:
        raise InvalidConfig("train_loop: empty dataset")
    state = state or AdamState()
    params = model.params
    leaves = list(params.values())
    extractor = (PerceptualExtractor(cfg.loss)
                 if cfg.loss.perceptual != "off" else None)

    records = []
    log_f = open(cfg.log_path, "a") if cfg.log_path else None
    try:
        for step in range(start_step, cfg.steps):
            rng = _step_rng(cfg.seed, step)
            lr = cyclic_lr(step, cfg.sched)
            snow, clean = _pair(dataset, int(rng.integers(n)))
            if cfg.augment:
                snow, clean = augment((snow, clean), rng, cfg.crop)
            x = T.Tensor(snow[None], dtype=model.cfg.dtype)
            y = T.Tensor(clean[None], dtype=model.cfg.dtype)
            with T.Tape() as tape:
                try:
                    pred = model.forward_full(x)
                    loss = total_loss(pred, y, cfg.loss, extractor)
                except NonFiniteError as e:
                    raise NonFiniteLoss(f"step {step}: non-finite forward: {e}") from e
                lv = loss.item()
                if not math.isfinite(lv):
                    raise NonFiniteLoss(f"step {step}: loss {lv}")
                T.backward(loss, tape, leaves=leaves)
            grads = {name: p.grad for name, p in params.items()}
            for p in leaves:
                p.grad = None
            adam_step(params, grads, state, lr)

            mse = float(np.mean((pred.data - y.data) ** 2))
            psnr = (cfg.loss.psnr_cap_db if mse <= 10.0 ** (-cfg.loss.psnr_cap_db / 10.0)
                    else min(10.0 * math.log10(1.0 / mse), cfg.loss.psnr_cap_db))
            rec = {"step": step, "lr": lr, "loss": lv, "psnr": psnr}
            records.append(rec)
            if log_f:
                log_f.write(json.dumps(rec) + "\n")
            if (cfg.checkpoint_path and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                checkpoint_save(model, state, cfg.checkpoint_path,
                                extra=cfg.checkpoint_extra)
    finally:
        if log_f:
            log_f.close()
    if cfg.checkpoint_path:
        checkpoint_save(model, state, cfg.checkpoint_path,
                        extra=cfg.checkpoint_extra)
    return records, state


# ---------------------------------------------------------------------------
# checkpoint plumbing (model + optimizer state)
# ---------------------------------------------------------------------------

def checkpoint_save(model, state: AdamState, path, extra: dict | None = None):
    tensors = {name: p.data for name, p in model.params.items()}
    for name in model.params:
        tensors[f"opt.m.{name}"] = state.m.get(name, np.zeros_like(tensors[name]))
        tensors[f"opt.v.{name}"] = state.v.get(name, np.zeros_like(tensors[name]))
    tensors["opt.t"] = np.asarray(float(state.t))
    if extra:
        tensors.update(extra)
    ckpt.save_tensors(tensors, path)


def checkpoint_load(model, path) -> AdamState:
    """Restore parameters and optimizer state in place; returns the AdamState."""
    tensors = ckpt.load_tensors(path)
    ckpt.assign_params(model.params, tensors)
    state = AdamState(t=int(np.asarray(tensors.get("opt.t", 0.0)).reshape(-1)[0]))
    for name, p in model.params.items():
        mk, vk = f"opt.m.{name}", f"opt.v.{name}"
        if mk in tensors:
            state.m[name] = tensors[mk].astype(p.data.dtype)
        if vk in tensors:
            state.v[name] = tensors[vk].astype(p.data.dtype)
    return state
