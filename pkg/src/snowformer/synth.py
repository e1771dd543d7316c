"""Seeded synthetic snow scenes from the physical snow imaging model.

A scene is composed as

    K = J * (1 - Z*R) + C * Z*R        (veiling-free snow scene)
    I = K * T + A * (1 - T)            (haze veiling)

where J is the clean image, R a binary snow location mask, Z a smooth
chromatic/opacity field, C a near-white snow color image, T a low-frequency
transmission map and A the atmospheric light.

Sampling distributions (these are the contract the statistical tests rely on):
  * particle count ~ UniformInt[count_lo, count_hi] (inclusive)
  * per particle: radius r ~ Uniform(scale_lo, scale_hi), center uniform
    over the image
  * with probability `streak_probability` the particle is a streak:
    length 8*r, width max(1, r/3), angle = wind_angle + Uniform(-15deg, 15deg);
    otherwise an ellipse with axes (r, r*e), e ~ Uniform(0.6, 1), random
    rotation.

Every generator is a pure function of (config, seed, idx).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import IoError, ManifestMismatch, MissingImageDir, ShapeMismatch
from .hashing import config_sha256
from .imageio import png_read, png_write

MANIFEST_VERSION = 1


@dataclass
class SynthConfig:
    image_size: tuple = (256, 256)
    particle_count_range: tuple = (20, 60)
    particle_scale_range: tuple = (1.0, 16.0)  # radius in px
    streak_probability: float = 0.3
    t_min: float = 0.55
    base_scene: str = "procedural"  # "procedural" or a directory of images
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        lo, hi = self.particle_count_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad particle_count_range: {self.particle_count_range}")
        slo, shi = self.particle_scale_range
        if slo > shi or slo <= 0:
            raise ValueError(f"bad particle_scale_range: {self.particle_scale_range}")
        if not 0.0 < self.t_min <= 1.0:
            raise ValueError(f"t_min must be in (0,1]: {self.t_min}")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["particle_count_range"] = list(self.particle_count_range)
        d["particle_scale_range"] = list(self.particle_scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("image_size", "particle_count_range", "particle_scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SceneSample:
    """One synthetic scene with all components of the imaging model."""

    J: np.ndarray  # clean [3,H,W]
    R: np.ndarray  # binary snow location [1,H,W]
    Z: np.ndarray  # chromatic aberration [3,H,W]
    C: np.ndarray  # snow color [3,H,W]
    T: np.ndarray  # transmission [1,H,W]
    A: np.ndarray  # atmospheric light [3,1,1]
    I: np.ndarray  # composed snowy image [3,H,W]
    seed: int
    idx: int


def _rng(cfg: SynthConfig, idx: int, stream: int) -> np.random.Generator:
    # independent streams per component so changing one generator does not
    # reshuffle the others
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(stream, idx)))


def _grid(h, w):
    return np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")


def _smooth_field(rng, h, w, sigma):
    f = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="reflect")
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w), dtype=np.float32)
    return ((f - lo) / (hi - lo)).astype(np.float32)


def gen_clean(cfg: SynthConfig, idx: int) -> np.ndarray:
    """Clean image J: procedural gradient + anti-aliased shapes, or a file."""
    cfg.validate()
    h, w = cfg.image_size
    if cfg.base_scene != "procedural":
        return _load_clean_from_dir(cfg, idx)
    rng = _rng(cfg, idx, stream=0)
    yy, xx = _grid(h, w)
    # smooth two-color background gradient
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3)).astype(np.float32)
    ang = rng.uniform(0, 2 * np.pi)
    t = (np.cos(ang) * yy / h + np.sin(ang) * xx / w)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    for _ in range(rng.integers(3, 9)):
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h * 0.05, h * 0.3), rng.uniform(w * 0.05, w * 0.3)
        if rng.random() < 0.5:  # ellipse, 1px anti-aliased edge
            d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            alpha = np.clip((1.0 - d) * min(ry, rx), 0.0, 1.0)
        else:  # rectangle
            dy = ry - np.abs(yy - cy)
            dx = rx - np.abs(xx - cx)
            alpha = np.clip(np.minimum(dy, dx), 0.0, 1.0)
        img = img * (1 - alpha[None]) + color[:, None, None] * alpha[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _load_clean_from_dir(cfg: SynthConfig, idx: int) -> np.ndarray:
    if not os.path.isdir(cfg.base_scene):
        raise MissingImageDir(f"base_scene directory not found: {cfg.base_scene}")
    files = sorted(
        f for f in os.listdir(cfg.base_scene) if f.lower().endswith(".png")
    )
    if not files:
        raise MissingImageDir(f"no PNG files in {cfg.base_scene}")
    img = png_read(os.path.join(cfg.base_scene, files[idx % len(files)]))
    h, w = cfg.image_size
    if img.shape[1] < h or img.shape[2] < w:
        raise MissingImageDir(
            f"image {files[idx % len(files)]} smaller than requested {h}x{w}"
        )
    # deterministic crop from the seeded stream
    rng = _rng(cfg, idx, stream=0)
    oy = int(rng.integers(0, img.shape[1] - h + 1))
    ox = int(rng.integers(0, img.shape[2] - w + 1))
    return img[:, oy:oy + h, ox:ox + w]


def _stamp_ellipse(mask, cy, cx, ra, rb, theta):
    h, w = mask.shape
    r = max(ra, rb)
    y0, y1 = max(0, int(cy - r - 1)), min(h, int(cy + r + 2))
    x0, x1 = max(0, int(cx - r - 1)), min(w, int(cx + r + 2))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    mask[y0:y1, x0:x1] |= (u / ra) ** 2 + (v / rb) ** 2 <= 1.0


def _stamp_segment(mask, cy, cx, length, width, theta):
    h, w = mask.shape
    r = length / 2 + width
    y0, y1 = max(0, int(cy - r - 1)), min(h, int(cy + r + 2))
    x0, x1 = max(0, int(cx - r - 1)), min(w, int(cx + r + 2))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    dy, dx = yy - cy, xx - cx
    along = dy * np.cos(theta) + dx * np.sin(theta)
    across = -dy * np.sin(theta) + dx * np.cos(theta)
    hit = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
    mask[y0:y1, x0:x1] |= hit


def gen_snow_mask(cfg: SynthConfig, idx: int):
    """Binary mask R, chromatic field Z, snow color C."""
    cfg.validate()
    h, w = cfg.image_size
    rng = _rng(cfg, idx, stream=1)
    mask = np.zeros((h, w), dtype=bool)
    count = int(rng.integers(cfg.particle_count_range[0], cfg.particle_count_range[1] + 1))
    wind = rng.uniform(0, np.pi)
    slo, shi = cfg.particle_scale_range
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(slo, shi)
        if rng.random() < cfg.streak_probability:
            jitter = rng.uniform(-np.pi / 12, np.pi / 12)  # +-15 deg around wind
            _stamp_segment(mask, cy, cx, 8 * r, max(1.0, r / 3), wind + jitter)
        else:
            e = rng.uniform(0.6, 1.0)
            _stamp_ellipse(mask, cy, cx, r, r * e, rng.uniform(0, np.pi))
    R = mask.astype(np.float32)[None]
    # smooth per-channel opacity/tint field in [0.5, 1]
    Z = np.stack([0.5 + 0.5 * _smooth_field(rng, h, w, sigma=max(h, w) / 8) for _ in range(3)])
    # near-white snow color with brightness jitter, always >= 0.8
    base = 0.85 + 0.15 * _smooth_field(rng, h, w, sigma=max(h, w) / 16)
    C = np.clip(base[None] + rng.uniform(-0.02, 0.02, size=(3, 1, 1)).astype(np.float32), 0.8, 1.0)
    return R, Z.astype(np.float32), C.astype(np.float32)


# blur radius for the transmission field, as a fraction of image side
TRANSMISSION_BLUR_FRACTION = 1 / 8


def gen_transmission(cfg: SynthConfig, idx: int):
    """Low-frequency transmission map T in [t_min, 1] and atmospheric light A."""
    cfg.validate()
    h, w = cfg.image_size
    rng = _rng(cfg, idx, stream=2)
    blur_radius = max(h, w) * TRANSMISSION_BLUR_FRACTION
    field = _smooth_field(rng, h, w, sigma=blur_radius / 2)
    T = (cfg.t_min + (1.0 - cfg.t_min) * field)[None].astype(np.float32)
    A = rng.uniform(0.6, 1.0, size=(3, 1, 1)).astype(np.float32)
    return T, A


def compose_snowy(J, R, Z, C, T, A):
    """Apply the imaging model; returns (K, I) clipped to [0,1]."""
    for name, arr, ch in (("J", J, 3), ("R", R, 1), ("Z", Z, 3), ("C", C, 3), ("T", T, 1)):
        if arr.ndim != 3 or arr.shape[0] != ch or arr.shape[1:] != J.shape[1:]:
            raise ShapeMismatch(f"compose_snowy: bad shape for {name}: {arr.shape}")
    if np.shape(A) != (3, 1, 1):
        raise ShapeMismatch(f"compose_snowy: A must be [3,1,1], got {np.shape(A)}")
    ZR = Z * R
    K = J * (1.0 - ZR) + C * ZR
    I = K * T + A * (1.0 - T)
    return np.clip(K, 0.0, 1.0).astype(np.float32), np.clip(I, 0.0, 1.0).astype(np.float32)


def generate_sample(cfg: SynthConfig, idx: int) -> SceneSample:
    J = gen_clean(cfg, idx)
    R, Z, C = gen_snow_mask(cfg, idx)
    T, A = gen_transmission(cfg, idx)
    _, I = compose_snowy(J, R, Z, C, T, A)
    return SceneSample(J=J, R=R, Z=Z, C=C, T=T, A=A, I=I, seed=cfg.seed, idx=idx)


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

def dataset_write(cfg: SynthConfig, count: int, out_dir) -> dict:
    """Generate `count` samples into `out_dir` as PNG pairs plus a manifest."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    cfg_dict = cfg.to_dict()
    sha = config_sha256(cfg_dict)
    for idx in range(count):
        s = generate_sample(cfg, idx)
        meta = {"config_sha256": sha}
        png_write(s.I, os.path.join(out_dir, f"{idx:06d}_snow.png"), text=meta)
        png_write(s.J, os.path.join(out_dir, f"{idx:06d}_gt.png"), text=meta)
    manifest = {
        "version": MANIFEST_VERSION,
        "config": cfg_dict,
        "seed": cfg.seed,
        "count": count,
        "config_sha256": sha,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class DatasetView:
    """Lazy reader over a written dataset directory."""

    def __init__(self, directory, manifest):
        self.directory = directory
        self.manifest = manifest

    def __len__(self):
        return self.manifest["count"]

    def pair(self, idx):
        """Returns (snowy, clean) float32 [3,H,W] pairs (8-bit quantized)."""
        snow = png_read(os.path.join(self.directory, f"{idx:06d}_snow.png"))
        gt = png_read(os.path.join(self.directory, f"{idx:06d}_gt.png"))
        return snow, gt


def dataset_read(directory) -> DatasetView:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise IoError(f"missing manifest: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestMismatch(f"corrupt manifest: {path}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestMismatch(f"unsupported manifest version: {manifest.get('version')}")
    if config_sha256(manifest["config"]) != manifest["config_sha256"]:
        raise ManifestMismatch("manifest config hash does not match its config")
    return DatasetView(directory, manifest)
