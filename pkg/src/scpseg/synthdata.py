"""Synthetic paired (image, mask) cohorts with controllable spatial structure.

Every image shows a concentric-ellipse phantom: a bright inner core, a wide
mid band, a darker outer ring, and zero background. Small bright blobs are
drawn on the mid/outer tissue; a subset of them are the "lesions" that form
the mask.

Structured mode keeps the phantom geometry identical across the cohort (up to
<=2 px jitter) and makes position informative twice over: lesion centers are
drawn with density exp(-r/tau) in the distance r from the core, biased toward
the top half, while visually identical distractor blobs (bright, unlabeled)
concentrate in the far band and bottom half. A classifier that knows where it
is looking can separate them; one that only sees local appearance cannot.

Unstructured mode re-draws the phantom per sample with a random center
(+-25% of the image), rotation, and scale (0.7-1.3), places lesions uniformly
inside the organ, and has no distractors, so position carries no label
information.

Images get additive Gaussian noise and per-image Z-score normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .backbone import ConfigError
from .tensor import Tensor, load_tensor, save_tensor

__all__ = [
    "SynthSpec",
    "Sample",
    "DatasetSplits",
    "NormalizationError",
    "generate",
    "zscore",
    "save_dataset",
    "load_dataset",
    "structured_organ_mask",
]

# ring fractions of the normalized elliptical radius, and their intensities
CORE_RHO = 0.22
MID_RHO = 0.72
INTENSITY = {"background": 0.0, "outer": 0.35, "mid": 0.60, "core": 0.95}
LESION_CONTRAST = 1.5  # bump height in units of noise_sigma
MIN_AXIS_PX = 6.0
SHIFT_FRACTION = 0.25
SCALE_RANGE = (0.7, 1.3)
JITTER_PX = 2


class NormalizationError(ValueError):
    """Raised when an image cannot be Z-score normalized."""


@dataclass(frozen=True)
class SynthSpec:
    h: int = 64
    w: int = 64
    n_train: int = 200
    n_val: int = 40
    n_test: int = 60
    structured: bool = True
    lesion_rate: float = 6.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.lesion_rate <= 0:
            raise ConfigError(f"lesion_rate must be > 0, got {self.lesion_rate}")
        _phantom_axes(self.h, self.w, self.structured)  # bounds check


@dataclass
class Sample:
    image: Tensor  # (1, H, W), Z-scored
    mask: np.ndarray  # (H, W) uint8


@dataclass
class DatasetSplits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    spec: SynthSpec

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def _phantom_axes(h: int, w: int, structured: bool) -> tuple[float, float]:
    """Organ semi-axes that keep the phantom inside the image for the mode's transforms."""
    if structured:
        ar, ac = h / 2 - 2 - JITTER_PX, w / 2 - 2 - JITTER_PX
    else:
        smax = SCALE_RANGE[1]
        ar = (h / 2 - 2 - SHIFT_FRACTION * h) / smax
        ac = (w / 2 - 2 - SHIFT_FRACTION * w) / smax
    if ar < MIN_AXIS_PX or ac < MIN_AXIS_PX:
        raise ConfigError(
            f"image {h}x{w} too small: phantom would leave the frame "
            f"(semi-axes {ar:.1f}x{ac:.1f}, need >= {MIN_AXIS_PX})"
        )
    return ar, ac


def _rho_grid(h: int, w: int, center: tuple[float, float], axes: tuple[float, float], angle: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    di, dj = ii - center[0], jj - center[1]
    if angle:
        ca, sa = np.cos(angle), np.sin(angle)
        di, dj = ca * di + sa * dj, -sa * di + ca * dj
    return np.hypot(di / axes[0], dj / axes[1])


def structured_organ_mask(h: int, w: int) -> np.ndarray:
    """Canonical (jitter-free) organ region of the structured phantom."""
    axes = _phantom_axes(h, w, structured=True)
    return _rho_grid(h, w, (h / 2, w / 2), axes, 0.0) <= 1.0


def _draw_blob(rng: np.random.Generator, h: int, w: int, ci: float, cj: float) -> np.ndarray:
    """Boolean (H, W) ellipse of radii 1-4 px with a dithered boundary ring."""
    a, b = rng.uniform(1.0, 4.0, size=2)
    phi = rng.uniform(0.0, np.pi)
    r = int(np.ceil(max(a, b))) + 1
    i0, i1 = max(0, int(ci) - r), min(h, int(ci) + r + 1)
    j0, j1 = max(0, int(cj) - r), min(w, int(cj) + r + 1)
    ii, jj = np.meshgrid(np.arange(i0, i1, dtype=np.float64), np.arange(j0, j1, dtype=np.float64), indexing="ij")
    di, dj = ii - ci, jj - cj
    ca, sa = np.cos(phi), np.sin(phi)
    u, v = ca * di + sa * dj, -sa * di + ca * dj
    e = (u / a) ** 2 + (v / b) ** 2
    local = e <= 1.0
    ring = (e > 1.0) & (e <= 1.4)
    local |= ring & (rng.random(ring.shape) < 0.5)
    out = np.zeros((h, w), dtype=bool)
    out[i0:i1, j0:j1] = local
    return out


def _sample_centers(
    rng: np.random.Generator,
    count: int,
    cand_idx: np.ndarray,
    accept_prob: np.ndarray | None,
) -> list[tuple[int, int]]:
    centers = []
    for _ in range(count):
        for _try in range(500):
            k = int(rng.integers(len(cand_idx)))
            if accept_prob is None or rng.random() < accept_prob[k]:
                centers.append((int(cand_idx[k, 0]), int(cand_idx[k, 1])))
                break
    return centers


def _make_sample(spec: SynthSpec, rng: np.random.Generator) -> Sample:
    h, w = spec.h, spec.w
    axes = _phantom_axes(h, w, spec.structured)
    if spec.structured:
        ci = h / 2 + rng.integers(-JITTER_PX, JITTER_PX + 1)
        cj = w / 2 + rng.integers(-JITTER_PX, JITTER_PX + 1)
        angle, scale = 0.0, 1.0
    else:
        ci = h / 2 + rng.uniform(-SHIFT_FRACTION, SHIFT_FRACTION) * h
        cj = w / 2 + rng.uniform(-SHIFT_FRACTION, SHIFT_FRACTION) * w
        angle = rng.uniform(0.0, np.pi)
        scale = rng.uniform(*SCALE_RANGE)
    axes = (axes[0] * scale, axes[1] * scale)

    rho = _rho_grid(h, w, (ci, cj), axes, angle)
    organ = rho <= 1.0
    tissue = np.full((h, w), INTENSITY["background"])
    tissue[rho <= 1.0] = INTENSITY["outer"]
    tissue[rho < MID_RHO] = INTENSITY["mid"]
    tissue[rho < CORE_RHO] = INTENSITY["core"]

    # candidate lesion/distractor centers: organ tissue outside the core
    band = organ & (rho >= CORE_RHO)
    cand_idx = np.argwhere(band)
    r_px = (rho[band] - CORE_RHO) * (axes[0] + axes[1]) / 2.0
    tau = 0.15 * max(h, w)
    # vertical direction cosine in [-1, 1]; negative = above center
    vdir = ((cand_idx[:, 0] - ci) / axes[0]) / np.maximum(rho[band], 1e-9)

    bump = LESION_CONTRAST * spec.noise_sigma
    image = tissue.copy()
    mask = np.zeros((h, w), dtype=bool)

    n_lesions = int(rng.poisson(spec.lesion_rate))
    if spec.structured:
        lesion_accept = np.exp(-r_px / tau) * (1.0 - vdir) / 2.0
        distractor_accept = (1.0 - np.exp(-r_px / tau)) * (1.0 + vdir) / 2.0
        n_distract = int(rng.poisson(spec.lesion_rate))
    else:
        lesion_accept = None
        distractor_accept = None
        n_distract = 0

    for (bi, bj) in _sample_centers(rng, n_lesions, cand_idx, lesion_accept):
        blob = _draw_blob(rng, h, w, bi, bj) & organ
        image[blob] += bump
        mask |= blob
    for (bi, bj) in _sample_centers(rng, n_distract, cand_idx, distractor_accept):
        blob = _draw_blob(rng, h, w, bi, bj) & organ & ~mask
        image[blob] += bump

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image = zscore(Tensor(image[None, :, :].astype(np.float32)))
    return Sample(image=image, mask=mask.astype(np.uint8))


def zscore(image: Tensor) -> Tensor:
    """Standardize all pixels to mean 0, std 1 (population std)."""
    data = image.data.astype(np.float64)
    if data.size < 2:
        raise NormalizationError("zscore needs more than one pixel")
    std = data.std()
    if std == 0.0:
        raise NormalizationError("zscore undefined for a constant image")
    return Tensor(((data - data.mean()) / std).astype(np.float32))


def generate(spec: SynthSpec) -> DatasetSplits:
    """Build train/val/test splits from independent per-sample seed streams."""
    splits = {}
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    for split_idx, (name, n) in enumerate(sizes.items()):
        samples = []
        for k in range(n):
            rng = np.random.default_rng([spec.seed, split_idx, k])
            samples.append(_make_sample(spec, rng))
        splits[name] = samples
    return DatasetSplits(train=splits["train"], val=splits["val"], test=splits["test"], spec=spec)


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/<split>/img_%05d.tns + msk_%05d.tns, plus spec.txt
# ---------------------------------------------------------------------------


def save_dataset(out_dir: str, data: DatasetSplits) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "spec.txt"), "w") as f:
        for fld in fields(SynthSpec):
            val = getattr(data.spec, fld.name)
            if isinstance(val, bool):
                val = int(val)
            f.write(f"{fld.name}={val}\n")
    for name in ("train", "val", "test"):
        split_dir = os.path.join(out_dir, name)
        os.makedirs(split_dir, exist_ok=True)
        for k, sample in enumerate(data.split(name)):
            save_tensor(os.path.join(split_dir, f"img_{k:05d}.tns"), sample.image)
            save_tensor(os.path.join(split_dir, f"msk_{k:05d}.tns"), Tensor(sample.mask.astype(np.float32)))


def load_spec(path: str) -> SynthSpec:
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#") and "=" in line:
                key, val = line.split("=", 1)
                kv[key] = val
    return SynthSpec(
        h=int(kv["h"]),
        w=int(kv["w"]),
        n_train=int(kv["n_train"]),
        n_val=int(kv["n_val"]),
        n_test=int(kv["n_test"]),
        structured=bool(int(kv["structured"])),
        lesion_rate=float(kv["lesion_rate"]),
        noise_sigma=float(kv["noise_sigma"]),
        seed=int(kv["seed"]),
    )


def load_dataset(in_dir: str) -> DatasetSplits:
    spec = load_spec(os.path.join(in_dir, "spec.txt"))
    out = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        split_dir = os.path.join(in_dir, name)
        samples = []
        for k in range(n):
            img = load_tensor(os.path.join(split_dir, f"img_{k:05d}.tns"))
            msk = load_tensor(os.path.join(split_dir, f"msk_{k:05d}.tns"))
            samples.append(Sample(image=img, mask=(msk.data > 0.5).astype(np.uint8)))
        out[name] = samples
    return DatasetSplits(train=out["train"], val=out["val"], test=out["test"], spec=spec)
