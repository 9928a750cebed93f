"""Procedural paired phantoms standing in for co-registered CT/MR slices.

Geometry is a rotated elliptical "head": skull ring, a cortical band
(``tissue_b``), an interior (``tissue_a``) and a ventricle blob. The input is
a CT-like constant per class plus small noise; the target is an MR-like
constant per class plus class-specific Gaussian noise. The cortical band is
the heteroscedastic region: its target noise is ``band_noise_factor`` times the
base level. Targets are normalized so the ``tissue_a`` mean equals 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .volume import Volume

__all__ = [
    "CLASSES",
    "INPUT_INTENSITY",
    "TARGET_INTENSITY",
    "PhantomSpec",
    "Phantom",
    "Sample",
    "Dataset",
    "GeometryError",
    "generate_phantom",
    "generate_phantom_pair",
    "normalize_tissue_mean",
    "build_dataset",
    "GENERATOR_VERSION",
]

GENERATOR_VERSION = "scibilic-phantom/1"

CLASSES = ("background", "skull", "tissue_a", "tissue_b", "ventricle")
BACKGROUND, SKULL, TISSUE_A, TISSUE_B, VENTRICLE = range(5)

# CT-like: air, bone, two soft tissues, fluid. Zero is deliberately unused.
INPUT_INTENSITY = {"background": -1.0, "skull": 1.5, "tissue_a": 0.7, "tissue_b": 0.85, "ventricle": 0.5}
# T1-like: tissue_a plays white matter (normalized to 1), tissue_b grey matter.
TARGET_INTENSITY = {"background": 0.0, "skull": 0.2, "tissue_a": 1.0, "tissue_b": 0.65, "ventricle": 0.3}

_MAX_RETRIES = 20


class GeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int] = (64, 64)
    input_noise: float = 0.02
    target_noise: float = 0.1
    band_noise_factor: float = 4.0
    skull_thickness: float = 3.0
    band_thickness: float = 5.0
    border: int = 2
    class_noise: dict = field(default_factory=dict)  # per-class override of target_noise

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(self.size))
        if self.input_noise < 0 or self.target_noise < 0 or self.band_noise_factor < 0:
            raise ValueError("noise levels must be non-negative")
        unknown = set(self.class_noise) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes in class_noise: {sorted(unknown)}")

    def target_std(self, cls: str) -> float:
        std = self.class_noise.get(cls, self.target_noise)
        return std * self.band_noise_factor if cls == "tissue_b" else std


@dataclass
class Phantom:
    input: Volume
    target: Volume
    foreground: np.ndarray
    labels: np.ndarray
    noise_std: np.ndarray  # per-pixel target noise std after normalization
    band: np.ndarray
    clean_target: np.ndarray


@dataclass
class Sample:
    """One healthy pair: CT-like input, MR-like target, binary foreground."""

    input: np.ndarray
    target: np.ndarray
    foreground: np.ndarray
    seed_index: int = -1

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float32)
        self.target = np.asarray(self.target, dtype=np.float32)
        self.foreground = np.asarray(self.foreground, dtype=bool)
        if not (self.input.shape == self.target.shape == self.foreground.shape):
            raise ValueError(f"paired shapes differ: {self.input.shape}, {self.target.shape}, "
                             f"{self.foreground.shape}")


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _labels(spec: PhantomSpec, rng: RngStream) -> np.ndarray:
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    margin = spec.border + 1.0
    ry = rng.random() * 0.1 * h + (0.5 * h - margin - 0.1 * h)
    rx = rng.random() * 0.1 * w + (0.5 * w - margin - 0.15 * w)
    cy = h / 2 + (rng.random() - 0.5) * 2.0
    cx = w / 2 + (rng.random() - 0.5) * 2.0
    angle = (rng.random() - 0.5) * 0.6
    # keep the rotated head inside the border ring
    scale = min(1.0, (0.5 * min(h, w) - margin - 1.0) / max(ry, rx))
    ry, rx = ry * scale, rx * scale
    t_sk, t_band = spec.skull_thickness, spec.band_thickness
    head = _ellipse(yy, xx, cy, cx, ry, rx, angle)
    inner = _ellipse(yy, xx, cy, cx, ry - t_sk, rx - t_sk, angle)
    core = _ellipse(yy, xx, cy, cx, ry - t_sk - t_band, rx - t_sk - t_band, angle)
    vy = cy + (rng.random() - 0.5) * 0.2 * ry
    vx = cx + (rng.random() - 0.5) * 0.2 * rx
    vent = _ellipse(yy, xx, vy, vx, 4.0 + 3.0 * rng.random(), 5.0 + 4.0 * rng.random(),
                    (rng.random() - 0.5) * np.pi) & core
    labels = np.full((h, w), BACKGROUND, dtype=np.int8)
    labels[head] = SKULL
    labels[inner] = TISSUE_B
    labels[core] = TISSUE_A
    labels[vent] = VENTRICLE
    return labels


def generate_phantom(spec: PhantomSpec, rng: RngStream, provenance: dict | None = None) -> Phantom:
    h, w = spec.size
    for attempt in range(_MAX_RETRIES):
        labels = _labels(spec, rng.child("geometry", attempt))
        counts = np.bincount(labels.ravel(), minlength=len(CLASSES))
        b = spec.border
        ring_clear = not (labels[:b].any() or labels[-b:].any() or labels[:, :b].any() or labels[:, -b:].any()) \
            if b > 0 else True
        if counts.min() > 0 and ring_clear:
            break
    else:
        raise GeometryError(f"no valid geometry for {spec} after {_MAX_RETRIES} attempts")

    in_lut = np.array([INPUT_INTENSITY[c] for c in CLASSES])
    tg_lut = np.array([TARGET_INTENSITY[c] for c in CLASSES])
    std_lut = np.array([spec.target_std(c) for c in CLASSES])
    noise_in = rng.child("input_noise").normal(size=(h, w))
    noise_tg = rng.child("target_noise").normal(size=(h, w))
    x = in_lut[labels] + spec.input_noise * noise_in
    clean = tg_lut[labels]
    y = clean + std_lut[labels] * noise_tg

    tissue = labels == TISSUE_A
    ref = float(y[tissue].mean())
    y = y / ref
    prov = {"generator": GENERATOR_VERSION, **(provenance or {})}
    return Phantom(
        input=Volume(x, provenance=dict(prov, role="input")),
        target=Volume(y, provenance=dict(prov, role="target")),
        foreground=labels != BACKGROUND,
        labels=labels,
        noise_std=(std_lut[labels] / ref).astype(np.float32),
        band=labels == TISSUE_B,
        clean_target=(clean / ref).astype(np.float32),
    )


def generate_phantom_pair(spec: PhantomSpec, rng: RngStream):
    """Returns ``(input Volume, target Volume, foreground mask)``."""
    ph = generate_phantom(spec, rng)
    return ph.input, ph.target, ph.foreground


def normalize_tissue_mean(volume, tissue_mask, min_abs_mean: float = 1e-8):
    """Divide by the mean over ``tissue_mask`` so that mean becomes 1."""
    arr = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(tissue_mask, dtype=bool)
    if mask.shape != arr.shape:
        raise ValueError(f"mask shape {mask.shape} differs from volume {arr.shape}")
    if not mask.any():
        raise ValueError("tissue mask is empty")
    mean = arr[mask].mean()
    if not np.isfinite(mean) or abs(mean) < min_abs_mean:
        raise ValueError(f"tissue mean {mean!r} too close to zero to normalize")
    out = (arr / mean).astype(np.float32)
    if isinstance(volume, Volume):
        return Volume(out, spacing=volume.spacing, provenance=dict(volume.provenance, normalized=True))
    return out


def build_dataset(n_train: int, n_val: int, spec: PhantomSpec | None = None, seed: int = 0,
                  return_phantoms: bool = False):
    """Training phantoms use indices ``0..n_train-1``, validation the next ``n_val``.

    Each phantom is drawn from ``RngStream(seed).child("phantom", index)``.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError(f"need n_train >= 1 and n_val >= 1, got {n_train}, {n_val}")
    spec = spec or PhantomSpec()
    root = RngStream(seed).child("phantom")
    phantoms = [generate_phantom(spec, root.child(i), {"seed": seed, "index": i})
                for i in range(n_train + n_val)]
    samples = [Sample(p.input.data, p.target.data, p.foreground, i) for i, p in enumerate(phantoms)]
    ds = Dataset(train=samples[:n_train], validation=samples[n_train:])
    if return_phantoms:
        return ds, phantoms
    return ds
