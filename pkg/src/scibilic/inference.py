"""Monte Carlo dropout prediction and the epistemic/aleatoric split.

For T dropout samples ``(y_t, s_t)`` with ``s_t = log sigma_t**2``::

    mean       = (1/T) sum_t y_t
    epistemic  = (1/T) sum_t (y_t - mean)**2       (population variance)
    aleatoric  = (1/T) sum_t exp(s_t)
    scibilic   = epistemic / (aleatoric + eps)

Variance uses the two-pass form in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import unet
from .numkernel import ShapeError
from .rng import RngStream
from .unet import ForwardMode, UNetConfig
from .volume import Volume, write_pgm, write_volume

__all__ = [
    "McConfig",
    "PredictiveOutput",
    "decompose_samples",
    "scibilic_map",
    "draw_samples",
    "mc_predict",
    "segment_bounds",
    "segmented_inference",
    "predict",
    "write_outputs",
    "MAP_NAMES",
]

MAP_NAMES = ("mean", "epistemic", "aleatoric", "scibilic")


@dataclass(frozen=True)
class McConfig:
    T: int = 50
    seed: int = 0
    scibilic_epsilon: float = 1e-6
    segment_overlap: int = 0
    segments: int = 1
    segment_axis: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.segment_overlap < 0 or self.segment_overlap % 2:
            raise ValueError(f"segment_overlap must be even and >= 0, got {self.segment_overlap}")
        if self.segments < 1 or self.segment_axis not in (0, 1):
            raise ValueError(f"invalid segmentation settings: segments={self.segments}, axis={self.segment_axis}")


@dataclass
class PredictiveOutput:
    mean: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    scibilic: np.ndarray
    T: int

    def maps(self) -> dict:
        return {name: getattr(self, name) for name in MAP_NAMES}


def scibilic_map(epistemic, aleatoric, epsilon: float = 1e-6) -> np.ndarray:
    ep = np.asarray(epistemic, dtype=np.float64)
    al = np.asarray(aleatoric, dtype=np.float64)
    if ep.shape != al.shape:
        raise ShapeError(f"epistemic {ep.shape} and aleatoric {al.shape} differ in shape")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    if (ep < 0).any() or (al < 0).any():
        raise ValueError("epistemic and aleatoric maps must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ep / (al + epsilon)
    if not np.isfinite(out).all():
        raise FloatingPointError("scibilic quotient is not finite; use epsilon > 0")
    return out


def decompose_samples(y_samples, sigma2_samples, epsilon: float = 1e-6) -> PredictiveOutput:
    """Moments over the leading (sample) axis of stacked head outputs."""
    ys = np.asarray(y_samples, dtype=np.float64)
    s2 = np.asarray(sigma2_samples, dtype=np.float64)
    if ys.shape != s2.shape or ys.ndim < 1 or ys.shape[0] < 1:
        raise ShapeError(f"sample stacks must match and be non-empty, got {ys.shape} and {s2.shape}")
    t = ys.shape[0]
    mean = ys.sum(axis=0) / t
    dev = ys - mean
    epistemic = (dev * dev).sum(axis=0) / t
    aleatoric = s2.sum(axis=0) / t
    return PredictiveOutput(mean, epistemic, aleatoric, scibilic_map(epistemic, aleatoric, epsilon), t)


def _as_image(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def draw_samples(weights, x, config: McConfig, model_config: UNetConfig):
    """T stochastic forwards; sample t uses ``RngStream(seed).child("mc", t)``.

    Returns stacked ``(y_hat, sigma2)`` arrays of shape ``(T, H, W)``.
    """
    img = _as_image(x)[None, None]
    root = RngStream(config.seed).child("mc")
    ys = np.empty((config.T,) + img.shape[2:], dtype=np.float32)
    s2 = np.empty_like(ys)
    for t in range(config.T):
        y_hat, log_s2 = unet.forward(weights, img, ForwardMode.MC_SAMPLE, root.child(t), model_config)
        ys[t] = y_hat[0, 0]
        s2[t] = np.exp(log_s2[0, 0])
    return ys, s2


def mc_predict(weights, x, config: McConfig, model_config: UNetConfig) -> PredictiveOutput:
    ys, s2 = draw_samples(weights, x, config, model_config)
    return decompose_samples(ys, s2, config.scibilic_epsilon)


def segment_bounds(length: int, segments: int, overlap: int, divisor: int = 1):
    """Cores partition ``[0, length)``; tiles extend each core by ``overlap/2``.

    Core boundaries and margins are rounded to multiples of ``divisor`` so
    strided layers stay aligned with the full-image grid. Returns a list of
    ``(tile_start, tile_stop, core_start, core_stop)``.
    """
    if segments < 1:
        raise ValueError(f"segments must be >= 1, got {segments}")
    if overlap < 0 or overlap % 2:
        raise ValueError(f"overlap must be even and >= 0, got {overlap}")
    cuts = [0]
    for k in range(1, segments):
        c = int(round(length * k / segments / divisor)) * divisor
        cuts.append(min(max(c, cuts[-1]), length))
    cuts.append(length)
    margin = -(-(overlap // 2) // divisor) * divisor
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            raise ValueError(f"{segments} segments do not fit in length {length} at granularity {divisor}")
        if overlap // 2 > b - a:
            raise ValueError(f"overlap {overlap} is larger than the {b - a}-voxel segment it extends")
        out.append((max(0, a - margin), min(length, b + margin), a, b))
    return out


def _pad_to(img: np.ndarray, divisor: int):
    h, w = img.shape
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw)), mode="edge")


def segmented_inference(weights, x, config: McConfig, model_config: UNetConfig) -> PredictiveOutput:
    """MC prediction on overlapping tiles, keeping only each tile's core.

    Every output voxel is written exactly once. Tiles whose extents are not
    divisible by ``2**levels`` are edge-padded and cropped back.
    """
    img = _as_image(x)
    d = model_config.divisor
    axis = config.segment_axis
    bounds = segment_bounds(img.shape[axis], config.segments, config.segment_overlap, d)
    if len(bounds) == 1 and img.shape[0] % d == 0 and img.shape[1] % d == 0:
        return mc_predict(weights, img, config, model_config)
    maps = {name: np.zeros(img.shape, dtype=np.float64) for name in MAP_NAMES}
    written = np.zeros(img.shape, dtype=np.int32)
    for t0, t1, c0, c1 in bounds:
        sl = [slice(None), slice(None)]
        sl[axis] = slice(t0, t1)
        tile = img[tuple(sl)]
        out = mc_predict(weights, _pad_to(tile, d), config, model_config)
        dst = [slice(None), slice(None)]
        dst[axis] = slice(c0, c1)
        src = [slice(0, tile.shape[0]), slice(0, tile.shape[1])]
        src[axis] = slice(c0 - t0, c1 - t0)
        for name in MAP_NAMES:
            maps[name][tuple(dst)] = getattr(out, name)[tuple(src)]
        written[tuple(dst)] += 1
    if not (written == 1).all():
        raise AssertionError("segment cores do not partition the image")
    return PredictiveOutput(maps["mean"], maps["epistemic"], maps["aleatoric"], maps["scibilic"], config.T)


def predict(weights, x, config: McConfig, model_config: UNetConfig) -> PredictiveOutput:
    """Whole-image MC prediction, falling back to tiles when needed."""
    img = _as_image(x)
    d = model_config.divisor
    if config.segments == 1 and img.shape[0] % d == 0 and img.shape[1] % d == 0:
        return mc_predict(weights, img, config, model_config)
    return segmented_inference(weights, img, config, model_config)


def write_outputs(output: PredictiveOutput, directory, prefix: str = "") -> dict:
    """Writes ``<prefix><map>.sciv`` and ``<prefix><map>.pgm`` (+ scale sidecar) per map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, arr in output.maps().items():
        vol = Volume(arr.astype(np.float32), provenance={"map": name, "T": output.T})
        paths[name] = write_volume(vol, directory / f"{prefix}{name}.sciv")
        write_pgm(arr, directory / f"{prefix}{name}.pgm")
    return paths
