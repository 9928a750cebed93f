"""Dual-head U-Net: translated image plus per-pixel log-variance.

Layout (defaults: 3 levels, widths 16/32/64, bottleneck 128)::

    enc{i}:     conv3x3 -> conv3x3 -> conv3x3 stride 2
    bottleneck: conv3x3 -> conv3x3
    dec{i}:     upsample x2 -> conv5x5 -> concat skip -> conv3x3 -> conv3x3
    concat input image
    head_mean, head_logvar: conv3x3 -> ReLU -> conv1x1

Every conv outside the heads is followed by ReLU and spatial dropout.
Parameters live in an ordered ``dict[str, np.ndarray]`` (``NetworkWeights``)
whose names are stable across save/load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .rng import RngStream
from .volume import read_volume, write_volume

__all__ = [
    "UNetConfig",
    "ForwardMode",
    "NonFiniteError",
    "NetworkWeights",
    "LOG_VAR_BOUNDS",
    "build_model",
    "forward",
    "forward_with_cache",
    "backward",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_VAR_BOUNDS = (-10.0, 10.0)

NetworkWeights = dict  # ordered name -> float32 array


class NonFiniteError(FloatingPointError):
    pass


class ForwardMode(str, Enum):
    TRAIN = "train"
    MC_SAMPLE = "mc_sample"
    DETERMINISTIC = "deterministic"

    @property
    def dropout_mode(self) -> nk.DropoutMode:
        return nk.DropoutMode.OFF if self is ForwardMode.DETERMINISTIC else nk.DropoutMode(self.value)


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    dropout_rate: float = 0.2
    input_channels: int = 1
    head_kernels: tuple[int, int] = (3, 1)
    upsample_conv_kernel: int = 5
    # optional spatial dropout on the raw-image channel handed to the heads
    # (off by default: it degrades the mean prediction and drowns the anomaly signal)
    input_skip_dropout: bool = False

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ValueError(f"levels, base_channels, input_channels must be >= 1: {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "head_kernels", tuple(self.head_kernels))

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def divisor(self) -> int:
        return 2**self.levels


def _layer_specs(cfg: UNetConfig):
    """Yield ``(name, in_ch, out_ch, kernel)`` for every conv, in parameter order."""
    specs = []
    prev = cfg.input_channels
    for i in range(cfg.levels):
        w = cfg.width(i)
        specs += [(f"enc{i}.conv1", prev, w, 3), (f"enc{i}.conv2", w, w, 3), (f"enc{i}.down", w, w, 3)]
        prev = w
    bott = cfg.width(cfg.levels)
    specs += [("bottleneck.conv1", prev, bott, 3), ("bottleneck.conv2", bott, bott, 3)]
    prev = bott
    for i in reversed(range(cfg.levels)):
        w = cfg.width(i)
        specs += [
            (f"dec{i}.up", prev, w, cfg.upsample_conv_kernel),
            (f"dec{i}.conv1", 2 * w, w, 3),
            (f"dec{i}.conv2", w, w, 3),
        ]
        prev = w
    k1, k2 = cfg.head_kernels
    head_in = cfg.width(0) + cfg.input_channels
    for head in ("head_mean", "head_logvar"):
        specs += [(f"{head}.conv_a", head_in, cfg.width(0), k1), (f"{head}.conv_b", cfg.width(0), 1, k2)]
    return specs


def build_model(config: UNetConfig, rng: RngStream) -> NetworkWeights:
    """He-initialized weights (std sqrt(2 / fan_in)), zero biases."""
    weights: NetworkWeights = {}
    for name, cin, cout, k in _layer_specs(config):
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.child(name).normal(0.0, std, size=(cout, cin, k, k))
        weights[f"{name}.weight"] = w.astype(np.float32)
        weights[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)
    return weights


def parameter_count(weights: NetworkWeights) -> int:
    return int(sum(p.size for p in weights.values()))


def _check_finite(arr: np.ndarray, layer: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by layer {layer!r}")


class _Net:
    """One forward pass with the bookkeeping needed for its backward pass."""

    def __init__(self, weights, config, mode, rng, keep_cache):
        self.w = weights
        self.cfg = config
        self.mode = ForwardMode(mode)
        self.rng = rng
        self.keep = keep_cache
        self.cache = {}

    def conv(self, name, h, stride=1, act=True, dropout=True, upsample=1):
        weight = self.w[f"{name}.weight"]
        if upsample > 1:
            out, conv_cache = nk.upsample_conv2d_forward(h, weight, self.w[f"{name}.bias"], upsample)
        else:
            pad = weight.shape[-1] // 2
            out, conv_cache = nk.conv2d_forward(h, weight, self.w[f"{name}.bias"], stride, pad)
        _check_finite(out, name)
        pre = out
        if act:
            out = nk.relu(out)
        scale = None
        if dropout:
            scale = nk.dropout_scale(out.shape, self.cfg.dropout_rate, self.mode.dropout_mode,
                                     self.rng, dtype=out.dtype.type)
            if scale is not None:
                out = out * scale
        if self.keep:
            self.cache[name] = (conv_cache, pre if act else None, scale, upsample > 1)
        return out

    def run(self, x):
        cfg = self.cfg
        skips = []
        h = x
        for i in range(cfg.levels):
            h = self.conv(f"enc{i}.conv1", h)
            h = self.conv(f"enc{i}.conv2", h)
            skips.append(h)
            h = self.conv(f"enc{i}.down", h, stride=2)
        h = self.conv("bottleneck.conv1", h)
        h = self.conv("bottleneck.conv2", h)
        for i in reversed(range(cfg.levels)):
            # nearest x2 upsample fused into the 5x5 conv
            h = self.conv(f"dec{i}.up", h, upsample=2)
            h = nk.concat_channels(h, skips[i])
            h = self.conv(f"dec{i}.conv1", h)
            h = self.conv(f"dec{i}.conv2", h)
        if cfg.input_skip_dropout:
            scale = nk.dropout_scale(x.shape, cfg.dropout_rate, self.mode.dropout_mode, self.rng,
                                     dtype=x.dtype.type)
            if scale is not None:
                x = x * scale
        h = nk.concat_channels(h, x)
        outs = []
        for head in ("head_mean", "head_logvar"):
            a = self.conv(f"{head}.conv_a", h, dropout=False)
            outs.append(self.conv(f"{head}.conv_b", a, act=False, dropout=False))
        y_hat, raw_logvar = outs
        lo, hi = LOG_VAR_BOUNDS
        log_sigma2 = np.clip(raw_logvar, lo, hi)
        if self.keep:
            self.cache["logvar_pass"] = (raw_logvar >= lo) & (raw_logvar <= hi)
        return y_hat, log_sigma2

    def conv_back(self, name, g, grads):
        conv_cache, pre, scale, fused = self.cache[name]
        if scale is not None:
            g = g * scale
        if pre is not None:
            g = nk.relu_grad(pre, g)
        back = nk.upsample_conv2d_backward if fused else nk.conv2d_backward
        gx, gw, gb = back(conv_cache, g)
        grads[f"{name}.weight"] = gw
        grads[f"{name}.bias"] = gb
        return gx

    def backward(self, g_y, g_logvar):
        cfg = self.cfg
        grads = {}
        g_logvar = g_logvar * self.cache["logvar_pass"]
        c0 = cfg.width(0)
        g_h = None
        for head, g in (("head_mean", g_y), ("head_logvar", g_logvar)):
            ga = self.conv_back(f"{head}.conv_b", g, grads)
            gh = self.conv_back(f"{head}.conv_a", ga, grads)
            g_h = gh if g_h is None else g_h + gh
        g_h, _ = nk.concat_channels_grad(g_h, c0)
        skip_grads = [None] * cfg.levels
        for i in range(cfg.levels):
            g_h = self.conv_back(f"dec{i}.conv2", g_h, grads)
            g_h = self.conv_back(f"dec{i}.conv1", g_h, grads)
            g_h, skip_grads[i] = nk.concat_channels_grad(g_h, cfg.width(i))
            g_h = self.conv_back(f"dec{i}.up", g_h, grads)
        g_h = self.conv_back("bottleneck.conv2", g_h, grads)
        g_h = self.conv_back("bottleneck.conv1", g_h, grads)
        for i in reversed(range(cfg.levels)):
            g_h = self.conv_back(f"enc{i}.down", g_h, grads)
            g_h = g_h + skip_grads[i]
            g_h = self.conv_back(f"enc{i}.conv2", g_h, grads)
            g_h = self.conv_back(f"enc{i}.conv1", g_h, grads)
        return {name: grads[name] for name in self.w}


def _validate_input(x: np.ndarray, config: UNetConfig):
    if x.ndim != 4 or x.shape[1] != config.input_channels:
        raise nk.ShapeError(f"expected input of shape (N, {config.input_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    d = config.divisor
    if h % d or w % d:
        raise nk.ShapeError(f"image extents {h}x{w} must be divisible by 2**levels = {d}")


def forward(weights: NetworkWeights, x: np.ndarray, mode: ForwardMode | str, rng: RngStream | None,
            config: UNetConfig):
    """Returns ``(y_hat, log_sigma2)``, both shaped like ``x``."""
    _validate_input(x, config)
    return _Net(weights, config, mode, rng, keep_cache=False).run(x)


def forward_with_cache(weights, x, mode, rng, config):
    """Like :func:`forward` but also returns the state needed by :func:`backward`."""
    _validate_input(x, config)
    net = _Net(weights, config, mode, rng, keep_cache=True)
    y_hat, log_sigma2 = net.run(x)
    return y_hat, log_sigma2, net


def backward(net: _Net, grad_y_hat: np.ndarray, grad_log_sigma2: np.ndarray) -> dict:
    """Parameter gradients given gradients w.r.t. both (clamped) head outputs."""
    return net.backward(grad_y_hat, grad_log_sigma2)


def save_checkpoint(weights: NetworkWeights, config: UNetConfig, directory, extra: dict | None = None):
    """Write one SCIV file per parameter plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (name, arr) in enumerate(weights.items()):
        fname = f"p{idx:03d}_{name}.sciv"
        write_volume(arr, directory / fname)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format": "scibilic-checkpoint", "version": 1, "config": asdict(config),
                "parameters": entries}
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    """Returns ``(weights, config, manifest)``."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    config = UNetConfig(**manifest["config"])
    weights: NetworkWeights = {}
    for entry in manifest["parameters"]:
        arr = np.asarray(read_volume(directory / entry["file"]))
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"parameter {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
        weights[entry["name"]] = arr
    return weights, config, manifest
