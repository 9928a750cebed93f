"""Heteroscedastic training loop: Gaussian NLL loss, AdamW, random patches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import unet
from .phantom import Dataset, Sample
from .rng import RngStream
from .unet import ForwardMode, UNetConfig

__all__ = [
    "TrainConfig",
    "OptimState",
    "Sample",
    "Dataset",
    "DivergenceError",
    "heteroscedastic_loss",
    "adamw_step",
    "sample_patches",
    "evaluate_loss",
    "train",
    "TrainResult",
]

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class DivergenceError(FloatingPointError):
    """Training went non-finite; ``result`` holds the best finite state reached so far."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 1e-6
    batch_size: int = 8
    epochs: int = 37
    batches_per_epoch: int = 128
    patch_size: tuple[int, int] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "patch_size", tuple(self.patch_size))
        if self.batch_size < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError(f"invalid batch/epoch counts in {self}")


@dataclass
class OptimState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, weights) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in weights.items()},
                   {k: np.zeros_like(p) for k, p in weights.items()}, 0)


def heteroscedastic_loss(y, y_hat, log_sigma2):
    """Mean of ``0.5 * exp(-s) * (y - y_hat)**2 + 0.5 * s`` over all elements.

    Returns ``(loss, grad_y_hat, grad_log_sigma2)``; the loss is a float64 scalar.
    """
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    log_sigma2 = np.asarray(log_sigma2)
    if not (y.shape == y_hat.shape == log_sigma2.shape):
        raise ValueError(f"shape mismatch: y {y.shape}, y_hat {y_hat.shape}, log_sigma2 {log_sigma2.shape}")
    m = y.size
    resid = y - y_hat
    precision = np.exp(-log_sigma2)
    sq = precision * resid * resid
    loss = 0.5 * (np.sum(sq, dtype=np.float64) + np.sum(log_sigma2, dtype=np.float64)) / m
    grad_y_hat = (-precision * resid / m).astype(y_hat.dtype, copy=False)
    grad_s = (0.5 * (1.0 - sq) / m).astype(log_sigma2.dtype, copy=False)
    return float(loss), grad_y_hat, grad_s


def adamw_step(weights: dict, grads: dict, state: OptimState, config: TrainConfig):
    """Bias-corrected Adam update with decoupled weight decay, in place.

    A non-finite gradient rejects the whole step before anything is modified.
    """
    for name, g in grads.items():
        if name not in weights or g.shape != weights[name].shape:
            raise ValueError(f"gradient {name!r} does not match a parameter")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}; step rejected")
    b1, b2 = config.betas
    lr, wd = config.learning_rate, config.weight_decay
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        w = weights[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + wd * w
        w -= (lr * update).astype(w.dtype, copy=False)
    return weights, state


def sample_patches(samples, config: TrainConfig, rng: RngStream):
    """Random co-located patches; returns ``(inputs, targets, offsets)``.

    ``inputs``/``targets`` are ``(batch, 1, ph, pw)``; offsets are
    ``(sample_index, row, col)`` triples.
    """
    ph, pw = config.patch_size
    eligible = []
    for i, s in enumerate(samples):
        h, w = s.input.shape
        if h < ph or w < pw:
            log.warning("sample %d (%dx%d) smaller than patch %dx%d; excluded", i, h, w, ph, pw)
            continue
        eligible.append(i)
    if not eligible:
        raise ValueError(f"no sample is at least {ph}x{pw}")
    n = config.batch_size
    xs = np.empty((n, 1, ph, pw), dtype=np.float32)
    ys = np.empty_like(xs)
    offsets = []
    for b in range(n):
        i = eligible[int(rng.integers(len(eligible)))]
        s = samples[i]
        h, w = s.input.shape
        r = int(rng.integers(h - ph + 1))
        c = int(rng.integers(w - pw + 1))
        xs[b, 0] = s.input[r:r + ph, c:c + pw]
        ys[b, 0] = s.target[r:r + ph, c:c + pw]
        offsets.append((i, r, c))
    return xs, ys, offsets


def evaluate_loss(weights, samples, model_config: UNetConfig) -> float:
    """Mean heteroscedastic loss over full images, dropout off."""
    if not samples:
        return float("nan")
    total = 0.0
    for s in samples:
        x = s.input[None, None]
        y_hat, log_s2 = unet.forward(weights, x, ForwardMode.DETERMINISTIC, None, model_config)
        total += heteroscedastic_loss(s.target[None, None], y_hat, log_s2)[0]
    return total / len(samples)


@dataclass
class TrainResult:
    weights: dict
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    final_weights: dict | None = None


def _copy(weights):
    return {k: v.copy() for k, v in weights.items()}


def train(weights, dataset: Dataset, model_config: UNetConfig, config: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Runs ``epochs x batches_per_epoch`` AdamW steps on random patches.

    Returns the weights with the lowest validation loss (training loss when
    there is no validation split). ``weights`` is updated in place.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    ph, pw = config.patch_size
    if ph % model_config.divisor or pw % model_config.divisor:
        raise ValueError(f"patch {ph}x{pw} not divisible by {model_config.divisor}")
    root = RngStream(config.seed).child("train")
    state = OptimState.zeros_like(weights)
    history = []
    best = (np.inf, _copy(weights), 0)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for b in range(config.batches_per_epoch):
            step_rng = root.child(epoch, b)
            xs, ys, _ = sample_patches(dataset.train, config, step_rng.child("patches"))
            try:
                y_hat, log_s2, net = unet.forward_with_cache(weights, xs, ForwardMode.TRAIN,
                                                             step_rng.child("dropout"), model_config)
                loss, g_y, g_s = heteroscedastic_loss(ys, y_hat, log_s2)
                if not np.isfinite(loss):
                    raise FloatingPointError("loss became non-finite")
                adamw_step(weights, unet.backward(net, g_y, g_s), state, config)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}",
                                      TrainResult(best[1], history, best[2])) from exc
            losses.append(loss)
        train_loss = float(np.mean(losses))
        try:
            val_loss = evaluate_loss(weights, dataset.validation, model_config)
        except FloatingPointError as exc:
            raise DivergenceError(f"validation at epoch {epoch}: {exc}",
                                  TrainResult(best[1], history, best[2])) from exc
        history.append((epoch, train_loss, val_loss))
        score = val_loss if dataset.validation else train_loss
        if not np.isfinite(score):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}",
                                  TrainResult(best[1], history, best[2]))
        if score < best[0]:
            best = (score, _copy(weights), epoch)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
    if config.epochs == 0:
        return TrainResult(_copy(weights), history, 0, weights)
    return TrainResult(best[1], history, best[2], weights)
