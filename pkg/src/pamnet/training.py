"""Hybrid time/frequency loss, Adam, early-stopped fitting and gradient checks."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import engine as E
from .engine import ConfigError, DimensionError, NumericError, Parameter, Tape, Tensor
from .model import ModelConfig, ModelParams, forward, init_params

log = logging.getLogger(__name__)

LOSS_MODES = ("hybrid", "mse", "mae")


@dataclass
class LossConfig:
    alpha: float = 0.25
    mode: str = "hybrid"

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; choose from {LOSS_MODES}")


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    wall_time: float = 0.0

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else float("inf")


# ------------------------------------------------------------------- losses


def _residual(Y: Tensor, Yhat: Tensor, name: str) -> Tensor:
    if Y.shape != Yhat.shape:
        raise DimensionError(f"{name}: target {Y.shape} and forecast {Yhat.shape} differ")
    return E.sub(Yhat, Y)


def time_mae(Y: Tensor, Yhat: Tensor) -> Tensor:
    """Mean |Y - Ŷ| over every horizon step and channel."""
    return E.mean_abs(_residual(Y, Yhat, "time_mae"))


def freq_mae(Y: Tensor, Yhat: Tensor) -> Tensor:
    """Mean modulus of DFT(Y) - DFT(Ŷ), transforms taken along the horizon axis."""
    return E.spectral_mean_abs(_residual(Y, Yhat, "freq_mae"), axis=-2)


def hybrid_loss(Y: Tensor, Yhat: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.mode == "mse":
        return E.mean_square(_residual(Y, Yhat, "mse"))
    if cfg.mode == "mae" or cfg.alpha == 0:
        return time_mae(Y, Yhat)
    if cfg.alpha == 1:
        return freq_mae(Y, Yhat)
    return E.add(E.scale(time_mae(Y, Yhat), 1 - cfg.alpha), E.scale(freq_mae(Y, Yhat), cfg.alpha))


# ---------------------------------------------------------------------- adam


def adam_step(params: ModelParams, state: AdamState, cfg: OptimConfig) -> None:
    """One bias-corrected Adam update on every trainable parameter, then zero grads."""
    plist = params.trainable() if isinstance(params, ModelParams) else list(params)
    for p in plist:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {p.name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    updates = {}
    for p in plist:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        if not np.all(np.isfinite(step)):
            raise NumericError(f"non-finite Adam update for {p.name}")
        updates[p.name] = step
    for p in plist:
        p.data -= updates[p.name].astype(p.data.dtype)
        p.zero_grad()


# ----------------------------------------------------------------------- fit


def batch_loss(params, config, X, Y, tau_end, loss_cfg, rng=None, training=False) -> Tensor:
    Yhat, _ = forward(params, config, Tensor(X), tau_end, rng=rng, training=training)
    return hybrid_loss(Tensor(Y, dtype=Yhat.data.dtype), Yhat, loss_cfg)


def evaluate_loss(params, config, batch, loss_cfg, batch_size: int = 256) -> float:
    """Window-averaged loss with dropout off."""
    total = 0.0
    n = len(batch)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        loss = batch_loss(params, config, batch.X[lo:hi], batch.Y[lo:hi], batch.tau_end[lo:hi], loss_cfg)
        total += loss.item() * (hi - lo)
    return total / n


def fit(
    params: ModelParams,
    config: ModelConfig,
    train,
    val,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig,
    seed: int,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> TrainReport:
    """Shuffled mini-batch Adam with early stopping on validation loss.

    ``train`` and ``val`` are WindowBatch-like (``X``, ``Y``, ``tau_end``
    arrays, ``len``).  On return ``params`` hold the best-validation
    snapshot.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("train and validation splits must both contain windows")
    rng = np.random.default_rng([int(seed), 1])
    drop_rng = np.random.default_rng([int(seed), 2])
    state = AdamState()
    report = TrainReport()
    best = float("inf")
    best_snap = params.snapshot()
    wait = 0
    t0 = time.perf_counter()
    params.zero_grad()
    bs = optim_cfg.batch_size

    for epoch in range(1, optim_cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        running = 0.0
        for lo in range(0, len(order), bs):
            idx = np.sort(order[lo : lo + bs])
            with Tape() as tape:
                loss = batch_loss(
                    params, config, train.X[idx], train.Y[idx], train.tau_end[idx], loss_cfg, drop_rng, True
                )
            tape.backward(loss)
            adam_step(params, state, optim_cfg)
            running += loss.item() * len(idx)
        train_loss = running / len(train)
        val_loss = evaluate_loss(params, config, val, loss_cfg)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best:
            best = val_loss
            best_snap = params.snapshot()
            report.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= optim_cfg.patience:
                report.stopped_early = True
                break

    params.restore(best_snap)
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both vanish."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(lookback=8, horizon=4, channels=3, embed_dim=6, cycle_len=12, dropout_rate=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def grad_check(
    config: ModelConfig,
    loss_cfg: LossConfig,
    seed: int = 0,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    tamper: Optional[Callable[[dict], None]] = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences on one random window.

    Runs in float64 with dropout forced off.  ``tamper`` may edit the analytic
    gradients (name -> array) before comparison.
    """
    config = replace(config, dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    with E.precision(np.float64):
        params = init_params(config, seed)
        X = rng.uniform(-2, 2, size=(config.lookback, config.channels))
        Y = rng.uniform(-2, 2, size=(config.horizon, config.channels))
        tau_end = int(rng.integers(0, 10 * config.cycle_len))

        def loss_value() -> float:
            return batch_loss(params, config, X, Y, tau_end, loss_cfg).item()

        params.zero_grad()
        with Tape() as tape:
            loss = batch_loss(params, config, X, Y, tau_end, loss_cfg)
        tape.backward(loss)
        analytic = {p.name: p.grad.copy() for p in params.trainable()}
        if tamper is not None:
            tamper(analytic)

        errors = {}
        for p in params.trainable():
            numeric = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_value()
                flat[i] = orig - step
                down = loss_value()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            errors[p.name] = relative_error(analytic[p.name], numeric)
    return GradCheckReport(errors=errors, tolerance=tolerance)
