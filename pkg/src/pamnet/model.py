"""PAMNet forward graph: instance norm, variate tokens, dual carriers, modulators, head."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import engine as E
from .engine import ConfigError, DimensionError, NumericError, Parameter, Tensor

DROPOUT_AFTER_PRODUCT = "after_product"
DROPOUT_BEFORE_PRODUCT = "before_product"


@dataclass
class ModelConfig:
    lookback: int = 96
    horizon: int = 96
    channels: int = 7
    embed_dim: int = 512
    cycle_len: int = 24
    dropout_rate: float = 0.5
    activation: str = "silu"
    use_phase: bool = True
    use_amplitude: bool = True
    sinusoidal_carriers: bool = False
    use_modulator: bool = True
    share_modulator_weights: bool = False
    instance_norm: bool = True
    norm_eps: float = 1e-5
    dropout_placement: str = DROPOUT_AFTER_PRODUCT

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("lookback", "horizon", "channels", "embed_dim", "cycle_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation not in E.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(E.ACTIVATIONS)}")
        if self.use_modulator and not (self.use_phase or self.use_amplitude):
            raise ConfigError("use_modulator requires use_phase or use_amplitude")
        if self.dropout_placement not in (DROPOUT_AFTER_PRODUCT, DROPOUT_BEFORE_PRODUCT):
            raise ConfigError(f"unknown dropout_placement {self.dropout_placement!r}")

    @property
    def phase_on(self) -> bool:
        return self.use_modulator and self.use_phase

    @property
    def amplitude_on(self) -> bool:
        return self.use_modulator and self.use_amplitude

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModulatorParams:
    W1: Parameter
    W2: Parameter
    W3: Parameter


@dataclass
class CarrierBank:
    phase: Optional[Parameter] = None
    amplitude: Optional[Parameter] = None


@dataclass
class ModelParams:
    W: Parameter
    b: Parameter
    carriers: CarrierBank
    phase_mod: Optional[ModulatorParams]
    amp_mod: Optional[ModulatorParams]
    head_hidden_W: Parameter
    head_hidden_b: Parameter
    head_out_W: Parameter
    head_out_b: Parameter

    def named(self) -> dict[str, Parameter]:
        """All parameters by name, each object listed once."""
        out: dict[str, Parameter] = {}
        for p in self._all():
            if p is not None and p.name not in out:
                out[p.name] = p
        return out

    def trainable(self) -> list[Parameter]:
        return [p for p in self.named().values() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.named().values():
            p.zero_grad()

    def _all(self):
        yield self.W
        yield self.b
        yield self.carriers.phase
        yield self.carriers.amplitude
        for mod in (self.phase_mod, self.amp_mod):
            if mod is not None:
                yield mod.W1
                yield mod.W2
                yield mod.W3
        yield self.head_hidden_W
        yield self.head_hidden_b
        yield self.head_out_W
        yield self.head_out_b

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, p in self.named().items():
            p.data[...] = snap[k]


@dataclass
class Activations:
    E_X: np.ndarray
    E_P: Optional[np.ndarray]
    E_A: Optional[np.ndarray]
    M_P: Optional[np.ndarray]
    M_A: Optional[np.ndarray]
    M_X: np.ndarray
    norm_mu: Optional[np.ndarray] = None
    norm_sigma: Optional[np.ndarray] = None
    cycle_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


# ------------------------------------------------------------------ init


def xavier_std(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name, so toggling a path does not shift the others
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _xavier(seed: int, name: str, rows: int, cols: int) -> Parameter:
    draws = param_rng(seed, name).normal(0.0, xavier_std(rows, cols), size=(rows, cols))
    return Parameter(draws, name)


def _zeros(name: str, n: int) -> Parameter:
    return Parameter(np.zeros(n), name)


def sinusoidal_table(c: int, d: int) -> np.ndarray:
    """Row t = [sin(2πt/c·1), cos(2πt/c·1), sin(2πt/c·2), cos(...), ...], truncated to d."""
    t = np.arange(c)[:, None]
    freqs = np.arange(1, (d + 1) // 2 + 1)[None, :]
    ang = 2 * np.pi * t / c * freqs
    table = np.empty((c, 2 * freqs.shape[1]))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table[:, :d]


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Xavier-normal weights, zero biases; deterministic in (config, seed).

    Carrier banks and modulators exist only for enabled paths.
    """
    config.validate()
    L, H, N, d, c = config.lookback, config.horizon, config.channels, config.embed_dim, config.cycle_len
    carriers = CarrierBank()
    if config.sinusoidal_carriers:
        table = sinusoidal_table(c, d)
        if config.phase_on:
            carriers.phase = Parameter(table, "carrier.phase", frozen=True)
        if config.amplitude_on:
            carriers.amplitude = Parameter(np.tile(table, (1, N)), "carrier.amplitude", frozen=True)
    else:
        if config.phase_on:
            carriers.phase = _xavier(seed, "carrier.phase", c, d)
        if config.amplitude_on:
            carriers.amplitude = _xavier(seed, "carrier.amplitude", c, N * d)

    def modulator(prefix: str) -> ModulatorParams:
        return ModulatorParams(*(_xavier(seed, f"{prefix}.W{i}", d, d) for i in (1, 2, 3)))

    phase_mod = modulator("phase_mod") if config.phase_on else None
    amp_mod = None
    if config.amplitude_on:
        if config.share_modulator_weights:
            amp_mod = phase_mod if phase_mod is not None else modulator("phase_mod")
        else:
            amp_mod = modulator("amp_mod")

    return ModelParams(
        W=_xavier(seed, "tokenizer.W", L, d),
        b=_zeros("tokenizer.b", d),
        carriers=carriers,
        phase_mod=phase_mod,
        amp_mod=amp_mod,
        head_hidden_W=_xavier(seed, "head.hidden.W", d, d),
        head_hidden_b=_zeros("head.hidden.b", d),
        head_out_W=_xavier(seed, "head.out.W", d, H),
        head_out_b=_zeros("head.out.b", H),
    )


# ------------------------------------------------------------ graph pieces


def cycle_index(tau_end: int, c: int) -> int:
    if c < 1:
        raise ConfigError(f"cycle length must be >= 1, got {c}")
    return int(tau_end) % int(c)


def instance_normalize(X: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel standardization over the time axis.

    Returns the normalized tensor plus per-channel mean and (population)
    std, each shaped (N,) for a single L×N window or (B, N) for a batch.
    """
    Xn, mu, s = E.instance_norm(X, eps)
    sigma = np.sqrt(np.maximum(s.data.astype(np.float64) ** 2 - eps, 0.0))
    return Xn, Tensor(np.squeeze(mu.data, -2), dtype=X.data.dtype), Tensor(np.squeeze(sigma, -2), dtype=X.data.dtype)


def instance_denormalize(Yhat: Tensor, mu: Tensor, sigma: Tensor, eps: float = 1e-5) -> Tensor:
    """Invert ``instance_normalize``: Ŷ·sqrt(σ² + eps) + μ."""
    if mu.shape != sigma.shape or mu.shape[-1] != Yhat.shape[-1]:
        raise DimensionError(f"denormalize: stats {mu.shape}/{sigma.shape} do not fit {Yhat.shape}")
    s = np.sqrt(sigma.data.astype(np.float64) ** 2 + eps)
    out = Yhat.data * np.expand_dims(s, -2) + np.expand_dims(mu.data, -2)
    return Tensor(out, dtype=Yhat.data.dtype)


def variate_tokenize(X: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """E_X = Xᵀ·W + b: each channel's look-back window becomes one d-dim token."""
    if X.shape[-2] != W.shape[0]:
        raise DimensionError(f"tokenize: window {X.shape} does not fit weight {W.shape}")
    return E.add_bias(E.matmul(E.transpose(X), W), b)


def phase_carrier(table: Tensor, t, N: int) -> Tensor:
    """Row(s) t of the phase table, repeated for every channel -> N×d (or B×N×d)."""
    if np.ndim(t) == 0:
        return E.repeat_rows(E.reshape(E.gather_row(table, int(t)), (table.shape[1],)), N)
    return E.repeat_rows(E.gather_rows(table, t), N)


def amplitude_carrier(table: Tensor, t, N: int, d: int) -> Tensor:
    """Row(s) t of the amplitude table reshaped row-major to N×d (or B×N×d)."""
    if table.shape[1] != N * d:
        raise DimensionError(f"amplitude table rows have {table.shape[1]} entries, need {N}*{d}")
    if np.ndim(t) == 0:
        return E.reshape(E.gather_row(table, int(t)), (N, d))
    rows = E.gather_rows(table, t)
    return E.reshape(rows, (rows.shape[0], N, d))


def modulate(
    E_X: Tensor,
    S: Tensor,
    params: ModulatorParams,
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """W3(Dropout(act(E_X·W1) ⊙ (S·W2))).

    With ``dropout_placement='before_product'`` dropout is applied to
    act(E_X·W1) instead.
    """
    E._same_shape(E_X, S, "modulate")
    act = E.ACTIVATIONS[config.activation]
    base = act(E.matmul(E_X, params.W1))
    carrier = E.matmul(S, params.W2)
    rate = config.dropout_rate
    if config.dropout_placement == DROPOUT_BEFORE_PRODUCT:
        gated = E.hadamard(E.dropout(base, rate, rng, training), carrier)
    else:
        gated = E.dropout(E.hadamard(base, carrier), rate, rng, training)
    return E.matmul(gated, params.W3)


def head(M_X: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    act = E.ACTIVATIONS[config.activation]
    hidden = act(E.add_bias(E.matmul(M_X, params.head_hidden_W), params.head_hidden_b))
    return E.add_bias(E.matmul(hidden, params.head_out_W), params.head_out_b)


def _finite(t: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values after {stage}")
    return t


def forward(
    params: ModelParams,
    config: ModelConfig,
    X,
    tau_end,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> tuple[Tensor, Activations]:
    """Forecast H×N from one L×N window, or B×H×N from a B×L×N batch.

    ``tau_end`` is the absolute row of the last observed step (one integer,
    or a sequence of B integers for a batch).
    """
    if not isinstance(X, Tensor):
        X = Tensor(X)
    L, N, d = config.lookback, config.channels, config.embed_dim
    if X.shape[-2:] != (L, N):
        raise DimensionError(f"input window {X.shape} does not match L={L}, N={N}")
    batched = X.data.ndim == 3
    if batched:
        t = np.array([cycle_index(v, config.cycle_len) for v in np.asarray(tau_end).reshape(-1)])
        if t.shape[0] != X.shape[0]:
            raise DimensionError(f"{t.shape[0]} cycle positions for a batch of {X.shape[0]}")
    else:
        t = cycle_index(int(tau_end), config.cycle_len)
    if training and config.dropout_rate > 0 and rng is None:
        raise ConfigError("training forward with dropout needs an rng")

    mu = s = None
    if config.instance_norm:
        X, mu, s = E.instance_norm(X, config.norm_eps)
        _finite(X, "instance_norm")
    E_X = _finite(variate_tokenize(X, params.W, params.b), "variate_tokenize")

    E_P = E_A = M_P = M_A = None
    if config.use_modulator:
        if config.phase_on:
            E_P = phase_carrier(params.carriers.phase, t, N)
            M_P = _finite(modulate(E_X, E_P, params.phase_mod, config, rng, training), "phase modulation")
        if config.amplitude_on:
            E_A = amplitude_carrier(params.carriers.amplitude, t, N, d)
            M_A = _finite(modulate(E_X, E_A, params.amp_mod, config, rng, training), "amplitude modulation")
        M_X = M_P if M_A is None else (M_A if M_P is None else E.add(M_P, M_A))
    else:
        M_X = E_X

    Y = E.transpose(_finite(head(M_X, params, config), "head"))
    if config.instance_norm:
        Y = _finite(E.denormalize(Y, mu, s), "instance_denormalize")

    acts = Activations(
        E_X=E_X.data,
        E_P=None if E_P is None else E_P.data,
        E_A=None if E_A is None else E_A.data,
        M_P=None if M_P is None else M_P.data,
        M_A=None if M_A is None else M_A.data,
        M_X=M_X.data,
        cycle_index=np.atleast_1d(t),
    )
    if mu is not None:
        acts.norm_mu = np.squeeze(mu.data, -2)
        acts.norm_sigma = np.sqrt(np.maximum(np.squeeze(s.data, -2).astype(np.float64) ** 2 - config.norm_eps, 0.0))
    return Y, acts


def predict(params: ModelParams, config: ModelConfig, X: np.ndarray, tau_end: Sequence[int]) -> np.ndarray:
    """Eval-mode batched forecast as a plain array (no tape)."""
    Y, _ = forward(params, config, Tensor(X), tau_end, training=False)
    return Y.data
