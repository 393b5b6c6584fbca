"""Conditional diffusion mathematics for feature denoising.

The forward process interpolates a clean feature x0 toward the distorted
received feature y while injecting Gaussian noise; the reverse chain removes
the predicted mixed noise step by step. All per-step quantities are
precomputed at schedule construction and validated there, so samplers never
have to branch on degenerate values.

Index convention: schedule arrays are length T and 0-indexed, entry i
corresponding to step t = i + 1. Boundary values m_0 = 0, delta_0 = 0,
alpha_bar_0 = 1 are implicit in the derivations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericalAbortError
from .feature_core import FeatureMap

# Six-level fast inference schedule used at test time.
FAST_SCHEDULE_LEVELS = (0.0001, 0.001, 0.01, 0.05, 0.2, 0.35)

# Noise-estimator callable: (x_t data, y data, training step t) -> estimate.
Predictor = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step quantities of the conditional diffusion process.

    Arrays (all length T, index t-1):
      betas, alphas          noise schedule and its complement
      alpha_bar              running product of alphas
      m                      interpolation ratio toward y, m_0 = 0, m_T ~ 1
      delta                  forward variance
      delta_cond             one-step conditional variance
      delta_tilde            reverse-process variance (0 at t = 1)
      c_x, c_y, c_eps        reverse-mean coefficients
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    m: np.ndarray
    delta: np.ndarray
    delta_cond: np.ndarray
    delta_tilde: np.ndarray
    c_x: np.ndarray
    c_y: np.ndarray
    c_eps: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bar", "m", "delta",
                     "delta_cond", "delta_tilde", "c_x", "c_y", "c_eps"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.betas.size

    def to_csv(self, path: str | Path) -> None:
        """Export the schedule for golden-file comparison."""
        with open(path, "w") as fh:
            fh.write("t,beta,alpha_bar,m,delta,delta_cond,delta_tilde,"
                     "c_x,c_y,c_eps\n")
            for i in range(self.T):
                fh.write(",".join([str(i + 1)] + [
                    repr(float(a[i])) for a in (
                        self.betas, self.alpha_bar, self.m, self.delta,
                        self.delta_cond, self.delta_tilde,
                        self.c_x, self.c_y, self.c_eps)]) + "\n")


def derive_schedule_arrays(betas: np.ndarray, m: np.ndarray | None = None
                           ) -> dict[str, np.ndarray]:
    """Derive every schedule quantity from betas (and optionally a forced m).

    Passing an explicit m (e.g. all zeros) reduces the reverse coefficients
    to the standard unconditional posterior, which is how the reduction is
    verified in tests.
    """
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ConfigurationError("betas must be a non-empty 1-d array")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ConfigurationError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    if m is None:
        m = np.sqrt((1.0 - alpha_bar) / np.sqrt(alpha_bar))
    else:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != betas.shape:
            raise ConfigurationError("m must match betas in length")
    delta = (1.0 - alpha_bar) - m ** 2 * alpha_bar

    # Previous-step values with the t=0 boundary prepended.
    m_prev = np.concatenate([[0.0], m[:-1]])
    delta_prev = np.concatenate([[0.0], delta[:-1]])
    ab_prev = np.concatenate([[1.0], alpha_bar[:-1]])

    ratio = (1.0 - m) / (1.0 - m_prev)
    delta_cond = delta - ratio ** 2 * alphas * delta_prev
    with np.errstate(divide="ignore", invalid="ignore"):
        delta_tilde = np.where(delta_prev > 0,
                               delta_cond * delta / np.where(delta_prev > 0,
                                                             delta_prev, 1.0),
                               0.0)

    sqrt_a = np.sqrt(alphas)
    c_x = ratio * (delta_prev / delta) * sqrt_a \
        + (1.0 - m_prev) * (delta_cond / delta) / sqrt_a
    c_y = (m_prev * delta - (m * (1.0 - m) / (1.0 - m_prev))
           * alphas * delta_prev) * np.sqrt(ab_prev) / delta
    c_eps = (1.0 - m_prev) * (delta_cond / delta) \
        * np.sqrt(1.0 - alpha_bar) / sqrt_a

    return {"betas": betas, "alphas": alphas, "alpha_bar": alpha_bar,
            "m": m, "delta": delta, "delta_cond": delta_cond,
            "delta_tilde": delta_tilde, "c_x": c_x, "c_y": c_y,
            "c_eps": c_eps}


def _validate_schedule(arrs: dict[str, np.ndarray]) -> None:
    betas, alpha_bar = arrs["betas"], arrs["alpha_bar"]
    if np.any(np.diff(betas) < 0):
        raise ConfigurationError("betas must be non-decreasing")
    if np.any(np.diff(alpha_bar) >= 0):
        raise ConfigurationError("alpha_bar must be strictly decreasing")
    if np.any(np.diff(arrs["m"]) < 0):
        raise ConfigurationError("m must be non-decreasing")
    for name in ("delta", "delta_cond", "delta_tilde"):
        if np.any(arrs[name] < 0):
            raise ConfigurationError(f"schedule rejected: {name} < 0")
    ident = (1.0 - alpha_bar) * (1.0 - np.sqrt(alpha_bar))
    if np.max(np.abs(arrs["delta"] - ident)) > 1e-12:
        raise ConfigurationError("delta identity check failed")


def build_schedule(T: int, beta_min: float, beta_max: float
                   ) -> DiffusionSchedule:
    """Build a linearly spaced schedule and verify its invariants."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ConfigurationError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T)
    arrs = derive_schedule_arrays(betas)
    _validate_schedule(arrs)
    return DiffusionSchedule(**arrs)


def schedule_from_betas(betas: np.ndarray) -> DiffusionSchedule:
    """Build a schedule from an explicit beta sequence (validated)."""
    arrs = derive_schedule_arrays(np.asarray(betas, dtype=np.float64))
    _validate_schedule(arrs)
    return DiffusionSchedule(**arrs)


@dataclass(frozen=True)
class InferenceSchedule:
    """Fast-sampling schedule: a short beta sequence plus the map from each
    of its levels to the nearest training step (by alpha_bar), used to pick
    the conditioning step for the noise estimator."""

    levels: tuple[float, ...]
    steps: DiffusionSchedule
    train_step_map: tuple[int, ...]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def build_inference_schedule(levels, train_sched: DiffusionSchedule
                             ) -> InferenceSchedule:
    levels = tuple(float(v) for v in levels)
    if len(levels) < 1:
        raise ConfigurationError("inference schedule needs >= 1 level")
    if any(b >= a for a, b in zip(levels[1:], levels[:-1])):
        raise ConfigurationError("inference levels must be strictly increasing")
    steps = schedule_from_betas(np.asarray(levels))
    mapped = []
    for ab in steps.alpha_bar:
        mapped.append(int(np.argmin(np.abs(train_sched.alpha_bar - ab))) + 1)
    for a, b in zip(mapped, mapped[1:]):
        if b <= a:
            raise ConfigurationError(
                f"inference levels map to non-increasing steps {mapped}")
    return InferenceSchedule(levels, steps, tuple(mapped))


def _check_step(t: int, sched: DiffusionSchedule) -> int:
    if not 1 <= t <= sched.T:
        raise ConfigurationError(f"step t={t} outside 1..{sched.T}")
    return t - 1


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureMap) else np.asarray(x, dtype=np.float64)


def forward_diffuse(x0: FeatureMap, y: FeatureMap, t: int,
                    sched: DiffusionSchedule, rng_seed: int
                    ) -> tuple[FeatureMap, np.ndarray]:
    """Draw x_t ~ q(x_t | x0, y) and return it with the noise that was used."""
    if x0.shape != y.shape:
        raise ConfigurationError("x0 and y shapes differ")
    i = _check_step(t, sched)
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal(x0.data.shape)
    sab = np.sqrt(sched.alpha_bar[i])
    xt = (1.0 - sched.m[i]) * sab * x0.data + sched.m[i] * sab * y.data \
        + np.sqrt(sched.delta[i]) * eps
    return x0.with_data(xt), eps


def training_target(x0: FeatureMap, y: FeatureMap, eps: np.ndarray, t: int,
                    sched: DiffusionSchedule) -> np.ndarray:
    """The mixed-noise tensor the estimator must regress to under L2."""
    if x0.shape != y.shape:
        raise ConfigurationError("x0 and y shapes differ")
    i = _check_step(t, sched)
    denom = np.sqrt(1.0 - sched.alpha_bar[i])
    return (sched.m[i] * np.sqrt(sched.alpha_bar[i]) * (y.data - x0.data)
            + np.sqrt(sched.delta[i]) * eps) / denom


def implied_mixed_noise(x_t, x0, t: int, sched: DiffusionSchedule
                        ) -> np.ndarray:
    """Exact mixed noise contained in a given x_t when x0 is known.

    This is the oracle estimator: x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) * mix.
    """
    i = _check_step(t, sched)
    xt = _as_array(x_t)
    return (xt - np.sqrt(sched.alpha_bar[i]) * _as_array(x0)) \
        / np.sqrt(1.0 - sched.alpha_bar[i])


def reverse_step(x_t, y, t: int, eps_hat, sched: DiffusionSchedule,
                 rng_seed: int):
    """One reverse transition x_t -> x_{t-1}; noiseless at t = 1."""
    i = _check_step(t, sched)
    xt, yd, eh = _as_array(x_t), _as_array(y), _as_array(eps_hat)
    if xt.shape != yd.shape or xt.shape != eh.shape:
        raise ConfigurationError("reverse_step shapes differ")
    mean = sched.c_x[i] * xt + sched.c_y[i] * yd - sched.c_eps[i] * eh
    if t > 1 and sched.delta_tilde[i] > 0:
        rng = np.random.default_rng(rng_seed)
        mean = mean + np.sqrt(sched.delta_tilde[i]) \
            * rng.standard_normal(xt.shape)
    if isinstance(x_t, FeatureMap):
        return x_t.with_data(mean)
    return mean


def denoise(y: FeatureMap, predictor: Predictor,
            infer_sched: InferenceSchedule, sched: DiffusionSchedule,
            rng_seed: int) -> FeatureMap:
    """Run the fast reverse chain on a received feature map.

    The chain starts from the top inference level with the unknown clean
    feature set to y itself (x_T = sqrt(ab) y + sqrt(delta) z) and walks the
    short schedule down, conditioning every estimator call on y and on the
    nearest-alpha_bar training step.
    """
    rng = np.random.default_rng(rng_seed)
    fast = infer_sched.steps
    top = fast.T - 1
    x = np.sqrt(fast.alpha_bar[top]) * y.data \
        + np.sqrt(fast.delta[top]) * rng.standard_normal(y.data.shape)
    for s in range(fast.T, 0, -1):
        t_train = infer_sched.train_step_map[s - 1]
        eps_hat = predictor(x, y.data, t_train)
        x = reverse_step(x, y.data, s, eps_hat, fast,
                         int(rng.integers(2 ** 63)))
    if not np.all(np.isfinite(x)):
        raise NumericalAbortError("reverse chain produced non-finite values")
    return y.with_data(x)


def oracle_denoise(y: FeatureMap, x0: FeatureMap,
                   sched: DiffusionSchedule, rng_seed: int) -> FeatureMap:
    """Full-length reverse chain fed the analytic mixed-noise target.

    Starts from a forward-diffused x_T and substitutes the exact mixed noise
    for the estimator at every step; used to verify the chain algebra
    end to end without any learned component.
    """
    rng = np.random.default_rng(rng_seed)
    x_t, _ = forward_diffuse(x0, y, sched.T, sched,
                             int(rng.integers(2 ** 63)))
    x = x_t.data
    for t in range(sched.T, 0, -1):
        eps = implied_mixed_noise(x, x0.data, t, sched)
        x = reverse_step(x, y.data, t, eps, sched,
                         int(rng.integers(2 ** 63)))
    return y.with_data(x)
