"""Deterministic DDIM sampling over a descending timestep grid.

A trajectory holds the full state history: n iterations over a grid of
n + 1 timesteps running from high noise (t = T) down to t = 0. Iteration
i (1-based, counted from the noisy end) consumes the state at
timesteps[i-1] and produces the state at timesteps[i]. One denoiser
evaluation per real iteration; nfe counts exactly those.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, OrderingError
from .schedule import NoiseSchedule


@dataclass
class Trajectory:
    """States for one run, ordered from t = T down to t = 0."""

    timesteps: np.ndarray                    # (n + 1,) descending ints
    states: np.ndarray                       # (n + 1, d)
    eps: dict = field(repr=False, default_factory=dict)   # keyed by eval timestep
    nfe: int = 0
    approximated: tuple = ()                 # iteration indices replaced by approximations
    fallbacks: tuple = ()                    # approximation attempts that fell back to real steps
    seed: int | None = None

    @property
    def iterations(self) -> int:
        return len(self.timesteps) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def make_timesteps(t_train: int, n_steps: int) -> np.ndarray:
    """Evenly spaced descending grid from t_train to 0 with n_steps + 1 points."""
    if n_steps < 1:
        raise OrderingError("need at least one sampling step")
    ts = np.rint(np.linspace(t_train, 0, n_steps + 1)).astype(np.int64)
    if not np.all(np.diff(ts) < 0):
        raise OrderingError(
            f"{n_steps} steps cannot be placed distinctly on 0..{t_train}"
        )
    return ts


def check_timesteps(timesteps, t_train: int) -> np.ndarray:
    ts = np.asarray(timesteps, dtype=np.int64)
    if ts.ndim != 1 or ts.shape[0] < 2:
        raise OrderingError("timesteps must be a sequence of at least 2 indices")
    if not np.all(np.diff(ts) < 0):
        raise OrderingError("timesteps must be strictly descending")
    if ts[0] > t_train or ts[-1] < 0:
        raise OrderingError(
            f"timesteps must lie within [0, {t_train}], got [{ts[-1]}, {ts[0]}]"
        )
    return ts


def ddim_step(x, eps, schedule: NoiseSchedule, t: int, t_prev: int) -> np.ndarray:
    """One deterministic update from timestep t to t_prev < t.

    Reconstructs x0_hat from the noise prediction, then re-corrupts it to
    the t_prev noise level along the same predicted direction.
    """
    if t_prev >= t:
        raise OrderingError(f"t_prev must be below t, got t={t}, t_prev={t_prev}")
    if not 1 <= t <= schedule.t_train or t_prev < 0:
        raise IndexError(f"step {t} -> {t_prev} outside schedule 0..{schedule.t_train}")
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape or x.ndim != 1:
        raise ValueError(f"state/noise shape mismatch: {x.shape} vs {eps.shape}")
    s = schedule
    x0 = (x - s.sqrt_one_minus_alpha_bar[t] * eps) / s.sqrt_alpha_bar[t]
    out = s.sqrt_alpha_bar[t_prev] * x0 + s.sqrt_one_minus_alpha_bar[t_prev] * eps
    if not np.all(np.isfinite(out)):
        raise NumericError(f"ddim_step produced non-finite state at t={t}")
    return out


def initial_noise(dim: int, seed: int) -> np.ndarray:
    """Standard normal starting state from a recorded 64-bit seed."""
    return np.random.default_rng(seed).standard_normal(dim)


def sample_full(denoiser, schedule: NoiseSchedule, x_init, timesteps,
                seed: int | None = None) -> Trajectory:
    """Run every iteration through the denoiser."""
    ts = check_timesteps(timesteps, schedule.t_train)
    x = np.asarray(x_init, dtype=np.float64)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise NumericError("x_init must be a finite vector")
    states = [x]
    eps_cache = {}
    for i in range(1, len(ts)):
        t, t_prev = int(ts[i - 1]), int(ts[i])
        eps = denoiser.epsilon_hat(states[-1], t)
        eps_cache[t] = eps
        states.append(ddim_step(states[-1], eps, schedule, t, t_prev))
    return Trajectory(timesteps=ts, states=np.asarray(states), eps=eps_cache,
                      nfe=len(ts) - 1, seed=seed)


def sample_skipping(denoiser, schedule: NoiseSchedule, x_init, timesteps,
                    skipped, seed: int | None = None) -> Trajectory:
    """Baseline that simply drops grid positions instead of approximating.

    `skipped` holds interior positions into `timesteps` (the endpoints at
    t = T and t = 0 stay). The run is sample_full on the surviving grid,
    so an empty set reproduces sample_full bit for bit.
    """
    ts = check_timesteps(timesteps, schedule.t_train)
    n = len(ts) - 1
    positions = sorted({int(p) for p in skipped})
    for p in positions:
        if not 1 <= p <= n - 1:
            raise ValueError(
                f"only interior grid positions 1..{n - 1} can be skipped, got {p}"
            )
    keep = [j for j in range(n + 1) if j not in set(positions)]
    return sample_full(denoiser, schedule, x_init, ts[keep], seed=seed)
