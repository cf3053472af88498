"""Denoisers with closed-form noise predictions, plus recorded traces.

Every denoiser exposes epsilon_hat(x, t): the predicted noise for state x
at timestep t under a shared noise schedule. Three families:

* PointMassDenoiser: the data distribution is a single point mu, so the
  posterior mean is mu at every (x, t) and epsilon_hat inverts the
  forward corruption exactly.
* DiagGmmDenoiser: the data distribution is a mixture of axis-aligned
  Gaussians. The corrupted marginal at t is again a diagonal mixture with
  means sqrt(alpha_bar_t) * mu_k and variances
  alpha_bar_t * sigma_k^2 + (1 - alpha_bar_t), and
  epsilon_hat = -sqrt(1 - alpha_bar_t) * grad log p_t(x). Component
  responsibilities go through log-sum-exp so far-field states cannot
  overflow.
* RecordedTraceDenoiser: replays externally dumped epsilon_hat vectors
  keyed by (seed, t), read from a checksummed manifest + raw float32 file.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, TraceError, TraceExhaustedError
from .schedule import NoiseSchedule

_MANIFEST_KEYS = ("dim", "steps", "seeds", "data", "endian", "crc32")


def _check_state(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dim:
        raise ValueError(f"state must be a vector of dim {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("state contains non-finite entries")
    return x


def _check_t(t: int, t_train: int):
    if not 1 <= t <= t_train:
        raise IndexError(f"epsilon_hat is defined for 1 <= t <= {t_train}, got t={t}")


class PointMassDenoiser:
    """All probability mass at a single point mu."""

    def __init__(self, mu, schedule: NoiseSchedule):
        self.mu = np.array(mu, dtype=np.float64)
        if self.mu.ndim != 1 or not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be a finite vector")
        self.schedule = schedule
        self.dim = self.mu.shape[0]

    def epsilon_hat(self, x, t: int) -> np.ndarray:
        x = _check_state(x, self.dim)
        _check_t(t, self.schedule.t_train)
        s = self.schedule
        return (x - s.sqrt_alpha_bar[t] * self.mu) / s.sqrt_one_minus_alpha_bar[t]


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


class DiagGmmDenoiser:
    """Mixture of diagonal Gaussians with an exact marginal score."""

    def __init__(self, weights, means, variances, schedule: NoiseSchedule):
        w = np.asarray(weights, dtype=np.float64)
        mu = np.asarray(means, dtype=np.float64)
        var = np.asarray(variances, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or var.shape != mu.shape:
            raise ValueError("need weights (k,), means (k, d), variances (k, d)")
        if w.shape[0] != mu.shape[0]:
            raise ValueError("one weight per component required")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu))
                and np.all(np.isfinite(var))):
            raise ValueError("mixture parameters must be finite")
        if np.any(w <= 0.0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1 within 1e-12")
        if np.any(var < 0.0):
            raise ValueError("variances must be nonnegative")
        self.weights = w
        self.means = mu
        self.variances = var
        self.schedule = schedule
        self.dim = mu.shape[1]
        self._log_w = np.log(w)

    def _marginal(self, t: int):
        # Forward corruption keeps the mixture diagonal: component k becomes
        # N(sqrt(ab) * mu_k, ab * var_k + (1 - ab)).
        ab = self.schedule.alpha_bar[t]
        m = self.schedule.sqrt_alpha_bar[t] * self.means
        v = ab * self.variances + (1.0 - ab)
        return m, v

    def _log_terms(self, x: np.ndarray, t: int) -> np.ndarray:
        m, v = self._marginal(t)
        q = (x - m) ** 2 / v
        return self._log_w - 0.5 * np.sum(np.log(2.0 * np.pi * v) + q, axis=1)

    def log_density(self, x, t: int) -> float:
        """log p_t(x) of the corrupted marginal."""
        x = _check_state(x, self.dim)
        _check_t(t, self.schedule.t_train)
        return _logsumexp(self._log_terms(x, t))

    def score(self, x, t: int) -> np.ndarray:
        """grad_x log p_t(x), responsibilities via log-sum-exp."""
        x = _check_state(x, self.dim)
        _check_t(t, self.schedule.t_train)
        logt = self._log_terms(x, t)
        r = np.exp(logt - _logsumexp(logt))
        m, v = self._marginal(t)
        return np.sum(r[:, None] * (m - x) / v, axis=0)

    def epsilon_hat(self, x, t: int) -> np.ndarray:
        out = -self.schedule.sqrt_one_minus_alpha_bar[t] * self.score(x, t)
        if not np.all(np.isfinite(out)):
            raise NumericError("epsilon_hat produced non-finite values")
        return out


@dataclass(frozen=True)
class TraceManifest:
    """Sidecar description of a raw float32 trace file."""

    dim: int
    steps: int
    seeds: int
    data: str
    crc32: str


def write_trace(manifest_path: str, data: np.ndarray) -> TraceManifest:
    """Store epsilon_hat dumps of shape (seeds, steps, dim), float32.

    The steps axis runs from t = steps down to t = 1. The payload lands
    next to the manifest as raw little-endian float32, seed-major.
    """
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise TraceError(f"trace data must have shape (seeds, steps, dim), got {arr.shape}")
    seeds, steps, dim = arr.shape
    if steps < 1 or dim < 1:
        raise TraceError("steps and dim must be at least 1")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    data_name = os.path.splitext(os.path.basename(manifest_path))[0] + ".f32"
    manifest = TraceManifest(
        dim=dim, steps=steps, seeds=seeds, data=data_name,
        crc32=f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}",
    )
    with open(os.path.join(os.path.dirname(manifest_path) or ".", data_name), "wb") as f:
        f.write(payload)
    with open(manifest_path, "w", encoding="ascii") as f:
        f.write(f"dim={manifest.dim}\n")
        f.write(f"steps={manifest.steps}\n")
        f.write(f"seeds={manifest.seeds}\n")
        f.write(f"data={manifest.data}\n")
        f.write("endian=little\n")
        f.write(f"crc32={manifest.crc32}\n")
    return manifest


def read_trace(manifest_path: str) -> tuple[TraceManifest, np.ndarray]:
    """Load a trace; length and crc32 must match the manifest exactly."""
    fields = {}
    with open(manifest_path, "r", encoding="ascii") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if "=" not in line:
                raise TraceError(f"malformed manifest line: {line!r}")
            key, _, value = line.partition("=")
            if key not in _MANIFEST_KEYS:
                raise TraceError(f"unknown manifest field: {key!r}")
            if key in fields:
                raise TraceError(f"duplicate manifest field: {key!r}")
            fields[key] = value
    missing = [k for k in _MANIFEST_KEYS if k not in fields]
    if missing:
        raise TraceError(f"manifest missing fields: {missing}")
    if fields["endian"] != "little":
        raise TraceError(f"unsupported endianness: {fields['endian']!r}")
    try:
        dim = int(fields["dim"])
        steps = int(fields["steps"])
        seeds = int(fields["seeds"])
    except ValueError as e:
        raise TraceError(f"non-integer manifest field: {e}") from None
    if dim < 1 or steps < 1 or seeds < 0:
        raise TraceError("dim and steps must be >= 1, seeds >= 0")
    data_path = os.path.join(os.path.dirname(manifest_path) or ".", fields["data"])
    try:
        with open(data_path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise TraceError(f"cannot read trace payload: {e}") from None
    expected = seeds * steps * dim * 4
    if len(payload) != expected:
        raise TraceError(
            f"trace payload is {len(payload)} bytes, manifest implies {expected}"
        )
    crc = f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}"
    if crc != fields["crc32"]:
        raise TraceError(f"checksum mismatch: payload {crc}, manifest {fields['crc32']}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(seeds, steps, dim)
    manifest = TraceManifest(dim=dim, steps=steps, seeds=seeds,
                             data=fields["data"], crc32=fields["crc32"])
    return manifest, arr


class RecordedTraceDenoiser:
    """Replays stored epsilon_hat vectors; the state is ignored beyond checks."""

    def __init__(self, data: np.ndarray, seed: int):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise TraceError(f"trace data must have shape (seeds, steps, dim), got {arr.shape}")
        if not 0 <= seed < arr.shape[0]:
            raise TraceExhaustedError(f"trace holds seeds 0..{arr.shape[0] - 1}, got {seed}")
        self._data = arr
        self.seed = seed
        self.t_train = arr.shape[1]
        self.dim = arr.shape[2]

    @classmethod
    def from_manifest(cls, manifest_path: str, seed: int) -> "RecordedTraceDenoiser":
        _, arr = read_trace(manifest_path)
        return cls(arr, seed)

    def epsilon_hat(self, x, t: int) -> np.ndarray:
        _check_state(x, self.dim)
        if not 1 <= t <= self.t_train:
            raise TraceExhaustedError(
                f"trace covers 1 <= t <= {self.t_train}, got t={t}"
            )
        # steps axis is ordered t = t_train down to 1
        return self._data[self.seed, self.t_train - t].astype(np.float64)
