"""Segment-valued states, path-dependent models, and the Euler-Maruyama integrator.

The state of a path-dependent SDE is a *segment*: the recent history of the
solution over a window of fixed length ``delay``, discretized on a uniform
grid of spacing ``step`` (``delay/step`` must be an integer so the oldest
history point lands exactly on a node).  A model is a pair of coefficient
maps ``drift: segment -> R^d`` and ``diffusion: segment -> R^{d x d}``
together with the dissipativity/ellipticity constants the model claims to
satisfy.

Simulation uses the explicit Euler-Maruyama scheme

    X(t + dt) = X(t) + drift(X_t) * dt + diffusion(X_t) @ (sqrt(dt) * Z)

where ``X_t`` is the current grid segment and ``Z`` is a standard normal
vector.  The integrator is vectorized over independent trajectories: models
may provide batched coefficient callbacks operating on arrays of segments,
which is what makes the statistical estimators in the rest of the package
affordable.  Batched arrays of segments always have shape ``(n, m+1, d)``:
batch index, then time node (oldest first), then coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import NumericBlowupError, ShapeError
from .rng import RngStream

__all__ = [
    "Segment",
    "ModelSpec",
    "Trajectory",
    "sup_norm",
    "segment_at",
    "simulate",
    "constant_segment",
]

# Relative slack when testing that step divides delay (one representable unit).
_GRID_RTOL = 1e-9


def _history_nodes(delay: float, step: float) -> int:
    """Number of sub-intervals m with delay = m * step, validated."""
    ratio = delay / step
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > _GRID_RTOL * max(1.0, ratio):
        raise ValueError(f"step {step!r} must divide delay {delay!r} exactly")
    return m


@dataclass(frozen=True)
class Segment:
    """One discretized history window.

    ``values[j]`` is the state at window time ``-delay + j*step``; the last
    row is the current state.  Point evaluation between nodes uses linear
    interpolation, matching the piecewise-linear path representation.
    """

    values: np.ndarray
    delay: float
    step: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2:
            raise ShapeError(f"segment values must be (m+1, d), got shape {vals.shape}")
        m = _history_nodes(self.delay, self.step)
        if vals.shape[0] != m + 1:
            raise ShapeError(
                f"segment needs {m + 1} nodes for delay={self.delay}, step={self.step}; "
                f"got {vals.shape[0]}"
            )
        if not np.isfinite(vals).all():
            raise ValueError("segment values must all be finite")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    def value_at(self, theta: float) -> np.ndarray:
        """State at window time ``theta`` in ``[-delay, 0]`` (linear interpolation)."""
        if not (-self.delay - _GRID_RTOL <= theta <= _GRID_RTOL):
            raise ValueError(f"theta={theta} outside [-{self.delay}, 0]")
        pos = (theta + self.delay) / self.step
        lo = min(int(math.floor(pos)), self.n_nodes - 2)
        lo = max(lo, 0)
        frac = pos - lo
        return (1.0 - frac) * self.values[lo] + frac * self.values[lo + 1]

    def endpoint(self) -> np.ndarray:
        return self.values[-1]


def constant_segment(value, delay: float, step: float, dim: Optional[int] = None) -> Segment:
    """Segment frozen at a single state (scalar or length-d vector)."""
    v = np.atleast_1d(np.asarray(value, dtype=float))
    if dim is not None and v.size == 1:
        v = np.full(dim, v[0])
    m = _history_nodes(delay, step)
    return Segment(np.tile(v, (m + 1, 1)), delay, step)


def sup_norm(segment: Segment) -> float:
    """Maximum Euclidean node norm of a segment (grid-level uniform norm)."""
    return float(np.sqrt((segment.values**2).sum(axis=1)).max())


def batch_sup_norms(values: np.ndarray) -> np.ndarray:
    """Uniform norms of a batch of segment value arrays, shape (n, m+1, d) -> (n,)."""
    return np.sqrt((values**2).sum(axis=2)).max(axis=1)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of a path-dependent SDE plus its declared constants.

    Parameters
    ----------
    dim, delay: state dimension and history-window length.
    drift, diffusion: coefficient maps on single segments.  ``drift`` returns
        a length-``dim`` vector, ``diffusion`` a ``(dim, dim)`` matrix.
    lambda1, lambda2: declared dissipativity constants.  Construction checks
        the side condition ``lambda1 > lambda2 * exp(lambda1 * delay)``.
    sigma_bound, sigma_inv_bound: declared uniform operator-norm bounds on the
        diffusion and its inverse.  ``sigma_inv_bound=None`` marks a model
        that does not claim invertible noise (e.g. deterministic test
        dynamics); ellipticity checks on such a model fail fast.
    drift_batch, diffusion_batch: optional vectorized coefficients acting on
        an ``(n, m+1, d)`` array of segments, returning ``(n, d)`` and
        ``(n, d, d)`` (or ``(n, d)``, read as diagonal) respectively.  The
        integrator falls back to looping over the scalar maps when absent.
    diffusion_is_constant: set when ``diffusion`` does not depend on the
        segment, letting the integrator evaluate it once.
    """

    dim: int
    delay: float
    drift: Callable[[Segment], np.ndarray]
    diffusion: Callable[[Segment], np.ndarray]
    lambda1: float
    lambda2: float
    sigma_bound: float
    sigma_inv_bound: Optional[float]
    drift_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    diffusion_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    diffusion_is_constant: bool = False
    name: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.delay <= 0:
            raise ValueError("delay must be positive")
        if not (self.lambda1 > 0):
            raise ValueError("lambda1 must be positive")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be non-negative")
        side = self.lambda1 - self.lambda2 * math.exp(self.lambda1 * self.delay)
        if side <= 0:
            raise ValueError(
                f"dissipativity side condition violated: lambda1={self.lambda1} must exceed "
                f"lambda2*exp(lambda1*delay)={self.lambda2 * math.exp(self.lambda1 * self.delay):.6g}"
            )
        if not (0 <= self.sigma_bound < math.inf):
            raise ValueError("sigma_bound must be finite and non-negative")
        if self.sigma_inv_bound is not None and not (0 < self.sigma_inv_bound < math.inf):
            raise ValueError("sigma_inv_bound must be finite and positive when declared")

    @property
    def side_margin(self) -> float:
        """Slack ``lambda1 - lambda2 * exp(lambda1 * delay)`` of the side condition."""
        return self.lambda1 - self.lambda2 * math.exp(self.lambda1 * self.delay)

    def segment(self, values, step: float) -> Segment:
        return Segment(np.asarray(values, dtype=float), self.delay, step)


@dataclass(frozen=True)
class Trajectory:
    """A simulated path on a uniform grid, including its initial history.

    ``states[k]`` is the state at time ``-delay + k*step``; the first ``m+1``
    rows reproduce the initial segment and index ``m`` corresponds to t=0.
    """

    model: ModelSpec
    step: float
    horizon: float
    states: np.ndarray
    seed: RngStream

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def n_history(self) -> int:
        return _history_nodes(self.model.delay, self.step)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - self.n_history - 1

    def times(self) -> np.ndarray:
        m = self.n_history
        return (np.arange(self.states.shape[0]) - m) * self.step

    def initial_segment(self) -> Segment:
        return Segment(self.states[: self.n_history + 1], self.model.delay, self.step)


def segment_at(traj: Trajectory, t: float) -> Segment:
    """Extract the history window of ``traj`` ending at time ``t``.

    On-grid times return an exact copy of the stored states; off-grid times
    resample the window onto the segment grid by linear interpolation.

    Raises
    ------
    ValueError: if ``t`` lies outside ``[0, horizon]``.
    """
    if not (-_GRID_RTOL <= t <= traj.horizon * (1 + _GRID_RTOL) + _GRID_RTOL):
        raise ValueError(f"t={t} outside [0, {traj.horizon}]")
    m = traj.n_history
    pos = t / traj.step  # grid offset of t past the window start index m
    k = int(round(pos))
    if abs(pos - k) <= _GRID_RTOL * max(1.0, abs(pos)):
        window = traj.states[k : k + m + 1]
        return Segment(window, traj.model.delay, traj.step)
    lo = int(math.floor(pos))
    frac = pos - lo
    idx = np.arange(lo, lo + m + 1)
    window = (1.0 - frac) * traj.states[idx] + frac * traj.states[idx + 1]
    return Segment(window, traj.model.delay, traj.step)


def _steps_for(horizon: float, step: float) -> int:
    ratio = horizon / step
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-6 * max(1.0, ratio):
        raise ValueError(f"horizon {horizon!r} must be a positive multiple of step {step!r}")
    return n


class _BatchCoefficients:
    """Resolve scalar/batched coefficient callbacks once per run."""

    def __init__(self, model: ModelSpec, delay: float, step: float):
        self.model = model
        self.delay = delay
        self.step = step
        self._const_sigma = None
        self._const_scalar = None

    def drift(self, segs: np.ndarray) -> np.ndarray:
        if self.model.drift_batch is not None:
            return self.model.drift_batch(segs)
        out = np.empty((segs.shape[0], self.model.dim))
        for i in range(segs.shape[0]):
            out[i] = self.model.drift(Segment(segs[i], self.delay, self.step))
        return out

    def noise(self, segs: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Apply the diffusion matrix to scaled normal draws ``z`` of shape (n, d)."""
        if self.model.diffusion_is_constant:
            if self._const_sigma is None:
                sig = np.asarray(
                    self.model.diffusion(Segment(segs[0], self.delay, self.step)), dtype=float
                )
                self._const_sigma = sig
                if sig.ndim == 0 or (sig.ndim == 2 and sig.shape == (1, 1)):
                    self._const_scalar = float(np.ravel(sig)[0])
            if self._const_scalar is not None:
                return self._const_scalar * z
            return z @ self._const_sigma.T
        if self.model.diffusion_batch is not None:
            sig = np.asarray(self.model.diffusion_batch(segs))
            if sig.ndim == 2:  # diagonal convention
                return sig * z
            return np.einsum("nij,nj->ni", sig, z)
        out = np.empty_like(z)
        for i in range(segs.shape[0]):
            sig = np.asarray(self.model.diffusion(Segment(segs[i], self.delay, self.step)))
            out[i] = sig @ z[i]
        return out


def step_windows(
    model: ModelSpec,
    initial_values: np.ndarray,
    n_steps: int,
    step: float,
    rng: RngStream,
    chunk: Optional[int] = None,
) -> Iterator[tuple[int, np.ndarray]]:
    """Drive a batch of trajectories, yielding each new segment window.

    Parameters
    ----------
    initial_values: array (n, m+1, d) of initial segments.
    n_steps: number of Euler-Maruyama steps to take.
    rng: stream owning every draw of this batch.
    chunk: ring-buffer block length; memory stays O(chunk * n * d).  The
        default adapts to the batch width, targeting tens of megabytes.

    Yields
    ------
    (j, windows): step index ``j`` (0 = initial state, time ``j*step``) and a
    read-only view of the current batch of segments, shape (n, m+1, d).
    Consumers must not hold references across iterations: the buffer is
    recycled.

    Raises
    ------
    NumericBlowupError: the first time a state goes non-finite, with the time.
    """
    init = np.asarray(initial_values, dtype=float)
    if init.ndim == 2:
        init = init[None]
    n, nodes, d = init.shape
    m = nodes - 1
    if d != model.dim:
        raise ShapeError(f"initial segments have dim {d}, model has {model.dim}")
    coeffs = _BatchCoefficients(model, model.delay, step)
    gen = rng.generator()
    sq = math.sqrt(step)

    # Time-major ring buffer: rows are grid times, windows are contiguous views.
    if chunk is None:
        chunk = max(2 * (m + 1), int(4_000_000 // max(1, n * d)))
    rows = max(2 * (m + 1), min(chunk, n_steps + m + 1))
    buf = np.empty((rows + m + 1, n, d))
    buf[: m + 1] = init.transpose(1, 0, 2)
    head = m  # buffer row of the current state

    if not np.isfinite(buf[: m + 1]).all():
        raise NumericBlowupError("non-finite initial segment", 0.0)

    # narrow batches amortize the generator call over many steps; the draw
    # sequence is identical either way (values come off the stream in order)
    zblock = max(1, 4096 // max(1, n * d)) if n * d <= 256 else 1
    zbuf = np.empty((zblock, n, d)) if zblock > 1 else None
    zoff = zblock  # force a refill on first use
    z = np.empty((n, d))
    scalar_state = n * d == 1

    yield 0, buf[head - m : head + 1].transpose(1, 0, 2)

    for j in range(1, n_steps + 1):
        if head + 1 >= buf.shape[0]:
            buf[: m + 1] = buf[head - m : head + 1]
            head = m
        window = buf[head - m : head + 1]
        segs = window.transpose(1, 0, 2)
        drift = coeffs.drift(segs)
        if zbuf is None:
            gen.standard_normal((n, d), out=z)
        else:
            if zoff >= zblock:
                gen.standard_normal(zbuf.shape, out=zbuf)
                zoff = 0
            z = zbuf[zoff]
            zoff += 1
        nxt = buf[head + 1]
        noise = coeffs.noise(segs, z * sq)
        np.add(window[-1], noise, out=nxt)
        nxt += drift * step
        head += 1
        total = nxt[0, 0] if scalar_state else float(nxt.sum())
        if not math.isfinite(total):  # NaN/Inf propagate through the sum
            if not np.isfinite(drift).all() or not np.isfinite(noise).all():
                raise NumericBlowupError("drift/diffusion produced non-finite output", j * step)
            raise NumericBlowupError("state became non-finite", j * step)
        yield j, buf[head - m : head + 1].transpose(1, 0, 2)


def simulate(
    model: ModelSpec,
    initial: Segment,
    horizon: float,
    step: float,
    rng: RngStream,
) -> Trajectory:
    """Integrate one trajectory of the model by Euler-Maruyama.

    Parameters
    ----------
    initial: starting segment; must match the model's dim and delay, and its
        grid step must equal ``step``.
    horizon: final time T > 0, a multiple of ``step``.
    rng: the stream that owns every Gaussian increment of this trajectory.

    Returns
    -------
    Trajectory with ``(horizon + delay)/step + 1`` states, the first ``m+1``
    of which are the initial segment.

    Raises
    ------
    NumericBlowupError: on the first non-finite drift/diffusion/state value.
    """
    if initial.dim != model.dim:
        raise ShapeError(f"initial segment dim {initial.dim} != model dim {model.dim}")
    if abs(initial.delay - model.delay) > _GRID_RTOL * max(1.0, model.delay):
        raise ShapeError("initial segment delay differs from the model's")
    if abs(initial.step - step) > _GRID_RTOL * max(1.0, step):
        raise ShapeError("initial segment grid step differs from the integration step")
    n_steps = _steps_for(horizon, step)
    m = initial.n_nodes - 1
    states = np.empty((m + 1 + n_steps, 1, initial.dim))
    states[: m + 1] = initial.values[:, None, :]
    for j, window in step_windows(model, initial.values[None], n_steps, step, rng):
        if j > 0:
            states[m + j] = window[:, -1, :]
    return Trajectory(model, step, n_steps * step, states[:, 0, :], rng)
