"""Ensemble simulation, invariant-measure sampling, and mixing-rate fits.

The stationary law has no closed form for a general path-dependent model, so
its stand-in everywhere is a pooled, thinned, burn-in-discarded ensemble whose
size is recorded alongside every estimate that uses it.  The exponential
mixing rate is fitted from the decay of the empirical transport distance
between an evolving ensemble and that stationary reference, with points below
the measured sampling-noise floor excluded so the floor cannot flatten the
fitted slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NumericBlowupError, ShapeError
from .metric import DEFAULT_ASSIGNMENT_CAP, EmpiricalMeasure, MetricParams, wasserstein
from .rng import RngStream
from .segments import (
    ModelSpec,
    Segment,
    _BatchCoefficients,
    batch_sup_norms,
    step_windows,
    sup_norm,
)
from .stats import ols_line

__all__ = [
    "EnsembleConfig",
    "RateFit",
    "MomentCurveReport",
    "ExpMomentReport",
    "sample_invariant",
    "ergodicity_curve",
    "moment_curve",
    "exp_moment_probe",
    "collect_snapshots",
    "coupled_snapshots",
]


@dataclass(frozen=True)
class EnsembleConfig:
    """Knobs of one ensemble run.

    ``burn_in`` defaults (when built through the config layer) to ``10 /
    lambda1`` time units, the model's only a-priori decay scale.
    """

    n_traj: int
    burn_in: float
    thinning: float
    step: float
    master_seed: int
    samples_per_traj: int = 1

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be at least 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")
        if self.thinning < self.step * (1 - 1e-9):
            raise ValueError("thinning must be at least one step")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.samples_per_traj < 1:
            raise ValueError("samples_per_traj must be at least 1")

    def stream(self) -> RngStream:
        return RngStream(self.master_seed)


@dataclass(frozen=True)
class RateFit:
    """Fitted exponential-decay law ``value(t) ~ c_hat * exp(-beta_hat * t)``.

    ``times``/``values`` are the points the fit actually used (strictly
    positive values, strictly increasing times); dropped points sit below
    twice the recorded noise floor.
    """

    c_hat: float
    beta_hat: float
    r_squared: float
    times: np.ndarray
    values: np.ndarray
    se_beta: float = math.nan
    noise_floor: float = 0.0
    n_dropped: int = 0
    flagged: bool = False
    note: str = ""

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.size != v.size:
            raise ShapeError("times and values must align")
        if t.size and (np.diff(t) <= 0).any():
            raise ValueError("fit times must be strictly increasing")
        if (v <= 0).any():
            raise ValueError("fit values must be strictly positive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def tail_integral_bound(self, t_max: float) -> float:
        """Bound on ``integral_{t_max}^inf c e^{-beta t} dt`` from the fit."""
        return self.c_hat * math.exp(-self.beta_hat * t_max) / self.beta_hat

    def tail_sum_bound(self, k_max: int) -> float:
        """Bound on ``sum_{k > k_max} c e^{-beta k}`` from the fit."""
        r = math.exp(-self.beta_hat)
        return self.c_hat * r ** (k_max + 1) / (1.0 - r)


def _grid_index(t: float, step: float, name: str = "time") -> int:
    k = int(round(t / step))
    if abs(t - k * step) > 1e-6 * max(1.0, abs(t)):
        raise ValueError(f"{name} {t!r} is not on the step grid (step={step!r})")
    return k


def collect_snapshots(
    model: ModelSpec,
    initial_values: np.ndarray,
    step_indices: Sequence[int],
    step: float,
    rng: RngStream,
) -> list[np.ndarray]:
    """Run one batch and copy the segment windows at the requested step indices."""
    wanted = sorted(set(int(k) for k in step_indices))
    if wanted and wanted[0] < 0:
        raise ValueError("step indices must be non-negative")
    out = {}
    last = wanted[-1] if wanted else 0
    for j, window in step_windows(model, initial_values, last, step, rng):
        if wanted and j == wanted[0]:
            out[j] = window.copy()
            wanted.pop(0)
    return [out[int(k)] for k in sorted(out)]


def sample_invariant(
    model: ModelSpec, cfg: EnsembleConfig, initial: Segment
) -> EmpiricalMeasure:
    """Approximate the invariant law by a pooled, thinned ensemble.

    Runs ``cfg.n_traj`` independent trajectories from ``initial``, discards
    ``cfg.burn_in``, then retains one segment every ``cfg.thinning`` time
    units (``cfg.samples_per_traj`` of them per trajectory).  Atoms carry
    their source-trajectory index as group labels so downstream standard
    errors can respect within-trajectory correlation.
    """
    step = cfg.step
    burn_idx = int(math.ceil(cfg.burn_in / step - 1e-9))
    stride = max(1, _grid_index(cfg.thinning, step, "thinning"))
    indices = [burn_idx + (j + 1) * stride for j in range(cfg.samples_per_traj)]
    initials = np.broadcast_to(
        initial.values, (cfg.n_traj,) + initial.values.shape
    ).copy()
    snaps = collect_snapshots(model, initials, indices, step, cfg.stream().child(0))
    atoms = np.stack(snaps, axis=1)  # (n_traj, n_snap, m+1, d)
    n_traj, n_snap = atoms.shape[0], atoms.shape[1]
    values = atoms.reshape(n_traj * n_snap, atoms.shape[2], atoms.shape[3])
    groups = np.repeat(np.arange(n_traj), n_snap)
    return EmpiricalMeasure(values, model.delay, step, groups=groups)


def _blocked_wasserstein(
    a: EmpiricalMeasure, b: EmpiricalMeasure, mp: MetricParams, block: int, cap: int
) -> float:
    """Average exact transport cost over disjoint equal-size block pairs."""
    blocks_a = a.strided_blocks(block)
    blocks_b = b.strided_blocks(block)
    k = min(len(blocks_a), len(blocks_b))
    vals = [wasserstein(blocks_a[i], blocks_b[i], mp, cap=cap) for i in range(k)]
    return float(np.mean(vals))


def _coupled_blocked_wasserstein(
    a_vals: np.ndarray,
    b_vals: np.ndarray,
    delay: float,
    step: float,
    mp: MetricParams,
    block: int,
    cap: int,
) -> float:
    """Blocked transport cost for two coupled clouds of equal width.

    Coupled partners must share a block, otherwise the assignment cannot see
    the pathwise contraction; blocks therefore stride over a canonical order
    of the *pairs* (lexicographic on the concatenated pair values), which
    keeps partners together and makes the reduction a function of the pair
    multiset alone.
    """
    n = a_vals.shape[0]
    joint = np.concatenate([a_vals, b_vals], axis=1).reshape(n, -1)
    order = np.lexsort(joint.T[::-1])
    k = max(1, n // block)
    vals = []
    for i in range(min(k, n)):
        ids = order[i::k][:block]
        vals.append(
            wasserstein(
                EmpiricalMeasure(a_vals[ids], delay, step),
                EmpiricalMeasure(b_vals[ids], delay, step),
                mp,
                cap=cap,
            )
        )
    return float(np.mean(vals))


def coupled_snapshots(
    model: ModelSpec,
    initial_a: np.ndarray,
    initial_b: np.ndarray,
    step_indices: Sequence[int],
    step: float,
    rng: RngStream,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Evolve two equal-width ensembles under shared Gaussian increments.

    Trajectory i of each ensemble consumes the same noise, realizing the
    synchronous coupling: each marginal stays exact while paired states
    contract under the dissipative drift.  Returns (A, B) window copies at
    the requested step indices.
    """
    a = np.asarray(initial_a, dtype=float)
    b = np.asarray(initial_b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError("coupled ensembles must have identical shapes")
    wanted = sorted(set(int(k) for k in step_indices))
    last = wanted[-1] if wanted else 0
    n = a.shape[0]
    out = {}
    coeffs = _BatchCoefficients(model, model.delay, step)
    gen = rng.generator()
    sq = math.sqrt(step)
    m = a.shape[1] - 1
    rows = max(2 * (m + 1), int(4_000_000 // max(1, 2 * n * model.dim)))
    # one buffer of width 2n: rows [0:n] are ensemble A, rows [n:2n] ensemble B
    buf = np.empty((min(rows, last + m + 1) + m + 1, 2 * n, model.dim))
    buf[: m + 1] = np.concatenate([a, b], axis=0).transpose(1, 0, 2)
    head = m
    z = np.empty((n, model.dim))
    zz = np.empty((2 * n, model.dim))
    if 0 in wanted:
        win = buf[head - m : head + 1].transpose(1, 0, 2)
        out[0] = (win[:n].copy(), win[n:].copy())
    for j in range(1, last + 1):
        if head + 1 >= buf.shape[0]:
            buf[: m + 1] = buf[head - m : head + 1]
            head = m
        window = buf[head - m : head + 1]
        segs = window.transpose(1, 0, 2)
        drift = coeffs.drift(segs)
        gen.standard_normal((n, model.dim), out=z)
        np.multiply(z, sq, out=z)
        zz[:n] = z
        zz[n:] = z
        noise = coeffs.noise(segs, zz)
        nxt = buf[head + 1]
        np.add(window[-1], noise, out=nxt)
        nxt += drift * step
        head += 1
        if not math.isfinite(float(nxt.sum())):
            raise NumericBlowupError("state became non-finite in coupled run", j * step)
        if j in wanted:
            win = buf[head - m : head + 1].transpose(1, 0, 2)
            out[j] = (win[:n].copy(), win[n:].copy())
    return [out[k] for k in sorted(out)]


def _noise_floor(ref: EmpiricalMeasure, mp: MetricParams, block: int, cap: int) -> float:
    """Empirical transport distance between disjoint same-law samples."""
    blocks = ref.strided_blocks(block)
    pairs = len(blocks) // 2
    if pairs < 1:
        raise ShapeError(
            f"reference sample with {ref.n} atoms cannot estimate a noise floor at block size {block}"
        )
    vals = [
        wasserstein(blocks[2 * i], blocks[2 * i + 1], mp, cap=cap) for i in range(pairs)
    ]
    return float(np.mean(vals))


def ergodicity_curve(
    model: ModelSpec,
    initial_a: Segment,
    initial_b: EmpiricalMeasure,
    times: Sequence[float],
    mp: MetricParams,
    cfg: EnsembleConfig,
    mode: str = "stationary",
    coupling: str = "synchronous",
    cap: int = DEFAULT_ASSIGNMENT_CAP,
    block: Optional[int] = None,
    floor_factor: float = 2.0,
) -> RateFit:
    """Fit the exponential decay rate of the transport distance to equilibrium.

    The ensemble launched from ``initial_a`` is compared at each time against
    a reference built from ``initial_b``: a stationary sample for the
    distance-to-equilibrium curve (``mode="stationary"``) or an arbitrary
    second initial law for the two-law contraction curve (``mode="evolved"``).

    With ``coupling="synchronous"`` (default) the reference atoms are evolved
    alongside the main ensemble under shared Gaussian increments.  Both
    point clouds keep their exact marginals (for a stationary ``initial_b``
    the evolved cloud remains stationary at every time), while the paired
    contraction removes the same-law sampling floor that a fixed reference
    suffers, so the measured distances can decay to zero.

    With ``coupling="independent"`` the reference is the fixed sample
    (``stationary``) or an independently evolved ensemble (``evolved``); the
    same-law sampling floor is then measured from disjoint reference blocks
    and points below ``floor_factor`` times it are dropped before the fit.

    Distances are averaged over disjoint block pairs of size ``block``
    (default: the assignment cap, shrunk so the reference retains at least
    two blocks).
    """
    if mode not in ("stationary", "evolved"):
        raise ValueError(f"unknown mode {mode!r}")
    if coupling not in ("synchronous", "independent"):
        raise ValueError(f"unknown coupling {coupling!r}")
    times = np.asarray(list(times), dtype=float)
    if times.size == 0 or (np.diff(times) <= 0).any():
        raise ValueError("times must be non-empty and strictly increasing")
    step = cfg.step
    indices = [_grid_index(t, step) for t in times]

    block = block or cap
    block = min(block, cfg.n_traj, initial_b.n // 2, cap)
    if block < 2:
        raise ShapeError("need at least 2 atoms per block for a transport distance")

    root = cfg.stream()
    initials_a = np.broadcast_to(
        initial_a.values, (cfg.n_traj,) + initial_a.values.shape
    ).copy()
    reps = int(math.ceil(cfg.n_traj / initial_b.n))
    initials_b = np.tile(initial_b.values, (reps, 1, 1))[: cfg.n_traj]

    distances = np.empty(times.size)
    if coupling == "synchronous":
        pairs = coupled_snapshots(model, initials_a, initials_b, indices, step, root.child(1))
        floor = 0.0
        for i, (snap_a, snap_b) in enumerate(pairs):
            distances[i] = _coupled_blocked_wasserstein(
                snap_a, snap_b, model.delay, step, mp, block, cap
            )
    else:
        snaps_a = collect_snapshots(model, initials_a, indices, step, root.child(1))
        if mode == "evolved":
            snaps_b = collect_snapshots(model, initials_b, indices, step, root.child(2))
            refs = [EmpiricalMeasure(s, model.delay, step) for s in snaps_b]
        else:
            refs = [initial_b] * len(indices)
        floor = _noise_floor(initial_b, mp, block, cap)
        for i, snap in enumerate(snaps_a):
            law_t = EmpiricalMeasure(snap, model.delay, step)
            distances[i] = _blocked_wasserstein(law_t, refs[i], mp, block, cap)

    usable = distances > max(floor_factor * floor, 1e-13)
    n_dropped = int((~usable).sum())
    t_fit, v_fit = times[usable], distances[usable]
    if t_fit.size < 3:
        return RateFit(
            c_hat=math.nan,
            beta_hat=math.nan,
            r_squared=0.0,
            times=t_fit,
            values=v_fit,
            noise_floor=floor,
            n_dropped=n_dropped,
            flagged=True,
            note="fewer than 3 points above the noise floor; rate unconstrained",
        )
    fit = ols_line(t_fit, np.log(v_fit))
    return RateFit(
        c_hat=float(math.exp(fit.intercept)),
        beta_hat=-fit.slope,
        r_squared=fit.r_squared,
        times=t_fit,
        values=v_fit,
        se_beta=fit.se_slope,
        noise_floor=floor,
        n_dropped=n_dropped,
        flagged=bool(-fit.slope <= 0),
        note="" if -fit.slope > 0 else "fitted rate is not positive",
    )


@dataclass(frozen=True)
class MomentCurveReport:
    times: np.ndarray
    values: np.ndarray
    ses: np.ndarray
    p: float
    c_hat: float
    beta_hat: float
    passed: bool
    note: str = ""


def moment_curve(
    model: ModelSpec,
    initial: Segment,
    p: float,
    times: Sequence[float],
    replicas: int,
    rng: RngStream,
) -> MomentCurveReport:
    """Monte Carlo estimates of the p-th uniform-norm moment along the flow.

    The boundedness verdict fits the envelope ``c * (1 + exp(-beta t) K)``
    with ``K = ||initial||_inf^p``: ``beta`` comes from a log-linear fit of
    the decay toward the tail mean and ``c`` is the smallest constant whose
    envelope dominates every point.  The verdict fails when values are
    non-finite or the tail of the series still grows.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    times = np.asarray(list(times), dtype=float)
    step = initial.step
    indices = [_grid_index(t, step) for t in times]
    initials = np.broadcast_to(initial.values, (replicas,) + initial.values.shape).copy()
    snaps = collect_snapshots(model, initials, indices, step, rng.child(0))
    values = np.empty(times.size)
    ses = np.empty(times.size)
    for i, snap in enumerate(snaps):
        powered = batch_sup_norms(snap) ** p
        values[i] = powered.mean()
        ses[i] = powered.std(ddof=1) / math.sqrt(replicas)
    if not np.isfinite(values).all():
        return MomentCurveReport(times, values, ses, p, math.nan, math.nan, False, "non-finite moments")

    tail = values[-max(1, times.size // 4) :]
    m_inf = float(tail.mean())
    decay = values - m_inf
    mask = decay > 2.0 * np.maximum(ses, 1e-12)
    if mask.sum() >= 2:
        fit = ols_line(times[mask], np.log(decay[mask]))
        beta_hat = max(0.0, -fit.slope)
    else:
        beta_hat = 0.0
    k_init = sup_norm(initial) ** p
    envelope_shape = 1.0 + np.exp(-beta_hat * times) * k_init
    c_hat = float(np.max(values / envelope_shape))
    growing = times.size >= 4 and ols_line(times[times.size // 2 :], values[times.size // 2 :]).slope > 3.0 * float(
        ses[-1] / max(times[-1] - times[times.size // 2], 1e-9)
    )
    passed = bool(np.isfinite(c_hat) and not growing)
    return MomentCurveReport(
        times, values, ses, p, c_hat, beta_hat, passed, "" if passed else "tail still growing"
    )


@dataclass(frozen=True)
class ExpMomentReport:
    deltas: np.ndarray
    estimates: np.ndarray
    max_shares: np.ndarray
    passing: np.ndarray
    largest_passing: Optional[float]
    window_count: int
    replicas: int


def exp_moment_probe(
    model: ModelSpec,
    initial: Segment,
    delta_grid: Sequence[float],
    window_count: int,
    replicas: int,
    rng: RngStream,
    share_limit: float = 0.5,
) -> ExpMomentReport:
    """Probe windowed exponential square-moments of the uniform norm.

    For each ``delta`` estimates ``E sup_{t in [k, k+1]} exp(delta ||X_t||^2)``
    over the first ``window_count`` unit windows.  A ``delta`` passes when
    every window estimate is finite and no single replica contributes more
    than ``share_limit`` of the window sum (heavy-tail instability guard).
    Instability is reported, never raised.
    """
    deltas = np.asarray(list(delta_grid), dtype=float)
    if deltas.size == 0 or (deltas <= 0).any():
        raise ValueError("delta grid must contain positive values")
    step = initial.step
    per_unit = _grid_index(1.0, step, "unit window")
    n_steps = window_count * per_unit
    m = initial.n_nodes - 1
    initials = np.broadcast_to(initial.values, (replicas,) + initial.values.shape).copy()

    # ||X_t||_inf over a unit window equals the running max of the pointwise
    # norm over [k - delay, k+1]; keep every pointwise norm.
    norms = np.empty((n_steps + 1, replicas))
    for j, window in step_windows(model, initials, n_steps, step, rng.child(0)):
        norms[j] = np.sqrt((window[:, -1, :] ** 2).sum(axis=1))
    hist = np.sqrt((initial.values**2).sum(axis=1)).max()

    window_sq = np.empty((window_count, replicas))
    for k in range(window_count):
        lo = max(0, k * per_unit - m)
        hi = (k + 1) * per_unit + 1
        w = norms[lo:hi].max(axis=0)
        if k * per_unit - m < 0:  # initial history overlaps the first window
            w = np.maximum(w, hist)
        window_sq[k] = w**2

    estimates = np.empty((deltas.size, window_count))
    shares = np.empty((deltas.size, window_count))
    with np.errstate(over="ignore"):
        for i, delta in enumerate(deltas):
            vals = np.exp(delta * window_sq)  # (windows, replicas)
            sums = vals.sum(axis=1)
            estimates[i] = sums / replicas
            with np.errstate(invalid="ignore"):
                shares[i] = np.where(sums > 0, vals.max(axis=1) / sums, 1.0)
    finite = np.isfinite(estimates).all(axis=1)
    stable = (shares < share_limit).all(axis=1)
    passing = finite & stable
    largest = float(deltas[passing].max()) if passing.any() else None
    return ExpMomentReport(
        deltas=deltas,
        estimates=estimates.max(axis=1),
        max_shares=shares.max(axis=1),
        passing=passing,
        largest_passing=largest,
        window_count=window_count,
        replicas=replicas,
    )
