"""Additive functionals, correctors, variance constants, CLT and LIL machinery.

Estimator conventions
---------------------
* Centering.  The limit theorems hold for observables with zero stationary
  mean; :class:`CenteredObservable` subtracts a recorded stationary-sample
  mean and carries its standard error.
* Split corrector estimates.  Squares and products of corrector values are
  computed from two independent half-estimates (``A`` and ``B`` streams):
  ``E[(Z + a)(Z + b)] = E[Z^2]`` when the half-noises ``a, b`` are independent
  and centered, so variance-type quantities carry no noise-squared bias.
* Truncation.  Corrector tails are bounded through a fitted decay rate; the
  truncation point is the earliest checkpoint where that bound drops below a
  fraction of the running estimate (capped by the configured maximum).
* Discrete increments.  The unit-time martingale difference is
  ``Z_k = f(X_k) + Q(X_k) - Q(X_{k-1})`` with the shifted corrector
  ``Q = sum_{j>=1} P_j f``; equivalently ``f(X_{k-1}) + Rhat(X_k) -
  Rhat(X_{k-1})`` with the full sum ``Rhat = sum_{j>=0} P_j f``.  This is the
  form under which the one-step conditional mean vanishes and the squared
  increment reproduces the discrete variance functional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, EstimatorInconsistencyError
from .ergodic import RateFit
from .metric import EmpiricalMeasure, Observable
from .rng import RngStream
from .segments import ModelSpec, Segment, Trajectory, segment_at, step_windows
from .semigroup import (
    GridProfile,
    IidChain,
    MonteCarloSemigroup,
    SdeChain,
    SemigroupEvaluator,
)
from .stats import (
    batch_means_se,
    bootstrap_se,
    grouped_mean_se,
    kolmogorov_statistic,
    ols_line,
    weighted_degenerate_statistic,
)

__all__ = [
    "CenteredObservable",
    "CorrectorConfig",
    "DiscreteCorrectorConfig",
    "CorrectorEstimate",
    "PhiEstimate",
    "VarianceReport",
    "VphReport",
    "CltReport",
    "SllnReport",
    "PathwiseReport",
    "MartingaleSequence",
    "QvReport",
    "QvLlnReport",
    "LilReport",
    "CameronMartinReport",
    "additive_functional",
    "slln_variance_decay",
    "slln_pathwise",
    "corrector",
    "phi_f",
    "variance_D",
    "vph_residual",
    "clt_test",
    "discrete_corrector",
    "martingale_increments",
    "quadratic_variation",
    "qv_lln_check",
    "lil_run",
    "cameron_martin_norm",
]

Chain = Union[SdeChain, IidChain]


# ---------------------------------------------------------------------------
# observables and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CenteredObservable:
    """Observable minus its recorded stationary mean.

    ``mu_f`` is estimated from a stationary sample of ``n_sample`` atoms;
    ``mu_f_se`` is its standard error (group-aware when the sample carries
    trajectory labels) and propagates into downstream error bars.
    """

    base: Observable
    mu_f: float
    mu_f_se: float
    n_sample: int = 0

    @classmethod
    def from_stationary(cls, base: Observable, stationary: EmpiricalMeasure) -> "CenteredObservable":
        vals = base.values(stationary.values)
        mean, se = grouped_mean_se(vals, stationary.groups)
        return cls(base, mean, se, stationary.n)

    @property
    def name(self) -> str:
        return f"{self.base.name}_centered"

    @property
    def declared_norm(self) -> Optional[float]:
        return self.base.declared_norm

    def eval(self, segment) -> float:
        return float(self.base.eval(segment)) - self.mu_f

    def values(self, seg_values: np.ndarray) -> np.ndarray:
        return self.base.values(seg_values) - self.mu_f

    def scaled(self, factor: float) -> "CenteredObservable":
        base = self.base
        scaled_base = Observable(
            name=f"{base.name}_x{factor:g}",
            eval=lambda s, _b=base.eval, _c=factor: _c * _b(s),
            declared_norm=None if base.declared_norm is None else abs(factor) * base.declared_norm,
            eval_batch=None
            if base.eval_batch is None
            else (lambda v, _b=base.eval_batch, _c=factor: _c * _b(v)),
        )
        return CenteredObservable(scaled_base, factor * self.mu_f, abs(factor) * self.mu_f_se, self.n_sample)


AnyObservable = Union[Observable, CenteredObservable]


@dataclass(frozen=True)
class CorrectorConfig:
    """Continuous-time corrector quadrature knobs.

    ``replicas`` is the total inner Monte Carlo budget per state; it is split
    into two independent halves.  ``rate_fit`` is required: the tail bound
    and the automatic truncation rule both come from it.
    """

    rate_fit: Optional[RateFit] = None
    t_max: float = 8.0
    quad_step: Optional[float] = None
    replicas: int = 64
    auto_truncate: bool = True
    tail_fraction: float = 0.1

    def require_rate_fit(self) -> RateFit:
        if self.rate_fit is None or not math.isfinite(self.rate_fit.beta_hat):
            raise ConfigurationError("corrector needs a usable RateFit for its tail bound")
        return self.rate_fit


@dataclass(frozen=True)
class DiscreteCorrectorConfig:
    """Unit-lag corrector summation knobs (discrete analogue of the above)."""

    rate_fit: Optional[RateFit] = None
    k_max: int = 8
    replicas: int = 64
    auto_truncate: bool = True
    tail_fraction: float = 0.1

    def require_rate_fit(self) -> RateFit:
        if self.rate_fit is None or not math.isfinite(self.rate_fit.beta_hat):
            raise ConfigurationError("discrete corrector needs a usable RateFit")
        return self.rate_fit


def _norm_hint(f: AnyObservable) -> float:
    n = getattr(f, "declared_norm", None)
    return 1.0 if n is None else float(n)


# ---------------------------------------------------------------------------
# additive functional and SLLN statistics
# ---------------------------------------------------------------------------


def _window_view(states: np.ndarray, m: int) -> np.ndarray:
    """All length-(m+1) windows of a state array (n, d) as a (n-m, m+1, d) view."""
    win = np.lib.stride_tricks.sliding_window_view(states, m + 1, axis=0)
    return win.transpose(0, 2, 1)


def additive_functional(traj: Trajectory, f: AnyObservable, t: float) -> float:
    """Time average ``(1/t) * integral_0^t f(X_s) ds`` by trapezoid quadrature.

    Integrates over the grid points inside ``[0, t]``; an off-grid ``t`` adds
    the final partial trapezoid using the interpolated segment.
    """
    if not (0 < t <= traj.horizon * (1 + 1e-9)):
        raise ValueError(f"t={t} outside (0, {traj.horizon}]")
    m = traj.n_history
    dt = traj.step
    n_full = int(math.floor(t / dt + 1e-9))
    windows = _window_view(traj.states, m)[: n_full + 1]
    vals = f.values(windows)
    integral = float(np.trapezoid(vals, dx=dt))
    remainder = t - n_full * dt
    if remainder > 1e-9 * max(1.0, t):
        tail_val = f.eval(segment_at(traj, t))
        integral += 0.5 * (vals[-1] + tail_val) * remainder
    return integral / t


@dataclass(frozen=True)
class SllnReport:
    times: np.ndarray
    sq_errors: np.ndarray
    ses: np.ndarray
    exponent: float
    exponent_ci: tuple[float, float]
    passed: bool
    zero_signal: bool
    replicas: int
    eps: Optional[float] = None
    exceedance_quantiles: Optional[dict] = None


def _time_average_checkpoints(
    model: ModelSpec,
    xi: Segment,
    f: AnyObservable,
    check_steps: Sequence[int],
    replicas: int,
    rng: RngStream,
) -> np.ndarray:
    """Per-replica time averages A_t at the checkpoint steps, shape (n_check, R)."""
    dt = xi.step
    checks = {int(s): i for i, s in enumerate(check_steps)}
    out = np.empty((len(check_steps), replicas))
    init = np.broadcast_to(xi.values, (replicas,) + xi.values.shape).copy()
    partial = np.zeros(replicas)
    prev = None
    for j, window in step_windows(model, init, max(checks), dt, rng):
        vals = f.values(window)
        if prev is not None:
            partial += 0.5 * (prev + vals) * dt
        prev = vals.copy()
        if j in checks:
            t = j * dt
            out[checks[j]] = partial / t if t > 0 else 0.0
    return out


def slln_variance_decay(
    model: ModelSpec,
    xi: Segment,
    f: CenteredObservable,
    times: Sequence[float],
    replicas: int,
    rng: RngStream,
    slope_gate: float = -0.75,
) -> SllnReport:
    """Fit the decay exponent of ``E|A_t|^2`` for a centered observable.

    The report passes when the log-log slope is at most ``slope_gate``
    (a time-average variance must decay at least like 1/t).
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    times = np.asarray(list(times), dtype=float)
    if times.size < 2 or times.max() / times.min() < 10.0:
        raise ValueError("times must span at least one decade")
    dt = xi.step
    steps = [int(round(t / dt)) for t in times]
    averages = _time_average_checkpoints(model, xi, f, steps, replicas, rng.child(0))
    sq = averages**2
    sq_errors = sq.mean(axis=1)
    ses = sq.std(axis=1, ddof=1) / math.sqrt(replicas)
    if np.max(sq_errors) < 1e-300:
        return SllnReport(
            times, sq_errors, ses, math.nan, (math.nan, math.nan), True, True, replicas
        )
    fit = ols_line(np.log(times), np.log(sq_errors))
    ci = (fit.slope - 2 * fit.se_slope, fit.slope + 2 * fit.se_slope)
    return SllnReport(
        times,
        sq_errors,
        ses,
        fit.slope,
        ci,
        passed=bool(fit.slope <= slope_gate),
        zero_signal=False,
        replicas=replicas,
    )


@dataclass(frozen=True)
class PathwiseReport:
    eps: float
    horizon: float
    checkpoint_times: np.ndarray
    sup_statistics: np.ndarray
    c_eps: float
    norm_scale: float
    statistic_quantiles: dict
    exceedance_quantiles: dict
    late_to_mid_ratio_median: float


def _default_checkpoints(horizon: float) -> np.ndarray:
    """Roughly geometric checkpoint times in [1, horizon] (half-decade steps)."""
    ts = []
    t = 1.0
    while t < horizon * (1 - 1e-9):
        ts.append(t)
        t *= math.sqrt(2.0)
    ts.append(horizon)
    return np.unique(np.round(np.asarray(ts)))


def slln_pathwise(
    model: ModelSpec,
    xi: Segment,
    f: CenteredObservable,
    eps: float,
    horizon: float,
    replicas: int,
    rng: RngStream,
    checkpoints: Optional[Sequence[float]] = None,
) -> PathwiseReport:
    """Pathwise decay statistic ``sup_t |A_t| t^{1/2 - eps}`` over checkpoints.

    ``c_eps`` is set to the 95th percentile of the statistic at the final
    horizon (recorded, not asserted); exceedance times are, per path, the
    last checkpoint where ``|A_t|`` exceeds ``c_eps * ||f|| * t^{-1/2+eps}``.
    """
    if not (0 < eps < 0.5):
        raise ValueError("eps must lie in (0, 1/2)")
    dt = xi.step
    if checkpoints is None:
        checkpoints = _default_checkpoints(horizon)
    times = np.asarray(sorted(set(float(t) for t in checkpoints)), dtype=float)
    if times[0] < 1.0:
        raise ValueError("checkpoints must start at t >= 1")
    steps = [int(round(t / dt)) for t in times]
    averages = _time_average_checkpoints(model, xi, f, steps, replicas, rng.child(0))
    weights = times ** (0.5 - eps)
    stats = np.abs(averages) * weights[:, None]  # (n_check, R)
    sup_stats = stats.max(axis=0)
    norm_scale = _norm_hint(f)
    final_stats = stats[-1]
    c_eps = float(np.quantile(final_stats, 0.95)) / max(norm_scale, 1e-300)
    violated = stats > c_eps * norm_scale
    exceed = np.where(violated.any(axis=0), times[np.maximum(
        violated.shape[0] - 1 - np.argmax(violated[::-1], axis=0), 0
    )], 0.0)
    mid = (times >= horizon / 4) & (times < horizon / 2)
    late = times >= horizon / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = stats[late].max(axis=0) / stats[mid].max(axis=0)
    ratios = ratios[np.isfinite(ratios)]
    quant = lambda a: {q: float(np.quantile(a, q)) for q in (0.5, 0.9, 0.95)}
    return PathwiseReport(
        eps=eps,
        horizon=horizon,
        checkpoint_times=times,
        sup_statistics=sup_stats,
        c_eps=c_eps,
        norm_scale=norm_scale,
        statistic_quantiles=quant(sup_stats),
        exceedance_quantiles=quant(exceed),
        late_to_mid_ratio_median=float(np.median(ratios)) if ratios.size else math.nan,
    )


# ---------------------------------------------------------------------------
# corrector estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrectorEstimate:
    value: float
    se: float
    tail_bound: float
    truncation: float  # t_max actually used (or k_max for the discrete sum)


@dataclass(frozen=True)
class _HalfValues:
    """Independent half-estimates of corrector values at a state batch."""

    a: np.ndarray
    b: np.ndarray
    se_a: np.ndarray
    se_b: np.ndarray
    tail_bound: float
    truncation: float

    def mean(self) -> np.ndarray:
        return 0.5 * (self.a + self.b)

    def mean_se(self) -> np.ndarray:
        return 0.5 * np.sqrt(self.se_a**2 + self.se_b**2)


def _choose_truncation(
    profile_a: GridProfile,
    profile_b: GridProfile,
    tail_at,
    auto: bool,
    tail_fraction: float,
) -> int:
    grid = profile_a.grid
    if not auto:
        return len(grid) - 1
    running = 0.5 * (np.abs(profile_a.values) + np.abs(profile_b.values))
    scale = np.median(running, axis=0)  # per grid point, across states
    for i in range(1, len(grid)):
        if tail_at(grid[i]) <= tail_fraction * max(scale[i], 1e-300):
            return i
    return len(grid) - 1


def _corrector_halves(
    sg: SemigroupEvaluator,
    f: AnyObservable,
    states: np.ndarray,
    cfg: CorrectorConfig,
    dt: float,
    rng: RngStream,
) -> _HalfValues:
    fit = cfg.require_rate_fit()
    quad = cfg.quad_step if cfg.quad_step is not None else dt
    half = max(1, cfg.replicas // 2)
    pa = sg.integral_profile(f, states, cfg.t_max, quad, half, rng.child(0))
    pb = sg.integral_profile(f, states, cfg.t_max, quad, half, rng.child(1))
    scale = _norm_hint(f)
    idx = _choose_truncation(
        pa, pb, lambda t: scale * fit.tail_integral_bound(t), cfg.auto_truncate, cfg.tail_fraction
    )
    t_used = float(pa.grid[idx])
    return _HalfValues(
        a=pa.values[:, idx],
        b=pb.values[:, idx],
        se_a=pa.ses[:, idx],
        se_b=pb.ses[:, idx],
        tail_bound=scale * fit.tail_integral_bound(t_used),
        truncation=t_used,
    )


def _discrete_halves(
    sg: SemigroupEvaluator,
    f: AnyObservable,
    states: np.ndarray,
    cfg: DiscreteCorrectorConfig,
    rng: RngStream,
    k_from: int = 0,
) -> _HalfValues:
    fit = cfg.require_rate_fit()
    half = max(1, cfg.replicas // 2)
    pa = sg.discrete_profile(f, states, k_from, cfg.k_max, half, rng.child(0))
    pb = sg.discrete_profile(f, states, k_from, cfg.k_max, half, rng.child(1))
    scale = _norm_hint(f)
    idx = _choose_truncation(
        pa, pb, lambda k: scale * fit.tail_sum_bound(int(k)), cfg.auto_truncate, cfg.tail_fraction
    )
    k_used = int(pa.grid[idx])
    return _HalfValues(
        a=pa.values[:, idx],
        b=pb.values[:, idx],
        se_a=pa.ses[:, idx],
        se_b=pb.ses[:, idx],
        tail_bound=scale * fit.tail_sum_bound(k_used),
        truncation=float(k_used),
    )


def _default_sg(model: ModelSpec, dt: float, sg: Optional[SemigroupEvaluator]) -> SemigroupEvaluator:
    return sg if sg is not None else MonteCarloSemigroup(model, dt)


def corrector(
    sg: SemigroupEvaluator,
    f: AnyObservable,
    xi: Segment,
    cfg: CorrectorConfig,
    rng: RngStream,
) -> CorrectorEstimate:
    """Estimate the integrated semigroup deviation at one state.

    Trapezoid quadrature of ``t -> P_t f(xi)`` over the quad grid, with common
    random numbers across the grid, truncated where the fitted-rate tail bound
    falls below ``cfg.tail_fraction`` of the running value.
    """
    halves = _corrector_halves(sg, f, xi.values[None], cfg, xi.step, rng)
    return CorrectorEstimate(
        value=float(halves.mean()[0]),
        se=float(halves.mean_se()[0]),
        tail_bound=halves.tail_bound,
        truncation=halves.truncation,
    )


def discrete_corrector(
    sg: SemigroupEvaluator,
    f: AnyObservable,
    xi: Segment,
    cfg: DiscreteCorrectorConfig,
    rng: RngStream,
) -> CorrectorEstimate:
    """Partial sum ``sum_{k=0}^{K} P_k f(xi)`` with a geometric tail bound."""
    halves = _discrete_halves(sg, f, xi.values[None], cfg, rng, k_from=0)
    return CorrectorEstimate(
        value=float(halves.mean()[0]),
        se=float(halves.mean_se()[0]),
        tail_bound=halves.tail_bound,
        truncation=halves.truncation,
    )


# ---------------------------------------------------------------------------
# one-step variance functionals
# ---------------------------------------------------------------------------


def _unit_run(
    model: ModelSpec,
    f: AnyObservable,
    start_values: np.ndarray,
    dt: float,
    rng: RngStream,
    snapshot_steps: Sequence[int] = (),
) -> tuple[np.ndarray, np.ndarray, dict[int, np.ndarray]]:
    """One unit of time for a batch: returns (unit integrals of f, final
    states, snapshots at requested intermediate steps)."""
    per_unit = int(round(1.0 / dt))
    if abs(per_unit * dt - 1.0) > 1e-9:
        raise ValueError(f"dt={dt!r} must divide the unit time")
    snaps = {}
    wanted = set(int(s) for s in snapshot_steps)
    integral = np.zeros(start_values.shape[0])
    prev = None
    final = None
    for j, window in step_windows(model, start_values, per_unit, dt, rng):
        vals = np.array(f.values(window), dtype=float)  # may alias the ring buffer
        if prev is not None:
            integral += 0.5 * (prev + vals) * dt
        prev = vals
        if j in wanted:
            snaps[j] = window.copy()
        if j == per_unit:
            final = window.copy()
    return integral, final, snaps


@dataclass(frozen=True)
class PhiEstimate:
    value: float
    se: float
    truncation: float
    tail_bound: float
    replicas: int


@dataclass(frozen=True)
class _PhiCore:
    """Intermediate products of the one-step variance estimate at one state."""

    products: np.ndarray  # (outer,) cross products
    inc_a: np.ndarray
    inc_b: np.ndarray
    base_halves: _HalfValues  # corrector at the base state
    end_halves: _HalfValues  # corrector at the one-step states
    unit_integrals: np.ndarray
    end_states: np.ndarray
    snapshots: dict


def _phi_core(
    model: ModelSpec,
    f: AnyObservable,
    xi_values: np.ndarray,
    outer: int,
    cfg: CorrectorConfig,
    dt: float,
    rng: RngStream,
    sg: Optional[SemigroupEvaluator],
    snapshot_steps: Sequence[int] = (),
) -> _PhiCore:
    sg = _default_sg(model, dt, sg)
    base = _corrector_halves(sg, f, xi_values[None], cfg, dt, rng.child(0))
    starts = np.broadcast_to(xi_values, (outer,) + xi_values.shape).copy()
    integrals, ends, snaps = _unit_run(model, f, starts, dt, rng.child(1), snapshot_steps)
    end = _corrector_halves(sg, f, ends, cfg, dt, rng.child(2))
    inc_a = integrals + end.a - base.a[0]
    inc_b = integrals + end.b - base.b[0]
    return _PhiCore(
        products=inc_a * inc_b,
        inc_a=inc_a,
        inc_b=inc_b,
        base_halves=base,
        end_halves=end,
        unit_integrals=integrals,
        end_states=ends,
        snapshots=snaps,
    )


def phi_f(
    model: ModelSpec,
    f: CenteredObservable,
    xi: Segment,
    replicas: int,
    corrector_cfg: CorrectorConfig,
    rng: RngStream,
    sg: Optional[SemigroupEvaluator] = None,
) -> PhiEstimate:
    """Expected squared one-step martingale increment at ``xi``.

    Monte Carlo over ``replicas`` one-step transitions; each squared increment
    is the product of two half-estimates with independent corrector noise, so
    the estimate is free of inner-noise-squared bias.
    """
    core = _phi_core(model, f, xi.values, replicas, corrector_cfg, xi.step, rng, sg)
    value = float(core.products.mean())
    se = float(core.products.std(ddof=1) / math.sqrt(replicas))
    # the base-state corrector noise is shared across replicas; its first-order
    # effect scales with the mean increment, which is zero in expectation
    se_common = math.hypot(
        abs(float(core.inc_b.mean())) * float(core.base_halves.se_a[0]),
        abs(float(core.inc_a.mean())) * float(core.base_halves.se_b[0]),
    )
    return PhiEstimate(
        value=value,
        se=math.hypot(se, se_common),
        truncation=core.base_halves.truncation,
        tail_bound=core.base_halves.tail_bound,
        replicas=replicas,
    )


def phi_hat_f(
    chain: Chain,
    f: CenteredObservable,
    xi_values: np.ndarray,
    replicas: int,
    cfg: DiscreteCorrectorConfig,
    rng: RngStream,
    sg: Optional[SemigroupEvaluator] = None,
) -> PhiEstimate:
    """Discrete variance functional: ``E|f(xi) + Rhat(X_1) - Rhat(xi)|^2``."""
    sg = sg if sg is not None else chain.evaluator()
    base = _discrete_halves(sg, f, xi_values[None], cfg, rng.child(0), k_from=0)
    starts = np.broadcast_to(xi_values, (replicas,) + xi_values.shape).copy()
    ends = chain.unit_states(starts, 1, rng.child(1))[1]
    end = _discrete_halves(sg, f, ends, cfg, rng.child(2), k_from=0)
    f0 = float(f.values(xi_values[None])[0])
    inc_a = f0 + end.a - base.a[0]
    inc_b = f0 + end.b - base.b[0]
    prod = inc_a * inc_b
    value = float(prod.mean())
    se = float(prod.std(ddof=1) / math.sqrt(replicas))
    se_common = math.hypot(
        abs(float(inc_b.mean())) * float(base.se_a[0]),
        abs(float(inc_a.mean())) * float(base.se_b[0]),
    )
    return PhiEstimate(
        value=value,
        se=math.hypot(se, se_common),
        truncation=base.truncation,
        tail_bound=base.tail_bound,
        replicas=replicas,
    )


@dataclass(frozen=True)
class VarianceReport:
    """Stationary variance constant with its independent cross-check.

    ``d_sq`` is the stationary mean of the one-step variance functional and
    ``cross_check`` the transport-identity value ``2 mean(f * R_f)``; their
    difference is reported in units of its (paired, group-aware) standard
    error.  For the unit-lag discrete pipeline the exact identity carries a
    ``- mean(f^2)`` correction, included here.
    """

    d_f: float
    d_sq: float
    d_sq_se: float
    cross_check: float
    cross_check_se: float
    discrepancy: float
    discrepancy_se: float
    discrepancy_in_se: float
    n_atoms: int
    outer_replicas: int
    truncation: float
    tail_bound: float
    discrete: bool
    mu_f_se: float


def _variance_pipeline(
    model_or_chain,
    f: CenteredObservable,
    stationary: EmpiricalMeasure,
    outer: int,
    cfg,
    rng: RngStream,
    sg: Optional[SemigroupEvaluator],
    discrete: bool,
    max_atoms: Optional[int],
) -> VarianceReport:
    atoms = stationary
    if max_atoms is not None and stationary.n > max_atoms:
        stride = stationary.n / max_atoms
        idx = np.unique((np.arange(max_atoms) * stride).astype(int))
        atoms = stationary.take(idx)
    n = atoms.n
    dt = atoms.step

    if discrete:
        chain = model_or_chain if not isinstance(model_or_chain, ModelSpec) else SdeChain(model_or_chain, dt)
        sg = sg if sg is not None else chain.evaluator()
    else:
        model = model_or_chain
        sg = _default_sg(model, dt, sg)

    # corrector halves at every atom (reused by both sides of the identity)
    if discrete:
        base = _discrete_halves(sg, f, atoms.values, cfg, rng.child(0), k_from=0)
    else:
        base = _corrector_halves(sg, f, atoms.values, cfg, dt, rng.child(0))

    # one-step transitions: all atoms' outer replicas in one batch
    starts = np.repeat(atoms.values, outer, axis=0)
    if discrete:
        ends = chain.unit_states(starts, 1, rng.child(1))[1]
        f0 = np.repeat(f.values(atoms.values), outer)
        integ = f0
        end = _discrete_halves(sg, f, ends, cfg, rng.child(2), k_from=0)
    else:
        integ, ends, _ = _unit_run(model, f, starts, dt, rng.child(1))
        end = _corrector_halves(sg, f, ends, cfg, dt, rng.child(2))

    inc_a = integ + end.a - np.repeat(base.a, outer)
    inc_b = integ + end.b - np.repeat(base.b, outer)
    phi_atom = (inc_a * inc_b).reshape(n, outer).mean(axis=1)

    f_atom = f.values(atoms.values)
    cross_atom = 2.0 * f_atom * base.mean()
    if discrete:
        cross_atom = cross_atom - f_atom**2  # exact unit-lag identity correction

    d_sq, d_sq_se = grouped_mean_se(phi_atom, atoms.groups)
    cross, cross_se = grouped_mean_se(cross_atom, atoms.groups)
    diff, diff_se = grouped_mean_se(phi_atom - cross_atom, atoms.groups)

    if d_sq < -2.0 * d_sq_se:
        raise EstimatorInconsistencyError(
            f"variance estimate {d_sq:.4g} is negative beyond 2 standard errors ({d_sq_se:.4g})"
        )
    if diff_se > 0:
        diff_in_se = abs(diff) / diff_se
    else:
        diff_in_se = 0.0 if diff == 0.0 else math.inf
    return VarianceReport(
        d_f=math.sqrt(max(d_sq, 0.0)),
        d_sq=d_sq,
        d_sq_se=d_sq_se,
        cross_check=cross,
        cross_check_se=cross_se,
        discrepancy=diff,
        discrepancy_se=diff_se,
        discrepancy_in_se=diff_in_se,
        n_atoms=n,
        outer_replicas=outer,
        truncation=base.truncation,
        tail_bound=base.tail_bound,
        discrete=discrete,
        mu_f_se=f.mu_f_se,
    )


def variance_D(
    model: ModelSpec,
    f: CenteredObservable,
    stationary: EmpiricalMeasure,
    cfg: CorrectorConfig,
    rng: RngStream,
    outer_replicas: int = 32,
    sg: Optional[SemigroupEvaluator] = None,
    max_atoms: Optional[int] = None,
) -> VarianceReport:
    """Asymptotic variance of the normalized time average, with cross-check.

    ``d_sq`` averages the one-step variance functional over the stationary
    atoms; ``cross_check`` evaluates ``2 mean(f * R_f)``, which the Poisson
    equation makes exactly equal.  Raises
    :class:`EstimatorInconsistencyError` when the variance estimate is
    negative beyond two standard errors.
    """
    return _variance_pipeline(
        model, f, stationary, outer_replicas, cfg, rng, sg, discrete=False, max_atoms=max_atoms
    )


def variance_D_discrete(
    model_or_chain,
    f: CenteredObservable,
    stationary: EmpiricalMeasure,
    cfg: DiscreteCorrectorConfig,
    rng: RngStream,
    outer_replicas: int = 32,
    sg: Optional[SemigroupEvaluator] = None,
    max_atoms: Optional[int] = None,
) -> VarianceReport:
    """Unit-lag analogue of :func:`variance_D` for the integer-time pipeline."""
    return _variance_pipeline(
        model_or_chain, f, stationary, outer_replicas, cfg, rng, sg, discrete=True, max_atoms=max_atoms
    )


# ---------------------------------------------------------------------------
# semigroup identity residual
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VphReport:
    residual: float
    combined_se: float
    phi: float
    phi_se: float
    step_of_squared: float
    step_of_squared_se: float
    base_squared: float
    base_squared_se: float
    cross_integral: float
    cross_integral_se: float
    quad_error: float
    replicas: int


def vph_residual(
    model: ModelSpec,
    f: CenteredObservable,
    xi: Segment,
    cfg: CorrectorConfig,
    rng: RngStream,
    replicas: int = 48,
    s_nodes: int = 9,
    sg: Optional[SemigroupEvaluator] = None,
) -> VphReport:
    """Residual of the one-step variance identity at ``xi``.

    Estimates ``phi_f(xi) - [P_1(R_f^2)(xi) - R_f(xi)^2 +
    2 * integral_0^1 P_s(f R_f)(xi) ds]``, every term by nested Monte Carlo
    on shared one-step paths.  Squares and the squared-corrector transport
    use independent half-estimates, so each term is unbiased; the s-integral
    uses trapezoid quadrature over ``s_nodes`` nodes with a Richardson error
    estimate folded into the combined error.
    """
    dt = xi.step
    per_unit = int(round(1.0 / dt))
    if (s_nodes - 1) < 2 or per_unit % (s_nodes - 1) != 0:
        raise ValueError("s_nodes - 1 must divide the unit step count")
    stride = per_unit // (s_nodes - 1)
    interior = [k * stride for k in range(1, s_nodes - 1)]
    core = _phi_core(
        model, f, xi.values, replicas, cfg, dt, rng, sg, snapshot_steps=interior
    )
    phi_val = float(core.products.mean())
    phi_se = float(core.products.std(ddof=1) / math.sqrt(replicas))

    # P_1(R^2): half-product at the one-step states
    sq_end = core.end_halves.a * core.end_halves.b
    step_sq = float(sq_end.mean())
    step_sq_se = float(sq_end.std(ddof=1) / math.sqrt(replicas))

    base_sq = float(core.base_halves.a[0] * core.base_halves.b[0])
    base_sq_se = math.hypot(
        float(core.base_halves.a[0]) * float(core.base_halves.se_b[0]),
        float(core.base_halves.b[0]) * float(core.base_halves.se_a[0]),
    )

    # f * R along the path at the s-grid; corrector halves at interior nodes
    sg_eval = _default_sg(model, dt, sg)
    fr = np.empty((s_nodes, replicas))
    f_xi = float(f.values(xi.values[None])[0])
    fr[0] = f_xi * float(core.base_halves.mean()[0])
    fr[-1] = f.values(core.end_states) * core.end_halves.mean()
    for i, step_idx in enumerate(interior):
        snap = core.snapshots[step_idx]
        halves = _corrector_halves(sg_eval, f, snap, cfg, dt, rng.child(10 + i))
        fr[i + 1] = f.values(snap) * halves.mean()
    ds = 1.0 / (s_nodes - 1)
    per_path = np.trapezoid(fr, dx=ds, axis=0)
    coarse = np.trapezoid(fr[::2], dx=2 * ds, axis=0) if (s_nodes - 1) % 2 == 0 else per_path
    cross_int = float(per_path.mean())
    cross_int_se = float(per_path.std(ddof=1) / math.sqrt(replicas))
    quad_error = abs(float((per_path - coarse).mean())) / 3.0

    residual = phi_val - (step_sq - base_sq + 2.0 * cross_int)
    combined = math.sqrt(
        phi_se**2 + step_sq_se**2 + base_sq_se**2 + (2 * cross_int_se) ** 2
    ) + 2.0 * quad_error
    return VphReport(
        residual=residual,
        combined_se=combined,
        phi=phi_val,
        phi_se=phi_se,
        step_of_squared=step_sq,
        step_of_squared_se=step_sq_se,
        base_squared=base_sq,
        base_squared_se=base_sq_se,
        cross_integral=cross_int,
        cross_integral_se=cross_int_se,
        quad_error=quad_error,
        replicas=replicas,
    )


# ---------------------------------------------------------------------------
# CLT statistic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CltReport:
    times: np.ndarray
    statistics: np.ndarray
    ses: np.ndarray
    d_f: float
    replicas: int
    degenerate: bool


def normalized_average_samples(
    model: ModelSpec,
    f: CenteredObservable,
    xi: Segment,
    times: Sequence[float],
    replicas: int,
    rng: RngStream,
) -> np.ndarray:
    """Replica samples of ``sqrt(t) * A_t`` at each checkpoint, shape (n_t, R)."""
    times = np.asarray(list(times), dtype=float)
    dt = xi.step
    steps = [int(round(t / dt)) for t in times]
    averages = _time_average_checkpoints(model, xi, f, steps, replicas, rng)
    return averages * np.sqrt(times)[:, None]


def clt_statistic(samples: np.ndarray, d_f: float) -> float:
    """Distribution distance of the normalized-average samples.

    ``d_f > 0``: exact Kolmogorov distance to the centered normal with
    standard deviation ``d_f``.  ``d_f = 0``: the weighted sup-distance
    ``sup_z (1 and |z|) |F_emp(z) - 1_{z>=0}(z)|`` to the point mass at zero.
    """
    if d_f < 0:
        raise ValueError("d_f must be non-negative")
    if d_f == 0.0:
        return weighted_degenerate_statistic(samples)
    return kolmogorov_statistic(samples, d_f)


def clt_test(
    model: ModelSpec,
    f: CenteredObservable,
    xi: Segment,
    times: Sequence[float],
    replicas: int,
    d_f: float,
    rng: RngStream,
    n_boot: int = 200,
) -> CltReport:
    """Kolmogorov statistic of ``sqrt(t) A_t`` against the fitted normal limit.

    One common ensemble provides every checkpoint; standard errors are
    bootstrap resamples of the replica values.  The statistic series should
    be non-increasing in ``t`` up to Monte Carlo noise.  At least 500
    replicas are required for the distribution distance to mean anything.
    """
    if d_f < 0:
        raise ValueError("d_f must be non-negative")
    if replicas < 500:
        raise ValueError("clt_test needs at least 500 replicas")
    times = np.asarray(list(times), dtype=float)
    samples = normalized_average_samples(model, f, xi, times, replicas, rng.child(0))
    stats = np.array([clt_statistic(samples[i], d_f) for i in range(times.size)])
    gen = rng.child(1).generator()
    ses = np.array(
        [bootstrap_se(samples[i], lambda s: clt_statistic(s, d_f), n_boot, gen) for i in range(times.size)]
    )
    return CltReport(times, stats, ses, d_f, replicas, degenerate=(d_f == 0.0))


# ---------------------------------------------------------------------------
# discrete martingale pipeline
# ---------------------------------------------------------------------------


def _as_chain(model_or_chain, dt: float) -> Chain:
    if isinstance(model_or_chain, ModelSpec):
        return SdeChain(model_or_chain, dt)
    return model_or_chain


@dataclass(frozen=True)
class MartingaleSequence:
    """Unit-time martingale differences along one path.

    ``z`` averages the two half-sequences; products ``z_a * z_b`` provide
    noise-unbiased squares.  ``f_values`` are f at the visited integer-time
    states, ``shifted_a/b`` the half-estimates of the shifted corrector.
    """

    z: np.ndarray
    z_a: np.ndarray
    z_b: np.ndarray
    partial_sums: np.ndarray
    f_values: np.ndarray
    shifted_a: np.ndarray
    shifted_b: np.ndarray
    truncation: float
    tail_bound: float


def martingale_increments(
    model_or_chain,
    f: CenteredObservable,
    xi: Segment,
    n: int,
    cfg: DiscreteCorrectorConfig,
    rng: RngStream,
    sg: Optional[SemigroupEvaluator] = None,
) -> MartingaleSequence:
    """Simulate one path to integer time ``n`` and form its increments.

    ``Z_k = f(X_k) + Q(X_k) - Q(X_{k-1})`` with the shifted corrector
    ``Q = sum_{j>=1} P_j f`` estimated by nested Monte Carlo with independent
    half-streams at every visited state.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    chain = _as_chain(model_or_chain, xi.step)
    sg = sg if sg is not None else chain.evaluator()
    states = chain.unit_states(xi.values[None], n, rng.child(0))[:, 0]  # (n+1, m+1, d)
    f_vals = f.values(states)
    q = _discrete_halves(sg, f, states, cfg, rng.child(1), k_from=1)
    z_a = f_vals[1:] + q.a[1:] - q.a[:-1]
    z_b = f_vals[1:] + q.b[1:] - q.b[:-1]
    z = 0.5 * (z_a + z_b)
    return MartingaleSequence(
        z=z,
        z_a=z_a,
        z_b=z_b,
        partial_sums=np.cumsum(z),
        f_values=f_vals,
        shifted_a=q.a,
        shifted_b=q.b,
        truncation=q.truncation,
        tail_bound=q.tail_bound,
    )


@dataclass(frozen=True)
class QvReport:
    qv: float
    qv_se: float
    qv_over_k: float
    qv_over_k_se: float
    per_state: np.ndarray
    per_state_se: np.ndarray
    k: int


def quadratic_variation(
    model: ModelSpec,
    f: CenteredObservable,
    xi: Segment,
    k: int,
    cfg: CorrectorConfig,
    rng: RngStream,
    outer_replicas: int = 32,
    sg: Optional[SemigroupEvaluator] = None,
) -> QvReport:
    """Quadratic variation ``sum_{i<k} phi_f(X_i)`` along one path.

    Each state's variance functional is estimated by :func:`phi_f` with the
    sub-stream ``rng.child(0, i)``; with ``k=1`` the result is bit-identical
    to ``phi_f(xi, ..., rng.child(0, 0))``.  ``qv_over_k`` is the
    running-average form whose long-run limit is the stationary variance
    constant.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    chain = SdeChain(model, xi.step)
    states = chain.unit_states(xi.values[None], k - 1, rng.child(1))[:, 0] if k > 1 else xi.values[None]
    vals = np.empty(k)
    ses = np.empty(k)
    for i in range(k):
        est = phi_f(
            model,
            f,
            Segment(states[i], xi.delay, xi.step),
            outer_replicas,
            cfg,
            rng.child(0, i),
            sg=sg,
        )
        vals[i] = est.value
        ses[i] = est.se
    qv = float(vals.sum())
    qv_se = float(np.sqrt((ses**2).sum()))
    mean_se = batch_means_se(vals) if k >= 4 else qv_se / k
    return QvReport(
        qv=qv,
        qv_se=qv_se,
        qv_over_k=qv / k,
        qv_over_k_se=float(max(mean_se, qv_se / k)),
        per_state=vals,
        per_state_se=ses,
        k=k,
    )


@dataclass(frozen=True)
class QvLlnReport:
    w0_ratio: float
    w0_se: float
    w4_ratio: float
    w4_se: float
    d_hat_sq: float
    d_hat_sq_se: float
    n: int
    replicas: int
    w0_passed: bool
    w4_passed: bool
    zero_signal: bool


def qv_lln_check(
    model_or_chain,
    f: CenteredObservable,
    xi: Segment,
    n: int,
    cfg: DiscreteCorrectorConfig,
    rng: RngStream,
    d_hat_sq: float,
    d_hat_sq_se: float = 0.0,
    replicas: int = 128,
    gate_se: float = 3.0,
    sg: Optional[SemigroupEvaluator] = None,
) -> QvLlnReport:
    """Check the martingale growth laws against the discrete variance constant.

    ``w4`` is the single-path mean of the squared increments (half-product
    form, batch-means standard error); ``w0`` estimates ``E M_n^2 / n`` over
    independent replicas via the telescoped martingale ``M_n = sum f(X_k) +
    Rhat(X_n) - Rhat(X_0)``, again as a product of independent halves.
    """
    chain = _as_chain(model_or_chain, xi.step)
    sg = sg if sg is not None else chain.evaluator()

    seq = martingale_increments(chain, f, xi, n, cfg, rng.child(0), sg=sg)
    w4_samples = seq.z_a * seq.z_b
    w4 = float(w4_samples.mean())
    w4_se = batch_means_se(w4_samples)

    starts = np.broadcast_to(xi.values, (replicas,) + xi.values.shape).copy()
    states = chain.unit_states(starts, n, rng.child(1))  # (n+1, R, m+1, d)
    f_all = np.stack([f.values(states[k]) for k in range(n)])  # k = 0..n-1
    sum_f = f_all.sum(axis=0)
    r_end = _discrete_halves(sg, f, states[n], cfg, rng.child(2), k_from=0)
    r_base = _discrete_halves(sg, f, xi.values[None], cfg, rng.child(3), k_from=0)
    m_a = sum_f + r_end.a - r_base.a[0]
    m_b = sum_f + r_end.b - r_base.b[0]
    prod = m_a * m_b / n
    w0 = float(prod.mean())
    w0_se = float(prod.std(ddof=1) / math.sqrt(replicas))

    zero_signal = d_hat_sq < 1e-300 and max(abs(w0), abs(w4)) < 1e-300
    w0_pass = abs(w0 - d_hat_sq) <= gate_se * math.hypot(w0_se, d_hat_sq_se)
    w4_pass = abs(w4 - d_hat_sq) <= gate_se * math.hypot(w4_se, d_hat_sq_se)
    return QvLlnReport(
        w0_ratio=w0,
        w0_se=w0_se,
        w4_ratio=w4,
        w4_se=w4_se,
        d_hat_sq=d_hat_sq,
        d_hat_sq_se=d_hat_sq_se,
        n=n,
        replicas=replicas,
        w0_passed=bool(zero_signal or w0_pass),
        w4_passed=bool(zero_signal or w4_pass),
        zero_signal=zero_signal,
    )


# ---------------------------------------------------------------------------
# law of iterated logarithm
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LilReport:
    """Normalized partial-sum record along one long path.

    All quantities are indexed by the checkpoint grid; running extremes run
    over every integer ``n >= n_min`` up to the checkpoint.  The endpoint
    value of the rescaled path equals ``sum_{l<n} f(X_l) / (D sqrt(2 n
    loglog n))`` exactly: both sides are evaluated through the same node
    formula.
    """

    n_grid: np.ndarray
    normalized_sums: np.ndarray
    running_max: np.ndarray
    running_min: np.ndarray
    sup_norm_of_lambda: np.ndarray
    endpoint_values: np.ndarray
    f_cumsum: np.ndarray  # f partial sums; f_cumsum[j] = sum_{l<=j+1} f(X_l)
    d_hat: float
    n_min: int
    n_max: int


def _loglog_denominator(n: np.ndarray) -> np.ndarray:
    return np.sqrt(2.0 * n * np.log(np.log(n)))


def lil_run(
    model_or_chain,
    f: CenteredObservable,
    xi: Segment,
    n_max: int,
    d_hat: float,
    checkpoints: Sequence[int],
    rng: RngStream,
    n_min: int = 16,
) -> LilReport:
    """One long path's normalized partial sums and rescaled-path extremes.

    ``d_hat`` must be the positive discrete variance constant; ``n_min >= 16``
    keeps the double logarithm comfortably positive.
    """
    if d_hat <= 0:
        raise ValueError("d_hat must be positive")
    if n_max < 16:
        raise ValueError("n_max must be at least 16")
    if n_min < 16:
        raise ValueError("n_min must be at least 16")
    checkpoints = np.asarray(sorted(set(int(c) for c in checkpoints)), dtype=int)
    if checkpoints[0] < n_min or checkpoints[-1] > n_max:
        raise ValueError("checkpoints must lie within [n_min, n_max]")

    chain = _as_chain(model_or_chain, xi.step)
    f_vals = np.empty(n_max + 1)
    if isinstance(chain, SdeChain):
        per_unit = chain.per_unit
        for j, window in step_windows(
            chain.model, xi.values[None], n_max * per_unit, chain.dt, rng.child(0)
        ):
            if j % per_unit == 0:
                f_vals[j // per_unit] = f.values(window)[0]
    else:
        states = chain.unit_states(xi.values[None], n_max, rng.child(0))[:, 0]
        f_vals[:] = f.values(states)

    csum = np.cumsum(f_vals[1:])  # csum[j] = sum_{l=1}^{j+1} f(X_l)

    ns = np.arange(n_min, n_max + 1)
    denom = _loglog_denominator(ns.astype(float))
    normalized = csum[ns - 1] / denom  # sum_{l<=n} f(X_l) / sqrt(2 n llog n)
    run_max = np.maximum.accumulate(normalized)
    run_min = np.minimum.accumulate(normalized)

    # |cumulative sums| running max for the rescaled-path sup at each checkpoint
    abs_peak = np.maximum.accumulate(np.abs(csum))

    idx = checkpoints - n_min
    d = float(d_hat)
    denom_cp = _loglog_denominator(checkpoints.astype(float))
    endpoint = np.array(
        [csum[nc - 2] / (d * denom_cp[i]) for i, nc in enumerate(checkpoints)]
    )  # node formula at t=1: sum_{l<=n-1}
    sup_lambda = np.array(
        [abs_peak[nc - 2] / (d * denom_cp[i]) for i, nc in enumerate(checkpoints)]
    )
    return LilReport(
        n_grid=checkpoints,
        normalized_sums=normalized[idx],
        running_max=run_max[idx],
        running_min=run_min[idx],
        sup_norm_of_lambda=sup_lambda,
        endpoint_values=endpoint,
        f_cumsum=csum,
        d_hat=d,
        n_min=n_min,
        n_max=n_max,
    )


def rescaled_path_nodes(f_partial_sums: np.ndarray, n: int, d_hat: float) -> np.ndarray:
    """Node values of the rescaled partial-sum path at ``t = k/n``, k = 0..n.

    The path is affine between nodes, so its sup norm is attained here.  The
    node at ``k`` carries the sum of the first ``k-1`` values, and the node at
    ``k = n`` (t = 1) is exactly the normalized endpoint sum.
    """
    if n < 16:
        raise ValueError("n must be at least 16")
    denom = d_hat * float(_loglog_denominator(np.asarray([float(n)]))[0])
    nodes = np.empty(n + 1)
    nodes[0] = nodes[1] = 0.0
    nodes[2:] = f_partial_sums[: n - 1] / denom
    return nodes


@dataclass(frozen=True)
class CameronMartinReport:
    norm: float
    member: bool
    tolerance: float


def cameron_martin_norm(
    values: Sequence[float], tolerance: float = 1e-9
) -> CameronMartinReport:
    """Energy ``integral_0^1 h'(t)^2 dt`` of a piecewise-linear path on [0, 1].

    ``values`` are the node values on a uniform grid with ``values[0] = 0``
    enforced; membership in the unit ball means the energy is at most
    ``1 + tolerance``.
    """
    h = np.asarray(list(values), dtype=float)
    if h.ndim != 1 or h.size < 2:
        raise ValueError("need node values on a grid with at least 2 points")
    if h[0] != 0.0:
        raise ValueError("paths must start at 0")
    dt = 1.0 / (h.size - 1)
    slopes = np.diff(h) / dt
    norm = float((slopes**2).sum() * dt)
    return CameronMartinReport(norm=norm, member=bool(norm <= 1.0 + tolerance), tolerance=tolerance)
