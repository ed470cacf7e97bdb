"""Transition-semigroup estimators and synthetic test kernels.

Everything downstream of simulation that needs ``P_t f(xi) = E f(X_t^xi)``
goes through a :class:`SemigroupEvaluator`.  The default evaluator runs the
integrator; synthetic kernels with closed-form action are injectable in its
place so the correction/variance machinery can be tested against exact
values.  All evaluators share one convention: state batches have shape
``(n, m+1, d)`` and every estimate at several times reuses common paths
(common random numbers), which is what makes time-quadratures of semigroup
values cheap and smooth.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError
from .metric import Observable
from .rng import RngStream
from .segments import ModelSpec, step_windows

__all__ = [
    "GridProfile",
    "SemigroupEvaluator",
    "MonteCarloSemigroup",
    "ExpDecayKernel",
    "GeometricKernel",
    "IidKernel",
    "SdeChain",
    "IidChain",
    "kernel_registry",
]


@dataclass(frozen=True)
class GridProfile:
    """Cumulative quadrature/sum profile of semigroup values for a state batch.

    ``grid`` holds the truncation checkpoints (times or integer lags) and
    ``values``/``ses`` the per-state running estimate and standard error at
    each checkpoint, shape (n_states, len(grid)).
    """

    grid: np.ndarray
    values: np.ndarray
    ses: np.ndarray


def _steps(t: float, dt: float, what: str) -> int:
    k = int(round(t / dt))
    if k < 1 or abs(t - k * dt) > 1e-6 * max(1.0, abs(t)):
        raise ValueError(f"{what} {t!r} must be a positive multiple of dt={dt!r}")
    return k


class SemigroupEvaluator(ABC):
    """Estimates of ``P_t f`` and of its time quadratures at a batch of states."""

    @abstractmethod
    def values_on_grid(
        self, f: Observable, states: np.ndarray, times: np.ndarray, replicas: int, rng: RngStream
    ) -> tuple[np.ndarray, np.ndarray]:
        """Estimate P_t f at each state and time; returns (values, ses) of shape (n, len(times))."""

    @abstractmethod
    def integral_profile(
        self,
        f: Observable,
        states: np.ndarray,
        t_max: float,
        quad_step: float,
        replicas: int,
        rng: RngStream,
    ) -> GridProfile:
        """Cumulative trapezoid of ``t -> P_t f`` over the quad grid up to t_max."""

    @abstractmethod
    def discrete_profile(
        self,
        f: Observable,
        states: np.ndarray,
        k_from: int,
        k_max: int,
        replicas: int,
        rng: RngStream,
    ) -> GridProfile:
        """Cumulative sums ``sum_{k=k_from}^K P_k f`` for K = k_from .. k_max."""


class MonteCarloSemigroup(SemigroupEvaluator):
    """Default evaluator: simulate replica trajectories from each state.

    One batch of ``replicas`` paths per state provides every requested time
    simultaneously; standard errors are across-replica.
    """

    def __init__(self, model: ModelSpec, dt: float, max_width: int = 4096):
        self.model = model
        self.dt = dt
        self.max_width = max_width

    def _run(self, f, states, n_steps, record_steps, replicas, rng):
        """Simulate replicas per state; return f-values (n, n_rec, replicas)
        sampled at the (distinct) record_steps."""
        states = np.asarray(states, dtype=float)
        n = states.shape[0]
        group = max(1, self.max_width // max(1, replicas))
        rec = {int(s): i for i, s in enumerate(record_steps)}
        out = np.empty((n, len(record_steps), replicas))
        for g0 in range(0, n, group):
            g1 = min(n, g0 + group)
            init = np.repeat(states[g0:g1], replicas, axis=0)
            for j, window in step_windows(
                self.model, init, n_steps, self.dt, rng.child(g0)
            ):
                if j in rec:
                    out[g0:g1, rec[j]] = f.values(window).reshape(g1 - g0, replicas)
        return out

    def values_on_grid(self, f, states, times, replicas, rng):
        times = np.asarray(times, dtype=float)
        steps = [0 if t == 0 else _steps(t, self.dt, "time") for t in times]
        samples = self._run(f, states, max(steps), steps, replicas, rng)
        return samples.mean(axis=2), samples.std(axis=2, ddof=1) / math.sqrt(replicas)

    def integral_profile(self, f, states, t_max, quad_step, replicas, rng):
        dt = self.dt
        stride = _steps(quad_step, dt, "quad_step")
        n_steps = _steps(t_max, dt, "t_max")
        n_steps -= n_steps % stride
        n_q = n_steps // stride  # quadrature nodes past t=0

        class _Trapezoid:
            def __init__(self, width):
                self.partial = np.zeros(width)
                self.prev = None
                self.cums = np.empty((n_q + 1, width))

            def step(self, j, vals):
                if j % stride:
                    return
                if self.prev is not None:
                    self.partial += 0.5 * (self.prev + vals) * (stride * dt)
                self.prev = vals.copy()
                self.cums[j // stride] = self.partial

            def result(self):
                return self.cums.transpose(1, 0)

        states = np.asarray(states, dtype=float)
        n = states.shape[0]
        grid = np.arange(n_q + 1) * (stride * dt)
        group = max(1, self.max_width // max(1, replicas))
        values = np.empty((n, n_q + 1))
        ses = np.empty((n, n_q + 1))
        for g0 in range(0, n, group):
            g1 = min(n, g0 + group)
            init = np.repeat(states[g0:g1], replicas, axis=0)
            acc = _Trapezoid((g1 - g0) * replicas)
            for j, window in step_windows(self.model, init, n_steps, dt, rng.child(g0)):
                acc.step(j, f.values(window))
            cums = acc.result().reshape(g1 - g0, replicas, n_q + 1)
            values[g0:g1] = cums.mean(axis=1)
            ses[g0:g1] = cums.std(axis=1, ddof=1) / math.sqrt(replicas)
        return GridProfile(grid, values, ses)

    def discrete_profile(self, f, states, k_from, k_max, replicas, rng):
        if k_from < 0 or k_max < k_from:
            raise ValueError("need 0 <= k_from <= k_max")
        per_unit = _steps(1.0, self.dt, "unit time")
        record = [k * per_unit for k in range(k_from, k_max + 1)]
        samples = self._run(f, states, k_max * per_unit, record, replicas, rng)
        cums = samples.cumsum(axis=1)  # (n, K, replicas)
        grid = np.arange(k_from, k_max + 1)
        return GridProfile(
            grid,
            cums.mean(axis=2),
            cums.std(axis=2, ddof=1) / math.sqrt(replicas),
        )


def _state_values(f: Observable, states: np.ndarray) -> np.ndarray:
    return f.values(np.asarray(states, dtype=float))


class ExpDecayKernel(SemigroupEvaluator):
    """Synthetic rule ``P_t g = exp(-rate * t) * g`` applied to any observable."""

    def __init__(self, rate: float = 1.0):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate

    def values_on_grid(self, f, states, times, replicas, rng):
        base = _state_values(f, states)
        times = np.asarray(times, dtype=float)
        vals = base[:, None] * np.exp(-self.rate * times)[None, :]
        return vals, np.zeros_like(vals)

    def integral_profile(self, f, states, t_max, quad_step, replicas, rng):
        n_q = int(round(t_max / quad_step))
        grid = np.arange(n_q + 1) * quad_step
        shape = np.exp(-self.rate * grid)
        # trapezoid of the decay shape, cumulative over the quad grid
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (shape[1:] + shape[:-1]) * quad_step)])
        base = _state_values(f, states)
        vals = base[:, None] * cum[None, :]
        return GridProfile(grid, vals, np.zeros_like(vals))

    def discrete_profile(self, f, states, k_from, k_max, replicas, rng):
        ks = np.arange(k_from, k_max + 1)
        cum = np.cumsum(np.exp(-self.rate * ks))
        base = _state_values(f, states)
        vals = base[:, None] * cum[None, :]
        return GridProfile(ks, vals, np.zeros_like(vals))


class GeometricKernel(SemigroupEvaluator):
    """Synthetic discrete rule ``P_k g = ratio^k * g``."""

    def __init__(self, ratio: float = 0.5):
        if not (0 < ratio < 1):
            raise ValueError("ratio must lie in (0, 1)")
        self.ratio = ratio

    def values_on_grid(self, f, states, times, replicas, rng):
        times = np.asarray(times, dtype=float)
        if not np.allclose(times, np.round(times)):
            raise ValueError("geometric kernel is defined at integer times only")
        base = _state_values(f, states)
        vals = base[:, None] * (self.ratio ** np.round(times))[None, :]
        return vals, np.zeros_like(vals)

    def integral_profile(self, f, states, t_max, quad_step, replicas, rng):
        raise NotImplementedError("geometric kernel has no continuous-time action")

    def discrete_profile(self, f, states, k_from, k_max, replicas, rng):
        ks = np.arange(k_from, k_max + 1)
        cum = np.cumsum(self.ratio**ks.astype(float))
        base = _state_values(f, states)
        vals = base[:, None] * cum[None, :]
        return GridProfile(ks, vals, np.zeros_like(vals))


class IidKernel(SemigroupEvaluator):
    """Synthetic rule for a chain that forgets its state in one step.

    ``P_0 f = f`` and ``P_k f = stationary_mean`` for k >= 1 (zero for a
    centered observable), so the shifted corrector vanishes identically.
    """

    def __init__(self, stationary_mean: float = 0.0):
        self.stationary_mean = stationary_mean

    def values_on_grid(self, f, states, times, replicas, rng):
        times = np.asarray(times, dtype=float)
        base = _state_values(f, states)
        vals = np.where(times[None, :] == 0, base[:, None], self.stationary_mean)
        return vals, np.zeros_like(vals)

    def integral_profile(self, f, states, t_max, quad_step, replicas, rng):
        raise NotImplementedError("i.i.d. kernel has no continuous-time action")

    def discrete_profile(self, f, states, k_from, k_max, replicas, rng):
        ks = np.arange(k_from, k_max + 1)
        terms = np.full(ks.size, self.stationary_mean)
        if k_from == 0:
            base = _state_values(f, states)
            vals = np.tile(np.cumsum(terms), (states.shape[0], 1))
            vals += base[:, None] - self.stationary_mean
            return GridProfile(ks, vals, np.zeros_like(vals))
        vals = np.tile(np.cumsum(terms), (states.shape[0], 1))
        return GridProfile(ks, vals, np.zeros_like(vals))


class SdeChain:
    """Unit-time skeleton of the SDE: states sampled at integer times."""

    def __init__(self, model: ModelSpec, dt: float):
        self.model = model
        self.dt = dt
        self.per_unit = _steps(1.0, dt, "unit time")

    def unit_states(
        self, start_values: np.ndarray, n_units: int, rng: RngStream
    ) -> np.ndarray:
        """Run ``n_units`` unit steps; returns states (n_units+1, n, m+1, d)."""
        start_values = np.asarray(start_values, dtype=float)
        out = np.empty((n_units + 1,) + start_values.shape)
        for j, window in step_windows(
            self.model, start_values, n_units * self.per_unit, self.dt, rng
        ):
            if j % self.per_unit == 0:
                out[j // self.per_unit] = window
        return out

    def evaluator(self, max_width: int = 4096) -> SemigroupEvaluator:
        return MonteCarloSemigroup(self.model, self.dt, max_width=max_width)


class IidChain:
    """Degenerate chain that resamples an independent segment every unit step."""

    def __init__(self, sampler: Callable[[np.random.Generator, int], np.ndarray], stationary_mean: float = 0.0):
        """``sampler(gen, n)`` must return n fresh segment value arrays (n, m+1, d)."""
        self.sampler = sampler
        self.stationary_mean = stationary_mean

    def unit_states(self, start_values: np.ndarray, n_units: int, rng: RngStream) -> np.ndarray:
        start_values = np.asarray(start_values, dtype=float)
        n = start_values.shape[0]
        gen = rng.generator()
        out = np.empty((n_units + 1,) + start_values.shape)
        out[0] = start_values
        for k in range(1, n_units + 1):
            draw = np.asarray(self.sampler(gen, n), dtype=float)
            if draw.shape != start_values.shape:
                raise ShapeError("i.i.d. sampler returned mismatched segment shapes")
            out[k] = draw
        return out

    def evaluator(self, max_width: int = 4096) -> SemigroupEvaluator:
        return IidKernel(self.stationary_mean)


def kernel_registry() -> dict[str, Callable[..., SemigroupEvaluator]]:
    """Synthetic kernels injectable by name (the default MC evaluator is built
    from a model and step size instead)."""
    return {
        "exp_decay": ExpDecayKernel,
        "geometric": GeometricKernel,
        "iid": IidKernel,
    }
