"""Continuous-time Monte Carlo validation of barriers against the target law.

Random streams are counter-based (Philox) and keyed by (seed, path index), so
serial and parallel runs agree bit-exactly and common-random-number
comparisons are one seed away.

Two simulators cover two claims:

* ``simulate_hitting_times`` drives fine-grid Brownian paths into a
  deterministic barrier: the first fine time with Y <= beta(t).
* ``simulate_rule`` drives Brownian increments through the solved plan itself
  (decision at each lattice time, nearest-node rounding, a coin at the
  boundary value).  A finite-dt barrier plan genuinely randomizes its
  boundary node, and representing that node by a deterministic threshold
  over- or under-stops by the node's arrival mass: at dt = 0.01 that bias is
  around 0.09 in Kolmogorov-Smirnov distance, an order above the faithful
  simulation.  Validation of "the plan has law mu" therefore uses the rule
  simulator; the deterministic simulator remains the right tool for
  closure-insensitivity checks and analytic barrier oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import lp as lp_mod
from .costs import bounded_time_weight, cost_by_name, state_sufficient
from .errors import DomainError, ModelError
from .geometry import (
    Barrier,
    PhaseProcess,
    StoppingRule,
    boundary_rule,
    extract_barrier,
    phase_for_cost,
)
from .grid import TargetDistribution, TimeGrid, resolve_mu_spec
from .tree import StateLattice

_CHUNK = 512


@dataclass(frozen=True)
class SimulationConfig:
    """Path count, monitoring grid, horizon, seed and phase for one MC run."""

    n_paths: int
    fine_dt: float
    horizon: float
    seed: int
    phase: PhaseProcess = PhaseProcess("position")

    def __post_init__(self):
        if self.n_paths < 1:
            raise DomainError("n_paths must be >= 1")
        if not self.fine_dt > 0:
            raise DomainError("fine_dt must be positive")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")


def _path_generator(seed: int, path_index: int) -> np.random.Generator:
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_hitting_times(barrier: Barrier, cfg: SimulationConfig, tilt_eps: float = 0.0) -> np.ndarray:
    """First fine-grid times with Y(path) <= beta(t); +inf for survivors.

    The barrier is interpolated piecewise-constant and right-continuous and
    extended at its last value beyond its grid horizon.  ``tilt_eps`` adds
    eps * t/(1+t) to the phase before the comparison.
    """
    if barrier.grid.horizon > cfg.horizon + 1e-12:
        raise ModelError("barrier horizon exceeds the simulation horizon")
    n_fine = int(round(cfg.horizon / cfg.fine_dt))
    fine_times = cfg.fine_dt * np.arange(1, n_fine + 1)
    beta_fine = barrier.value_at(fine_times)
    tilt = tilt_eps * np.vectorize(bounded_time_weight)(fine_times) if tilt_eps else None
    sq = np.sqrt(cfg.fine_dt)
    drawdown = cfg.phase.kind != "position"
    sign = -1.0 if cfg.phase.kind == "neg_drawdown" else 1.0
    out = np.empty(cfg.n_paths)
    for p in range(cfg.n_paths):
        gen = _path_generator(cfg.seed, p)
        pos = 0.0
        runmax = 0.0
        hit = np.inf
        base = 0
        while base < n_fine:
            m = min(_CHUNK, n_fine - base)
            path = pos + sq * np.cumsum(gen.standard_normal(m))
            if drawdown:
                mx = np.maximum(np.maximum.accumulate(path), runmax)
                y = sign * (path - mx)
                runmax = float(mx[-1])
            else:
                y = path
            if tilt is not None:
                y = y + tilt[base : base + m]
            b = beta_fine[base : base + m]
            below = (y <= b) if barrier.inclusive else (y < b)
            if below.any():
                hit = float(fine_times[base + int(np.argmax(below))])
                break
            pos = float(path[-1])
            base += m
        out[p] = hit
    return out


def simulate_rule(rule: StoppingRule, n_paths: int, seed: int) -> np.ndarray:
    """Drive Brownian increments through a barrier-plus-boundary-rate plan.

    Decisions happen at the lattice times: the phase value is rounded to the
    nearest reachable lattice value, values strictly below the boundary stop
    surely, the boundary value stops with its per-level rate.
    """
    grid = rule.grid
    N = grid.n_steps
    step = grid.step
    levels = np.arange(1, N + 1)
    beta_units = rule.beta / step  # -inf preserved
    out = np.empty(n_paths)
    position_kind = rule.phase_kind == "position"
    sign = -1.0 if rule.phase_kind == "neg_drawdown" else 1.0
    for p in range(n_paths):
        gen = _path_generator(seed, p)
        z = gen.standard_normal(N)
        u = gen.random(N)
        pos = np.cumsum(z)  # in step units
        if position_kind:
            yu = pos
            rounded = 2.0 * np.rint((yu - levels) / 2.0) + levels
        else:
            mx = np.maximum(np.maximum.accumulate(pos), 0.0)
            yu = sign * (pos - mx)
            rounded = np.minimum(np.rint(yu), 0.0) if sign > 0 else np.rint(yu)
        b = beta_units[1:]
        sure = rounded < b - 0.5
        boundary = np.abs(rounded - b) < 0.5
        stop = sure | (boundary & (u < rule.boundary_rate[1:]))
        idx = np.argmax(stop) if stop.any() else -1
        out[p] = grid.times[idx + 1] if idx >= 0 else np.inf
    return out


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov distances
# ---------------------------------------------------------------------------

def ks_distance(samples: np.ndarray, target: Union[TargetDistribution, Callable[[float], float]]) -> float:
    """Sup distance between the empirical CDF and the target CDF.

    Evaluated at all finite sample points and, for a grid target, at the grid
    times, from both sides of every jump.  +inf samples count in the
    denominator but never enter the CDF.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise DomainError("empty sample")
    finite = np.sort(samples[np.isfinite(samples)])
    n = samples.size
    if isinstance(target, TargetDistribution):
        times = target.grid.times
        cdf_right = target.cdf()
        pts = np.unique(np.concatenate([times, finite]))
        idx_r = np.clip(np.searchsorted(times, pts, side="right") - 1, 0, len(times) - 1)
        tgt_r = np.where(pts < times[0], 0.0, cdf_right[idx_r])
        idx_l = np.searchsorted(times, pts, side="left") - 1
        tgt_l = np.where(idx_l >= 0, cdf_right[np.clip(idx_l, 0, None)], 0.0)
    else:
        pts = np.unique(finite)
        tgt_r = np.array([float(target(t)) for t in pts])
        tgt_l = tgt_r
        if pts.size == 0:
            return float(1.0)  # everything escaped to +inf vs a finite-time law
    emp_r = np.searchsorted(finite, pts, side="right") / n
    emp_l = np.searchsorted(finite, pts, side="left") / n
    return float(
        max(
            np.max(np.abs(emp_r - tgt_r), initial=0.0),
            np.max(np.abs(emp_l - tgt_l), initial=0.0),
        )
    )


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample sup-CDF distance; +inf sentinels weigh the denominators."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    fa = np.sort(a[np.isfinite(a)])
    fb = np.sort(b[np.isfinite(b)])
    pts = np.unique(np.concatenate([fa, fb]))
    if pts.size == 0:
        return 0.0
    ca = np.searchsorted(fa, pts, side="right") / a.size
    cb = np.searchsorted(fb, pts, side="right") / b.size
    return float(np.max(np.abs(ca - cb)))


# ---------------------------------------------------------------------------
# inverse first passage
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    """MC comparison of one solved plan against its target law."""

    refinement_dt: float
    ks_statistic: float
    unstopped_fraction: float
    decile_errors: np.ndarray = field(repr=False)
    sample_times: np.ndarray = field(repr=False)
    n_paths: int = 0


def _decile_errors(samples: np.ndarray, mu: TargetDistribution) -> np.ndarray:
    finite = np.sort(samples[np.isfinite(samples)])
    n = samples.size
    cdf = mu.cdf()
    times = mu.grid.times
    out = np.empty(10)
    for j, q in enumerate(np.linspace(0.1, 1.0, 10)):
        k = int(np.searchsorted(cdf, q - 1e-12, side="left"))
        k = min(k, len(times) - 1)
        emp = np.searchsorted(finite, times[k], side="right") / n
        out[j] = abs(emp - cdf[k])
    return out


def validate_plan(rst, mu: TargetDistribution, phase: PhaseProcess, n_paths: int, seed: int) -> ValidationReport:
    """Simulate the solved plan with Brownian increments and compare to mu."""
    rule = boundary_rule(rst, phase)
    samples = simulate_rule(rule, n_paths, seed)
    return ValidationReport(
        refinement_dt=mu.grid.dt,
        ks_statistic=ks_distance(samples, mu),
        unstopped_fraction=float(np.isinf(samples).mean()),
        decile_errors=_decile_errors(samples, mu),
        sample_times=np.sort(samples[np.isfinite(samples)]),
        n_paths=n_paths,
    )


def solve_ifp(
    mu_spec,
    dt_schedule,
    cost_name: str,
    horizon: float,
    n_paths: int = 100_000,
    seed: int = 0,
    horizon_policy: str = "lump_at_end",
):
    """Numerical inverse first passage: solve, extract, validate per refinement.

    For each dt in the schedule the target is discretized (tail lumped at the
    horizon by default), the stopping LP is solved on the position lattice,
    the lower barrier extracted and the plan validated by Monte Carlo against
    the discretized target.  Returns the finest barrier and one report per
    refinement.
    """
    if not (cost_name.startswith("bt_at") or cost_name == "phi_cubed"):
        raise DomainError("solve_ifp supports the bt_at and phi_cubed cost families")
    cost = cost_by_name(cost_name)
    if state_sufficient(cost) != "position":
        raise DomainError("inverse first passage runs in the position phase")
    reports = []
    final_barrier = None
    final_rst = None
    for dt in dt_schedule:
        n = int(round(horizon / dt))
        grid = TimeGrid(dt, n)
        mu = resolve_mu_spec(mu_spec, grid, horizon_policy)
        lattice = StateLattice(grid, "position")
        problem = lp_mod.assemble(lattice, mu, cost)
        rst, _ = lp_mod.solve(problem)
        lower, _, _ = extract_barrier(rst, PhaseProcess("position"))
        reports.append(validate_plan(rst, mu, PhaseProcess("position"), n_paths, seed))
        final_barrier = lower
        final_rst = rst
    return final_barrier, reports, final_rst


def closure_insensitivity(barrier: Barrier, eps_list, cfg: SimulationConfig):
    """Hitting-law sensitivity to an eps * t/(1+t) tilt of the phase.

    Simulates with common random numbers (same seed) and reports the
    two-sample KS distance of each tilted law to the untilted one.  The
    distances must decrease to the MC noise floor as eps decreases to 0.
    """
    eps_list = list(eps_list)
    if any(e < 0 for e in eps_list) or any(
        eps_list[i] <= eps_list[i + 1] for i in range(len(eps_list) - 1)
    ):
        raise DomainError("eps_list must be positive and strictly decreasing")
    base = simulate_hitting_times(barrier, cfg, tilt_eps=0.0)
    rows = []
    for eps in eps_list:
        tilted = simulate_hitting_times(barrier, cfg, tilt_eps=eps)
        rows.append((float(eps), ks_two_sample(tilted, base)))
    return rows
