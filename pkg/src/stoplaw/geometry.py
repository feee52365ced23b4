"""Phase processes, barrier extraction, and Stop-Go verification.

The stopping region of an optimal plan, viewed through a scalar adapted phase
process Y, should be a downwards barrier: at every level the continued nodes
sit strictly above the stopped ones, with at most one phase value carrying a
fractional rate.  This module extracts barriers from solved plans, certifies
Stop-Go pairs by exhaustive enumeration of continuation rules on small trees,
verifies the no-Stop-Go-pair support property, and performs the cost-improving
swap that transplants one node's continuation rule onto another.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import CostFunctional, evaluate
from .errors import ModelError, PairError
from .grid import TimeGrid
from .lp import SUPPORT_EPS, RandomizedStoppingTime, tree_swap
from .tree import PathPrefix, PathTree, StateLattice, _rules, concatenate, node_path

STRICT_MARGIN = 1e-12


# ---------------------------------------------------------------------------
# phase processes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseProcess:
    """A scalar adapted statistic of the path: the vertical axis of the barrier."""

    kind: str  # position | drawdown | neg_drawdown

    def __post_init__(self):
        if self.kind not in ("position", "drawdown", "neg_drawdown"):
            raise ModelError(f"unknown phase kind {self.kind!r}")

    def evaluate(self, prefix: PathPrefix) -> float:
        if self.kind == "position":
            return prefix.end_value
        if self.kind == "drawdown":
            return prefix.end_value - prefix.running_max
        return prefix.running_max - prefix.end_value

    def level_units(self, model, k: int) -> np.ndarray:
        """Integer phase values (in step units) for level k of the model."""
        v = model.level_value_units(k)
        if self.kind == "position":
            return np.rint(v).astype(np.int64)
        m = model.level_runmax_units(k)
        d = v - m if self.kind == "drawdown" else m - v
        return np.rint(d).astype(np.int64)

    def level_values(self, model, k: int) -> np.ndarray:
        return self.level_units(model, k) * model.step

    @property
    def unit_spacing(self) -> int:
        """Gap between adjacent reachable phase values at a fixed level."""
        return 2 if self.kind == "position" else 1


def phase_for_cost(cost: CostFunctional) -> PhaseProcess:
    if cost.kind in ("linear_time", "convex_terminal"):
        return PhaseProcess("position")
    if cost.kind in ("neg_running_max", "drawdown_lex"):
        return PhaseProcess("drawdown")
    if cost.kind == "pos_running_max":
        return PhaseProcess("neg_drawdown")
    raise ModelError(f"no canonical phase for cost kind {cost.kind}")


# ---------------------------------------------------------------------------
# barriers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Barrier:
    """A threshold function over the grid; the stop region is the set below it.

    ``inclusive`` distinguishes the closed region {y <= beta} from the open
    one {y < beta}.  ``closed`` records whether beta is meant as the envelope
    of a closed region under grid refinement (on a fixed grid any function is
    an upper semicontinuous envelope, so the flag is bookkeeping).
    """

    grid: TimeGrid
    beta: np.ndarray = field(repr=False)
    inclusive: bool = True
    closed: bool = True

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "beta", b)
        if b.shape != (self.grid.n_steps + 1,):
            raise ModelError("beta must have one value per grid time")

    def value_at(self, t) -> np.ndarray:
        """Piecewise-constant right-continuous interpolation, extended past the horizon."""
        idx = np.searchsorted(self.grid.times, np.atleast_1d(t) + 1e-15, side="right") - 1
        return self.beta[np.clip(idx, 0, self.grid.n_steps)]

    def hits(self, y, t) -> np.ndarray:
        b = self.value_at(t)
        return y <= b if self.inclusive else y < b


def constant_barrier(grid: TimeGrid, level: float, inclusive: bool = True) -> Barrier:
    return Barrier(grid, np.full(grid.n_steps + 1, float(level)), inclusive=inclusive)


def extract_barrier(rst: RandomizedStoppingTime, y: PhaseProcess):
    """Lower/upper barriers of a plan and its fractional boundary nodes.

    lower.beta_k is the largest phase value stopped at level k (-inf if none);
    the upper barrier carries the same threshold with the region taken open.
    """
    model = rst.model
    beta = np.full(model.n_steps + 1, -np.inf)
    boundary_nodes = []
    for k in range(model.n_steps + 1):
        s, a = rst.stop[k], rst.arrival[k]
        yv = y.level_values(model, k)
        stopped = s > SUPPORT_EPS
        if stopped.any():
            beta[k] = float(yv[stopped].max())
        frac = stopped & (a - s > SUPPORT_EPS)
        for i in np.nonzero(frac)[0]:
            boundary_nodes.append(model.node_key(k, int(i)))
    lower = Barrier(model.grid, beta, inclusive=True)
    upper = Barrier(model.grid, beta.copy(), inclusive=False)
    return lower, upper, boundary_nodes


@dataclass
class StoppingRule:
    """Barrier plus per-level stop rate at the boundary phase value.

    This is the executable form of a barrier-type randomized plan: stop surely
    strictly below the boundary value, flip a coin with the boundary rate at
    it.  Used by the Monte Carlo validator.
    """

    grid: TimeGrid
    phase_kind: str
    beta: np.ndarray
    boundary_rate: np.ndarray


def boundary_rule(rst: RandomizedStoppingTime, y: PhaseProcess) -> StoppingRule:
    model = rst.model
    n = model.n_steps
    beta = np.full(n + 1, -np.inf)
    rate = np.ones(n + 1)
    for k in range(n + 1):
        s, a = rst.stop[k], rst.arrival[k]
        yu = y.level_units(model, k)
        stopped = s > SUPPORT_EPS
        if not stopped.any():
            continue
        bu = int(yu[stopped].max())
        beta[k] = bu * model.step
        on = yu == bu
        a_on = float(a[on].sum())
        rate[k] = float(s[on].sum()) / a_on if a_on > 0 else 1.0
    return StoppingRule(model.grid, y.kind, beta, np.clip(rate, 0.0, 1.0))


# ---------------------------------------------------------------------------
# support sets and structural reports
# ---------------------------------------------------------------------------

@dataclass
class SupportSet:
    """Stopped and continued nodes per level at the 1e-9 mass threshold."""

    stopped: list
    continued: list


def support_set(rst: RandomizedStoppingTime) -> SupportSet:
    model = rst.model
    stopped, continued = [], []
    for k in range(model.n_steps + 1):
        s, a = rst.stop[k], rst.arrival[k]
        stopped.append([model.node_key(k, int(i)) for i in np.nonzero(s > SUPPORT_EPS)[0]])
        continued.append(
            [model.node_key(k, int(i)) for i in np.nonzero(a - s > SUPPORT_EPS)[0]]
        )
    return SupportSet(stopped, continued)


@dataclass
class MonotoneRegionReport:
    verdict: str  # "barrier-type" | "not-barrier-type"
    offenders: list
    levels_checked: int


def check_monotone_region(rst: RandomizedStoppingTime, y: PhaseProcess) -> MonotoneRegionReport:
    """Is the plan barrier-type in the given phase?

    Barrier-type means: at every level every continued node sits strictly
    above every fully-stopped node in phase value, and at most one phase value
    per level carries a fractional rate.
    """
    model = rst.model
    offenders = []
    for k in range(model.n_steps + 1):
        s, a = rst.stop[k], rst.arrival[k]
        yu = y.level_units(model, k)
        full = (s > SUPPORT_EPS) & (a - s <= SUPPORT_EPS)
        cont = a - s > SUPPORT_EPS
        frac = (s > SUPPORT_EPS) & cont
        if full.any() and cont.any():
            top_full = int(yu[full].max())
            bad = cont & (yu <= top_full)
            for i in np.nonzero(bad)[0]:
                offenders.append(
                    (
                        "continued-at-or-below-stopped",
                        k,
                        model.node_key(k, int(i)),
                        int(yu[i]),
                        top_full,
                    )
                )
        frac_values = sorted(set(int(v) for v in yu[frac]))
        if len(frac_values) > 1:
            offenders.append(("multiple-fractional-values", k, tuple(frac_values)))
    verdict = "barrier-type" if not offenders else "not-barrier-type"
    return MonotoneRegionReport(verdict, offenders, model.n_steps + 1)


# ---------------------------------------------------------------------------
# Stop-Go pairs by exhaustive rule enumeration
# ---------------------------------------------------------------------------

@dataclass
class StopGoResult:
    verdict: str  # "SG" | "not-SG" | "undecided"
    witness: Optional[tuple]  # a rule giving >= when not-SG, else the tightest rule
    lhs: tuple
    rhs: tuple
    exhaustive: bool
    rules_checked: int


def _word_path(grid: TimeGrid, start_index: int, word: str, step: float) -> PathPrefix:
    vals = np.zeros(len(word) + 1)
    for j, c in enumerate(word):
        vals[j + 1] = vals[j] + (step if c == "u" else -step)
    return PathPrefix(grid, vals, start_index)


def _lex_strictly_less(lhs: tuple, rhs: tuple, margin: float = STRICT_MARGIN) -> bool:
    if lhs[0] < rhs[0] - margin:
        return True
    if abs(lhs[0] - rhs[0]) <= margin and len(lhs) > 1:
        return lhs[1] < rhs[1] - margin
    return False


def is_stop_go_pair(
    c: CostFunctional, omega: PathPrefix, eta: PathPrefix, depth: int
) -> StopGoResult:
    """Certify whether (omega, eta) at the same time is a Stop-Go pair.

    Enumerates every adapted continuation rule up to ``depth`` extra levels
    (capped by the grid horizon; a forced stop at the grid horizon is part of
    the discrete model, so reaching it makes the enumeration exhaustive).  SG
    requires strict improvement for every rule other than stop-now; a single
    rule with equality or reversal certifies not-SG; all-strict under a
    truncated enumeration is reported as undecided.
    """
    if omega.end_index != eta.end_index or omega.grid != eta.grid:
        raise PairError("pair prefixes must end at the same grid time")
    grid = omega.grid
    level = omega.end_index
    eff_depth = min(depth, grid.n_steps - level)
    if eff_depth < 1:
        raise PairError("no continuation room below the pair level")
    exhaustive = depth >= grid.n_steps - level
    step = grid.step
    c_omega = evaluate(c, omega)
    c_eta = evaluate(c, eta)
    # continuation cost tables per relative word
    words = [""]
    for d in range(1, eff_depth + 1):
        words += ["".join(w) for w in _product_words(d)]
    tab_o, tab_e = {}, {}
    for w in words:
        theta = _word_path(grid, level, w, step)
        tab_o[w] = evaluate(c, concatenate(omega, theta))
        tab_e[w] = evaluate(c, concatenate(eta, theta))
    arity = c.arity
    tightest = None
    checked = 0
    for rule in _rules(eff_depth):
        if rule == ("",):
            continue
        checked += 1
        e_o = [0.0] * arity
        e_e = [0.0] * arity
        for w in rule:
            p = 0.5 ** len(w)
            for j in range(arity):
                e_o[j] += p * tab_o[w][j]
                e_e[j] += p * tab_e[w][j]
        lhs = tuple(c_omega[j] + e_e[j] for j in range(arity))
        rhs = tuple(c_eta[j] + e_o[j] for j in range(arity))
        if not _lex_strictly_less(lhs, rhs):
            return StopGoResult("not-SG", rule, lhs, rhs, exhaustive, checked)
        gap = rhs[0] - lhs[0]
        if tightest is None or gap < tightest[0]:
            tightest = (gap, rule, lhs, rhs)
    verdict = "SG" if exhaustive else "undecided"
    _, rule, lhs, rhs = tightest
    return StopGoResult(verdict, rule, lhs, rhs, exhaustive, checked)


def _product_words(d: int) -> list:
    out = [""]
    for _ in range(d):
        out = [w + c for w in out for c in "du"]
    return out


# ---------------------------------------------------------------------------
# monotonicity principle verification
# ---------------------------------------------------------------------------

@dataclass
class StopGoViolation:
    node_cont: object
    node_stop: object
    level: int
    witness: Optional[tuple]
    lhs: tuple
    rhs: tuple


@dataclass
class StopGoReport:
    checked_pairs: int
    violations: list
    undecided_pairs: int
    verdict: str  # "pass" | "violations"


def check_monotonicity_principle(
    rst: RandomizedStoppingTime,
    c: CostFunctional,
    depth: int,
    sample_budget: int = 10_000,
) -> StopGoReport:
    """No Stop-Go pair may join a continued node with a stopped node.

    All (continued, stopped) pairs at equal levels are checked (or an evenly
    strided deterministic sample of ``sample_budget`` of them); a pair that is
    SG is a violation of the support geometry.  Undecided pairs (truncated
    enumeration) are counted, never coerced.
    """
    model = rst.model
    if not isinstance(model, PathTree):
        raise ModelError("the brute-force checker runs on PathTree models")
    pairs = []
    for k in range(1, model.n_steps):
        s, a = rst.stop[k], rst.arrival[k]
        cont = np.nonzero(a - s > SUPPORT_EPS)[0]
        stpd = np.nonzero(s > SUPPORT_EPS)[0]
        for iu in cont:
            for iv in stpd:
                if iu != iv:
                    pairs.append((k, int(iu), int(iv)))
    if len(pairs) > sample_budget:
        sel = np.unique(np.linspace(0, len(pairs) - 1, sample_budget).astype(int))
        pairs = [pairs[i] for i in sel]
    violations = []
    undecided = 0
    prefix_cache: dict = {}

    def prefix_of(k, i):
        key = (k, i)
        if key not in prefix_cache:
            prefix_cache[key] = node_path(model, model.node_key(k, i))
        return prefix_cache[key]

    for (k, iu, iv) in pairs:
        res = is_stop_go_pair(c, prefix_of(k, iu), prefix_of(k, iv), min(depth, model.n_steps - k))
        if res.verdict == "SG":
            violations.append(
                StopGoViolation(
                    model.node_key(k, iu), model.node_key(k, iv), k, None, res.lhs, res.rhs
                )
            )
        elif res.verdict == "undecided":
            undecided += 1
    verdict = "pass" if not violations else "violations"
    return StopGoReport(len(pairs), violations, undecided, verdict)


def stop_go_swap(
    rst: RandomizedStoppingTime, pair: tuple, amount: float
) -> RandomizedStoppingTime:
    """Apply the cost-improving swap at a (continued, stopped) pair.

    The returned plan stops ``amount`` more at the continued node, releases
    the same mass at the stopped node and routes it through that subtree with
    the continued node's conditional rule, so the time marginal is unchanged.
    """
    node_cont, node_stop = pair
    return tree_swap(rst, node_cont, node_stop, amount)


# ---------------------------------------------------------------------------
# barrier hitting plans (round trips)
# ---------------------------------------------------------------------------

def barrier_hitting_rst(
    model, barrier: Barrier, y: PhaseProcess, require_total: bool = True
) -> RandomizedStoppingTime:
    """Forward-induct the plan that stops exactly when the phase is in the barrier."""
    if barrier.grid != model.grid:
        raise ModelError("barrier grid does not match the model grid")
    a = model.initial_arrival()
    stop = []
    for k in range(model.n_steps + 1):
        yv = y.level_values(model, k)
        b = barrier.beta[k]
        hit = (yv <= b + 1e-12) if barrier.inclusive else (yv < b - 1e-12)
        s = np.where(hit, a, 0.0)
        stop.append(s)
        if k < model.n_steps:
            a = model.push_forward(k, a - s)
    rst = RandomizedStoppingTime(model, stop)
    if require_total:
        leftover = 1.0 - float(rst.time_marginal().sum())
        if leftover > 1e-9:
            raise ModelError(
                f"barrier leaves mass {leftover:.3e} unstopped at the horizon; "
                "set beta at the last level to +inf for a lumped plan"
            )
    return rst
