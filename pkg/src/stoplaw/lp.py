"""The discrete stopping problem as an exact linear program.

A randomized stopping time on a level-indexed model is a nonnegative stop
mass per node subject to flow conservation and the per-level time marginal.
``solve`` minimizes the expected cost over that polytope and returns an
optimal vertex.

Two engines sit behind the same contract (exact residuals, deterministic
output under fixed options):

* ``highs`` -- the general simplex path via scipy/HiGHS, always used on path
  trees and available on desk-scale lattices and for custom costs.
* ``fill`` -- an exact forward fill for the monotone cost families on
  lattices (stop the lowest phase values first).  For these costs any
  optimizer must stop a down-set of the phase at every level, otherwise the
  Stop-Go swap strictly improves it, and the down-set filling is therefore
  the unique optimal vertex.  The equivalence is cross-checked against HiGHS
  in the test suite; large lattices default to this engine because the
  half-coefficient flow chains defeat simplex scaling beyond a few hundred
  levels.

Running-max costs on the (position, max) lattice are solved on the reduced
drawdown walk: with E[B_tau] = 0 exact for every feasible plan (the position
is a martingale and all mass stops by the horizon), E[max] equals
-E[drawdown] plan by plan, so the problem projects onto the reflected walk
y = position - max and embeds back with y-measurable rates.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from . import costs as costs_mod
from .costs import CostFunctional, level_costs, state_sufficient, validate_against
from .errors import DualError, InfeasibleError, ModelError, SolverError, SwapError
from .grid import TargetDistribution
from .tree import PathTree, StateLattice

FLOW_RESIDUAL = 1e-9
MARGINAL_RESIDUAL = 1e-9
SUPPORT_EPS = 1e-9

_FILL_POSITION_KINDS = ("linear_time", "convex_terminal")
_FILL_MAX_KINDS = ("neg_running_max", "pos_running_max")


# ---------------------------------------------------------------------------
# randomized stopping times
# ---------------------------------------------------------------------------

class RandomizedStoppingTime:
    """Per-node stop mass with derived arrival-mass bookkeeping.

    Stop masses are stored per level in the model's node order.  Arrival
    masses are derived by pushing the continuing mass forward, so flow
    conservation holds by construction; validation checks the capacity,
    marginal and total-mass invariants.
    """

    def __init__(self, model, stop_levels):
        self.model = model
        self.stop = [np.asarray(s, dtype=float) for s in stop_levels]
        if len(self.stop) != model.n_steps + 1:
            raise ModelError("stop mass must cover levels 0..n_steps")
        for k, s in enumerate(self.stop):
            if s.shape != (model.level_size(k),):
                raise ModelError(f"level {k} stop array has wrong shape")
        self._arrival: Optional[list] = None

    @property
    def arrival(self) -> list:
        if self._arrival is None:
            arr = [self.model.initial_arrival()]
            for k in range(self.model.n_steps):
                arr.append(self.model.push_forward(k, arr[k] - self.stop[k]))
            self._arrival = arr
        return self._arrival

    def stop_mass(self, node) -> float:
        k, i = self.model.node_index(node)
        return float(self.stop[k][i])

    def arrival_mass(self, node) -> float:
        k, i = self.model.node_index(node)
        return float(self.arrival[k][i])

    def rates(self, k: int) -> np.ndarray:
        """Conditional stop rates where arrival mass is positive, else 0."""
        a = self.arrival[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(a > 0, self.stop[k] / np.where(a > 0, a, 1.0), 0.0)
        return np.clip(r, 0.0, 1.0)

    def time_marginal(self) -> np.ndarray:
        return np.array([float(s.sum()) for s in self.stop])

    def value(self, cost: CostFunctional) -> tuple:
        out = np.zeros(cost.arity)
        for k in range(self.model.n_steps + 1):
            c = level_costs(cost, self.model, k)
            out += self.stop[k] @ c
        return tuple(float(x) for x in out)

    def validate(self, mu: Optional[TargetDistribution] = None) -> None:
        for k in range(self.model.n_steps + 1):
            s, a = self.stop[k], self.arrival[k]
            if np.any(s < -1e-12):
                raise ModelError(f"negative stop mass at level {k}")
            over = float(np.max(s - a, initial=0.0))
            if over > FLOW_RESIDUAL:
                raise ModelError(f"stop mass exceeds arrival at level {k} by {over:.3e}")
        total = float(self.time_marginal().sum())
        if abs(total - 1.0) > MARGINAL_RESIDUAL:
            raise ModelError(f"total stopped mass {total!r} differs from 1")
        if mu is not None:
            resid = float(np.max(np.abs(self.time_marginal() - mu.mass)))
            if resid > MARGINAL_RESIDUAL:
                raise ModelError(f"time marginal misses the target by {resid:.3e}")

    # --- CSV dump/load (17 significant digits, bit-exact round trip) ------
    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("node_id,level,state_b,state_m,arrival_mass,stop_mass,stop_rate\n")
        for k in range(self.model.n_steps + 1):
            a, s, r = self.arrival[k], self.stop[k], self.rates(k)
            for i in range(self.model.level_size(k)):
                b, m = self.model.state_fields(k, i)
                node_id = self.model.node_id(self.model.node_key(k, i))
                ms = "" if m is None else str(m)
                buf.write(
                    f"{node_id},{k},{b},{ms},{a[i]:.17g},{s[i]:.17g},{r[i]:.17g}\n"
                )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, model, path) -> "RandomizedStoppingTime":
        stop = [np.zeros(model.level_size(k)) for k in range(model.n_steps + 1)]
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            if not line.strip():
                continue
            parts = line.split(",")
            node = model.parse_node_id(parts[0])
            k, i = model.node_index(node)
            stop[k][i] = float(parts[5])
        return cls(model, stop)


def feasibility_witness(model, mu: TargetDistribution) -> RandomizedStoppingTime:
    """The product-measure plan: stop rate mass_k / survival_k at every node.

    Its time marginal telescopes to mu exactly, for any model.
    """
    surv = mu.survival()
    stop = []
    a = model.initial_arrival()
    for k in range(model.n_steps + 1):
        rate = 0.0 if surv[k] <= 1e-300 else min(mu.mass[k] / surv[k], 1.0)
        s = a * rate
        stop.append(s)
        if k < model.n_steps:
            a = model.push_forward(k, a - s)
    return RandomizedStoppingTime(model, stop)


# ---------------------------------------------------------------------------
# the LP object
# ---------------------------------------------------------------------------

@dataclass
class StoppingLP:
    """Assembled stopping problem: model, target, cost, solver options.

    Stop-mass columns are level-major in the model's node order; marginal
    rows cover levels 1..n_steps (the level-0 stop is pinned to zero since
    the target puts no mass at t = 0).  Matrices for the simplex path are
    built on demand.
    """

    model: object
    mu: TargetDistribution
    cost: CostFunctional
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.level_offsets = np.cumsum(
            [0] + [self.model.level_size(k) for k in range(self.model.n_steps + 1)]
        )
        self.n_stop_columns = int(self.level_offsets[-1])
        self.n_marginal_rows = self.model.n_steps

    def stop_column(self, node) -> int:
        k, i = self.model.node_index(node)
        return int(self.level_offsets[k] + i)

    @property
    def n_rows(self) -> int:
        if isinstance(self.model, StateLattice):
            return self.n_stop_columns + self.n_marginal_rows
        return self.model.level_size(self.model.n_steps) + self.n_marginal_rows

    def objective(self, component: int = 0) -> np.ndarray:
        c = np.empty(self.n_stop_columns)
        for k in range(self.model.n_steps + 1):
            c[self.level_offsets[k] : self.level_offsets[k + 1]] = level_costs(
                self.cost, self.model, k
            )[:, component]
        return c


def assemble(model, mu: TargetDistribution, cost: CostFunctional, **options) -> StoppingLP:
    """Build the stopping LP, checking grid and state compatibility."""
    if mu.grid != model.grid:
        raise ModelError("target grid does not match the model grid")
    need = state_sufficient(cost)
    if isinstance(model, StateLattice):
        if need == "path":
            raise ModelError("path-dependent custom costs need a PathTree")
        if need == "position_and_max" and model.state_kind != "position_and_max":
            raise ModelError(f"cost {cost.kind} needs a position_and_max lattice")
    validate_against(cost, model)
    return StoppingLP(model, mu, cost, dict(options))


# ---------------------------------------------------------------------------
# HiGHS engine
# ---------------------------------------------------------------------------

def _tree_matrices(lp: StoppingLP):
    tree: PathTree = lp.model
    n = lp.n_stop_columns
    offs = lp.level_offsets
    N = tree.n_steps
    # path-capacity rows per leaf: cumulative conditional stop <= 1
    rows, cols, vals = [], [], []
    n_leaves = tree.level_size(N)
    for leaf in range(n_leaves):
        w_root = tree.root_law[leaf >> N][1]
        i = leaf
        for k in range(N, -1, -1):
            rows.append(leaf)
            cols.append(int(offs[k] + i))
            vals.append((1 << k) / w_root)
            i //= 2
    A_ub = sparse.coo_matrix((vals, (rows, cols)), shape=(n_leaves, n)).tocsc()
    b_ub = np.ones(n_leaves)
    erows, ecols, evals = [], [], []
    for k in range(1, N + 1):
        for i in range(tree.level_size(k)):
            erows.append(k - 1)
            ecols.append(int(offs[k] + i))
            evals.append(1.0)
    A_eq = sparse.coo_matrix((evals, (erows, ecols)), shape=(N, n)).tocsc()
    b_eq = lp.mu.mass[1:].copy()
    bounds = [(0.0, 0.0)] * tree.level_size(0) + [(0.0, None)] * (n - tree.level_size(0))
    return A_ub, b_ub, A_eq, b_eq, bounds


def _lattice_matrices(lp: StoppingLP):
    lat: StateLattice = lp.model
    N = lat.n_steps
    offs = lp.level_offsets
    n = lp.n_stop_columns  # continuation block is another n columns after it
    rows, cols, vals, b_eq = [], [], [], []
    # flow rows: one per node; level 0: g + s = 1; level k: g + s - inflow = 0
    for i in range(lat.level_size(0)):
        rows += [i, i]
        cols += [n + int(offs[0] + i), int(offs[0] + i)]
        vals += [1.0, 1.0]
        b_eq.append(float(lat.initial_arrival()[i]))
    r0 = lat.level_size(0)
    row_of = [np.arange(lat.level_size(0))]
    r = r0
    for k in range(1, N + 1):
        row_of.append(np.arange(r, r + lat.level_size(k)))
        for i in range(lat.level_size(k)):
            rows += [r, r]
            cols += [n + int(offs[k] + i), int(offs[k] + i)]
            vals += [1.0, 1.0]
            b_eq.append(0.0)
            r += 1
    for k in range(N):
        ci = lat.child_indices(k)
        for i in range(lat.level_size(k)):
            for c in ci[i]:
                rows.append(int(row_of[k + 1][c]))
                cols.append(n + int(offs[k] + i))
                vals.append(-0.5)
    for k in range(1, N + 1):
        for i in range(lat.level_size(k)):
            rows.append(r)
            cols.append(int(offs[k] + i))
            vals.append(1.0)
        b_eq.append(float(lp.mu.mass[k]))
        r += 1
    A_eq = sparse.coo_matrix((vals, (rows, cols)), shape=(r, 2 * n)).tocsc()
    bounds = [(0.0, 0.0)] * lat.level_size(0) + [(0.0, None)] * (n - lat.level_size(0))
    bounds += [(0.0, None)] * n  # continuation block
    return A_eq, np.array(b_eq), bounds


def _run_highs(c, A_ub, b_ub, A_eq, b_eq, bounds, method):
    res = linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method=method
    )
    if res.status == 2:
        raise InfeasibleError(f"LP reported infeasible: {res.message}")
    if res.status != 0:
        raise SolverError(
            f"LP solver failed (status {res.status}, {res.nit} iterations): {res.message}"
        )
    return res


def _solve_highs(lp: StoppingLP, objective: np.ndarray, extra_eq=None):
    """Solve with HiGHS; extra_eq = (row_vector_over_stop_columns, rhs) pins a value."""
    method = lp.options.get("method", "highs-ds")
    if isinstance(lp.model, StateLattice):
        A_eq, b_eq, bounds = _lattice_matrices(lp)
        c = np.concatenate([objective, np.zeros(lp.n_stop_columns)])
        if extra_eq is not None:
            vec, rhs = extra_eq
            row = sparse.csr_matrix(
                np.concatenate([vec, np.zeros(lp.n_stop_columns)])[None, :]
            )
            A_eq = sparse.vstack([A_eq, row]).tocsc()
            b_eq = np.concatenate([b_eq, [rhs]])
        res = _run_highs(c, None, None, A_eq, b_eq, bounds, method)
        x = res.x[: lp.n_stop_columns]
    else:
        A_ub, b_ub, A_eq, b_eq, bounds = _tree_matrices(lp)
        if extra_eq is not None:
            vec, rhs = extra_eq
            A_eq = sparse.vstack([A_eq, sparse.csr_matrix(vec[None, :])]).tocsc()
            b_eq = np.concatenate([b_eq, [rhs]])
        res = _run_highs(objective, A_ub, b_ub, A_eq, b_eq, bounds, method)
        x = res.x
    offs = lp.level_offsets
    stop = [np.maximum(x[offs[k] : offs[k + 1]], 0.0) for k in range(lp.model.n_steps + 1)]
    rst = RandomizedStoppingTime(lp.model, stop)
    rst.validate(lp.mu)
    return rst, float(res.fun)


# ---------------------------------------------------------------------------
# exact fill engine
# ---------------------------------------------------------------------------

def _fill_down_set(lp: StoppingLP, order_ascending: bool) -> RandomizedStoppingTime:
    """Stop the extreme phase values first at each level, exactly filling mu.

    On the position lattice the phase is the position itself and nodes are
    already stored in ascending order.
    """
    lat: StateLattice = lp.model
    mass = lp.mu.mass
    a = lat.initial_arrival()
    stop = []
    for k in range(lat.n_steps + 1):
        need = float(mass[k])
        s = np.zeros_like(a)
        idx = range(a.size) if order_ascending else range(a.size - 1, -1, -1)
        for i in idx:
            if need <= 1e-18:
                break
            take = min(float(a[i]), need)
            s[i] = take
            need -= take
        if need > MARGINAL_RESIDUAL:
            raise InfeasibleError(f"cannot place mass {need:.3e} at level {k}")
        stop.append(s)
        if k < lat.n_steps:
            a = lat.push_forward(k, a - s)
    return RandomizedStoppingTime(lat, stop)


def _reduced_fill(n_steps: int, mass: np.ndarray, ascending: bool) -> list:
    """Down-set fill on the reflected drawdown walk y = position - max <= 0.

    Level-k states are y = -k..0, stored ascending (index i <-> y = i - k).
    Returns per-level stop rates aligned with that indexing.
    """
    a = np.array([1.0])
    rates = []
    for k in range(n_steps + 1):
        need = float(mass[k])
        s = np.zeros_like(a)
        idx = range(a.size) if ascending else range(a.size - 1, -1, -1)
        for i in idx:
            if need <= 1e-18:
                break
            take = min(float(a[i]), need)
            s[i] = take
            need -= take
        if need > MARGINAL_RESIDUAL:
            raise InfeasibleError(f"cannot place mass {need:.3e} at level {k}")
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(a > 0, s / np.where(a > 0, a, 1.0), 0.0)
        rates.append(np.clip(r, 0.0, 1.0))
        if k < n_steps:
            g = a - s
            nxt = np.zeros(k + 2)
            nxt[:k] += 0.5 * g[:k]          # y < 0 moves down
            nxt[2 : k + 2] += 0.5 * g[:k]   # y < 0 moves up
            nxt[k] += 0.5 * g[k]            # y = 0 falls to -1
            nxt[k + 1] += 0.5 * g[k]        # y = 0 stays at 0 (new max)
            a = nxt
    return rates


def _embed_reduced_rates(lat: StateLattice, rates: list) -> RandomizedStoppingTime:
    """Lift drawdown-walk stop rates onto the (position, max) lattice."""
    a = lat.initial_arrival()
    stop = []
    for k in range(lat.n_steps + 1):
        y = (lat.level_value_units(k) - lat.level_runmax_units(k)).astype(int)
        r = rates[k][y + k]
        s = a * r
        stop.append(s)
        if k < lat.n_steps:
            a = lat.push_forward(k, a - s)
    return RandomizedStoppingTime(lat, stop)


def _fill_engine(lp: StoppingLP) -> RandomizedStoppingTime:
    kind = lp.cost.kind
    if kind in _FILL_POSITION_KINDS and lp.model.state_kind == "position":
        return _fill_down_set(lp, order_ascending=True)
    if kind in _FILL_MAX_KINDS or kind == "drawdown_lex":
        ascending = kind != "pos_running_max"
        rates = _reduced_fill(lp.model.n_steps, lp.mu.mass, ascending)
        return _embed_reduced_rates(lp.model, rates)
    raise ModelError(f"fill engine does not support cost {kind} on this model")


def _pick_engine(lp: StoppingLP) -> str:
    engine = lp.options.get("engine", "auto")
    if engine != "auto":
        return engine
    if isinstance(lp.model, StateLattice) and (
        (lp.cost.kind in _FILL_POSITION_KINDS and lp.model.state_kind == "position")
        or lp.cost.kind in _FILL_MAX_KINDS
        or lp.cost.kind == "drawdown_lex"
    ):
        return "fill"
    return "highs"


def solve(lp: StoppingLP):
    """Minimize the expected cost; returns (RandomizedStoppingTime, value)."""
    if lp.cost.arity != 1:
        raise ModelError("scalar solve needs an arity-1 cost; use solve_lexicographic")
    if _pick_engine(lp) == "fill":
        rst = _fill_engine(lp)
        rst.validate(lp.mu)
        return rst, rst.value(lp.cost)[0]
    return _solve_highs(lp, lp.objective(0))


def solve_lexicographic(model, mu: TargetDistribution, cost: CostFunctional, **options):
    """Two-stage lexicographic minimization of an arity-2 cost.

    Stage one minimizes the first component; stage two minimizes the second
    over the stage-one optimal face (pinned by an equality row).  Returns
    (RandomizedStoppingTime, (value1, value2)).
    """
    if cost.arity != 2:
        raise ModelError("solve_lexicographic needs an arity-2 cost")
    lp = assemble(model, mu, cost, **options)
    if _pick_engine(lp) == "fill":
        # For the drawdown pair the lexicographic optimum is the down-set fill
        # in the drawdown phase: the second component strictly orders the
        # stage-one ties toward stopping the deeper drawdowns first.
        rst = _fill_engine(lp)
        rst.validate(mu)
        return rst, rst.value(cost)
    rst1, v1 = _solve_highs(lp, lp.objective(0))
    rst2, v2 = _solve_highs(lp, lp.objective(1), extra_eq=(lp.objective(0), v1))
    check = rst2.value(cost)
    if abs(check[0] - v1) > 1e-9 * (1.0 + abs(v1)):
        raise SolverError(
            f"stage-2 solution drifted off the stage-1 optimum: {check[0]!r} vs {v1!r}"
        )
    return rst2, (check[0], float(v2))


# ---------------------------------------------------------------------------
# dual certificates
# ---------------------------------------------------------------------------

@dataclass
class DualCertificate:
    """Optimality certificate: node martingale M and time potential psi.

    Feasibility M + psi <= c holds at every node, the martingale property at
    every non-terminal node, and complementary slackness on the support of
    the certified plan; ``gap`` is |primal - (E[M at roots] + sum psi dmu)|.
    """

    model: object
    psi: np.ndarray
    M: list
    gap: float

    def m_value(self, node) -> float:
        k, i = self.model.node_index(node)
        return float(self.M[k][i])

    def martingale_residual(self) -> float:
        worst = 0.0
        for k in range(self.model.n_steps):
            if isinstance(self.model, StateLattice):
                ci = self.model.child_indices(k)
                exp = 0.5 * (self.M[k + 1][ci[:, 0]] + self.M[k + 1][ci[:, 1]])
            else:
                exp = 0.5 * (self.M[k + 1][0::2] + self.M[k + 1][1::2])
            worst = max(worst, float(np.max(np.abs(self.M[k] - exp), initial=0.0)))
        return worst

    def feasibility_slack(self, cost: CostFunctional) -> float:
        """Most positive violation of M + psi <= c (negative means feasible)."""
        worst = -np.inf
        for k in range(self.model.n_steps + 1):
            c = level_costs(cost, self.model, k)[:, 0]
            worst = max(worst, float(np.max(self.M[k] + self.psi[k] - c)))
        return worst

    def slackness_violation(self, rst: RandomizedStoppingTime, cost: CostFunctional) -> float:
        worst = 0.0
        for k in range(self.model.n_steps + 1):
            c = level_costs(cost, self.model, k)[:, 0]
            on = rst.stop[k] > SUPPORT_EPS
            if np.any(on):
                worst = max(
                    worst, float(np.max(np.abs((self.M[k] + self.psi[k] - c)[on])))
                )
        return worst


def _dual_lp(lp: StoppingLP, pins: Optional[list]):
    model = lp.model
    N = model.n_steps
    offs = lp.level_offsets
    n = lp.n_stop_columns
    nv = n + (N + 1)
    obj = np.zeros(nv)
    init = model.initial_arrival()
    obj[offs[0] : offs[1]] = -init
    obj[n:] = -lp.mu.mass
    erows, ecols, evals, beq = [], [], [], []
    r = 0
    for k in range(N):
        if isinstance(model, StateLattice):
            ci = model.child_indices(k)
            for i in range(model.level_size(k)):
                erows += [r, r, r]
                ecols += [int(offs[k] + i), int(offs[k + 1] + ci[i, 0]), int(offs[k + 1] + ci[i, 1])]
                evals += [1.0, -0.5, -0.5]
                beq.append(0.0)
                r += 1
        else:
            for i in range(model.level_size(k)):
                erows += [r, r, r]
                ecols += [int(offs[k] + i), int(offs[k + 1] + 2 * i), int(offs[k + 1] + 2 * i + 1)]
                evals += [1.0, -0.5, -0.5]
                beq.append(0.0)
                r += 1
    pinset = set(pins or [])
    urows, ucols, uvals, bub = [], [], [], []
    ru = 0
    for k in range(N + 1):
        c = level_costs(lp.cost, model, k)[:, 0]
        for i in range(model.level_size(k)):
            col = int(offs[k] + i)
            if col in pinset:
                erows += [r, r]
                ecols += [col, n + k]
                evals += [1.0, 1.0]
                beq.append(float(c[i]))
                r += 1
            else:
                urows += [ru, ru]
                ucols += [col, n + k]
                uvals += [1.0, 1.0]
                bub.append(float(c[i]))
                ru += 1
    A_eq = sparse.coo_matrix((evals, (erows, ecols)), shape=(r, nv)).tocsc()
    A_ub = sparse.coo_matrix((uvals, (urows, ucols)), shape=(ru, nv)).tocsc()
    res = linprog(
        obj,
        A_ub=A_ub,
        b_ub=np.array(bub),
        A_eq=A_eq,
        b_eq=np.array(beq),
        bounds=(None, None),
        method=lp.options.get("method", "highs-ds"),
    )
    return res


def extract_dual(lp: StoppingLP, rst: RandomizedStoppingTime) -> DualCertificate:
    """Construct and verify the martingale/potential certificate.

    On a PathTree the certificate always exists at the primal value.  On a
    StateLattice a state-measurable martingale certificate need not exist
    (the recombining state is coarser than the path filtration); when the
    best such certificate leaves a gap or misses complementary slackness a
    DualError reports the failing quantity.
    """
    if lp.cost.arity != 1:
        raise ModelError("dual certificates are built for scalar costs")
    primal = rst.value(lp.cost)[0]
    offs = lp.level_offsets
    pins = []
    for k in range(lp.model.n_steps + 1):
        for i in np.nonzero(rst.stop[k] > SUPPORT_EPS)[0]:
            pins.append(int(offs[k] + i))
    tol_gap = 1e-8 * (1.0 + abs(primal))
    attempt_err = None
    for attempt_pins in (pins, None):
        res = _dual_lp(lp, attempt_pins)
        if res.status != 0:
            attempt_err = f"dual LP status {res.status}: {res.message}"
            continue
        n = lp.n_stop_columns
        M = [res.x[offs[k] : offs[k + 1]].copy() for k in range(lp.model.n_steps + 1)]
        psi = res.x[n:].copy()
        cert = DualCertificate(lp.model, psi, M, gap=abs(-res.fun - primal))
        if cert.gap > tol_gap:
            attempt_err = f"duality gap {cert.gap:.3e} exceeds {tol_gap:.3e}"
            continue
        cs = cert.slackness_violation(rst, lp.cost)
        if cs > 1e-6:
            attempt_err = f"complementary slackness violated by {cs:.3e}"
            continue
        feas = cert.feasibility_slack(lp.cost)
        if feas > 1e-8:
            attempt_err = f"feasibility M + psi <= c violated by {feas:.3e}"
            continue
        mres = cert.martingale_residual()
        if mres > 1e-8:
            attempt_err = f"martingale residual {mres:.3e}"
            continue
        return cert
    raise DualError(f"no valid certificate: {attempt_err}")


# ---------------------------------------------------------------------------
# path-resolved mass surgery (used by the Stop-Go swap)
# ---------------------------------------------------------------------------

def tree_swap(
    rst: RandomizedStoppingTime, node_cont, node_stop, amount: float
) -> RandomizedStoppingTime:
    """Stop ``amount`` more at node_cont, release it at node_stop, and route
    the released mass through node_stop's subtree with node_cont's
    continuation rule transplanted increment-for-increment.

    The per-level stopped mass is unchanged exactly, so the time marginal is
    preserved; requires a PathTree (path-resolved continuations).
    """
    model = rst.model
    if not isinstance(model, PathTree):
        raise SwapError("the swap needs a PathTree model")
    ku, iu = model.node_index(node_cont)
    kv, iv = model.node_index(node_stop)
    if ku != kv:
        raise SwapError("swap pair must sit at the same level")
    cont_u = rst.arrival[ku][iu] - rst.stop[ku][iu]
    s_v = rst.stop[kv][iv]
    if amount < 0 or amount > min(cont_u, s_v) + 1e-12:
        raise SwapError(
            f"amount {amount} exceeds min(continuation {cont_u:.3e}, stop {s_v:.3e})"
        )
    stop = [s.copy() for s in rst.stop]
    stop[ku][iu] += amount
    stop[kv][iv] -= amount
    if amount > 0 and cont_u > 0:
        frac = amount / cont_u
        for j in range(1, model.n_steps - ku + 1):
            w = 1 << j
            seg_u = slice(iu * w, (iu + 1) * w)
            seg_v = slice(iv * w, (iv + 1) * w)
            moved = frac * rst.stop[ku + j][seg_u]
            stop[ku + j][seg_u] -= moved
            stop[ku + j][seg_v] += moved
    return RandomizedStoppingTime(model, stop)
