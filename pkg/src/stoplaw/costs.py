"""Adapted cost processes evaluated on path prefixes.

All costs are stored in minimization convention (the appetizer problems that
maximize are entered with the sign already flipped); the CLI reports both
signs.  Lexicographic costs have arity 2 and compare in dictionary order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, ModelError
from .tree import PathPrefix, PathTree, StateLattice

KINDS = (
    "linear_time",
    "convex_terminal",
    "neg_running_max",
    "pos_running_max",
    "drawdown_lex",
    "custom",
)


def bounded_time_weight(t: float) -> float:
    """Default strictly increasing bounded time weight t / (1 + t)."""
    return t / (1.0 + t)


@dataclass(frozen=True)
class CostFunctional:
    """A cost c(path, t) depending only on the prefix up to t.

    kind selects the formula; ``weight`` is the time evaluator A for
    linear_time, ``terminal`` the space evaluator phi for convex_terminal,
    ``custom_fn`` a prefix evaluator returning a tuple for kind custom.
    """

    kind: str
    arity: int = 1
    weight: Optional[Callable[[float], float]] = None
    terminal: Optional[Callable[[float], float]] = None
    custom_fn: Optional[Callable[[PathPrefix], tuple]] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown cost kind {self.kind!r}")
        if self.kind == "drawdown_lex" and self.arity != 2:
            raise DomainError("drawdown_lex has arity 2")
        if self.kind != "drawdown_lex" and self.kind != "custom" and self.arity != 1:
            raise DomainError(f"{self.kind} has arity 1")
        if self.arity > 2:
            raise DomainError("lexicographic arity capped at 2")


def linear_time(weight: Callable[[float], float] = bounded_time_weight, name: str = "bt_at") -> CostFunctional:
    return CostFunctional("linear_time", weight=weight, name=name)


def convex_terminal(phi: Callable[[float], float], name: str = "phi") -> CostFunctional:
    return CostFunctional("convex_terminal", terminal=phi, name=name)


def neg_running_max() -> CostFunctional:
    return CostFunctional("neg_running_max", name="neg_max")


def pos_running_max() -> CostFunctional:
    return CostFunctional("pos_running_max", name="pos_max")


def drawdown_lex() -> CostFunctional:
    return CostFunctional("drawdown_lex", arity=2, name="drawdown_lex")


def custom(fn: Callable[[PathPrefix], tuple], arity: int = 1, name: str = "custom") -> CostFunctional:
    return CostFunctional("custom", arity=arity, custom_fn=fn, name=name)


def evaluate(c: CostFunctional, prefix: PathPrefix) -> tuple:
    """Cost vector (length = arity) of stopping the prefix at its end time."""
    if c.kind == "linear_time":
        return (-prefix.end_value * c.weight(prefix.end_time),)
    if c.kind == "convex_terminal":
        return (-c.terminal(prefix.end_value),)
    if c.kind == "neg_running_max":
        return (-prefix.running_max,)
    if c.kind == "pos_running_max":
        return (prefix.running_max,)
    if c.kind == "drawdown_lex":
        mx = prefix.running_max
        return (-mx, (mx - prefix.end_value) ** 3)
    out = tuple(c.custom_fn(prefix))
    if len(out) != c.arity:
        raise DomainError(f"custom cost returned arity {len(out)}, declared {c.arity}")
    return out


def state_sufficient(c: CostFunctional) -> str:
    """Smallest model state that carries the cost: 'position', 'position_and_max', or 'path'."""
    if c.kind in ("linear_time", "convex_terminal"):
        return "position"
    if c.kind in ("neg_running_max", "pos_running_max", "drawdown_lex"):
        return "position_and_max"
    return "path"


def lattice_level_costs(c: CostFunctional, lattice: StateLattice, k: int) -> np.ndarray:
    """Cost rows (n_nodes, arity) at lattice level k."""
    t = lattice.grid.times[k]
    b = lattice.level_value_units(k) * lattice.step
    if c.kind == "linear_time":
        return (-b * c.weight(t)).reshape(-1, 1)
    if c.kind == "convex_terminal":
        phi = np.array([c.terminal(x) for x in b])
        return (-phi).reshape(-1, 1)
    if lattice.state_kind != "position_and_max":
        raise ModelError(f"cost {c.kind} needs a position_and_max lattice")
    m = lattice.level_runmax_units(k) * lattice.step
    if c.kind == "neg_running_max":
        return (-m).reshape(-1, 1)
    if c.kind == "pos_running_max":
        return m.reshape(-1, 1)
    if c.kind == "drawdown_lex":
        return np.stack([-m, (m - b) ** 3], axis=1)
    raise ModelError("custom costs are path costs; use a PathTree")


def tree_level_costs(c: CostFunctional, tree: PathTree, k: int) -> np.ndarray:
    """Cost rows (n_nodes, arity) at tree level k."""
    t = tree.grid.times[k]
    b = tree.level_value_units(k) * tree.step
    if c.kind == "linear_time":
        return (-b * c.weight(t)).reshape(-1, 1)
    if c.kind == "convex_terminal":
        return (-np.array([c.terminal(x) for x in b])).reshape(-1, 1)
    m = tree.level_runmax_units(k) * tree.step
    if c.kind == "neg_running_max":
        return (-m).reshape(-1, 1)
    if c.kind == "pos_running_max":
        return m.reshape(-1, 1)
    if c.kind == "drawdown_lex":
        return np.stack([-m, (m - b) ** 3], axis=1)
    # custom: evaluate per node prefix
    from .tree import node_path

    rows = []
    for node in tree.level_nodes(k):
        rows.append(evaluate(c, node_path(tree, node)))
    return np.array(rows, dtype=float).reshape(tree.level_size(k), c.arity)


def level_costs(c: CostFunctional, model, k: int) -> np.ndarray:
    if isinstance(model, StateLattice):
        return lattice_level_costs(c, model, k)
    return tree_level_costs(c, model, k)


def validate_against(c: CostFunctional, model) -> None:
    """Check the structural hypotheses on the model's reachable values.

    linear_time needs A strictly increasing on the grid; convex_terminal needs
    positive discrete third differences of phi on the reachable value set.
    """
    if c.kind == "linear_time":
        a = np.array([c.weight(t) for t in model.grid.times])
        if np.any(np.diff(a) <= 0):
            raise DomainError("time weight A is not strictly increasing on the grid")
    elif c.kind == "convex_terminal":
        n = model.grid.n_steps
        vals = np.arange(-n, n + 1) * model.step
        phi = np.array([c.terminal(x) for x in vals])
        if np.any(np.diff(phi, 3) <= 0) and len(phi) >= 4:
            raise DomainError("terminal cost has nonpositive third differences on the lattice values")


# ---------------------------------------------------------------------------
# string registry (CLI surface)
# ---------------------------------------------------------------------------

def cost_by_name(name: str) -> CostFunctional:
    """Resolve a cost string: bt_at[:a=t], phi_cubed, neg_max, pos_max, drawdown_lex."""
    base, _, param = name.partition(":")
    if base == "bt_at":
        if param in ("", "a=bounded"):
            return linear_time(bounded_time_weight, name="bt_at")
        if param == "a=t":
            return linear_time(lambda t: t, name="bt_at:a=t")
        raise DomainError(f"unknown bt_at parameter {param!r}")
    if param:
        raise DomainError(f"cost {base!r} takes no parameters")
    if base == "phi_cubed":
        return convex_terminal(lambda x: x**3, name="phi_cubed")
    if base == "neg_max":
        return neg_running_max()
    if base == "pos_max":
        return pos_running_max()
    if base == "drawdown_lex":
        return drawdown_lex()
    raise DomainError(f"unknown cost name {name!r}")
