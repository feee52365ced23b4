"""Discrete path models of Brownian motion.

Two models share one level-indexed interface:

* ``PathTree`` -- the full (non-recombining) binary tree of +-sqrt(dt) moves,
  used for brute-force Stop-Go checks and path-resolved mass surgery.  Node
  count doubles per level, so depth is capped at 16.
* ``StateLattice`` -- a recombining lattice keyed by position, or by
  (position, running max) for path-dependent costs that only need the running
  max as extra state.

Levels are indexed k = 0..n_steps; positions are kept in integer step units
(space value = units * sqrt(dt)).  Level node order is fixed and deterministic,
and all mass bookkeeping elsewhere uses per-level arrays in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConcatError, DepthError, NodeError
from .grid import TimeGrid

MAX_TREE_DEPTH = 16
MAX_RULE_DEPTH = 5


# ---------------------------------------------------------------------------
# path prefixes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathPrefix:
    """A path observed on grid times t_start..t_end.

    ``values[i]`` is the path value at ``grid.times[start_index + i]``.
    """

    grid: TimeGrid
    values: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size == 0:
            raise ConcatError("prefix needs at least one value")
        if self.start_index < 0 or self.start_index + v.size - 1 > self.grid.n_steps:
            raise ConcatError("prefix does not fit on its grid")

    @property
    def end_index(self) -> int:
        return self.start_index + self.values.size - 1

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.start_index : self.end_index + 1]

    @property
    def end_time(self) -> float:
        return self.grid.times[self.end_index]

    @property
    def end_value(self) -> float:
        return float(self.values[-1])

    @property
    def running_max(self) -> float:
        return float(self.values.max())


def concatenate(prefix: PathPrefix, continuation: PathPrefix) -> PathPrefix:
    """Glue a continuation starting at the prefix's end time with value 0.

    The result agrees with ``prefix`` up to its end and continues with
    ``prefix.end_value + continuation`` afterwards.
    """
    if continuation.start_index != prefix.end_index:
        raise ConcatError(
            f"continuation starts at index {continuation.start_index}, "
            f"prefix ends at {prefix.end_index}"
        )
    if continuation.values[0] != 0.0:
        raise ConcatError("continuation must start at value 0")
    glued = np.concatenate([prefix.values, prefix.end_value + continuation.values[1:]])
    return PathPrefix(prefix.grid, glued, prefix.start_index)


# ---------------------------------------------------------------------------
# full binary tree
# ---------------------------------------------------------------------------

class PathTree:
    """Full binary tree of the symmetric +-sqrt(dt) walk.

    Nodes are keyed ``(root_index, word)`` with ``word`` over {'d','u'}.
    A finite initial law is supported as weighted roots; the default is a
    single root at 0.  Level-k node order is root-major with words in binary
    order ('d' = bit 0), so the children of level index i sit at 2i and 2i+1.
    """

    kind = "tree"

    def __init__(self, grid: TimeGrid, root_law: Sequence[tuple] = ((0.0, 1.0),)):
        if grid.n_steps > MAX_TREE_DEPTH:
            raise DepthError(
                f"full tree capped at depth {MAX_TREE_DEPTH}, got {grid.n_steps}"
            )
        self.grid = grid
        self.step = grid.step
        self.root_law = tuple((float(b), float(w)) for b, w in root_law)
        if not self.root_law or any(w <= 0 for _, w in self.root_law):
            raise NodeError("root law needs positive weights")
        if abs(sum(w for _, w in self.root_law) - 1.0) > 1e-12:
            raise NodeError("root weights must sum to 1")
        self.n_steps = grid.n_steps
        self._value_units: list[np.ndarray] = []   # per level, per root block
        self._runmax_units: list[np.ndarray] = []
        self._build_levels()

    def _build_levels(self):
        r = len(self.root_law)
        v0 = np.array([b / self.step for b, _ in self.root_law])
        self._value_units = [v0]
        self._runmax_units = [v0.copy()]
        for k in range(self.n_steps):
            prev = self._value_units[k]
            prevmax = self._runmax_units[k]
            cur = np.empty(prev.size * 2)
            cur[0::2] = prev - 1.0  # 'd'
            cur[1::2] = prev + 1.0  # 'u'
            curmax = np.empty_like(cur)
            curmax[0::2] = prevmax
            curmax[1::2] = np.maximum(prevmax, cur[1::2])
            self._value_units.append(cur)
            self._runmax_units.append(curmax)
        del r

    # --- level interface -------------------------------------------------
    def level_size(self, k: int) -> int:
        return len(self.root_law) * (1 << k)

    def level_value_units(self, k: int) -> np.ndarray:
        return self._value_units[k]

    def level_runmax_units(self, k: int) -> np.ndarray:
        return self._runmax_units[k]

    def initial_arrival(self) -> np.ndarray:
        return np.array([w for _, w in self.root_law])

    def push_forward(self, k: int, residual: np.ndarray) -> np.ndarray:
        """Arrival mass at level k+1 from continuing mass at level k."""
        return np.repeat(0.5 * residual, 2)

    # --- node naming ------------------------------------------------------
    def node_key(self, k: int, i: int):
        width = 1 << k
        root_idx, m = divmod(i, width)
        word = "".join("u" if (m >> (k - 1 - j)) & 1 else "d" for j in range(k))
        return (root_idx, word)

    def node_index(self, node) -> tuple:
        root_idx, word = node
        if not (0 <= root_idx < len(self.root_law)):
            raise NodeError(f"unknown root {root_idx}")
        k = len(word)
        if k > self.n_steps or any(c not in "du" for c in word):
            raise NodeError(f"node word {word!r} not in tree")
        m = 0
        for c in word:
            m = (m << 1) | (1 if c == "u" else 0)
        return k, (root_idx << k) + m

    def node_id(self, node) -> str:
        root_idx, word = node
        return f"{root_idx}:{word}"

    def parse_node_id(self, s: str):
        root_s, _, word = s.partition(":")
        node = (int(root_s), word)
        self.node_index(node)
        return node

    def level_nodes(self, k: int) -> list:
        return [self.node_key(k, i) for i in range(self.level_size(k))]

    def children(self, node) -> list:
        root_idx, word = node
        if len(word) >= self.n_steps:
            return []
        return [(root_idx, word + "d"), (root_idx, word + "u")]

    def node_value(self, node) -> float:
        k, i = self.node_index(node)
        return float(self._value_units[k][i] * self.step)

    def state_fields(self, k: int, i: int) -> tuple:
        """(b_units, m_units or None) for CSV dumps."""
        return int(round(self._value_units[k][i])), None


def node_path(tree: PathTree, node) -> PathPrefix:
    """The path prefix from the node's root down to the node."""
    root_idx, word = node
    k, _ = tree.node_index(node)
    b0 = tree.root_law[root_idx][0]
    vals = np.empty(k + 1)
    vals[0] = b0
    for j, c in enumerate(word):
        vals[j + 1] = vals[j] + (tree.step if c == "u" else -tree.step)
    return PathPrefix(tree.grid, vals)


# ---------------------------------------------------------------------------
# recombining lattice
# ---------------------------------------------------------------------------

class StateLattice:
    """Recombining lattice of the symmetric walk started at 0.

    ``state_kind="position"`` keys nodes by ``(k, b)`` with b in step units;
    ``state_kind="position_and_max"`` keys by ``(k, b, m)`` with the running
    max m >= max(b, 0).  Transition probability is 1/2 per move and the max
    updates to max(m, b') on an up move.
    """

    kind = "lattice"

    def __init__(self, grid: TimeGrid, state_kind: str = "position"):
        if state_kind not in ("position", "position_and_max"):
            raise NodeError(f"unknown state_kind {state_kind!r}")
        self.grid = grid
        self.step = grid.step
        self.state_kind = state_kind
        self.n_steps = grid.n_steps
        self._states: list[np.ndarray] = []      # (n_k, 1) b or (n_k, 2) b,m
        self._child_idx: list[np.ndarray] = []   # (n_k, 2) indices into level k+1
        self._index: list[dict] = []
        self._build()

    def _build(self):
        n = self.n_steps
        if self.state_kind == "position":
            for k in range(n + 1):
                b = np.arange(-k, k + 1, 2, dtype=np.int64).reshape(-1, 1)
                self._states.append(b)
                self._index.append({(int(x),): i for i, x in enumerate(b[:, 0])})
            for k in range(n):
                m = self._states[k].shape[0]
                down = np.arange(m, dtype=np.int64)        # b-1 keeps index
                up = down + 1                              # b+1 shifts by one
                self._child_idx.append(np.stack([down, up], axis=1))
        else:
            for k in range(n + 1):
                st = []
                for b in range(-k, k + 1, 2):
                    for m in range(max(0, b), (k + b) // 2 + 1):
                        st.append((b, m))
                arr = np.array(st, dtype=np.int64).reshape(len(st), 2)
                self._states.append(arr)
                self._index.append({(int(b), int(m)): i for i, (b, m) in enumerate(st)})
            for k in range(n):
                arr = self._states[k]
                nxt = self._index[k + 1]
                ci = np.empty((arr.shape[0], 2), dtype=np.int64)
                for i, (b, m) in enumerate(arr):
                    ci[i, 0] = nxt[(int(b) - 1, int(m))]
                    ci[i, 1] = nxt[(int(b) + 1, max(int(m), int(b) + 1))]
                self._child_idx.append(ci)

    # --- level interface -------------------------------------------------
    def level_size(self, k: int) -> int:
        return self._states[k].shape[0]

    def level_value_units(self, k: int) -> np.ndarray:
        return self._states[k][:, 0].astype(float)

    def level_runmax_units(self, k: int) -> np.ndarray:
        if self.state_kind == "position":
            raise NodeError("position lattice does not track the running max")
        return self._states[k][:, 1].astype(float)

    def initial_arrival(self) -> np.ndarray:
        return np.array([1.0])

    def push_forward(self, k: int, residual: np.ndarray) -> np.ndarray:
        out = np.zeros(self.level_size(k + 1))
        ci = self._child_idx[k]
        np.add.at(out, ci[:, 0], 0.5 * residual)
        np.add.at(out, ci[:, 1], 0.5 * residual)
        return out

    def child_indices(self, k: int) -> np.ndarray:
        return self._child_idx[k]

    # --- node naming ------------------------------------------------------
    def node_key(self, k: int, i: int):
        row = self._states[k][i]
        if self.state_kind == "position":
            return (k, int(row[0]))
        return (k, int(row[0]), int(row[1]))

    def node_index(self, node) -> tuple:
        k = node[0]
        if not (0 <= k <= self.n_steps):
            raise NodeError(f"level {k} outside grid")
        try:
            return k, self._index[k][tuple(int(x) for x in node[1:])]
        except KeyError:
            raise NodeError(f"state {node} not on lattice")

    def node_id(self, node) -> str:
        return ":".join(str(int(x)) for x in node)

    def parse_node_id(self, s: str):
        node = tuple(int(x) for x in s.split(":"))
        self.node_index(node)
        return node

    def level_nodes(self, k: int) -> list:
        return [self.node_key(k, i) for i in range(self.level_size(k))]

    def node_value(self, node) -> float:
        return float(node[1]) * self.step

    def state_fields(self, k: int, i: int) -> tuple:
        row = self._states[k][i]
        if self.state_kind == "position":
            return int(row[0]), None
        return int(row[0]), int(row[1])


def marginal_position_law(lattice: StateLattice, k: int) -> dict:
    """Arrival law over positions at level k with nothing stopped.

    For the position lattice this is binomial(k, 1/2) mapped onto the values;
    for position_and_max it marginalizes the running max out.
    """
    arr = lattice.initial_arrival()
    for j in range(k):
        arr = lattice.push_forward(j, arr)
    out: dict = {}
    for i in range(lattice.level_size(k)):
        b = int(lattice._states[k][i][0])
        out[b] = out.get(b, 0.0) + float(arr[i])
    return out


# ---------------------------------------------------------------------------
# adapted stopping-rule enumeration
# ---------------------------------------------------------------------------

_RULES_MEMO: dict = {}


def _rules(depth: int) -> list:
    """All adapted stop/continue labelings stopping each path by ``depth``.

    A rule is a tuple of relative words over {'d','u'}: the prefix-free set of
    nodes where the rule stops.  Rule count satisfies
    count(d) = 1 + count(d-1)^2 with count(0) = 1.
    """
    if depth in _RULES_MEMO:
        return _RULES_MEMO[depth]
    if depth == 0:
        out = [("",)]
    else:
        sub = _rules(depth - 1)
        out = [("",)]
        for r1 in sub:
            for r2 in sub:
                out.append(tuple("d" + w for w in r1) + tuple("u" + w for w in r2))
    _RULES_MEMO[depth] = out
    return out


def rule_count(depth: int) -> int:
    c = 1
    for _ in range(depth):
        c = 1 + c * c
    return c


def enumerate_stopping_rules(tree: PathTree, from_node, max_extra_depth: int) -> Iterator[tuple]:
    """Yield every adapted stopping rule on the subtree below ``from_node``.

    Rules stop each path at relative depth <= max_extra_depth, with a forced
    stop at the depth limit.  Enumeration order is deterministic.
    """
    if max_extra_depth > MAX_RULE_DEPTH:
        raise DepthError(f"rule enumeration capped at depth {MAX_RULE_DEPTH}")
    k, _ = tree.node_index(from_node)
    if k + max_extra_depth > tree.n_steps:
        raise DepthError(
            f"max_extra_depth {max_extra_depth} exceeds remaining depth {tree.n_steps - k}"
        )
    return iter(_rules(max_extra_depth))
