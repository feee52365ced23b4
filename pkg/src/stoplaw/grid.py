"""Time grids and discretization of the target stopping-time law.

The target law mu lives on (0, infinity).  On a grid with spacing dt the mass
of the cell (t_{k-1}, t_k] is attributed to the right endpoint t_k, which is
the conservative choice for barrier recovery: a hitting time that falls inside
the cell is reported no earlier than it occurred.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np
from scipy.stats import norm

from .errors import DomainError, TailMassError

log = logging.getLogger(__name__)

MASS_RESIDUAL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt, k = 0..n_steps."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise DomainError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    @property
    def step(self) -> float:
        """Spatial step sqrt(dt) of the matching symmetric random walk."""
        return float(np.sqrt(self.dt))

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.dt / factor, self.n_steps * factor)


@dataclass(frozen=True)
class TargetDistribution:
    """The law of the stopping time as atoms on the grid times.

    mass[k] is the probability attributed to t_k.  mass[0] is always 0 (the
    law is concentrated on (0, infinity)) and the masses sum to one.
    """

    grid: TimeGrid
    mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        object.__setattr__(self, "mass", m)
        if m.shape != (self.grid.n_steps + 1,):
            raise DomainError(
                f"mass must have length n_steps+1 = {self.grid.n_steps + 1}, got {m.shape}"
            )
        if np.any(m < -MASS_RESIDUAL):
            raise DomainError("negative mass in target distribution")
        if abs(float(m.sum()) - 1.0) > MASS_RESIDUAL:
            raise DomainError(f"target mass sums to {m.sum()!r}, not 1")
        if m[0] != 0.0:
            raise DomainError("target distribution must put zero mass at t = 0")

    def cdf(self) -> np.ndarray:
        """CDF evaluated at the grid times."""
        return np.cumsum(self.mass)

    def survival(self) -> np.ndarray:
        """Mass not yet stopped strictly before each level: S_k = 1 - sum_{j<k} mass_j."""
        return 1.0 - np.concatenate([[0.0], np.cumsum(self.mass[:-1])])


def discretize_measure(
    atoms_or_cdf: Union[Iterable[tuple], Callable[[float], float]],
    grid: TimeGrid,
    horizon_policy: str = "lump_at_end",
) -> TargetDistribution:
    """Map a continuous or atomic law onto the grid.

    Parameters
    ----------
    atoms_or_cdf : list of (t, mass) pairs, or a CDF evaluator F with F(0) = 0
        Atoms must have t > 0.  A CDF evaluator is assumed nondecreasing.
    grid : TimeGrid
    horizon_policy : {"lump_at_end", "reject"}
        Mass beyond the grid horizon is added to the last grid time under
        "lump_at_end" (with a logged warning) and raises TailMassError under
        "reject".

    The mass of (t_{k-1}, t_k] goes to t_k (right endpoint).
    """
    if horizon_policy not in ("lump_at_end", "reject"):
        raise DomainError(f"unknown horizon_policy {horizon_policy!r}")
    n = grid.n_steps
    mass = np.zeros(n + 1)
    tail = 0.0
    if callable(atoms_or_cdf):
        F = atoms_or_cdf
        f0 = float(F(0.0))
        if abs(f0) > MASS_RESIDUAL:
            raise DomainError(f"CDF evaluator has F(0) = {f0}, expected 0")
        vals = np.array([float(F(t)) for t in grid.times])
        if np.any(np.diff(vals) < -MASS_RESIDUAL):
            raise DomainError("CDF evaluator is decreasing somewhere on the grid")
        mass[1:] = np.diff(vals)
        tail = 1.0 - vals[-1]
    else:
        for t, m in atoms_or_cdf:
            t = float(t)
            m = float(m)
            if t <= 0:
                raise DomainError(f"atom at t = {t} <= 0")
            if m < 0:
                raise DomainError(f"negative atom mass {m} at t = {t}")
            # right-endpoint cell rule: t in (t_{k-1}, t_k]  ->  k = ceil(t/dt)
            k = int(np.ceil(t / grid.dt - 1e-12))
            if k > n:
                tail += m
            else:
                mass[max(k, 1)] += m
    if tail > MASS_RESIDUAL:
        if horizon_policy == "reject":
            raise TailMassError(
                f"mass {tail:.3e} beyond horizon {grid.horizon} with reject policy"
            )
        log.warning("lumping tail mass %.6e at the grid horizon t = %g", tail, grid.horizon)
        mass[n] += tail
    elif tail > 0:
        mass[n] += tail  # rounding dust, keep total exact
    total = float(mass.sum())
    if abs(total - 1.0) > MASS_RESIDUAL:
        raise DomainError(f"discretized mass sums to {total}, not 1")
    return TargetDistribution(grid, mass)


def moment(mu: TargetDistribution, p: float) -> float:
    """The p-th moment  sum_k mass_k * t_k^p  of the discretized law."""
    if p < 0:
        raise DomainError(f"moment order must be >= 0, got {p}")
    t = mu.grid.times
    out = 0.0
    for tk, mk in zip(t, mu.mass):
        if mk > 0.0:
            out += mk * tk**p
    return out


# ---------------------------------------------------------------------------
# named target families and file input
# ---------------------------------------------------------------------------

def exponential_cdf(rate: float) -> Callable[[float], float]:
    if rate <= 0:
        raise DomainError(f"exp family needs rate > 0, got {rate}")
    return lambda t: 1.0 - np.exp(-rate * t)


def first_passage_cdf(a: float) -> Callable[[float], float]:
    """CDF of the first time Brownian motion from 0 falls to level -a (a > 0).

    F(t) = 2 * Phi(-a / sqrt(t)); the density is a * (2 pi t^3)^{-1/2} e^{-a^2/(2t)}.
    """
    if a <= 0:
        raise DomainError(f"levy family needs a > 0, got {a}")

    def F(t: float) -> float:
        if t <= 0:
            return 0.0
        return float(2.0 * norm.cdf(-a / np.sqrt(t)))

    return F


def read_atom_file(path: Union[str, Path]) -> list:
    """Read a two-column 't,mass' text file (optional header, UTF-8)."""
    atoms = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DomainError(f"{path}: line {i + 1}: expected 't,mass', got {line!r}")
        try:
            atoms.append((float(parts[0]), float(parts[1])))
        except ValueError:
            if i == 0:
                continue  # header
            raise DomainError(f"{path}: line {i + 1}: cannot parse {line!r}")
    if not atoms:
        raise DomainError(f"{path}: no atoms found")
    return atoms


_FAMILY_RE = re.compile(r"^(exp|levy|atoms):(.+)$")


def resolve_mu_spec(
    spec: Union[str, Sequence[tuple]],
    grid: TimeGrid,
    horizon_policy: str = "lump_at_end",
) -> TargetDistribution:
    """Build a TargetDistribution from a string spec or an atom list.

    Accepted strings: "exp:rate=<r>", "levy:a=<a>", "atoms:<path>".
    """
    if not isinstance(spec, str):
        return discretize_measure(spec, grid, horizon_policy)
    m = _FAMILY_RE.match(spec.strip())
    if m is None:
        raise DomainError(f"cannot parse mu spec {spec!r}")
    family, arg = m.group(1), m.group(2)
    if family == "atoms":
        return discretize_measure(read_atom_file(arg), grid, horizon_policy)
    key, _, val = arg.partition("=")
    try:
        x = float(val)
    except ValueError:
        raise DomainError(f"bad parameter in mu spec {spec!r}")
    if family == "exp":
        if key != "rate":
            raise DomainError(f"exp family takes rate=<r>, got {arg!r}")
        return discretize_measure(exponential_cdf(x), grid, horizon_policy)
    if key != "a":
        raise DomainError(f"levy family takes a=<a>, got {arg!r}")
    return discretize_measure(first_passage_cdf(x), grid, horizon_policy)
