"""Exception hierarchy for the stoplaw toolkit."""


class StopLawError(Exception):
    """Base class for all toolkit errors."""


class DomainError(StopLawError):
    """Input outside the mathematical domain (e.g. atom at t <= 0)."""


class TailMassError(StopLawError):
    """Target mass beyond the grid horizon under the reject policy."""


class NodeError(StopLawError):
    """Node does not belong to the model it was used with."""


class ConcatError(StopLawError):
    """Path concatenation with mismatched time or nonzero start value."""


class DepthError(StopLawError):
    """Enumeration depth guard exceeded."""


class ModelError(StopLawError):
    """Model/target/cost combination is inconsistent."""


class InfeasibleError(StopLawError):
    """LP reported infeasible; feasibility is guaranteed, so this is a bug."""


class SolverError(StopLawError):
    """LP solver failed numerically."""


class DualError(StopLawError):
    """No dual certificate of the required form could be constructed."""


class PairError(StopLawError):
    """Stop-Go pair query with mismatched time components."""


class SwapError(StopLawError):
    """Stop-Go swap with insufficient mass or wrong model."""
