class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class ConsistencyError(RuntimeError):
    """An internal numerical invariant failed (e.g. a broken DFT round trip)."""
