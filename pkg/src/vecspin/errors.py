"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented invariant (shape, symmetry, PSD, ordering)."""


class BudgetError(RuntimeError):
    """An exact computation would exceed the configured enumeration budget."""


class InfeasibleError(RuntimeError):
    """A constraint set is empty or a feasibility problem has no solution."""


class NumericalError(RuntimeError):
    """A numerical routine failed beyond the documented tolerances."""
