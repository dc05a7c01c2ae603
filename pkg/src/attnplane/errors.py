"""Exceptions shared across the budget-aware modules."""


class BudgetExceededError(ValueError):
    """A compiled artifact does not fit its memory budget."""

    def __init__(self, required_bits: int, budget_bits: int, what: str = "table"):
        self.required_bits = required_bits
        self.budget_bits = budget_bits
        super().__init__(
            f"{what} needs {required_bits} bits but the budget is {budget_bits} bits"
        )


class BudgetViolationError(RuntimeError):
    """A run/config combination violates a hardware budget in strict mode."""
