"""Exception types raised across the package."""


class CivBalanceError(Exception):
    pass


class ConfigurationError(CivBalanceError, ValueError):
    pass


class ShapeError(CivBalanceError, ValueError):
    pass


class NumericError(CivBalanceError, ArithmeticError):
    """A loss or intermediate value became NaN/Inf."""

    def __init__(self, stage, value=None):
        self.stage = stage
        self.value = value
        super().__init__(f"non-finite value in stage {stage!r}: {value!r}")


class ConvergenceError(CivBalanceError, RuntimeError):
    def __init__(self, violation, iterations):
        self.violation = float(violation)
        self.iterations = int(iterations)
        super().__init__(
            f"Sinkhorn did not converge after {iterations} iterations "
            f"(marginal violation {violation:.3e})"
        )


class DegenerateGroupError(CivBalanceError, ValueError):
    pass


class IngestionError(CivBalanceError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
