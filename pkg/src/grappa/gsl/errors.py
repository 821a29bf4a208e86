from __future__ import annotations


class GslError(Exception):
    """Base class for guidance-script errors. ``span`` is (line, column), 1-based."""

    def __init__(self, message: str, span: tuple[int, int] | None = None):
        self.message = message
        self.span = span
        where = f" at line {span[0]}, column {span[1]}" if span else ""
        super().__init__(f"{message}{where}")

    @property
    def line(self) -> int | None:
        return self.span[0] if self.span else None

    @property
    def column(self) -> int | None:
        return self.span[1] if self.span else None


class GslSyntaxError(GslError):
    pass


class MissingHeader(GslSyntaxError):
    pass


class GslRuntimeError(GslError):
    pass


class NonFiniteError(GslRuntimeError):
    pass


class ReturnShapeError(GslRuntimeError):
    pass


class HiddenStateError(GslRuntimeError):
    pass


class BudgetExceeded(GslError):
    pass
