"""Guidance Script Language: parser, sandboxed evaluator and format validator."""
from grappa.gsl.errors import (
    BudgetExceeded,
    GslError,
    GslRuntimeError,
    GslSyntaxError,
    HiddenStateError,
    MissingHeader,
    NonFiniteError,
    ReturnShapeError,
)
from grappa.gsl.interp import BUILTINS, EvalBudget, GslProgram, check_hidden, evaluate, parse
from grappa.gsl.validate import ISSUE_CODES, Issue, StubPerception, ValidationReport, validate_format


def load(path) -> GslProgram:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


__all__ = [
    "BUILTINS",
    "BudgetExceeded",
    "EvalBudget",
    "GslError",
    "GslProgram",
    "GslRuntimeError",
    "GslSyntaxError",
    "HiddenStateError",
    "ISSUE_CODES",
    "Issue",
    "MissingHeader",
    "NonFiniteError",
    "ReturnShapeError",
    "StubPerception",
    "ValidationReport",
    "check_hidden",
    "evaluate",
    "load",
    "parse",
    "validate_format",
]
