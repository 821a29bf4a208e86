"""Runtime value helpers.

Numbers are Python floats, booleans are bools, vectors are tuples, maps are
dicts that are never mutated after construction (writes copy). Pairs and
ranges get their own small types so they cannot be confused with vectors.
"""
from __future__ import annotations

import math
import re

import numpy as np

from grappa.gsl.errors import GslRuntimeError, NonFiniteError

IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class Pair:
    __slots__ = ("first", "second")

    def __init__(self, first, second):
        self.first = first
        self.second = second

    def __eq__(self, other):
        return type(other) is Pair and equal(self.first, other.first) and equal(self.second, other.second)

    def __repr__(self):
        return f"Pair({self.first!r}, {self.second!r})"


class RangeValue:
    __slots__ = ("r",)

    def __init__(self, r: range):
        self.r = r

    def __len__(self):
        return len(self.r)

    def __eq__(self, other):
        return type(other) is RangeValue and self.r == other.r


def type_name(v) -> str:
    t = type(v)
    if t is float:
        return "number"
    if t is bool:
        return "boolean"
    if t is str:
        return "string"
    if t is tuple:
        return "vector"
    if t is dict:
        return "map"
    if t is Pair:
        return "pair"
    if t is RangeValue:
        return "range"
    return t.__name__


def equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if type(a) is tuple:
        return len(a) == len(b) and all(equal(x, y) for x, y in zip(a, b))
    if type(a) is dict:
        return a.keys() == b.keys() and all(equal(a[k], b[k]) for k in a)
    return a == b


def finite(v: float, span) -> float:
    if not math.isfinite(v):
        raise NonFiniteError("non-finite number", span)
    return v


def number(v, what: str, span) -> float:
    if type(v) is not float:
        raise GslRuntimeError(f"{what} expects a number, got {type_name(v)}", span)
    return v


def boolean(v, what: str, span) -> bool:
    if type(v) is not bool:
        raise GslRuntimeError(f"{what} expects a boolean, got {type_name(v)}", span)
    return v


def vector(v, what: str, span) -> tuple:
    if type(v) is not tuple:
        raise GslRuntimeError(f"{what} expects a vector, got {type_name(v)}", span)
    for x in v:
        if type(x) is not float:
            raise GslRuntimeError(f"{what} expects a vector of numbers", span)
    return v


def integral(v, what: str, span) -> int:
    number(v, what, span)
    if v != int(v):
        raise GslRuntimeError(f"{what} expects a whole number, got {v!r}", span)
    return int(v)


def scalar_op(op: str, a: float, b: float, span) -> float:
    if op == "+":
        r = a + b
    elif op == "-":
        r = a - b
    elif op == "*":
        r = a * b
    else:
        if b == 0.0:
            raise NonFiniteError("division by zero", span)
        r = a / b
    if not math.isfinite(r):
        raise NonFiniteError("non-finite number", span)
    return r


def arith(op: str, a, b, span):
    ta, tb = type(a), type(b)
    if ta is float and tb is float:
        return scalar_op(op, a, b, span)
    if ta is tuple and tb is tuple and op in "+-":
        vector(a, op, span)
        vector(b, op, span)
        if len(a) != len(b):
            raise GslRuntimeError(f"vector lengths differ ({len(a)} vs {len(b)})", span)
        return tuple(scalar_op(op, x, y, span) for x, y in zip(a, b))
    if ta is tuple and tb is float and op in "*/":
        vector(a, op, span)
        return tuple(scalar_op(op, x, b, span) for x in a)
    if ta is float and tb is tuple and op == "*":
        vector(b, op, span)
        return tuple(scalar_op(op, a, y, span) for y in b)
    raise GslRuntimeError(f"unsupported operands for {op!r}: {type_name(a)} and {type_name(b)}", span)


def index(target, i, span):
    t = type(target)
    if t is tuple:
        k = integral(i, "vector index", span)
        if not -len(target) <= k < len(target):
            raise GslRuntimeError(f"index {k} out of range for vector of length {len(target)}", span)
        return target[k]
    if t is dict:
        if type(i) is not str:
            raise GslRuntimeError(f"map keys are strings, got {type_name(i)}", span)
        try:
            return target[i]
        except KeyError:
            raise GslRuntimeError(f"missing key {i!r}", span) from None
    if t is Pair:
        k = integral(i, "pair index", span)
        if k not in (0, 1):
            raise GslRuntimeError(f"pair index {k} out of range", span)
        return target.first if k == 0 else target.second
    raise GslRuntimeError(f"cannot index a {type_name(target)}", span)


def slice_(target, lo, hi, span):
    if type(target) is not tuple:
        raise GslRuntimeError(f"cannot slice a {type_name(target)}", span)
    a = None if lo is None else integral(lo, "slice bound", span)
    b = None if hi is None else integral(hi, "slice bound", span)
    return target[a:b]


def set_path(container, path: list, value, span):
    """Copy-on-write update of ``container`` at the nested ``path``."""
    key = path[0]
    rest = path[1:]
    t = type(container)
    if t is dict:
        if type(key) is not str:
            raise GslRuntimeError(f"map keys are strings, got {type_name(key)}", span)
        new = dict(container)
        if rest:
            if key not in container:
                raise GslRuntimeError(f"missing key {key!r}", span)
            new[key] = set_path(container[key], rest, value, span)
        else:
            new[key] = value
        return new
    if t is tuple:
        k = integral(key, "vector index", span)
        if not -len(container) <= k < len(container):
            raise GslRuntimeError(f"index {k} out of range for vector of length {len(container)}", span)
        inner = set_path(container[k], rest, value, span) if rest else value
        if type(inner) is not float:
            raise GslRuntimeError("vector elements must be numbers", span)
        items = list(container)
        items[k] = inner
        return tuple(items)
    raise GslRuntimeError(f"cannot assign into a {type_name(container)}", span)


def from_host(v, what: str = "value"):
    """Convert a host value (hidden-state entry, state component) to a GSL value."""
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, float, np.integer, np.floating)):
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise GslRuntimeError(f"{what} is not convertible to a number") from None
        if not math.isfinite(f):
            raise NonFiniteError(f"{what} is not finite")
        return f
    if isinstance(v, str):
        return v
    if isinstance(v, dict):
        return {str(k): from_host(x, what) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return tuple(from_host(x, what) for x in v)
    raise GslRuntimeError(f"{what} has unsupported type {type(v).__name__}")
