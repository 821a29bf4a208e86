"""Syntax tree nodes. Every node carries a (line, column) span."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

Span = tuple[int, int]


@dataclass(frozen=True)
class Num:
    value: float
    span: Span


@dataclass(frozen=True)
class Str:
    value: str
    span: Span


@dataclass(frozen=True)
class Bool:
    value: bool
    span: Span


@dataclass(frozen=True)
class Name:
    id: str
    span: Span


@dataclass(frozen=True)
class VecLit:
    items: tuple
    span: Span


@dataclass(frozen=True)
class MapLit:
    pairs: tuple  # ((key, expr), ...)
    span: Span


@dataclass(frozen=True)
class PairLit:
    first: "Expr"
    second: "Expr"
    span: Span


@dataclass(frozen=True)
class Index:
    target: "Expr"
    index: "Expr"
    span: Span


@dataclass(frozen=True)
class Slice:
    target: "Expr"
    lo: "Expr | None"
    hi: "Expr | None"
    span: Span


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    span: Span


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "not"
    operand: "Expr"
    span: Span


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span


Expr = Union[Num, Str, Bool, Name, VecLit, MapLit, PairLit, Index, Slice, Call, Unary, Binary]


@dataclass(frozen=True)
class Let:
    name: str
    value: Expr
    span: Span


@dataclass(frozen=True)
class Assign:
    name: str
    path: tuple  # index expressions, outermost first
    value: Expr
    span: Span


@dataclass(frozen=True)
class If:
    cond: Expr
    body: tuple
    orelse: tuple
    span: Span


@dataclass(frozen=True)
class For:
    var: str
    iterable: Expr
    body: tuple
    span: Span


@dataclass(frozen=True)
class Return:
    value: Expr
    span: Span


Stmt = Union[Let, Assign, If, For, Return]


@dataclass(frozen=True)
class Param:
    name: str
    default: Expr | None
    span: Span


@dataclass(frozen=True)
class FnDef:
    name: str
    params: tuple
    body: tuple
    span: Span

    @property
    def arity(self) -> int:
        return len(self.params)


@dataclass(frozen=True)
class Const:
    name: str
    value: Expr
    span: Span


@dataclass(frozen=True)
class Module:
    items: tuple = field(default=())


def walk(node) -> Iterator[object]:
    """Pre-order traversal over every node reachable from ``node``."""
    stack = [node]
    while stack:
        cur = stack.pop()
        if isinstance(cur, (tuple, list)):
            stack.extend(reversed(cur))
            continue
        if cur is None or isinstance(cur, (str, float, bool, int)):
            continue
        yield cur
        children = []
        for name in cur.__dataclass_fields__:
            if name == "span":
                continue
            children.append(getattr(cur, name))
        stack.extend(reversed(children))
