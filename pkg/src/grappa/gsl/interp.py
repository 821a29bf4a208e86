"""Closure compiler and evaluator for guidance scripts.

Each syntax node is compiled once into a Python closure ``f(env, rt)``, where
``env`` is the frame's local dict and ``rt`` the per-evaluation run state
(budget counters, perception binding, call log). Name resolution, arity and
recursion checks all happen at compile time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from grappa.gsl import ast
from grappa.gsl.errors import (
    BudgetExceeded,
    GslError,
    GslRuntimeError,
    GslSyntaxError,
    HiddenStateError,
    NonFiniteError,
    ReturnShapeError,
)
from grappa.gsl.parser import parse_module
from grappa.gsl.values import (
    IDENTIFIER,
    Pair,
    RangeValue,
    arith,
    boolean,
    equal,
    finite,
    from_host,
    index,
    integral,
    number,
    set_path,
    slice_,
    type_name,
    vector,
)

MAX_CALL_DEPTH = 16
ENTRY = "guidance"
PERCEPTION_BUILTINS = ("get_position", "get_size", "get_orientation")


@dataclass(frozen=True)
class EvalBudget:
    max_ops: int = 100_000
    max_loop_iters: int = 10_000

    def __post_init__(self):
        if self.max_ops < 1 or self.max_loop_iters < 1:
            raise ValueError("budget limits must be positive")


class _Run:
    __slots__ = ("ops", "max_ops", "iters", "max_iters", "depth", "perception", "log")

    def __init__(self, budget: EvalBudget, perception, log):
        self.ops = 0
        self.max_ops = budget.max_ops
        self.iters = 0
        self.max_iters = budget.max_loop_iters
        self.depth = 0
        self.perception = perception
        self.log = log


# builtins: name -> (impl(rt, args, span), min_args, max_args)

def _b_abs(rt, a, span):
    return abs(number(a[0], "abs", span))


def _minmax(fn, name):
    def impl(rt, a, span):
        vals = a
        if len(a) == 1:
            vals = vector(a[0], name, span)
            if not vals:
                raise GslRuntimeError(f"{name} of an empty vector", span)
        return fn(number(v, name, span) for v in vals)
    return impl


def _b_clamp(rt, a, span):
    x, lo, hi = (number(v, "clamp", span) for v in a)
    if lo > hi:
        raise GslRuntimeError("clamp bounds are inverted", span)
    return min(max(x, lo), hi)


def _b_sqrt(rt, a, span):
    x = number(a[0], "sqrt", span)
    if x < 0:
        raise NonFiniteError("sqrt of a negative number", span)
    return math.sqrt(x)


def _b_norm(rt, a, span):
    return finite(math.sqrt(sum(x * x for x in vector(a[0], "norm", span))), span)


def _same_length(a, b, name, span):
    vector(a, name, span)
    vector(b, name, span)
    if len(a) != len(b):
        raise GslRuntimeError(f"{name} needs vectors of equal length ({len(a)} vs {len(b)})", span)


def _b_dist(rt, a, span):
    _same_length(a[0], a[1], "dist", span)
    return finite(math.dist(a[0], a[1]), span)


def _b_dot(rt, a, span):
    _same_length(a[0], a[1], "dot", span)
    return finite(math.fsum(x * y for x, y in zip(a[0], a[1])), span)


def _unary_math(fn, name):
    def impl(rt, a, span):
        try:
            return finite(fn(number(a[0], name, span)), span)
        except OverflowError:
            raise NonFiniteError(f"{name} overflowed", span) from None
    return impl


def _b_len(rt, a, span):
    v = a[0]
    if type(v) in (tuple, dict, RangeValue, str):
        return float(len(v))
    raise GslRuntimeError(f"len of a {type_name(v)}", span)


def _b_range(rt, a, span):
    ints = [integral(v, "range", span) for v in a]
    return RangeValue(range(*ints))


def _b_num(rt, a, span):
    return 1.0 if boolean(a[0], "num", span) else 0.0


def _perception(which):
    def impl(rt, a, span):
        name = a[0]
        if type(name) is not str:
            raise GslRuntimeError(f"{which} expects an object name string", span)
        if rt.perception is None:
            raise GslRuntimeError(f"{which} needs a perception binding", span)
        rt.log.append((which, name))
        out = getattr(rt.perception, which)(name)
        try:
            vec = tuple(float(v) for v in out)
        except (TypeError, ValueError):
            raise GslRuntimeError(f"{which} returned a non-vector", span) from None
        for v in vec:
            finite(v, span)
        return vec
    return impl


BUILTINS: dict[str, tuple[Callable, int, int]] = {
    "abs": (_b_abs, 1, 1),
    "min": (_minmax(min, "min"), 1, 64),
    "max": (_minmax(max, "max"), 1, 64),
    "clamp": (_b_clamp, 3, 3),
    "sqrt": (_b_sqrt, 1, 1),
    "norm": (_b_norm, 1, 1),
    "dist": (_b_dist, 2, 2),
    "dot": (_b_dot, 2, 2),
    "cos": (_unary_math(math.cos, "cos"), 1, 1),
    "sin": (_unary_math(math.sin, "sin"), 1, 1),
    "exp": (_unary_math(math.exp, "exp"), 1, 1),
    "radians": (_unary_math(math.radians, "radians"), 1, 1),
    "degrees": (_unary_math(math.degrees, "degrees"), 1, 1),
    "len": (_b_len, 1, 1),
    "range": (_b_range, 1, 2),
    "num": (_b_num, 1, 1),
    "get_position": (_perception("get_position"), 1, 1),
    "get_size": (_perception("get_size"), 1, 1),
    "get_orientation": (_perception("get_orientation"), 1, 1),
}


def _tick(rt, span):
    rt.ops += 1
    if rt.ops > rt.max_ops:
        raise BudgetExceeded(f"operation budget of {rt.max_ops} exceeded", span)


class _Function:
    """A compiled user function."""

    __slots__ = ("name", "params", "defaults", "body", "span")

    def __init__(self, name, params, defaults, span):
        self.name = name
        self.params = params
        self.defaults = defaults  # list of constant values or None, per param
        self.body = None
        self.span = span

    def call(self, args: list, rt: _Run, span):
        rt.depth += 1
        if rt.depth > MAX_CALL_DEPTH:
            raise GslRuntimeError(f"call depth exceeds {MAX_CALL_DEPTH}", span)
        _tick(rt, span)
        env = dict(zip(self.params, args))
        for name, default in zip(self.params[len(args):], self.defaults[len(args):]):
            env[name] = default
        result = self.body(env, rt)
        rt.depth -= 1
        if result is None:
            raise GslRuntimeError(f"function {self.name!r} ended without returning", self.span)
        return result


class _Compiler:
    def __init__(self, module: ast.Module):
        self.module = module
        self.defs: dict[str, ast.FnDef] = {}
        self.functions: dict[str, _Function] = {}
        self.constants: dict[str, Any] = {}

    # program

    def compile(self) -> None:
        for item in self.module.items:
            if isinstance(item, ast.FnDef):
                if item.name in BUILTINS:
                    raise GslSyntaxError(f"function {item.name!r} shadows a builtin", item.span)
                if item.name in self.defs:
                    raise GslSyntaxError(f"function {item.name!r} defined twice", item.span)
                self.defs[item.name] = item
        self._check_recursion()
        for item in self.module.items:
            if isinstance(item, ast.Const):
                if item.name in self.constants or item.name in self.defs or item.name in BUILTINS:
                    raise GslSyntaxError(f"name {item.name!r} already defined", item.span)
                self.constants[item.name] = self._const_value(item.value)
        for name, fn in self.defs.items():
            seen = set()
            defaults = []
            for p in fn.params:
                if p.name in seen:
                    raise GslSyntaxError(f"duplicate parameter {p.name!r}", p.span)
                seen.add(p.name)
                if p.default is None and defaults and defaults[-1] is not None:
                    raise GslSyntaxError("parameters without defaults must come first", p.span)
                defaults.append(None if p.default is None else self._const_value(p.default))
            self.functions[name] = _Function(name, tuple(p.name for p in fn.params), defaults, fn.span)
        for name, fn in self.defs.items():
            local = {p.name for p in fn.params} | _declared_names(fn.body)
            self.functions[name].body = self.block(fn.body, local)

    def _check_recursion(self) -> None:
        graph = {
            name: {n.func for n in ast.walk(fn.body) if isinstance(n, ast.Call) and n.func in self.defs}
            for name, fn in self.defs.items()
        }
        state: dict[str, int] = {}

        def visit(name: str, trail: list[str]) -> None:
            state[name] = 1
            for callee in sorted(graph[name]):
                if state.get(callee) == 1:
                    cycle = " -> ".join([*trail[trail.index(callee):], callee]) if callee in trail else callee
                    raise GslSyntaxError(f"recursive call cycle {cycle}", self.defs[callee].span)
                if callee not in state:
                    visit(callee, [*trail, callee])
            state[name] = 2

        for name in self.defs:
            if name not in state:
                visit(name, [name])

    def _const_value(self, expr):
        for node in ast.walk(expr):
            if isinstance(node, ast.Call) and (node.func in PERCEPTION_BUILTINS or node.func in self.defs):
                raise GslSyntaxError("constants may only use pure builtins", node.span)
        code = self.expr(expr, set())
        try:
            return code({}, _Run(EvalBudget(), None, []))
        except GslError as exc:
            raise GslSyntaxError(f"cannot evaluate constant: {exc.message}", exc.span or expr.span) from None

    # statements

    def block(self, stmts: Sequence, local: set) -> Callable:
        codes = tuple((self.stmt(s, local), s.span) for s in stmts)

        def run(env, rt):
            for code, span in codes:
                rt.ops += 1
                if rt.ops > rt.max_ops:
                    raise BudgetExceeded(f"operation budget of {rt.max_ops} exceeded", span)
                r = code(env, rt)
                if r is not None:
                    return r
            return None
        return run

    def stmt(self, node, local: set) -> Callable:
        if isinstance(node, ast.Let):
            value = self.expr(node.value, local)
            name = node.name

            def let(env, rt):
                env[name] = value(env, rt)
            return let

        if isinstance(node, ast.Assign):
            if node.name not in local:
                raise GslSyntaxError(f"assignment to undeclared variable {node.name!r}; use 'let'", node.span)
            value = self.expr(node.value, local)
            name, span = node.name, node.span
            if not node.path:
                def assign(env, rt):
                    if name not in env:
                        raise GslRuntimeError(f"variable {name!r} used before 'let'", span)
                    env[name] = value(env, rt)
                return assign
            path = tuple(self.expr(p, local) for p in node.path)

            def assign_path(env, rt):
                v = value(env, rt)
                if name not in env:
                    raise GslRuntimeError(f"variable {name!r} used before 'let'", span)
                keys = [p(env, rt) for p in path]
                env[name] = set_path(env[name], keys, v, span)
            return assign_path

        if isinstance(node, ast.If):
            cond = self.expr(node.cond, local)
            body = self.block(node.body, local)
            orelse = self.block(node.orelse, local) if node.orelse else None
            span = node.span

            def if_(env, rt):
                c = cond(env, rt)
                if c is True:
                    return body(env, rt)
                if c is not False:
                    raise GslRuntimeError(f"condition must be a boolean, got {type_name(c)}", span)
                if orelse is not None:
                    return orelse(env, rt)
                return None
            return if_

        if isinstance(node, ast.For):
            iterable = self.expr(node.iterable, local)
            body = self.block(node.body, local)
            var, span = node.var, node.span

            def for_(env, rt):
                it = iterable(env, rt)
                if type(it) is RangeValue:
                    items = (float(i) for i in it.r)
                elif type(it) is tuple:
                    items = it
                else:
                    raise GslRuntimeError(f"cannot iterate over a {type_name(it)}", span)
                for item in items:
                    rt.iters += 1
                    if rt.iters > rt.max_iters:
                        raise BudgetExceeded(f"loop budget of {rt.max_iters} iterations exceeded", span)
                    env[var] = item
                    r = body(env, rt)
                    if r is not None:
                        return r
                return None
            return for_

        if isinstance(node, ast.Return):
            value = self.expr(node.value, local)
            return value
        raise GslSyntaxError(f"unsupported statement {type(node).__name__}", node.span)

    # expressions

    def expr(self, node, local: set) -> Callable:
        if isinstance(node, (ast.Num, ast.Str, ast.Bool)):
            v = float(node.value) if isinstance(node, ast.Num) else node.value
            return lambda env, rt: v

        if isinstance(node, ast.Name):
            name, span = node.id, node.span
            if name in local:
                def load(env, rt):
                    try:
                        return env[name]
                    except KeyError:
                        raise GslRuntimeError(f"variable {name!r} used before 'let'", span) from None
                return load
            if name in self.constants:
                v = self.constants[name]
                return lambda env, rt: v
            raise GslSyntaxError(f"unknown name {name!r}", span)

        if isinstance(node, ast.VecLit):
            items = tuple(self.expr(i, local) for i in node.items)
            span = node.span

            def vec(env, rt):
                out = tuple(i(env, rt) for i in items)
                for x in out:
                    if type(x) not in (float, str, bool):
                        raise GslRuntimeError(f"vector elements must be scalars, got {type_name(x)}", span)
                return out
            return vec

        if isinstance(node, ast.MapLit):
            keys = [k for k, _ in node.pairs]
            if len(set(keys)) != len(keys):
                raise GslSyntaxError("duplicate key in map literal", node.span)
            pairs = tuple((k, self.expr(e, local)) for k, e in node.pairs)
            return lambda env, rt: {k: e(env, rt) for k, e in pairs}

        if isinstance(node, ast.PairLit):
            first = self.expr(node.first, local)
            second = self.expr(node.second, local)
            return lambda env, rt: Pair(first(env, rt), second(env, rt))

        if isinstance(node, ast.Index):
            target = self.expr(node.target, local)
            idx = self.expr(node.index, local)
            span = node.span

            def index_(env, rt):
                t = target(env, rt)
                i = idx(env, rt)
                if type(t) is tuple and type(i) is float:
                    k = int(i)
                    if k == i and -len(t) <= k < len(t):
                        return t[k]
                return index(t, i, span)
            return index_

        if isinstance(node, ast.Slice):
            target = self.expr(node.target, local)
            lo = self.expr(node.lo, local) if node.lo is not None else None
            hi = self.expr(node.hi, local) if node.hi is not None else None
            span = node.span
            return lambda env, rt: slice_(
                target(env, rt),
                None if lo is None else lo(env, rt),
                None if hi is None else hi(env, rt),
                span,
            )

        if isinstance(node, ast.Call):
            return self.call(node, local)

        if isinstance(node, ast.Unary):
            operand = self.expr(node.operand, local)
            span = node.span
            if node.op == "not":
                def not_(env, rt):
                    return not boolean(operand(env, rt), "not", span)
                return not_

            def neg(env, rt):
                v = operand(env, rt)
                if type(v) is float:
                    return -v
                return tuple(-x for x in vector(v, "unary -", span))
            return neg

        if isinstance(node, ast.Binary):
            return self.binary(node, local)
        raise GslSyntaxError(f"unsupported expression {type(node).__name__}", node.span)

    def call(self, node: ast.Call, local: set) -> Callable:
        args = tuple(self.expr(a, local) for a in node.args)
        span, n = node.span, len(node.args)
        if node.func in BUILTINS:
            impl, lo, hi = BUILTINS[node.func]
            if not lo <= n <= hi:
                want = str(lo) if lo == hi else f"{lo}..{hi}"
                raise GslSyntaxError(f"{node.func} takes {want} arguments, got {n}", span)
            return lambda env, rt: impl(rt, [a(env, rt) for a in args], span)
        if node.func in self.defs:
            fn_def = self.defs[node.func]
            required = sum(1 for p in fn_def.params if p.default is None)
            if not required <= n <= fn_def.arity:
                raise GslSyntaxError(f"{node.func} takes {fn_def.arity} arguments, got {n}", span)
            name = node.func
            functions = self.functions

            def call_user(env, rt):
                return functions[name].call([a(env, rt) for a in args], rt, span)
            return call_user
        raise GslSyntaxError(f"unknown function {node.func!r}", span)

    def binary(self, node: ast.Binary, local: set) -> Callable:
        left = self.expr(node.left, local)
        right = self.expr(node.right, local)
        op, span = node.op, node.span
        if op == "and":
            def and_(env, rt):
                if boolean(left(env, rt), "and", span):
                    return boolean(right(env, rt), "and", span)
                return False
            return and_
        if op == "or":
            def or_(env, rt):
                if boolean(left(env, rt), "or", span):
                    return True
                return boolean(right(env, rt), "or", span)
            return or_
        if op == "+":
            def add(env, rt):
                a, b = left(env, rt), right(env, rt)
                if type(a) is float and type(b) is float:
                    r = a + b
                    if r - r == 0.0:
                        return r
                return arith("+", a, b, span)
            return add
        if op == "-":
            def sub(env, rt):
                a, b = left(env, rt), right(env, rt)
                if type(a) is float and type(b) is float:
                    r = a - b
                    if r - r == 0.0:
                        return r
                return arith("-", a, b, span)
            return sub
        if op == "*":
            def mul(env, rt):
                a, b = left(env, rt), right(env, rt)
                if type(a) is float and type(b) is float:
                    r = a * b
                    if r - r == 0.0:
                        return r
                return arith("*", a, b, span)
            return mul
        if op == "/":
            return lambda env, rt: arith("/", left(env, rt), right(env, rt), span)
        if op == "==":
            return lambda env, rt: equal(left(env, rt), right(env, rt))
        if op == "!=":
            return lambda env, rt: not equal(left(env, rt), right(env, rt))
        compare = {
            "<": lambda a, b: a < b,
            "<=": lambda a, b: a <= b,
            ">": lambda a, b: a > b,
            ">=": lambda a, b: a >= b,
        }[op]

        def cmp(env, rt):
            a, b = left(env, rt), right(env, rt)
            if type(a) is not float or type(b) is not float:
                raise GslRuntimeError(
                    f"{op!r} compares numbers, got {type_name(a)} and {type_name(b)}", span
                )
            return compare(a, b)
        return cmp


def _declared_names(body) -> set:
    names = set()
    for node in ast.walk(body):
        if isinstance(node, ast.Let):
            names.add(node.name)
        elif isinstance(node, ast.For):
            names.add(node.var)
    return names


@dataclass(frozen=True)
class GslProgram:
    """A parsed and compiled guidance script. Immutable after ``parse``."""

    source: str
    version: int
    module: ast.Module = field(repr=False)
    default_hidden: Mapping[str, Any] = field(default_factory=dict)
    _functions: Mapping[str, _Function] = field(default_factory=dict, repr=False, compare=False)
    constants: Mapping[str, Any] = field(default_factory=dict, repr=False, compare=False)

    @property
    def entry(self) -> ast.FnDef | None:
        for item in self.module.items:
            if isinstance(item, ast.FnDef) and item.name == ENTRY:
                return item
        return None

    @property
    def entry_arity(self) -> int | None:
        entry = self.entry
        return None if entry is None else entry.arity

    @property
    def function_names(self) -> list[str]:
        return [i.name for i in self.module.items if isinstance(i, ast.FnDef)]

    def referenced_objects(self) -> list[tuple[str, str, tuple[int, int]]]:
        """(builtin, object name, span) for every perception call with a literal name."""
        out = []
        for node in ast.walk(self.module.items):
            if isinstance(node, ast.Call) and node.func in PERCEPTION_BUILTINS:
                if node.args and isinstance(node.args[0], ast.Str):
                    out.append((node.func, node.args[0].value, node.span))
        return out

    def object_names(self) -> list[str]:
        return list(dict.fromkeys(name for _, name, _ in self.referenced_objects()))


def check_hidden(value, span=None) -> dict:
    """Validate a flat hidden-state map: identifier keys, boolean or number values."""
    if type(value) is not dict:
        raise HiddenStateError(f"hidden state must be a map, got {type_name(value)}", span)
    for key, v in value.items():
        if not IDENTIFIER.match(key):
            raise HiddenStateError(f"hidden-state key {key!r} is not an identifier", span)
        if type(v) not in (bool, float):
            raise HiddenStateError(f"hidden-state value for {key!r} must be a boolean or number", span)
    return dict(value)


def parse(source: str) -> GslProgram:
    version, module = parse_module(source)
    compiler = _Compiler(module)
    compiler.compile()
    default_hidden: dict = {}
    entry = compiler.defs.get(ENTRY)
    if entry is not None and entry.arity >= 2 and entry.params[1].default is not None:
        default_hidden = check_hidden(compiler.functions[ENTRY].defaults[1], entry.params[1].span)
    return GslProgram(
        source=source,
        version=version,
        module=module,
        default_hidden=default_hidden,
        _functions=compiler.functions,
        constants=compiler.constants,
    )


def state_vector(state) -> tuple:
    if hasattr(state, "to_list"):
        state = state.to_list()
    vec = tuple(from_host(v, "state component") for v in state)
    if len(vec) != 7 or any(type(v) is not float for v in vec):
        raise GslRuntimeError("state must be a 7-vector of numbers")
    return vec


def evaluate(
    prog: GslProgram,
    state,
    hidden: Mapping[str, Any] | None = None,
    perception=None,
    budget: EvalBudget | None = None,
    call_log: list | None = None,
) -> tuple[float, dict]:
    """Score ``state`` with the program's entry function.

    Returns ``(score, next_hidden)``; ``next_hidden`` is always a new dict.
    Perception calls are appended to ``call_log`` as ``(builtin, name)``.
    """
    fn = prog._functions.get(ENTRY)
    if fn is None:
        raise GslRuntimeError(f"program has no '{ENTRY}' function")
    if len(fn.params) != 2:
        raise GslRuntimeError(f"'{ENTRY}' must take 2 parameters, takes {len(fn.params)}", fn.span)
    if hidden is None:
        hidden = prog.default_hidden
    h = from_host(dict(hidden), "hidden state")
    check_hidden(h)
    rt = _Run(budget or EvalBudget(), perception, call_log if call_log is not None else [])
    result = fn.call([state_vector(state), h], rt, fn.span)
    if type(result) is not Pair:
        raise ReturnShapeError(f"'{ENTRY}' must return (score, hidden), got {type_name(result)}", fn.span)
    score = result.first
    if type(score) is not float:
        raise ReturnShapeError(f"score must be a number, got {type_name(score)}", fn.span)
    finite(score, fn.span)
    return score, check_hidden(result.second, fn.span)
