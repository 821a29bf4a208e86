import copy
import math

import pytest
from hypothesis import given, settings, strategies as st

from grappa.core import RobotState
from grappa.gsl import (
    BUILTINS,
    BudgetExceeded,
    EvalBudget,
    GslRuntimeError,
    GslSyntaxError,
    HiddenStateError,
    MissingHeader,
    NonFiniteError,
    ReturnShapeError,
    evaluate,
    parse,
    validate_format,
)
from grappa.sim import WorkspaceSpec

from conftest import DATA, load_guidance

AT = RobotState((0.1, 0.0, 0.05))


class Scene:
    """Perception binding over a fixed name -> position table."""

    def __init__(self, positions, sizes=None):
        self.positions = positions
        self.sizes = sizes or {}

    def get_position(self, name):
        return self.positions[name]

    def get_size(self, name):
        return self.sizes.get(name, (0.03, 0.08, 0.08))

    def get_orientation(self, name):
        return (0.0, 0.0, 0.0)


def prog(body: str, params: str = "state, prev"):
    return parse(f"#gsl 1\nfn guidance({params}) {{\n{body}\n}}\n")


def test_minimal_program_parses():
    p = parse("#gsl 1\nfn guidance(state, prev) { return (0.0, prev); }\n")
    assert p.entry_arity == 2
    assert p.default_hidden == {}
    assert evaluate(p, AT) == (0.0, {})


def test_missing_header():
    with pytest.raises(MissingHeader):
        parse("fn guidance(state, prev) { return (0.0, prev); }")
    with pytest.raises(GslSyntaxError, match="unsupported"):
        parse("#gsl 2\nfn guidance(state, prev) { return (0.0, prev); }")


def test_unbalanced_brace_reports_line():
    src = "#gsl 1\nfn guidance(state, prev) {\n  let x = 1;\n  if x > 0 {\n    x = 2;\n  return (0.0, prev);\n}\n"
    with pytest.raises(GslSyntaxError) as info:
        parse(src)
    assert info.value.line == 2
    with pytest.raises(GslSyntaxError) as info:
        parse("#gsl 1\nfn guidance(state, prev) {\n  let x = (1 + ;\n}\n")
    assert info.value.line == 3


def test_missing_entry_is_a_validation_issue():
    p = parse("#gsl 1\nfn helper(a) { return a; }\n")
    report = validate_format(p)
    assert not report.ok and report.codes() == ["MissingEntry"]


def test_distance_score_example():
    p = prog('return (1.0 - dist(state[0:3], get_position("button")), prev);')
    score, _ = evaluate(p, AT, perception=Scene({"button": (0.1, 0.0, 0.0)}))
    assert score == pytest.approx(0.95, abs=1e-12)


def test_language_features():
    src = """
    let v = [1, 2, 3, 4];
    let m = {"a": 1.5, "b": true};
    let total = 0;
    for i in range(len(v)) {
      if i == 1 { continue_marker = 0; } else { total = total + v[i]; }
    }
    return (total + m["a"] + num(m["b"]) + v[1:3][0] + clamp(5, 0, 2) + abs(-1) + max(1, 4) + min(3, 9), prev);
    """
    with pytest.raises(GslSyntaxError):
        prog(src)  # assigning an undeclared name is rejected at parse time
    ok = prog(src.replace("continue_marker = 0;", "total = total + 0;"))
    # 1+3+4 + 1.5 + 1 + 2 + 2 + 1 + 4 + 3
    assert evaluate(ok, AT)[0] == pytest.approx(22.5)


def test_math_builtins():
    p = prog("return (sqrt(16) + norm([3, 4]) + dot([1, 2], [3, 4]) + cos(0) + sin(0) + exp(0) + degrees(radians(90)), prev);")
    assert evaluate(p, AT)[0] == pytest.approx(4 + 5 + 11 + 1 + 0 + 1 + 90)
    assert {"get_position", "get_size", "get_orientation", "dist", "clamp"} <= set(BUILTINS)


def test_user_functions_constants_and_defaults():
    src = """#gsl 1
    let SCALE = 2.0;
    fn double(x) { return SCALE * x; }
    fn guidance(state, prev = {"done": false, "count": 0}) {
      let h = prev;
      h["count"] = h["count"] + 1;
      return (double(state[2]), h);
    }
    """
    p = parse(src)
    assert p.default_hidden == {"done": False, "count": 0.0}
    score, hidden = evaluate(p, AT)
    assert score == pytest.approx(0.1)
    assert hidden == {"done": False, "count": 1.0}


def test_recursion_is_rejected():
    with pytest.raises(GslSyntaxError):
        parse("#gsl 1\nfn f(x) { return f(x); }\nfn guidance(state, prev) { return (f(1), prev); }\n")


def test_runtime_errors():
    with pytest.raises(NonFiniteError):
        evaluate(prog("return (1 / 0, prev);"), AT)
    with pytest.raises(ReturnShapeError):
        evaluate(prog("return 1.0;"), AT)
    with pytest.raises(ReturnShapeError):
        evaluate(prog('return ("high", prev);'), AT)
    with pytest.raises(GslRuntimeError):
        evaluate(prog("let v = [1, 2]; return (v[5], prev);"), AT)
    with pytest.raises(HiddenStateError):
        evaluate(prog('let h = prev; h["x"] = [1, 2]; return (0.0, h);'), AT)


def test_budget_loop_limit():
    budget = EvalBudget(max_ops=10**7, max_loop_iters=100)
    fits = prog("let s = 0; for i in range(100) { s = s + 1; } return (s, prev);")
    assert evaluate(fits, AT, budget=budget)[0] == 100.0
    over = prog('let h = prev; for i in range(101) { h["x"] = i; } return (0.0, h);')
    hidden = {"x": 0.0}
    before = copy.deepcopy(hidden)
    with pytest.raises(BudgetExceeded):
        evaluate(over, AT, hidden, budget=budget)
    assert hidden == before


def test_budget_op_limit():
    p = prog("let s = 0; for i in range(1000) { s = s + i * i - 1; } return (s, prev);")
    with pytest.raises(BudgetExceeded):
        evaluate(p, AT, budget=EvalBudget(max_ops=500, max_loop_iters=10**6))


def test_budget_must_be_positive():
    with pytest.raises(ValueError):
        EvalBudget(max_ops=0)


def test_hidden_state_isolated():
    p = load_guidance("buttons_coarse.gsl")
    scene = Scene({"red button": (0.1, 0.0, 0.05), "green button": (0.0, 0.1, 0.0), "blue button": (-0.1, 0.0, 0.0)})
    hidden = dict(p.default_hidden)
    snapshot = copy.deepcopy(hidden)
    _, out = evaluate(p, AT, hidden, perception=scene)
    assert hidden == snapshot
    assert out is not hidden and out["red_pressed"] is True


def test_coarse_press_program_flips_and_persists():
    p = load_guidance("buttons_coarse.gsl")
    scene = Scene({"red button": (0.1, 0.0, 0.03), "green button": (0.0, 0.15, 0.0), "blue button": (-0.15, 0.0, 0.0)})
    start = dict(p.default_hidden)
    base, _ = evaluate(p, RobotState((0.25, 0.25, 0.3)), start, perception=scene)
    score, hidden = evaluate(p, AT, start, perception=scene)
    assert hidden["red_pressed"] and not hidden["green_pressed"]
    assert score - base >= 1.0
    _, later = evaluate(p, RobotState((0.25, 0.25, 0.3)), hidden, perception=scene)
    assert later["red_pressed"] is True


def test_validate_examples():
    assert validate_format(prog("return (1.0, prev);")).ok
    bare = validate_format(prog("return 1.0;"))
    assert bare.codes() == ["WrongReturnShape"]
    nonfinite = validate_format(prog("return (1 / (state[0] - state[0]), prev);"))
    assert nonfinite.codes() == ["NonFiniteScore"]
    assert nonfinite.issues[0].probe is not None
    arity = validate_format(prog("return (1.0, {});", params="state"))
    assert arity.codes() == ["BadArity"]


def test_validate_hidden_type_drift():
    p = prog('let h = prev; if h["x"] == false { h["x"] = 1; } else { h["x"] = false; } return (0.0, h);',
             params='state, prev = {"x": false}')
    assert "UnstableHiddenState" in validate_format(p).codes()


def test_validate_warnings_do_not_fail():
    p = prog('return (get_orientation("robot_end_effector")[0] + get_position("teapot")[0] + 1, prev);')
    report = validate_format(p, known_objects=["cup"])
    assert report.ok
    codes = {w.code for w in report.warnings}
    assert codes == {"EndEffectorOrientation", "UnknownObject"}


def test_default_probes_are_corners_and_centre():
    report = validate_format(prog("return (1.0, prev);"))
    assert len(report.dry_runs) == len(WorkspaceSpec().corners()) == 9


@pytest.mark.parametrize("path", sorted((DATA / "guidance").glob("*.gsl")), ids=lambda p: p.name)
def test_corpus_programs_validate(path):
    report = validate_format(parse(path.read_text()))
    assert report.ok, report.to_text()


# Random integer expression trees, checked against Python's own arithmetic.
leaf = st.integers(min_value=-20, max_value=20).map(lambda v: (str(v) if v >= 0 else f"({v})", v))


def _combine(children):
    ops = st.sampled_from(["+", "-", "*"])
    return st.tuples(children, ops, children).map(
        lambda t: (f"({t[0][0]} {t[1]} {t[2][0]})", {"+": t[0][1] + t[2][1], "-": t[0][1] - t[2][1], "*": t[0][1] * t[2][1]}[t[1]])
    )


exprs = st.recursive(leaf, _combine, max_leaves=12)


@settings(max_examples=200)
@given(exprs)
def test_arithmetic_matches_python(expr):
    text, expected = expr
    score, _ = evaluate(prog(f"return ({text}, prev);"), AT)
    assert score == float(expected)


@settings(max_examples=100)
@given(st.integers(-5, 5), st.integers(-5, 5), st.sampled_from(["<", "<=", ">", ">=", "==", "!="]))
def test_comparisons_match_python(a, b, op):
    score, _ = evaluate(prog(f"if ({a}) {op} ({b}) {{ return (1.0, prev); }} return (0.0, prev);"), AT)
    assert score == float(eval(f"{a} {op} {b}"))


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=7, max_size=7))
def test_effects_are_only_perception_calls(values):
    p = load_guidance("buttons_ordered.gsl")
    scene = Scene({"red button": (0.1, 0.0, 0.0), "green button": (0.0, 0.1, 0.0), "blue button": (-0.1, 0.0, 0.0)})
    values[6] = abs(values[6])
    log = []
    evaluate(p, RobotState.from_list(values), perception=scene, call_log=log)
    assert log and all(kind in ("get_position", "get_size", "get_orientation") for kind, _ in log)
    assert {name for _, name in log} <= set(scene.positions)


def test_corpus_program_evaluation_is_deterministic():
    p = load_guidance("buttons_ordered.gsl")
    scene = Scene({"red button": (0.1, 0.0, 0.0), "green button": (0.0, 0.1, 0.0), "blue button": (-0.1, 0.0, 0.0)})
    first = evaluate(p, AT, perception=scene)
    assert all(evaluate(p, AT, perception=scene) == first for _ in range(20))
    assert math.isfinite(first[0])
