"""Format validator: static checks plus dry runs on probe states."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from grappa.gsl.errors import (
    BudgetExceeded,
    GslRuntimeError,
    HiddenStateError,
    NonFiniteError,
    ReturnShapeError,
)
from grappa.gsl.interp import ENTRY, EvalBudget, GslProgram, evaluate

ISSUE_CODES = (
    "MissingEntry",
    "BadArity",
    "WrongReturnShape",
    "NonFiniteScore",
    "RuntimeFault",
    "BudgetExceeded",
    "UnstableHiddenState",
)
END_EFFECTOR_NAMES = ("robot_end_effector", "robot end effector", "end_effector")


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    span: tuple[int, int] | None = None
    probe: tuple[float, ...] | None = None

    def to_text(self) -> str:
        where = f" (line {self.span[0]}, col {self.span[1]})" if self.span else ""
        probe = f" at probe {list(self.probe)}" if self.probe is not None else ""
        return f"{self.code}{where}: {self.message}{probe}"


@dataclass(frozen=True)
class DryRun:
    probe: tuple[float, ...]
    score: float | None
    hidden: dict | None
    error: str | None = None


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)
    dry_runs: list[DryRun] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def codes(self) -> list[str]:
        return [i.code for i in self.issues]

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "issues": [asdict(i) for i in self.issues],
            "warnings": [asdict(w) for w in self.warnings],
            "dry_runs": [asdict(d) for d in self.dry_runs],
        }

    def to_text(self) -> str:
        lines = [f"ok: {'true' if self.ok else 'false'}"]
        lines.append(f"issues: {len(self.issues)}")
        lines.extend(f"  - {i.to_text()}" for i in self.issues)
        lines.append(f"warnings: {len(self.warnings)}")
        lines.extend(f"  - {w.to_text()}" for w in self.warnings)
        lines.append(f"dry_runs: {len(self.dry_runs)}")
        for d in self.dry_runs:
            probe = ", ".join(f"{v:g}" for v in d.probe)
            if d.error:
                lines.append(f"  - [{probe}] error: {d.error}")
            else:
                lines.append(f"  - [{probe}] score={d.score!r} hidden={d.hidden}")
        return "\n".join(lines)


class StubPerception:
    """Deterministic stand-in geometry keyed on the object name.

    Used for dry runs when no scene is available: every name resolves to a
    plausible tabletop pose so that programs can be exercised offline.
    """

    def _unit(self, name: str, salt: int) -> float:
        return (zlib.crc32(f"{salt}:{name}".encode()) % 10_000) / 10_000.0

    def get_position(self, name: str) -> tuple[float, float, float]:
        return (
            -0.2 + 0.4 * self._unit(name, 1),
            -0.2 + 0.4 * self._unit(name, 2),
            0.1 * self._unit(name, 3),
        )

    def get_size(self, name: str) -> tuple[float, float, float]:
        return tuple(0.02 + 0.08 * self._unit(name, 4 + i) for i in range(3))

    def get_orientation(self, name: str) -> tuple[float, float, float]:
        return (0.0, 0.0, 360.0 * self._unit(name, 7) - 180.0)


def _probe_vector(state) -> tuple[float, ...]:
    if hasattr(state, "to_list"):
        state = state.to_list()
    return tuple(float(v) for v in state)


def _default_probes() -> list:
    from grappa.sim import WorkspaceSpec

    return WorkspaceSpec().corners()


def _classify(exc: Exception) -> str:
    if isinstance(exc, (ReturnShapeError, HiddenStateError)):
        return "WrongReturnShape"
    if isinstance(exc, NonFiniteError):
        return "NonFiniteScore"
    if isinstance(exc, BudgetExceeded):
        return "BudgetExceeded"
    return "RuntimeFault"


def _type_drift(before: dict, after: dict) -> list[str]:
    return [
        k for k in before.keys() & after.keys()
        if type(before[k]) is not type(after[k])
    ]


def validate_format(
    prog: GslProgram,
    probe_states: Sequence | None = None,
    known_objects: Iterable[str] | None = None,
    perception=None,
    budget: EvalBudget | None = None,
) -> ValidationReport:
    """Check a program's contract without raising; problems land in the report."""
    report = ValidationReport()
    probes = list(probe_states) if probe_states is not None else _default_probes()
    if not probes:
        raise ValueError("validate_format needs at least one probe state")
    perception = perception if perception is not None else StubPerception()

    _warn_objects(prog, known_objects, report)

    entry = prog.entry
    if entry is None:
        report.issues.append(Issue("MissingEntry", f"no function named '{ENTRY}'"))
        return report
    if entry.arity != 2:
        report.issues.append(
            Issue("BadArity", f"'{ENTRY}' must take (state, prev_vars), takes {entry.arity}", entry.span)
        )
        return report

    seen: set[str] = set()

    def record(code: str, message: str, span, probe) -> None:
        # one issue per code keeps reports readable across nine probes
        if code in seen:
            return
        seen.add(code)
        report.issues.append(Issue(code, message, span, probe))

    for state in probes:
        probe = _probe_vector(state)
        try:
            score, h1 = evaluate(prog, state, prog.default_hidden, perception, budget)
        except (GslRuntimeError, BudgetExceeded) as exc:
            report.dry_runs.append(DryRun(probe, None, None, str(exc)))
            record(_classify(exc), exc.message, exc.span, probe)
            continue
        except Exception as exc:  # perception bindings may raise anything
            report.dry_runs.append(DryRun(probe, None, None, str(exc)))
            record("RuntimeFault", f"{type(exc).__name__}: {exc}", None, probe)
            continue
        report.dry_runs.append(DryRun(probe, score, h1))
        try:
            _, h2 = evaluate(prog, state, h1, perception, budget)
        except (GslRuntimeError, BudgetExceeded) as exc:
            record(_classify(exc), f"second chained step: {exc.message}", exc.span, probe)
            continue
        except Exception as exc:
            record("RuntimeFault", f"second chained step: {type(exc).__name__}: {exc}", None, probe)
            continue
        drift = _type_drift(dict(prog.default_hidden), h1) + _type_drift(h1, h2)
        if set(h1) != set(h2):
            changed = sorted(set(h1) ^ set(h2))
            record("UnstableHiddenState", f"hidden-state keys change between steps: {changed}", entry.span, probe)
        elif drift:
            record("UnstableHiddenState", f"hidden-state value types change for {sorted(set(drift))}", entry.span, probe)
    return report


def _warn_objects(prog: GslProgram, known_objects, report: ValidationReport) -> None:
    known = None if known_objects is None else {_norm(n) for n in known_objects}
    for builtin, name, span in prog.referenced_objects():
        if builtin == "get_orientation" and _norm(name) in {_norm(n) for n in END_EFFECTOR_NAMES}:
            report.warnings.append(
                Issue("EndEffectorOrientation", "end-effector orientation is state[3:6], not a perception lookup", span)
            )
        elif known is not None and _norm(name) not in known:
            report.warnings.append(Issue("UnknownObject", f"{builtin}({name!r}) names an object not in the scene", span))


def _norm(name: str) -> str:
    return " ".join(name.lower().replace("_", " ").split())
