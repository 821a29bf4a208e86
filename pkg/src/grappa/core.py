"""Shared domain types and numeric helpers.

Every other module speaks in terms of :class:`RobotState` (the 7-component
end-effector pose ``[x, y, z, rx, ry, rz, gripper]``), plain numpy score
vectors, and hidden-state dictionaries.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from grappa.grounding import SceneObject

NORMALIZE_TOL = 1e-12
FAILURE_CLASSES = ("timeout", "perception", "behavior")

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class EmptyVector(ValueError):
    pass


@dataclass(frozen=True)
class RobotState:
    """End-effector pose: position (m), Euler orientation (deg), finger gap (m)."""

    position: tuple[float, float, float]
    orientation: tuple[float, float, float] = (180.0, 0.0, 0.0)
    gripper: float = 0.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        ori = tuple(float(v) for v in self.orientation)
        grip = float(self.gripper)
        if len(pos) != 3 or len(ori) != 3:
            raise ValueError("position and orientation must have 3 components")
        if not all(math.isfinite(v) for v in (*pos, *ori, grip)):
            raise ValueError("robot state components must be finite")
        if grip < 0:
            raise ValueError(f"gripper must be >= 0, got {grip}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", ori)
        object.__setattr__(self, "gripper", grip)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> RobotState:
        if len(values) != 7:
            raise ValueError(f"expected 7 components, got {len(values)}")
        return cls(tuple(values[0:3]), tuple(values[3:6]), values[6])

    def to_list(self) -> list[float]:
        return [*self.position, *self.orientation, self.gripper]

    def as_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=float)


def normalize_scores(raw: Iterable[float]) -> np.ndarray:
    """Clamp negatives to zero and rescale to a probability vector.

    Degenerate inputs (all zero, or any non-finite entry) map to the uniform
    vector. A vector already summing to one within ``NORMALIZE_TOL`` is
    returned unchanged, which makes the operation exactly idempotent.
    """
    v = np.array(list(raw) if not isinstance(raw, np.ndarray) else raw, dtype=float)
    n = v.shape[0]
    if n == 0:
        raise EmptyVector("cannot normalize an empty score vector")
    if not np.all(np.isfinite(v)):
        return np.full(n, 1.0 / n)
    v = np.maximum(v, 0.0)
    total = float(v.sum())
    if total <= 0.0 or not math.isfinite(total):
        return np.full(n, 1.0 / n)
    if abs(total - 1.0) <= NORMALIZE_TOL:
        return v
    return v / total


def select_best(scores: Sequence[float]) -> int:
    """Argmax with ties going to the lowest index."""
    v = np.asarray(scores, dtype=float)
    if v.shape[0] == 0:
        raise EmptyVector("cannot select from an empty score vector")
    return int(np.argmax(v))


def check_hidden_state(hidden: Mapping[str, Any]) -> dict[str, bool | float]:
    """Validate and copy a hidden-state map (identifier keys, bool/number values)."""
    out: dict[str, bool | float] = {}
    for key, value in hidden.items():
        if not isinstance(key, str) or not _IDENT.match(key):
            raise ValueError(f"hidden-state key {key!r} is not an identifier")
        if isinstance(value, (bool, np.bool_)):
            out[key] = bool(value)
        elif isinstance(value, (int, float, np.integer, np.floating)):
            if not math.isfinite(float(value)):
                raise ValueError(f"hidden-state value for {key!r} is not finite")
            out[key] = float(value)
        else:
            raise ValueError(f"hidden-state value for {key!r} must be bool or number")
    return out


@dataclass(frozen=True)
class Observation:
    """Read-only snapshot of the scene at control step ``t``."""

    t: int
    objects: tuple[SceneObject, ...]
    pressed: tuple[str, ...] = ()

    def by_id(self) -> dict[str, SceneObject]:
        return {obj.id: obj for obj in self.objects}

    def get(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)


def _clean(value):
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


@dataclass
class StepRecord:
    t: int
    state: list[float]
    action: list[float]
    chosen: int
    base_raw: list[float]
    base: list[float]
    guidance_raw: list[float] | None
    guidance: list[float] | None
    combined: list[float]
    hidden_before: dict[str, Any]
    hidden_after: dict[str, Any]
    fallback: bool = False
    error: str | None = None
    features: list[float] = field(default_factory=list)


@dataclass
class EpisodeLog:
    task_id: str
    seed: int
    steps: list[StepRecord] = field(default_factory=list)
    success: bool = False
    failure_class: str | None = None
    guidance_version: str | None = None
    policy: str = ""
    alpha: float = 0.0
    initial_features: list[float] = field(default_factory=list)
    final_state: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        """One header line followed by one line per step."""
        header = {k: v for k, v in asdict(self).items() if k != "steps"}
        header = {"record": "episode", **header, "n_steps": len(self.steps)}
        lines = [json.dumps(_clean(header), sort_keys=True)]
        for step in self.steps:
            lines.append(json.dumps(_clean({"record": "step", **asdict(step)}), sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> EpisodeLog:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not records or records[0].get("record") != "episode":
            raise ValueError("episode log must start with an episode header record")
        header = dict(records[0])
        header.pop("record")
        header.pop("n_steps", None)
        steps = []
        for rec in records[1:]:
            rec = dict(rec)
            rec.pop("record")
            steps.append(StepRecord(**rec))
        return cls(steps=steps, **header)
