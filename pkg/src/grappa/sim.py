"""Deterministic kinematic tabletop environment.

Each control step commands a waypoint; the end-effector travels toward it by
at most ``max_step`` metres. There is no rigid-body physics: buttons register
a press when the end-effector arrives at the button top coming from above, and
a block is dragged along with the end-effector's horizontal motion while in
contact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from grappa.core import Observation, RobotState
from grappa.grounding import FixtureError, SceneObject, Thesaurus, check_scene, load_objects

TASK_KINDS = ("push_buttons_ordered", "reach_target", "slide_block_to_target")


class EpisodeOver(RuntimeError):
    pass


@dataclass(frozen=True)
class WorkspaceSpec:
    x: tuple[float, float] = (-0.25, 0.25)
    y: tuple[float, float] = (-0.25, 0.25)
    z: tuple[float, float] = (0.0, 0.3)
    table_height: float = 0.0
    max_step: float = 0.1
    timeout: int = 20
    home: tuple[float, ...] = (0.0, 0.0, 0.25, 180.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z):
            if not hi > lo:
                raise FixtureError("workspace bounds must be non-degenerate")
        if self.max_step <= 0:
            raise FixtureError("max_step must be > 0")
        if self.timeout < 1:
            raise FixtureError("timeout must be >= 1")

    @property
    def low(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    def clip(self, position: Sequence[float]) -> np.ndarray:
        return np.clip(np.asarray(position, dtype=float), self.low, self.high)

    def contains(self, position: Sequence[float], tol: float = 1e-9) -> bool:
        p = np.asarray(position, dtype=float)
        return bool(np.all(p >= self.low - tol) and np.all(p <= self.high + tol))

    @property
    def home_state(self) -> RobotState:
        return RobotState.from_list(self.home)

    def corners(self) -> list[RobotState]:
        """The eight corners and the centre, at the home orientation."""
        home = self.home_state
        probes = []
        for x in self.x:
            for y in self.y:
                for z in self.z:
                    probes.append(RobotState((x, y, z), home.orientation, home.gripper))
        centre = (self.low + self.high) / 2.0
        probes.append(RobotState(tuple(centre), home.orientation, home.gripper))
        return probes

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> WorkspaceSpec:
        kwargs = {}
        for key in ("x", "y", "z", "home"):
            if key in data:
                kwargs[key] = tuple(float(v) for v in data[key])
        for key in ("table_height", "max_step"):
            if key in data:
                kwargs[key] = float(data[key])
        if "timeout" in data:
            kwargs["timeout"] = int(data["timeout"])
        return cls(**kwargs)


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str
    workspace: WorkspaceSpec
    objects: tuple[SceneObject, ...]
    params: Mapping[str, Any]
    instruction: str
    thesaurus: Thesaurus = field(default_factory=Thesaurus, compare=False)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise FixtureError(f"unknown task kind {self.kind!r}")
        if not self.instruction.strip():
            raise FixtureError("task instruction must be non-empty")
        ids = {o.id for o in self.objects}
        missing = [ref for ref in self.referenced_ids() if ref not in ids]
        if missing:
            raise FixtureError(f"task references unknown objects: {missing}")
        missing = [ref for ref in self.params.get("jitter", {}) if ref not in ids]
        if missing:
            raise FixtureError(f"jitter references unknown objects: {missing}")

    def referenced_ids(self) -> list[str]:
        p = self.params
        if self.kind == "push_buttons_ordered":
            return list(dict.fromkeys([*p.get("order", []), *self.buttons]))
        if self.kind == "reach_target":
            return [p.get("target", "")]
        return [p.get("block", ""), p.get("target", "")]

    @property
    def buttons(self) -> list[str]:
        if self.kind != "push_buttons_ordered":
            return []
        return list(self.params.get("buttons", self.params.get("order", [])))

    @property
    def order(self) -> list[str]:
        return list(self.params.get("order", []))

    @property
    def press_radius(self) -> float:
        return float(self.params.get("press_radius", 0.02))

    @property
    def tolerance(self) -> float:
        default = 0.02 if self.kind == "reach_target" else 0.03
        return float(self.params.get("tolerance", default))

    @property
    def contact_radius(self) -> float:
        return float(self.params.get("contact_radius", 0.03))

    def feature_objects(self) -> list[str]:
        if self.kind == "push_buttons_ordered":
            return self.buttons
        return self.referenced_ids()


def task_from_dict(data: Mapping[str, Any]) -> TaskSpec:
    try:
        block = data["task"]
        objects = load_objects(data["objects"])
        return TaskSpec(
            id=str(data.get("id", block.get("kind"))),
            kind=block["kind"],
            workspace=WorkspaceSpec.from_dict(data.get("workspace", {})),
            objects=tuple(objects),
            params={k: v for k, v in block.items() if k not in ("kind", "instruction")},
            instruction=str(block.get("instruction", "")),
            thesaurus=Thesaurus.from_dict(data.get("thesaurus", {})),
        )
    except KeyError as exc:
        raise FixtureError(f"fixture is missing field {exc}") from exc


def load_task(path: str | Path) -> TaskSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FixtureError(f"cannot read task fixture {path}: {exc}") from exc
    return task_from_dict(data)


@dataclass(frozen=True)
class SimState:
    ee: RobotState
    objects: tuple[SceneObject, ...]
    pressed: tuple[str, ...] = ()
    step: int = 0
    seed: int = 0

    def observation(self) -> Observation:
        return Observation(t=self.step, objects=self.objects, pressed=self.pressed)

    def object(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)


def reset(task: TaskSpec, seed: int) -> tuple[SimState, Observation]:
    rng = np.random.default_rng(seed)
    jitter = task.params.get("jitter", {})
    by_id = {o.id: o for o in task.objects}
    offsets: dict[str, np.ndarray] = {}
    # fixed iteration order keeps the rng stream reproducible
    for obj in task.objects:
        r = np.asarray(jitter.get(obj.id, (0.0, 0.0, 0.0)), dtype=float)
        offsets[obj.id] = rng.uniform(-r, r) if np.any(r > 0) else np.zeros(3)

    def total_offset(obj: SceneObject) -> np.ndarray:
        off = offsets[obj.id].copy()
        cur = obj
        while cur.parent is not None:
            cur = by_id[cur.parent]
            off += offsets[cur.id]
        return off

    placed = tuple(
        obj.moved(np.asarray(obj.pose) + total_offset(obj)) if np.any(total_offset(obj)) else obj
        for obj in task.objects
    )
    check_scene(placed)
    state = SimState(ee=task.workspace.home_state, objects=placed, step=0, seed=seed)
    return state, state.observation()


def step(state: SimState, action: RobotState, task: TaskSpec) -> tuple[SimState, Observation]:
    ws = task.workspace
    if state.step >= ws.timeout:
        raise EpisodeOver(f"episode already ran {state.step} steps")
    prev = np.array(state.ee.position)
    delta = np.array(action.position) - prev
    length = float(np.linalg.norm(delta))
    if length > ws.max_step:
        delta *= ws.max_step / length
    new_pos = ws.clip(prev + delta)
    ee = RobotState(tuple(new_pos), action.orientation, action.gripper)

    objects = state.objects
    pressed = state.pressed
    if task.kind == "push_buttons_ordered":
        pressed = pressed + tuple(_press_events(state, new_pos, prev, task))
    elif task.kind == "slide_block_to_target":
        objects = _push_block(state, new_pos, prev, task)

    new = replace(state, ee=ee, objects=objects, pressed=pressed, step=state.step + 1)
    return new, new.observation()


def _press_events(state: SimState, new_pos: np.ndarray, prev: np.ndarray, task: TaskSpec) -> list[str]:
    hits = []
    for button_id in task.buttons:
        if button_id in state.pressed:
            continue
        top = np.array(state.object(button_id).top)
        d = float(np.linalg.norm(new_pos - top))
        if d <= task.press_radius and prev[2] > top[2]:
            hits.append((d, button_id))
    return [button_id for _, button_id in sorted(hits)]


def _push_block(state: SimState, new_pos: np.ndarray, prev: np.ndarray, task: TaskSpec) -> tuple[SceneObject, ...]:
    block = state.object(task.params["block"])
    top_z = block.top[2]
    centre = np.array(block.pose[:2])

    def touching(p: np.ndarray) -> bool:
        return float(np.linalg.norm(p[:2] - centre)) <= task.contact_radius and p[2] <= top_z + 1e-9

    if not (touching(prev) or touching(new_pos)):
        return state.objects
    shift = new_pos[:2] - prev[:2]
    pose = (block.pose[0] + shift[0], block.pose[1] + shift[1], block.pose[2])
    ws = task.workspace
    pose = (float(np.clip(pose[0], *ws.x)), float(np.clip(pose[1], *ws.y)), pose[2])
    return tuple(obj.moved(pose) if obj.id == block.id else obj for obj in state.objects)


def order_violated(state: SimState, task: TaskSpec) -> bool:
    if task.kind != "push_buttons_ordered":
        return False
    order = task.order
    return list(state.pressed) != order[: len(state.pressed)]


def success(state: SimState, task: TaskSpec) -> tuple[bool, str | None]:
    """Task predicate plus failure class (None on success)."""
    if task.kind == "push_buttons_ordered":
        ok = list(state.pressed) == task.order
    elif task.kind == "reach_target":
        target = state.object(task.params["target"])
        offset = np.asarray(task.params.get("target_offset", (0.0, 0.0, 0.0)), dtype=float)
        point = np.asarray(target.pose) + offset
        ok = float(np.linalg.norm(np.asarray(state.ee.position) - point)) <= task.tolerance
    else:
        block = state.object(task.params["block"])
        target = state.object(task.params["target"])
        gap = math.dist(block.pose[:2], target.pose[:2])
        ok = gap <= task.tolerance
    if ok:
        return True, None
    return False, "timeout" if state.step >= task.workspace.timeout else "behavior"


def frame_features(state: SimState, task: TaskSpec) -> np.ndarray:
    parts = [state.ee.to_list()]
    for object_id in task.feature_objects():
        parts.append(list(state.object(object_id).pose))
    parts.append([1.0 if b in state.pressed else 0.0 for b in task.buttons])
    return np.array([v for part in parts for v in part], dtype=float)
