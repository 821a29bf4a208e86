"""Scene-graph backed mock perception.

Detection is a predicate over the scene snapshot: an object is visible when
its name (or a synonym) matches the query and its apparent size clears the
detector threshold. Searching inside a parent's crop multiplies the apparent
size by ``crop_boost``, which is what makes the multi-granular search useful
for small objects sitting on or inside larger ones.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from grappa.core import Observation

logger = logging.getLogger(__name__)

GEOMETRY = ("position", "size", "orientation")


class FixtureError(ValueError):
    pass


class UnknownParent(ValueError):
    pass


class PerceptionError(RuntimeError):
    """Base class for failures of the perception builtins."""

    def __init__(self, name: str, message: str | None = None):
        super().__init__(message or name)
        self.name = name


class NotTracked(PerceptionError):
    def __init__(self, name: str):
        super().__init__(name, f"object {name!r} is not tracked")


class PerceptionLost(PerceptionError):
    def __init__(self, name: str):
        super().__init__(name, f"lost track of {name!r}")


def normalize_name(name: str) -> str:
    return " ".join(name.replace("_", " ").lower().split())


@dataclass(frozen=True)
class SceneObject:
    id: str
    name: str
    pose: tuple[float, float, float]
    size: tuple[float, float, float]  # height (z), width (x), depth (y)
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    synonyms: tuple[str, ...] = ()
    color: str = ""
    parent: str | None = None
    distractor: bool = False

    def names(self) -> set[str]:
        return {normalize_name(self.name), *(normalize_name(s) for s in self.synonyms)}

    @property
    def top(self) -> tuple[float, float, float]:
        x, y, z = self.pose
        return (x, y, z + self.size[0] / 2.0)

    def moved(self, pose: Sequence[float]) -> SceneObject:
        return replace(self, pose=tuple(float(v) for v in pose))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SceneObject:
        try:
            obj = cls(
                id=str(data["id"]),
                name=str(data.get("name", data["id"])),
                pose=tuple(float(v) for v in data["pose"]),
                size=tuple(float(v) for v in data["size"]),
                orientation=tuple(float(v) for v in data.get("orientation", (0, 0, 0))),
                synonyms=tuple(data.get("synonyms", ())),
                color=str(data.get("color", "")),
                parent=data.get("parent"),
                distractor=bool(data.get("distractor", False)),
            )
        except KeyError as exc:
            raise FixtureError(f"scene object is missing field {exc}") from exc
        if len(obj.pose) != 3 or len(obj.size) != 3 or len(obj.orientation) != 3:
            raise FixtureError(f"object {obj.id!r}: pose/size/orientation must be 3-vectors")
        if min(obj.size) <= 0:
            raise FixtureError(f"object {obj.id!r}: size components must be > 0")
        return obj

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "synonyms": list(self.synonyms),
            "pose": list(self.pose),
            "size": list(self.size),
            "orientation": list(self.orientation),
            "color": self.color,
            "parent": self.parent,
            "distractor": self.distractor,
        }


def check_scene(objects: Sequence[SceneObject]) -> None:
    """Raise FixtureError on duplicate ids, dangling/cyclic parents or misplaced children."""
    by_id = {}
    for obj in objects:
        if obj.id in by_id:
            raise FixtureError(f"duplicate object id {obj.id!r}")
        by_id[obj.id] = obj
    for obj in objects:
        seen = {obj.id}
        cur = obj
        while cur.parent is not None:
            if cur.parent not in by_id:
                raise FixtureError(f"object {cur.id!r} references unknown parent {cur.parent!r}")
            if cur.parent in seen:
                raise FixtureError(f"parent cycle through {cur.parent!r}")
            seen.add(cur.parent)
            cur = by_id[cur.parent]
        if obj.parent is not None:
            par = by_id[obj.parent]
            half_w, half_d = par.size[1] / 2.0, par.size[2] / 2.0
            if abs(obj.pose[0] - par.pose[0]) > half_w + 1e-9 or abs(obj.pose[1] - par.pose[1]) > half_d + 1e-9:
                raise FixtureError(f"object {obj.id!r} lies outside its parent {par.id!r}")


def load_objects(items: Iterable[Mapping[str, Any]]) -> list[SceneObject]:
    objects = [SceneObject.from_dict(item) for item in items]
    check_scene(objects)
    return objects


@dataclass
class Thesaurus:
    synonyms: dict[str, list[str]] = field(default_factory=dict)
    parents: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Thesaurus:
        if "synonyms" in data or "parents" in data:
            syn, par = data.get("synonyms", {}), data.get("parents", {})
        else:
            syn, par = data, {}
        return cls(
            {normalize_name(k): list(v) for k, v in syn.items()},
            {normalize_name(k): list(v) for k, v in par.items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> Thesaurus:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def synonyms_for(self, name: str) -> list[str]:
        return list(self.synonyms.get(normalize_name(name), []))

    def parents_for(self, name: str) -> list[str]:
        return list(self.parents.get(normalize_name(name), []))


@dataclass(frozen=True)
class DetectorConfig:
    min_apparent_size: float = 0.03
    crop_boost: float = 2.0
    false_negative_rate: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for rate in (self.false_negative_rate, self.false_positive_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("detector rates must lie in [0, 1]")
        if self.crop_boost < 1.0:
            raise ValueError("crop_boost must be >= 1")
        if self.min_apparent_size < 0:
            raise ValueError("min_apparent_size must be >= 0")


@dataclass(frozen=True)
class QueryRecord:
    object_name: str
    parent_name: str | None
    verdict: bool


@dataclass
class SearchTrace:
    target: str
    queries: list[QueryRecord] = field(default_factory=list)
    found: bool = False
    path: list[str] = field(default_factory=list)
    object_id: str | None = None

    @property
    def outcome(self) -> str:
        return "found" if self.found else "not_found"

    @property
    def depth(self) -> int:
        return len(self.path)

    def as_tuples(self) -> list[tuple[str, str | None, str]]:
        return [(q.object_name, q.parent_name, "yes" if q.verdict else "no") for q in self.queries]

    def describe(self) -> str:
        lines = [
            f"in_the_image({q.object_name!r}"
            + (f", {q.parent_name!r}" if q.parent_name else "")
            + f") -> {'yes' if q.verdict else 'no'}"
            for q in self.queries
        ]
        if self.found:
            lines.append(f"{self.target}: found via {' > '.join(self.path)}")
        else:
            lines.append(f"{self.target}: not found")
        return "\n".join(lines)


class TrackRegistry:
    """Objects located by search, with seeded per-step track dropout."""

    def __init__(self, dropout_rate: float = 0.0, seed: int = 0):
        if not 0.0 <= dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")
        self.dropout_rate = dropout_rate
        self._rng = np.random.default_rng(seed)
        self._tracks: dict[str, str] = {}
        self._lost: set[str] = set()

    def register(self, name: str, object_id: str) -> None:
        key = normalize_name(name)
        self._tracks[key] = object_id
        self._lost.discard(key)

    def names(self) -> list[str]:
        return sorted(self._tracks)

    def is_registered(self, name: str) -> bool:
        return normalize_name(name) in self._tracks

    def is_tracked(self, name: str) -> bool:
        key = normalize_name(name)
        return key in self._tracks and key not in self._lost

    def resolve(self, name: str) -> str:
        key = normalize_name(name)
        if key not in self._tracks:
            raise NotTracked(name)
        if key in self._lost:
            raise PerceptionLost(name)
        return self._tracks[key]

    def advance(self) -> list[str]:
        """Roll the dropout coin for every live track; returns newly lost names."""
        dropped = []
        if self.dropout_rate <= 0.0:
            return dropped
        for key in sorted(self._tracks):
            if key in self._lost:
                continue
            if self._rng.random() < self.dropout_rate:
                self._lost.add(key)
                dropped.append(key)
        return dropped


def query_object_geometry(registry: TrackRegistry, snapshot: Observation, name: str, which: str) -> tuple[float, float, float]:
    if which not in GEOMETRY:
        raise ValueError(f"unknown geometry {which!r}")
    object_id = registry.resolve(name)
    try:
        obj = snapshot.get(object_id)
    except KeyError:
        raise PerceptionLost(name) from None
    return tuple(getattr(obj, "pose" if which == "position" else which))


class Grounder:
    """Detector, search procedure and track registry bound to one episode's scene."""

    def __init__(
        self,
        snapshot: Observation,
        config: DetectorConfig | None = None,
        registry: TrackRegistry | None = None,
        thesaurus: Thesaurus | None = None,
        max_synonyms: int = 3,
        max_parents: int = 3,
    ):
        self.snapshot = snapshot
        self.config = config or DetectorConfig()
        self.registry = registry or TrackRegistry()
        self.thesaurus = thesaurus or Thesaurus()
        self.max_synonyms = max_synonyms
        self.max_parents = max_parents
        self._rng = np.random.default_rng(self.config.seed)

    def update(self, snapshot: Observation) -> None:
        self.snapshot = snapshot

    def _descends_from(self, obj: SceneObject, ancestor_id: str, by_id: dict[str, SceneObject]) -> bool:
        cur = obj
        while cur.parent is not None:
            if cur.parent == ancestor_id:
                return True
            cur = by_id[cur.parent]
        return False

    def detect(self, object_name: str, parent_name: str | None = None) -> SceneObject | None:
        """Return the detected object, or None."""
        by_id = self.snapshot.by_id()
        crop_id = None
        if parent_name is not None:
            if not self.registry.is_tracked(parent_name):
                raise UnknownParent(f"parent {parent_name!r} is not tracked")
            crop_id = self.registry.resolve(parent_name)
        query = normalize_name(object_name)
        miss_coin = self._rng.random()
        false_coin = self._rng.random()

        matches = []
        for obj in self.snapshot.objects:
            if crop_id is not None and not self._descends_from(obj, crop_id, by_id):
                continue
            if query in obj.names():
                matches.append(obj)
        boost = self.config.crop_boost if crop_id is not None else 1.0
        for obj in matches:
            if obj.distractor:
                continue
            if min(obj.size) * boost >= self.config.min_apparent_size:
                if miss_coin < self.config.false_negative_rate:
                    logger.debug("false negative on %r", object_name)
                    return None
                return obj
        decoys = [obj for obj in matches if obj.distractor]
        if decoys and false_coin < self.config.false_positive_rate:
            logger.debug("false positive on %r -> %s", object_name, decoys[0].id)
            return decoys[0]
        return None

    def in_the_image(self, object_name: str, parent_name: str | None = None) -> bool:
        return self.detect(object_name, parent_name) is not None

    def flat_search(self, target: str, synonyms: Sequence[str] | None = None) -> SearchTrace:
        """Target and synonyms at top level only, no parent crops."""
        return self.search(target, synonyms, parent_candidates=[], depth_budget=1)

    def search(
        self,
        target: str,
        synonyms: Sequence[str] | None = None,
        parent_candidates: Sequence[str] | None = None,
        depth_budget: int = 3,
    ) -> SearchTrace:
        if depth_budget < 1:
            raise ValueError("depth_budget must be >= 1")
        if synonyms is None:
            synonyms = self.thesaurus.synonyms_for(target)
        if parent_candidates is None:
            parent_candidates = self.thesaurus.parents_for(target)
        names = [target, *list(synonyms)[: self.max_synonyms]]
        parents = list(parent_candidates)[: self.max_parents]
        trace = SearchTrace(target=target)
        found = self._search(names, parents, None, depth_budget, [], trace)
        if found is not None:
            path, obj = found
            trace.found = True
            trace.path = path
            trace.object_id = obj.id
            self.registry.register(target, obj.id)
            self.registry.register(path[-1], obj.id)
        return trace

    def _query(self, name: str, crop: str | None, trace: SearchTrace) -> SceneObject | None:
        obj = self.detect(name, crop)
        trace.queries.append(QueryRecord(name, crop, obj is not None))
        return obj

    def _search(self, names, parents, crop, depth, path, trace):
        for name in names:
            obj = self._query(name, crop, trace)
            if obj is not None:
                return [*path, name], obj
        if depth <= 1:
            return None
        for parent in parents:
            if parent in path:
                continue
            pobj = self._query(parent, crop, trace)
            if pobj is None:
                continue
            self.registry.register(parent, pobj.id)
            found = self._search(names, parents, parent, depth - 1, [*path, parent], trace)
            if found is not None:
                return found
        return None

    def ground(self, names: Iterable[str], depth_budget: int = 3) -> dict[str, SearchTrace]:
        """Search for every name not already tracked."""
        traces = {}
        for name in names:
            if self.registry.is_tracked(name):
                continue
            traces[name] = self.search(name, depth_budget=depth_budget)
        return traces

    def geometry(self, name: str, which: str) -> tuple[float, float, float]:
        return query_object_geometry(self.registry, self.snapshot, name, which)


class Perception:
    """The three geometry builtins as seen by guidance scripts."""

    def __init__(self, grounder: Grounder):
        self.grounder = grounder

    def get_position(self, name: str):
        return self.grounder.geometry(name, "position")

    def get_size(self, name: str):
        return self.grounder.geometry(name, "size")

    def get_orientation(self, name: str):
        return self.grounder.geometry(name, "orientation")
