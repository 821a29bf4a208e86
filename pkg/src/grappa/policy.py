"""Base policies, the regression-to-distribution adapter, and dynamics models.

All policies are immutable and take an explicit seed, so a given
``(observation, state, n, seed)`` always yields the same candidate set.
"""
from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from grappa.core import Observation, RobotState
from grappa.sim import TaskSpec, WorkspaceSpec

Predictor = Callable[[Observation, RobotState], RobotState]


class MismatchedCandidates(ValueError):
    pass


@dataclass(frozen=True)
class Candidates(Sequence[RobotState]):
    """Actions sampled in one control step, plus what is needed to score them."""

    actions: tuple[RobotState, ...]
    n: int
    source: str
    mean: RobotState | None = None
    weights: tuple[float, ...] | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i):
        return self.actions[i]

    def __iter__(self) -> Iterator[RobotState]:
        return iter(self.actions)

    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.actions], dtype=float)


def _wrap_degrees(d: np.ndarray) -> np.ndarray:
    return (d + 180.0) % 360.0 - 180.0


class Policy(abc.ABC):
    kind: str = "policy"

    @abc.abstractmethod
    def sample_actions(self, obs: Observation, state: RobotState, n: int, seed: int) -> Candidates:
        ...

    @abc.abstractmethod
    def action_probabilities(self, candidates: Candidates) -> np.ndarray:
        ...

    @abc.abstractmethod
    def score(self, obs: Observation, state: RobotState, actions: Sequence[RobotState], seed: int = 0) -> np.ndarray:
        """Unnormalised base-policy score of arbitrary actions (used for heatmaps)."""

    def episode(self, seed: int) -> Policy:
        """Policy instance used for the episode with this seed."""
        return self

    def _check(self, candidates: Candidates) -> None:
        if not isinstance(candidates, Candidates) or candidates.source != self.kind:
            raise MismatchedCandidates("candidates were not sampled by this policy")
        if len(candidates.actions) != candidates.n:
            raise MismatchedCandidates(f"expected {candidates.n} candidates, got {len(candidates.actions)}")


def sample_actions(policy: Policy, obs: Observation, state: RobotState, n: int, seed: int) -> Candidates:
    if n < 1:
        raise ValueError("n must be >= 1")
    return policy.sample_actions(obs, state, n, seed)


def action_probabilities(policy: Policy, candidates: Candidates) -> np.ndarray:
    return policy.action_probabilities(candidates)


@dataclass(frozen=True)
class RandomPolicy(Policy):
    """Untrained baseline: uniform waypoints over the workspace."""

    workspace: WorkspaceSpec
    gripper_max: float = 0.08
    kind = "random"

    def sample_actions(self, obs, state, n, seed):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(self.workspace.low, self.workspace.high, size=(n, 3))
        rot = rng.uniform(-180.0, 180.0, size=(n, 3))
        grip = rng.uniform(0.0, self.gripper_max, size=n)
        actions = tuple(RobotState(tuple(pos[i]), tuple(rot[i]), grip[i]) for i in range(n))
        return Candidates(actions, n, self.kind)

    def action_probabilities(self, candidates):
        self._check(candidates)
        return np.ones(len(candidates))

    def score(self, obs, state, actions, seed=0):
        return np.ones(len(actions))


@dataclass(frozen=True)
class GaussianRegressionPolicy(Policy):
    """A deterministic regressor wrapped in a constant-sigma Gaussian.

    Candidate 0 is always the prediction itself; the remaining candidates are
    drawn around it. Only the position is perturbed unless
    ``sample_orientation`` is set, since waypoint regressors derive orientation
    and gripper from the predicted waypoint.
    """

    predictor: Predictor
    workspace: WorkspaceSpec
    sigma_pos: float = 0.05
    sigma_rot: float = 15.0
    sigma_grip: float = 0.01
    sample_orientation: bool = False
    kind = "gaussian"

    def __post_init__(self):
        if min(self.sigma_pos, self.sigma_rot, self.sigma_grip) <= 0:
            raise ValueError("sigmas must be > 0")

    def episode(self, seed):
        episode_fn = getattr(self.predictor, "episode", None)
        if episode_fn is None:
            return self
        return replace(self, predictor=episode_fn(seed))

    def sample_actions(self, obs, state, n, seed):
        mean = self.predictor(obs, state)
        rng = np.random.default_rng(seed)
        mu = mean.as_array()
        actions = [RobotState(tuple(self.workspace.clip(mu[:3])), mean.orientation, mean.gripper)]
        if n > 1:
            pos = self.workspace.clip(mu[:3] + rng.normal(0.0, self.sigma_pos, size=(n - 1, 3)))
            if self.sample_orientation:
                rot = mu[3:6] + rng.normal(0.0, self.sigma_rot, size=(n - 1, 3))
                grip = np.maximum(mu[6] + rng.normal(0.0, self.sigma_grip, size=n - 1), 0.0)
            else:
                rot = np.tile(mu[3:6], (n - 1, 1))
                grip = np.full(n - 1, mu[6])
            actions += [RobotState(tuple(pos[i]), tuple(rot[i]), grip[i]) for i in range(n - 1)]
        return Candidates(tuple(actions), n, self.kind, mean=mean)

    def density(self, mean: RobotState, actions: Sequence[RobotState]) -> np.ndarray:
        a = np.array([x.to_list() for x in actions], dtype=float)
        mu = mean.as_array()
        z_pos = (a[:, :3] - mu[:3]) / self.sigma_pos
        z_rot = _wrap_degrees(a[:, 3:6] - mu[3:6]) / self.sigma_rot
        z_grip = (a[:, 6] - mu[6]) / self.sigma_grip
        q = (z_pos**2).sum(axis=1) + (z_rot**2).sum(axis=1) + z_grip**2
        return np.exp(-0.5 * q)

    def action_probabilities(self, candidates):
        self._check(candidates)
        return self.density(candidates.mean, candidates.actions)

    def score(self, obs, state, actions, seed=0):
        return self.density(self.predictor(obs, state), actions)


@dataclass(frozen=True)
class SampledWaypointPolicy(Policy):
    """Classification-style policy: scored waypoint proposals plus an orientation/gripper head.

    Proposals are uniform over the workspace. With a predictor, a proposal's
    score is a Gaussian kernel around the predicted position; without one
    every proposal scores 1 (an untrained network).
    """

    workspace: WorkspaceSpec
    m: int = 64
    predictor: Predictor | None = None
    bandwidth: float = 0.05
    floor: float = 1e-6
    kind = "waypoint"

    def episode(self, seed):
        episode_fn = getattr(self.predictor, "episode", None)
        if episode_fn is None:
            return self
        return replace(self, predictor=episode_fn(seed))

    def _head(self, obs, state) -> tuple[tuple[float, ...], float, np.ndarray | None]:
        if self.predictor is None:
            home = self.workspace.home_state
            return home.orientation, home.gripper, None
        pred = self.predictor(obs, state)
        return pred.orientation, pred.gripper, np.array(pred.position)

    def _weights(self, positions: np.ndarray, centre: np.ndarray | None) -> np.ndarray:
        if centre is None:
            return np.ones(len(positions))
        d2 = ((positions - centre) ** 2).sum(axis=1)
        return np.exp(-0.5 * d2 / self.bandwidth**2) + self.floor

    def proposals(self, obs, state, seed, count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        count = max(self.m, count or 0)
        positions = rng.uniform(self.workspace.low, self.workspace.high, size=(count, 3))
        _, _, centre = self._head(obs, state)
        return positions, self._weights(positions, centre)

    def sample_actions(self, obs, state, n, seed):
        positions, weights = self.proposals(obs, state, seed, n)
        rot, grip, _ = self._head(obs, state)
        actions = tuple(RobotState(tuple(positions[i]), rot, grip) for i in range(n))
        return Candidates(actions, n, self.kind, weights=tuple(float(w) for w in weights[:n]))

    def action_probabilities(self, candidates):
        self._check(candidates)
        return np.array(candidates.weights, dtype=float)

    def score(self, obs, state, actions, seed=0):
        _, _, centre = self._head(obs, state)
        return self._weights(np.array([a.position for a in actions], dtype=float), centre)


@dataclass(frozen=True)
class ScriptedExpert:
    """Task-aware waypoint predictor with injectable error.

    ``bias`` is a fixed position offset. ``bias_max`` draws a fresh horizontal
    offset of magnitude U(bias_min, bias_max) for every episode, and ``noise``
    adds per-step Gaussian jitter; both come from seeded generators.
    """

    task: TaskSpec
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bias_min: float = 0.0
    bias_max: float = 0.0
    noise: float = 0.0
    hover: float = 0.05
    seed: int = 0

    def episode(self, seed: int) -> ScriptedExpert:
        if self.bias_max <= 0 and self.noise <= 0:
            return self
        rng = np.random.default_rng([seed, 7919])
        bias = np.array(self.bias, dtype=float)
        if self.bias_max > 0:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            mag = rng.uniform(self.bias_min, self.bias_max)
            bias = bias + np.array([mag * math.cos(angle), mag * math.sin(angle), 0.0])
        return replace(self, bias=tuple(bias), bias_min=0.0, bias_max=0.0, seed=seed)

    def __call__(self, obs: Observation, state: RobotState) -> RobotState:
        target = np.array(self._target(obs, state), dtype=float) + np.array(self.bias)
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, obs.t, 104729])
            target = target + rng.normal(0.0, self.noise, size=3)
        home = self.task.workspace.home_state
        return RobotState(tuple(self.task.workspace.clip(target)), home.orientation, home.gripper)

    def _target(self, obs: Observation, state: RobotState) -> Sequence[float]:
        task = self.task
        ee = np.array(state.position)
        if task.kind == "reach_target":
            offset = np.asarray(task.params.get("target_offset", (0.0, 0.0, 0.0)), dtype=float)
            return np.asarray(obs.get(task.params["target"]).pose) + offset
        if task.kind == "push_buttons_ordered":
            remaining = [b for b in task.order if b not in obs.pressed]
            if not remaining:
                return ee
            top = np.array(obs.get(remaining[0]).top)
            aligned = float(np.linalg.norm(ee[:2] - top[:2])) <= 0.25 * task.press_radius
            if aligned and ee[2] > top[2]:
                return top
            return top + np.array([0.0, 0.0, self.hover])
        block = obs.get(task.params["block"])
        goal = np.array(obs.get(task.params["target"]).pose[:2])
        centre = np.array(block.pose[:2])
        heading = goal - centre
        dist = float(np.linalg.norm(heading))
        if dist < 1e-9:
            return ee
        heading /= dist
        behind = centre - heading * (0.5 * max(block.size[1], block.size[2]) + 0.01)
        low_z = block.pose[2]
        lateral = float(np.linalg.norm(ee[:2] - behind))
        along = float(np.dot(ee[:2] - centre, heading))
        if along < -0.005 and ee[2] <= block.top[2] and abs(np.cross(heading, ee[:2] - centre)) < task.contact_radius:
            push_to = goal - heading * (0.5 * max(block.size[1], block.size[2]))
            return (push_to[0], push_to[1], low_z)
        if lateral <= 0.01:
            return (behind[0], behind[1], low_z)
        return (behind[0], behind[1], block.top[2] + self.hover)


@dataclass(frozen=True)
class DynamicsModel:
    mode: str = "identity"
    max_step: float = 0.1
    workspace: WorkspaceSpec | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "clamped"):
            raise ValueError(f"unknown dynamics mode {self.mode!r}")
        if self.max_step <= 0:
            raise ValueError("max_step must be > 0")

    @classmethod
    def for_task(cls, task: TaskSpec) -> DynamicsModel:
        """Clamped dynamics that reproduce the simulator's kinematics exactly."""
        return cls("clamped", task.workspace.max_step, task.workspace)

    def forecast(self, state: RobotState, candidates: Sequence[RobotState]) -> list[RobotState]:
        if self.mode == "identity":
            return list(candidates)
        prev = np.array(state.position)
        out = []
        for c in candidates:
            delta = np.array(c.position) - prev
            length = float(np.linalg.norm(delta))
            if length > self.max_step:
                delta *= self.max_step / length
            pos = prev + delta
            if self.workspace is not None:
                pos = self.workspace.clip(pos)
            out.append(RobotState(tuple(pos), c.orientation, c.gripper))
        return out


def forecast(dyn: DynamicsModel, state: RobotState, candidates: Sequence[RobotState]) -> list[RobotState]:
    return dyn.forecast(state, candidates)


def make_policy(cfg: Mapping[str, Any], task: TaskSpec) -> Policy:
    """Build a policy from a run-config ``[policy]`` block."""
    cfg = dict(cfg)
    kind = cfg.get("kind", "random")
    predictor = None
    spec = cfg.get("predictor", "expert" if kind == "gaussian" else "none")
    if spec == "expert":
        predictor = ScriptedExpert(
            task,
            bias=tuple(cfg.get("bias", (0.0, 0.0, 0.0))),
            bias_min=float(cfg.get("bias_min", 0.0)),
            bias_max=float(cfg.get("bias_max", 0.0)),
            noise=float(cfg.get("noise", 0.0)),
        )
    elif spec != "none":
        raise ValueError(f"unknown predictor {spec!r}")
    if kind == "random":
        return RandomPolicy(task.workspace)
    if kind == "gaussian":
        if predictor is None:
            raise ValueError("gaussian policy needs a predictor")
        return GaussianRegressionPolicy(
            predictor,
            task.workspace,
            sigma_pos=float(cfg.get("sigma_pos", 0.05)),
            sigma_rot=float(cfg.get("sigma_rot", 15.0)),
            sigma_grip=float(cfg.get("sigma_grip", 0.01)),
            sample_orientation=bool(cfg.get("sample_orientation", False)),
        )
    if kind == "waypoint":
        return SampledWaypointPolicy(
            task.workspace,
            m=int(cfg.get("proposals", 64)),
            predictor=predictor,
            bandwidth=float(cfg.get("bandwidth", 0.05)),
        )
    raise ValueError(f"unknown policy kind {kind!r}")
