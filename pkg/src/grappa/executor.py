"""Guided action selection: base policy plus guidance script, one step and full episodes.

Per control step the base policy proposes ``n`` candidates, the dynamics model
forecasts where each would leave the robot, the guidance script scores every
forecast, and the two normalized score vectors are blended with the guidance
factor ``alpha``. The executed action is the argmax of the blend.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from grappa import sim
from grappa.core import (
    EmptyVector,
    EpisodeLog,
    Observation,
    RobotState,
    StepRecord,
    normalize_scores,
    select_best,
)
from grappa.grounding import DetectorConfig, Grounder, Perception, PerceptionError, TrackRegistry
from grappa.gsl import BudgetExceeded, EvalBudget, GslProgram, GslRuntimeError, evaluate
from grappa.policy import Candidates, DynamicsModel, Policy

logger = logging.getLogger(__name__)

FALLBACK_MODES = ("base_only", "uniform_guidance")
REALIZED_TOL = 1e-9


class LengthMismatch(ValueError):
    pass


class GuidanceError(RuntimeError):
    """A guidance evaluation failed; carries the fallback result for the step."""

    def __init__(self, message: str, action: RobotState, next_hidden: dict, trace: StepTrace):
        super().__init__(message)
        self.action = action
        self.next_hidden = next_hidden
        self.trace = trace


@dataclass(frozen=True)
class GuidanceContext:
    program: GslProgram | None
    alpha: float = 1.0
    n: int = 64
    dyn: DynamicsModel = field(default_factory=DynamicsModel)
    budget: EvalBudget = field(default_factory=EvalBudget)
    perception: Any = None
    fallback: str = "base_only"
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    dropout_rate: float = 0.0
    search_depth: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.fallback not in FALLBACK_MODES:
            raise ValueError(f"fallback must be one of {FALLBACK_MODES}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")


@dataclass
class StepTrace:
    candidates: Candidates
    futures: list[RobotState]
    base_raw: np.ndarray
    base: np.ndarray
    guidance_raw: np.ndarray | None
    guidance: np.ndarray | None
    combined: np.ndarray
    chosen: int
    hidden_before: dict
    hidden_after: dict
    fallback: bool = False
    error: str | None = None

    @property
    def action(self) -> RobotState:
        return self.candidates[self.chosen]


def combine_distributions(pi_hat: Sequence[float], g_hat: Sequence[float], alpha: float) -> np.ndarray:
    """Element-wise weighted average ``(1 - alpha) * pi_hat + alpha * g_hat``."""
    p = np.asarray(pi_hat, dtype=float)
    g = np.asarray(g_hat, dtype=float)
    if p.shape != g.shape:
        raise LengthMismatch(f"score vectors differ in length ({p.size} vs {g.size})")
    if p.size == 0:
        raise EmptyVector("cannot combine empty score vectors")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    # exact endpoints keep alpha=0 bit-identical to the base distribution
    if alpha == 0.0:
        return p.copy()
    if alpha == 1.0:
        return g.copy()
    return (1.0 - alpha) * p + alpha * g


class _StepCache:
    """Memoizes perception lookups for one step; the scene is fixed within a step."""

    def __init__(self, binding):
        self.binding = binding
        self.memo: dict[tuple[str, str], tuple] = {}

    def _get(self, which: str, name: str):
        key = (which, name)
        if key not in self.memo:
            self.memo[key] = tuple(getattr(self.binding, which)(name))
        return self.memo[key]

    def get_position(self, name):
        return self._get("get_position", name)

    def get_size(self, name):
        return self._get("get_size", name)

    def get_orientation(self, name):
        return self._get("get_orientation", name)


def step_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def score_futures(ctx: GuidanceContext, futures: Sequence[RobotState], hidden: Mapping, perception) -> tuple[np.ndarray, list[dict]]:
    binding = _StepCache(perception) if perception is not None else None
    scores = np.empty(len(futures))
    hiddens = []
    for i, future in enumerate(futures):
        s, h = evaluate(ctx.program, future, hidden, binding, ctx.budget)
        scores[i] = s
        hiddens.append(h)
    return scores, hiddens


def guided_step(
    ctx: GuidanceContext,
    policy: Policy,
    dyn: DynamicsModel | None,
    obs: Observation,
    state: RobotState,
    hidden: Mapping[str, Any],
    seed: int,
    perception=None,
) -> tuple[RobotState, dict, StepTrace]:
    """Select one action. Raises GuidanceError (with a fallback result) on script failures."""
    dyn = dyn or ctx.dyn
    perception = perception if perception is not None else ctx.perception
    hidden_before = dict(hidden)
    candidates = policy.sample_actions(obs, state, ctx.n, seed)
    base_raw = np.asarray(policy.action_probabilities(candidates), dtype=float)
    base = normalize_scores(base_raw)
    futures = dyn.forecast(state, candidates)

    if ctx.program is None:
        chosen = select_best(base)
        trace = StepTrace(candidates, futures, base_raw, base, None, None, base, chosen, hidden_before, dict(hidden_before))
        return candidates[chosen], dict(hidden_before), trace

    try:
        raw, hiddens = score_futures(ctx, futures, hidden_before, perception)
    except PerceptionError as exc:
        trace = _fallback_trace(ctx, candidates, futures, base_raw, base, hidden_before, f"perception: {exc}")
        logger.debug("step fell back: %s", exc)
        return trace.action, dict(hidden_before), trace
    except (GslRuntimeError, BudgetExceeded) as exc:
        trace = _fallback_trace(ctx, candidates, futures, base_raw, base, hidden_before, f"{type(exc).__name__}: {exc}")
        raise GuidanceError(str(exc), trace.action, dict(hidden_before), trace) from exc

    g_hat = normalize_scores(raw)
    combined = combine_distributions(base, g_hat, ctx.alpha)
    chosen = select_best(combined)
    trace = StepTrace(candidates, futures, base_raw, base, raw, g_hat, combined, chosen, hidden_before, hiddens[chosen])
    return candidates[chosen], dict(hiddens[chosen]), trace


def _fallback_trace(ctx, candidates, futures, base_raw, base, hidden_before, error) -> StepTrace:
    if ctx.fallback == "uniform_guidance":
        g_hat = np.full(len(base), 1.0 / len(base))
        combined = combine_distributions(base, g_hat, ctx.alpha)
    else:
        g_hat = None
        combined = base.copy()
    chosen = select_best(combined)
    return StepTrace(
        candidates, futures, base_raw, base, None, g_hat, combined, chosen,
        hidden_before, dict(hidden_before), fallback=True, error=error,
    )


def episode_perception(task: sim.TaskSpec, ctx: GuidanceContext, obs: Observation, seed: int) -> tuple[Grounder | None, Any]:
    """Build the grounder for one episode and locate every object the program names."""
    if ctx.perception is not None or ctx.program is None:
        return None, ctx.perception
    detector = DetectorConfig(
        min_apparent_size=ctx.detector.min_apparent_size,
        crop_boost=ctx.detector.crop_boost,
        false_negative_rate=ctx.detector.false_negative_rate,
        false_positive_rate=ctx.detector.false_positive_rate,
        seed=step_seed(seed, 1_000_003),
    )
    registry = TrackRegistry(ctx.dropout_rate, seed=step_seed(seed, 1_000_033))
    grounder = Grounder(obs, detector, registry, task.thesaurus)
    grounder.ground(ctx.program.object_names(), depth_budget=ctx.search_depth)
    return grounder, LazyPerception(grounder, ctx.search_depth)


class LazyPerception(Perception):
    """Perception that searches once for names first seen at evaluation time.

    Names computed inside a script (for example taken from a vector) are not
    visible to the static scan done at reset. A name whose search fails stays
    untracked for the rest of the episode.
    """

    def __init__(self, grounder: Grounder, depth_budget: int = 3):
        super().__init__(grounder)
        self.depth_budget = depth_budget
        self._searched: set[str] = set()

    def _ensure(self, name: str) -> None:
        registry = self.grounder.registry
        if registry.is_registered(name) or name in self._searched:
            return
        self._searched.add(name)
        self.grounder.search(name, depth_budget=self.depth_budget)

    def get_position(self, name):
        self._ensure(name)
        return super().get_position(name)

    def get_size(self, name):
        self._ensure(name)
        return super().get_size(name)

    def get_orientation(self, name):
        self._ensure(name)
        return super().get_orientation(name)


def run_episode(task: sim.TaskSpec, policy: Policy, ctx: GuidanceContext, seed: int) -> EpisodeLog:
    policy = policy.episode(seed)
    state, obs = sim.reset(task, seed)
    grounder, perception = episode_perception(task, ctx, obs, seed)
    hidden = dict(ctx.program.default_hidden) if ctx.program is not None else {}
    log = EpisodeLog(
        task_id=task.id,
        seed=seed,
        guidance_version=_program_id(ctx.program),
        policy=getattr(policy, "kind", type(policy).__name__),
        alpha=ctx.alpha,
        initial_features=sim.frame_features(state, task).tolist(),
    )
    used_fallback = False
    done = False
    while not done and state.step < task.workspace.timeout:
        t = state.step
        ee = state.ee
        error = None
        try:
            action, next_hidden, trace = guided_step(ctx, policy, None, obs, ee, hidden, step_seed(seed, t), perception)
        except GuidanceError as exc:
            action, next_hidden, trace = exc.action, exc.next_hidden, exc.trace
            error = trace.error
        else:
            error = trace.error
        used_fallback |= trace.fallback and (trace.error or "").startswith("perception")

        state, obs = sim.step(state, action, task)
        realized = state.ee
        forecast = trace.futures[trace.chosen]
        if (
            ctx.program is not None
            and not trace.fallback
            and np.max(np.abs(realized.as_array() - forecast.as_array())) > REALIZED_TOL
        ):
            # the forecast missed; score the state actually reached instead
            try:
                _, next_hidden = evaluate(ctx.program, realized, trace.hidden_before, perception, ctx.budget)
            except (GslRuntimeError, BudgetExceeded, PerceptionError) as exc:
                logger.debug("re-evaluation at realized state failed: %s", exc)
        trace.hidden_after = dict(next_hidden)
        hidden = next_hidden

        log.steps.append(_record(t, ee, action, trace, error, sim.frame_features(state, task)))
        if grounder is not None:
            grounder.registry.advance()
            grounder.update(obs)
        ok, _ = sim.success(state, task)
        done = ok or sim.order_violated(state, task)

    ok, failure = sim.success(state, task)
    if not ok and used_fallback:
        failure = "perception"
    log.success = ok
    log.failure_class = failure
    log.final_state = state.ee.to_list()
    return log


def _program_id(program: GslProgram | None) -> str | None:
    if program is None:
        return None
    return hashlib.sha256(program.source.encode("utf-8")).hexdigest()[:12]


def _record(t: int, ee: RobotState, action: RobotState, trace: StepTrace, error, features) -> StepRecord:
    return StepRecord(
        t=t,
        state=ee.to_list(),
        action=action.to_list(),
        chosen=int(trace.chosen),
        base_raw=trace.base_raw.tolist(),
        base=trace.base.tolist(),
        guidance_raw=None if trace.guidance_raw is None else trace.guidance_raw.tolist(),
        guidance=None if trace.guidance is None else trace.guidance.tolist(),
        combined=trace.combined.tolist(),
        hidden_before=dict(trace.hidden_before),
        hidden_after=dict(trace.hidden_after),
        fallback=trace.fallback,
        error=error,
        features=features.tolist(),
    )


def replay(task: sim.TaskSpec, log: EpisodeLog) -> sim.SimState:
    """Re-run the simulator on the logged actions; returns the final state."""
    state, _ = sim.reset(task, log.seed)
    for record in log.steps:
        state, _ = sim.step(state, RobotState.from_list(record.action), task)
    return state


def replay_matches(task: sim.TaskSpec, log: EpisodeLog, tol: float = 0.0) -> bool:
    final = replay(task, log).ee.to_list()
    return len(final) == len(log.final_state) and all(abs(a - b) <= tol for a, b in zip(final, log.final_state))


@dataclass(frozen=True)
class GridSpec:
    x: tuple[float, float]
    y: tuple[float, float]
    nx: int = 21
    ny: int = 21
    z: float = 0.05

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("heatmap grid needs at least 2x2 cells")
        if not (self.x[1] > self.x[0] and self.y[1] > self.y[0]):
            raise ValueError("heatmap ranges must be non-degenerate")

    @property
    def dx(self) -> float:
        return (self.x[1] - self.x[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.y[1] - self.y[0]) / self.ny

    def centres(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x[0] + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.y[0] + (np.arange(self.ny) + 0.5) * self.dy
        return xs, ys


@dataclass
class HeatmapGrid:
    spec: GridSpec
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # shape (ny, nx)
    argmax: tuple[int, int]  # (iy, ix)
    fallback: bool = False

    @property
    def argmax_xy(self) -> tuple[float, float]:
        iy, ix = self.argmax
        return float(self.xs[ix]), float(self.ys[iy])

    def cell_contains(self, x: float, y: float) -> bool:
        cx, cy = self.argmax_xy
        return abs(x - cx) <= self.spec.dx / 2 + 1e-12 and abs(y - cy) <= self.spec.dy / 2 + 1e-12

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["y\\x", *[f"{x:.6g}" for x in self.xs]])
        for iy, y in enumerate(self.ys):
            writer.writerow([f"{y:.6g}", *[repr(float(v)) for v in self.values[iy]]])
        return buf.getvalue()


def emit_heatmap(
    ctx: GuidanceContext,
    policy: Policy,
    obs: Observation,
    state: RobotState,
    hidden: Mapping[str, Any],
    grid_spec: GridSpec,
    seed: int = 0,
) -> HeatmapGrid:
    """Blend base and guidance scores over a dense grid of candidate waypoints."""
    xs, ys = grid_spec.centres()
    actions = [
        RobotState((float(x), float(y), grid_spec.z), state.orientation, state.gripper)
        for y in ys
        for x in xs
    ]
    base = normalize_scores(policy.score(obs, state, actions, seed))
    fallback = False
    if ctx.program is None:
        combined = base
    else:
        try:
            # cells are scored as reached states, so the forecast is the identity
            raw, _ = score_futures(ctx, actions, dict(hidden), ctx.perception)
            combined = combine_distributions(base, normalize_scores(raw), ctx.alpha)
        except (PerceptionError, GslRuntimeError, BudgetExceeded) as exc:
            logger.warning("heatmap guidance failed, showing base scores: %s", exc)
            fallback = True
            combined = base
    values = np.asarray(combined, dtype=float).reshape(grid_spec.ny, grid_spec.nx)
    flat = select_best(values.ravel())
    return HeatmapGrid(grid_spec, xs, ys, values, divmod(flat, grid_spec.nx), fallback)
