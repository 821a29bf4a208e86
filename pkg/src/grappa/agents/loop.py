"""Failure analysis from rollout keyframes, and the iterative improvement loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

from grappa.agents.backends import Backend, BackendError
from grappa.agents.keyframes import KeyframeSet, extract_keyframes
from grappa.agents.protocol import (
    DEFAULT_TURN_BUDGET,
    AgentEnvironment,
    ConversationState,
    ProtocolFailure,
    generate_guidance_function,
    load_prompt,
)
from grappa.core import EpisodeLog
from grappa.executor import GuidanceContext, run_episode
from grappa.gsl import GslProgram
from grappa.policy import Policy
from grappa.sim import TaskSpec

logger = logging.getLogger(__name__)


def _fmt(values: Sequence[float]) -> str:
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


def monitor_payload(
    episode: EpisodeLog,
    program: GslProgram,
    k: int = 6,
    p: int = 8,
    seed: int = 0,
    buttons: Sequence[str] = (),
) -> tuple[str, KeyframeSet]:
    """Deterministic text rendition of an episode's keyframes plus the program."""
    frames = [episode.initial_features] + [s.features for s in episode.steps]
    keys = extract_keyframes(frames, k=k, p=p, seed=seed)
    lines = [
        f"episode: task {episode.task_id}, seed {episode.seed}, "
        f"{len(episode.steps)} steps, outcome {'success' if episode.success else 'failure'}"
        + (f" ({episode.failure_class})" if episode.failure_class else ""),
        f"keyframes: {len(keys)} of {len(frames)} frames",
    ]
    for idx in keys.indices:
        f = frames[idx]
        ee, grip = f[:3], f[6] if len(f) > 6 else 0.0
        line = f"frame {idx}: end effector {_fmt(ee)}, gripper {grip:.3f}"
        if buttons:
            flags = f[len(f) - len(buttons):]
            pressed = [b for b, v in zip(buttons, flags) if v > 0.5]
            line += f", pressed {pressed if pressed else 'none'}"
        if idx > 0:
            step = episode.steps[idx - 1]
            line += f", hidden {dict(sorted(step.hidden_after.items()))}"
            if step.fallback:
                line += ", guidance fell back"
        lines.append(line)
    lines.append("guidance program:")
    lines.append("```gsl")
    lines.append(program.source.rstrip())
    lines.append("```")
    return "\n".join(lines) + "\n", keys


def monitor_feedback(
    episode: EpisodeLog,
    program: GslProgram,
    backend: Backend,
    k: int = 6,
    p: int = 8,
    seed: int = 0,
    buttons: Sequence[str] = (),
) -> str:
    payload, _ = monitor_payload(episode, program, k, p, seed, buttons)
    messages = [
        {"role": "system", "content": load_prompt("monitor")},
        {"role": "user", "content": payload},
    ]
    return backend.complete("monitor", messages)


@dataclass
class IterationResult:
    iteration: int
    success_rate: float | None
    successes: int
    episodes: int
    source: str | None
    feedback: str | None = None
    error: str | None = None
    conversation: ConversationState | None = field(default=None, repr=False)
    logs: list[EpisodeLog] = field(default_factory=list, repr=False)

    @property
    def failed(self) -> bool:
        return self.source is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "success_rate": self.success_rate,
            "successes": self.successes,
            "episodes": self.episodes,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class ImprovementReport:
    iterations: list[IterationResult] = field(default_factory=list)

    def rates(self) -> list[float | None]:
        return [it.success_rate for it in self.iterations]

    @property
    def best(self) -> IterationResult | None:
        scored = [it for it in self.iterations if not it.failed]
        if not scored:
            return None
        return max(scored, key=lambda it: (it.success_rate, -it.iteration))


def improve(
    task: TaskSpec,
    policy: Policy,
    ctx: GuidanceContext,
    backend: Backend,
    iterations: int = 5,
    seeds: Iterable[int] = range(10),
    env: AgentEnvironment | None = None,
    turn_budget: int = DEFAULT_TURN_BUDGET,
    keyframes: int = 6,
    pca_dims: int = 8,
) -> ImprovementReport:
    """Generate, evaluate, diagnose and regenerate guidance for up to ``iterations`` rounds."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    seeds = list(seeds)
    env = env or AgentEnvironment.for_task(task)
    report = ImprovementReport()
    feedback: list[str] = []
    for k in range(1, iterations + 1):
        try:
            program, conversation = generate_guidance_function(
                task.instruction, env.observation, backend, env, turn_budget, feedback
            )
        except (ProtocolFailure, BackendError) as exc:
            logger.warning("iteration %d produced no program: %s", k, exc)
            state = exc.state if isinstance(exc, ProtocolFailure) else None
            report.iterations.append(IterationResult(k, None, 0, 0, None, error=str(exc), conversation=state))
            continue

        run_ctx = replace(ctx, program=program)
        logs = [run_episode(task, policy, run_ctx, s) for s in seeds]
        wins = sum(log.success for log in logs)
        result = IterationResult(k, wins / len(seeds) if seeds else 0.0, wins, len(seeds), program.source,
                                 conversation=conversation, logs=logs)
        report.iterations.append(result)
        logger.info("iteration %d: %d/%d successes", k, wins, len(seeds))
        if wins == len(seeds) or k == iterations:
            break
        failed = next(log for log in logs if not log.success)
        try:
            note = monitor_feedback(failed, program, backend, keyframes, pca_dims, seed=failed.seed,
                                    buttons=task.buttons)
        except BackendError as exc:
            logger.warning("monitor unavailable: %s", exc)
            continue
        result.feedback = note
        feedback.append(note)
    return report
