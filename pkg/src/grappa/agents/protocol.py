"""Conversation engine for the advisor / grounding / robotic agents.

Every agent reply ends with a routing directive on its final line, either
``NEXT: <agent>`` or ``TERMINATE``. Tools run on the engine side: before the
grounding agent speaks, the objects the advisor listed are searched for; before
the robotic agent speaks, the advisor's latest code is parsed and validated.
Tool output is appended to the conversation as ``tool`` messages.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, NamedTuple, Sequence

from grappa.agents.backends import Backend
from grappa.core import Observation
from grappa.grounding import DetectorConfig, Grounder, SearchTrace, TrackRegistry, UnknownParent
from grappa.gsl import GslError, GslProgram, ValidationReport, parse, validate_format
from grappa.sim import TaskSpec, reset

logger = logging.getLogger(__name__)

AGENTS = ("advisor", "grounding", "robotic")
ALIASES = {
    "supervisor_agent": "advisor",
    "supervisor": "advisor",
    "advisor": "advisor",
    "advisor_agent": "advisor",
    "perception_agent": "grounding",
    "grounding_agent": "grounding",
    "grounding": "grounding",
    "robotic_agent": "robotic",
    "robotic": "robotic",
}
TERMINATE = "terminate"
DEFAULT_TURN_BUDGET = 20
HEADER = "#gsl 1"

_NEXT = re.compile(r"NEXT:\s*([A-Za-z_][A-Za-z_ ]*?)\s*[.!]?\s*$")
_TERMINATE = re.compile(r"(?<![A-Za-z_])TERMINATE(?![A-Za-z_])")
_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_IN_IMAGE = re.compile(r"""in_the_image\(\s*["']([^"']+)["']\s*(?:,\s*["']([^"']+)["']\s*)?\)""")


class ProtocolFailure(RuntimeError):
    def __init__(self, message: str, state: ConversationState | None = None):
        super().__init__(message)
        self.state = state


class Route(NamedTuple):
    target: str
    warning: str | None = None


def route_message(text: str) -> Route:
    """Routing target named on the message's final non-empty line."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    last = lines[-1].strip() if lines else ""
    if _TERMINATE.search(last):
        return Route(TERMINATE)
    m = _NEXT.search(last)
    if m is None:
        return Route("advisor", "message has no routing directive; sent to advisor")
    name = m.group(1).strip().lower().replace(" ", "_")
    if name not in ALIASES:
        return Route("advisor", f"unknown routing target {m.group(1)!r}; sent to advisor")
    return Route(ALIASES[name])


def extract_code_block(text: str) -> str | None:
    """Body of the last fenced block, with the version header ensured."""
    blocks = _FENCE.findall(text)
    if not blocks:
        return None
    code = blocks[-1]
    first = code.lstrip().split("\n", 1)[0].strip()
    if first != HEADER:
        code = f"{HEADER}\n{code}"
    return code


def load_prompt(role: str) -> str:
    return resources.files("grappa.agents").joinpath("prompts", f"{role}.txt").read_text(encoding="utf-8")


@dataclass
class Message:
    role: str  # advisor, grounding, robotic, monitor, user, tool
    content: str
    target: str | None = None


@dataclass
class ConversationState:
    budget: int = DEFAULT_TURN_BUDGET
    messages: list[Message] = field(default_factory=list)
    turns: int = 0
    terminated: bool = False
    code: list[str] = field(default_factory=list)
    search_traces: list[SearchTrace] = field(default_factory=list)
    reports: list[ValidationReport] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    feedback: list[str] = field(default_factory=list)

    def add(self, role: str, content: str, target: str | None = None) -> Message:
        msg = Message(role, content, target)
        self.messages.append(msg)
        return msg

    def agent_messages(self) -> list[Message]:
        return [m for m in self.messages if m.role in AGENTS]

    def routing(self) -> list[str]:
        return [m.target for m in self.agent_messages()]

    def speakers(self) -> list[str]:
        return [m.role for m in self.agent_messages()]

    def critique_loops(self) -> int:
        return sum(1 for m in self.agent_messages() if m.role == "robotic" and m.target == "advisor")

    def last_from(self, role: str) -> Message | None:
        for m in reversed(self.messages):
            if m.role == role:
                return m
        return None

    def transcript(self) -> str:
        parts = []
        for m in self.messages:
            arrow = f" -> {m.target}" if m.target else ""
            parts.append(f"[{m.role}{arrow}]\n{m.content.rstrip()}\n")
        return "\n".join(parts)


@dataclass
class AgentEnvironment:
    """What the engine-side tools can see: the scene grounder and validation probes."""

    grounder: Grounder
    task: TaskSpec | None = None
    probes: list = field(default_factory=list)
    depth_budget: int = 3

    @classmethod
    def for_task(cls, task: TaskSpec, seed: int = 0, detector: DetectorConfig | None = None) -> AgentEnvironment:
        _, obs = reset(task, seed)
        grounder = Grounder(obs, detector or DetectorConfig(seed=seed), TrackRegistry(), task.thesaurus)
        return cls(grounder, task, task.workspace.corners())

    @property
    def observation(self) -> Observation:
        return self.grounder.snapshot

    def scene_names(self) -> list[str]:
        return sorted({name for obj in self.observation.objects for name in obj.names()})


def parse_object_request(text: str) -> tuple[list[str], dict[str, list[str]], dict[str, list[str]]]:
    """OBJECTS / SYNONYMS / PARENTS lines from an advisor message.

    ``OBJECTS: a, b`` lists targets; ``SYNONYMS: a = x, y`` and
    ``PARENTS: a = p`` give search hints for one target each.
    """
    objects: list[str] = []
    synonyms: dict[str, list[str]] = {}
    parents: dict[str, list[str]] = {}
    for line in text.splitlines():
        head, _, rest = line.strip().partition(":")
        key = head.strip().upper()
        if key == "OBJECTS":
            objects = [n.strip() for n in rest.split(",") if n.strip()]
        elif key in ("SYNONYMS", "PARENTS") and "=" in rest:
            name, _, values = rest.partition("=")
            target = synonyms if key == "SYNONYMS" else parents
            target[name.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    return objects, synonyms, parents


def _grounding_tool(state: ConversationState, env: AgentEnvironment) -> str:
    request = state.last_from("advisor")
    objects, synonyms, parents = parse_object_request(request.content if request else "")
    if not objects:
        return "search results: no OBJECTS line in the advisor's message; nothing searched"
    lines = ["search results:"]
    for name in objects:
        trace = env.grounder.search(
            name,
            synonyms=synonyms.get(name),
            parent_candidates=parents.get(name),
            depth_budget=env.depth_budget,
        )
        state.search_traces.append(trace)
        status = "found" if trace.found else "not_found"
        lines.append(f"- {name}: {status}")
        lines.extend(f"  {ln}" for ln in trace.describe().splitlines())
    return "\n".join(lines)


def _in_image_calls(reply: str, env: AgentEnvironment) -> str | None:
    calls = _IN_IMAGE.findall(reply)
    if not calls:
        return None
    lines = []
    for name, parent in calls:
        parent = parent or None
        try:
            ok = env.grounder.in_the_image(name, parent)
            verdict = "yes" if ok else "no"
        except UnknownParent as exc:
            verdict = f"error: {exc}"
        args = f"{name!r}" if parent is None else f"{name!r}, {parent!r}"
        lines.append(f"in_the_image({args}) -> {verdict}")
    return "\n".join(lines)


def _known_objects(state: ConversationState, env: AgentEnvironment) -> list[str]:
    found = []
    for trace in state.search_traces:
        if trace.found:
            found.extend([trace.target, *trace.path])
    return found or env.scene_names()


def _robotic_tool(state: ConversationState, env: AgentEnvironment) -> tuple[str, GslProgram | None]:
    request = state.last_from("advisor")
    code = extract_code_block(request.content) if request else None
    if code is None:
        return "format check: no fenced code block in the advisor's latest message", None
    state.code.append(code)
    try:
        program = parse(code)
    except GslError as exc:
        return f"format check: code does not parse: {exc}", None
    report = validate_format(program, env.probes or None, known_objects=_known_objects(state, env))
    state.reports.append(report)
    return "format check:\n" + report.to_text(), program if report.ok else None


def render_messages(role: str, state: ConversationState, system_prompt: str) -> list[dict[str, str]]:
    """Chat view for one agent: its own turns as assistant, everything else as user."""
    out = [{"role": "system", "content": system_prompt}]
    for m in state.messages:
        if m.role == role:
            out.append({"role": "assistant", "content": m.content})
        else:
            out.append({"role": "user", "content": f"[{m.role}]\n{m.content}"})
    return out


def task_message(task_text: str, env: AgentEnvironment) -> str:
    ws = env.task.workspace if env.task is not None else None
    lines = [f"task: {task_text}"]
    if ws is not None:
        lines.append(
            f"workspace: x {list(ws.x)}, y {list(ws.y)}, z {list(ws.z)} metres; "
            f"at most {ws.max_step} m of travel per step; {ws.timeout} steps"
        )
    return "\n".join(lines)


def generate_guidance_function(
    task_text: str,
    obs: Observation | None,
    backend: Backend,
    env: AgentEnvironment,
    budget: int = DEFAULT_TURN_BUDGET,
    feedback: Iterable[str] = (),
) -> tuple[GslProgram, ConversationState]:
    """Run one advisor-led conversation and return the last validated program."""
    if budget < 1:
        raise ValueError("turn budget must be >= 1")
    if obs is not None:
        env.grounder.update(obs)
    prompts = {role: load_prompt(role) for role in AGENTS}
    state = ConversationState(budget=budget)
    state.add("user", task_message(task_text, env), "advisor")
    for note in feedback:
        state.feedback.append(note)
        state.add("user", f"monitor feedback:\n{note}", "advisor")

    best: GslProgram | None = None
    current = "advisor"
    while state.turns < budget:
        program = None
        validated = False
        if current == "grounding":
            state.add("tool", _grounding_tool(state, env))
        elif current == "robotic":
            report_text, program = _robotic_tool(state, env)
            state.add("tool", report_text)
            validated = program is not None
            if validated:
                best = program

        reply = backend.complete(current, render_messages(current, state, prompts[current]))
        state.turns += 1
        route = route_message(reply)
        target, warning = route.target, route.warning
        if target == TERMINATE and current == "robotic" and not validated:
            target, warning = "advisor", "robotic agent terminated on code that failed the format check"
        elif target == TERMINATE and current != "robotic":
            target, warning = "robotic", f"{current} may not terminate; sent to robotic agent"
        if warning:
            logger.info("protocol warning: %s", warning)
            state.warnings.append(warning)
        state.add(current, reply, target)
        if current == "grounding":
            extra = _in_image_calls(reply, env)
            if extra:
                state.add("tool", extra)
        if target == TERMINATE:
            state.terminated = True
            break
        current = target

    if best is None:
        raise ProtocolFailure(f"no validated program within {budget} turns", state)
    return best, state
