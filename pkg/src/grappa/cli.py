"""Command-line harness: run, improve, validate, heatmap, report.

Exit codes: 0 ok, 1 validation failure, 2 configuration error, 3 backend or
protocol error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from grappa.agents import (
    AgentEnvironment,
    BackendConfig,
    BackendError,
    ProtocolFailure,
    generate_guidance_function,
    improve,
    make_backend,
)
from grappa.core import EpisodeLog
from grappa.executor import GridSpec, GuidanceContext, emit_heatmap, episode_perception, run_episode
from grappa.grounding import DetectorConfig, FixtureError
from grappa.gsl import EvalBudget, GslError, GslProgram, parse, validate_format
from grappa.policy import DynamicsModel, make_policy
from grappa.sim import TaskSpec, load_task, reset

logger = logging.getLogger("grappa")

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3
DATA_DIRS = {"task": "fixtures", "guidance": "guidance", "transcript": "transcripts"}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def parse_seeds(spec: Any) -> list[int]:
    """``"0..49"`` (inclusive), ``"1,2,5"``, a single int, or a list of ints."""
    try:
        if isinstance(spec, int):
            seeds = [spec]
        elif isinstance(spec, (list, tuple)):
            seeds = [int(s) for s in spec]
        else:
            text = str(spec).strip()
            if ".." in text:
                lo, hi = text.split("..", 1)
                seeds = list(range(int(lo), int(hi) + 1))
            else:
                seeds = [int(s) for s in text.split(",") if s.strip()]
    except (TypeError, ValueError):
        raise ConfigError("seeds", f"cannot parse {spec!r}") from None
    if not seeds:
        raise ConfigError("seeds", "must name at least one seed")
    return seeds


def resolve_path(value: str, kind: str, base: Path | None = None) -> Path:
    """Find a file as given, next to the config, or among the packaged data."""
    p = Path(value).expanduser()
    candidates = [p]
    if base is not None and not p.is_absolute():
        candidates.append(base / p)
    for c in candidates:
        if c.is_file():
            return c
    packaged = resources.files("grappa").joinpath("data", DATA_DIRS[kind], p.name)
    if packaged.is_file():
        return Path(str(packaged))
    raise ConfigError(kind, f"file not found: {value}")


@dataclass
class RunConfig:
    task: Path
    policy: dict[str, Any] = field(default_factory=lambda: {"kind": "random"})
    guidance: str = "none"  # path to a .gsl file, "agents", or "none"
    alpha: float = 1.0
    n: int = 64
    seeds: list[int] = field(default_factory=lambda: [0])
    out: Path = Path("runs/out")
    backend: dict[str, Any] = field(default_factory=dict)
    detector: dict[str, Any] = field(default_factory=dict)
    fallback: str = "base_only"
    iterations: int = 5
    turn_budget: int = 20
    base: Path | None = None

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.n < 1:
            raise ConfigError("n", f"must be >= 1, got {self.n}")
        if not self.seeds:
            raise ConfigError("seeds", "must name at least one seed")
        if self.iterations < 1:
            raise ConfigError("iterations", f"must be >= 1, got {self.iterations}")
        if self.fallback not in ("base_only", "uniform_guidance"):
            raise ConfigError("fallback", f"unknown mode {self.fallback!r}")


def load_config(args: argparse.Namespace) -> RunConfig:
    data: dict[str, Any] = {}
    base = None
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"invalid TOML: {exc}") from None
        base = path.parent

    def pick(name: str, default=None):
        flag = getattr(args, name, None)
        return flag if flag is not None else data.get(name, default)

    task = pick("task")
    if task is None:
        raise ConfigError("task", "a task fixture is required")
    policy = dict(data.get("policy", {}))
    if getattr(args, "policy", None):
        policy["kind"] = args.policy
    policy.setdefault("kind", "random")
    guidance_block = data.get("guidance", {})
    guidance = getattr(args, "guidance", None)
    if guidance is None:
        if isinstance(guidance_block, dict):
            guidance = guidance_block.get("path") or guidance_block.get("source", "none")
        else:
            guidance = str(guidance_block)
    backend = dict(data.get("backend", {}))
    if getattr(args, "transcript", None):
        backend["kind"] = "scripted"
        backend["transcript"] = args.transcript
    try:
        cfg = RunConfig(
            task=resolve_path(str(task), "task", base),
            policy=policy,
            guidance=str(guidance),
            alpha=float(pick("alpha", 1.0)),
            n=int(pick("n", 64)),
            seeds=parse_seeds(pick("seeds", "0")),
            out=Path(pick("out", "runs/out")),
            backend=backend,
            detector=dict(data.get("detector", {})),
            fallback=str(pick("fallback", "base_only")),
            iterations=int(pick("iterations", data.get("improve", {}).get("iterations", 5))),
            turn_budget=int(data.get("improve", {}).get("turn_budget", 20)),
            base=base,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("config", str(exc)) from None
    cfg.validate()
    return cfg


def backend_config(cfg: RunConfig) -> BackendConfig:
    block = dict(cfg.backend)
    kind = block.get("kind", "scripted")
    try:
        if kind == "scripted":
            transcript = block.get("transcript")
            if not transcript:
                raise ConfigError("backend.transcript", "scripted backend needs a transcript")
            return BackendConfig(kind="scripted", transcript=str(resolve_path(transcript, "transcript", cfg.base)))
        return BackendConfig(
            kind="http",
            endpoint=block.get("endpoint") or os.environ.get("GRAPPA_LLM_URL"),
            model=str(block.get("model", "")),
            api_key_env=block.get("api_key_env") or os.environ.get("GRAPPA_LLM_KEY_VAR", "GRAPPA_API_KEY"),
            max_tokens=int(block.get("max_tokens", 2000)),
            timeout=float(block.get("timeout", 60.0)),
            retries=int(block.get("retries", 3)),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("backend", str(exc)) from None


def detector_config(cfg: RunConfig) -> tuple[DetectorConfig, float]:
    block = dict(cfg.detector)
    dropout = float(block.pop("dropout_rate", 0.0))
    try:
        return DetectorConfig(**block), dropout
    except (TypeError, ValueError) as exc:
        raise ConfigError("detector", str(exc)) from None


def build_context(cfg: RunConfig, task: TaskSpec, program: GslProgram | None) -> GuidanceContext:
    detector, dropout = detector_config(cfg)
    try:
        return GuidanceContext(
            program,
            alpha=cfg.alpha,
            n=cfg.n,
            dyn=DynamicsModel.for_task(task),
            budget=EvalBudget(),
            fallback=cfg.fallback,
            detector=detector,
            dropout_rate=dropout,
        )
    except ValueError as exc:
        raise ConfigError("guidance", str(exc)) from None


class Outputs:
    """Atomic file writer that records every artifact for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[str] = []

    def write(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
        if rel not in self.written:
            self.written.append(rel)
        return path

    def manifest(self) -> Path:
        return self.write("manifest.txt", "".join(f"{rel}\n" for rel in sorted(self.written)))


def _csv(rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _load_program(path: str, base: Path | None) -> GslProgram:
    source = resolve_path(path, "guidance", base).read_text(encoding="utf-8")
    try:
        return parse(source)
    except GslError as exc:
        raise ConfigError("guidance", f"{path}: {exc}") from None


SUMMARY_HEADER = ["task", "policy", "alpha", "n", "episodes", "successes", "success_rate",
                  "timeout", "perception", "behavior"]


def summary_row(task: TaskSpec, cfg: RunConfig, logs: Sequence[EpisodeLog]) -> list[Any]:
    wins = sum(log.success for log in logs)
    counts = {c: sum(1 for log in logs if log.failure_class == c) for c in ("timeout", "perception", "behavior")}
    return [task.id, cfg.policy["kind"], cfg.alpha, cfg.n, len(logs), wins,
            f"{100.0 * wins / len(logs):.1f}", counts["timeout"], counts["perception"], counts["behavior"]]


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    task = load_task(cfg.task)
    out = Outputs(cfg.out)
    program = None
    if cfg.guidance == "agents":
        backend = make_backend(backend_config(cfg))
        env = AgentEnvironment.for_task(task)
        program, state = generate_guidance_function(task.instruction, env.observation, backend, env, cfg.turn_budget)
        out.write("guidance_iter1.gsl", program.source)
        out.write("conversation_iter1.txt", state.transcript())
    elif cfg.guidance not in ("none", ""):
        program = _load_program(cfg.guidance, cfg.base)
    policy = make_policy(cfg.policy, task)
    ctx = build_context(cfg, task, program)
    logs = []
    for seed in cfg.seeds:
        log = run_episode(task, policy, ctx, seed)
        logs.append(log)
        out.write(f"episodes/{task.id}_seed{seed}.jsonl", log.to_jsonl())
    row = summary_row(task, cfg, logs)
    out.write("metrics.csv", _csv([SUMMARY_HEADER, row]))
    out.manifest()
    print(f"{task.id}: {row[5]}/{row[4]} successes ({row[6]}%) with {cfg.policy['kind']} policy, alpha={cfg.alpha}")
    return EXIT_OK


def cmd_improve(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    task = load_task(cfg.task)
    backend = make_backend(backend_config(cfg))
    policy = make_policy(cfg.policy, task)
    ctx = build_context(cfg, task, None)
    report = improve(task, policy, ctx, backend, cfg.iterations, cfg.seeds, turn_budget=cfg.turn_budget)
    out = Outputs(cfg.out)
    rows = [["iteration", "success_rate", "successes", "episodes", "failed"]]
    for it in report.iterations:
        rate = "" if it.success_rate is None else f"{100.0 * it.success_rate:.1f}"
        rows.append([it.iteration, rate, it.successes, it.episodes, int(it.failed)])
        if it.source is not None:
            out.write(f"guidance_iter{it.iteration}.gsl", it.source)
        if it.conversation is not None:
            out.write(f"conversation_iter{it.iteration}.txt", it.conversation.transcript())
        if it.feedback:
            out.write(f"feedback_iter{it.iteration}.txt", it.feedback)
        for log in it.logs:
            out.write(f"episodes/iter{it.iteration}_{task.id}_seed{log.seed}.jsonl", log.to_jsonl())
    out.write("metrics.csv", _csv(rows))
    out.manifest()
    for row in rows[1:]:
        status = "no program" if row[4] else f"{row[1]}% ({row[2]}/{row[3]})"
        print(f"iteration {row[0]}: {status}")
    if all(it.failed for it in report.iterations):
        print("error: no iteration produced a validated program", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if not path.is_file():
        print(f"config error: path: file not found: {path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        program = parse(path.read_text(encoding="utf-8"))
    except GslError as exc:
        print("ok: false")
        print(f"issues: 1\n  - {type(exc).__name__}: {exc}")
        return EXIT_INVALID
    known = None
    probes = None
    if args.task:
        task = load_task(resolve_path(args.task, "task"))
        known = sorted({n for obj in task.objects for n in obj.names()})
        probes = task.workspace.corners()
    report = validate_format(program, probes, known_objects=known)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.to_text())
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_heatmap(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    task = load_task(cfg.task)
    program = None if cfg.guidance in ("none", "") else _load_program(cfg.guidance, cfg.base)
    policy = make_policy(cfg.policy, task).episode(args.seed)
    state, obs = reset(task, args.seed)
    ctx = build_context(cfg, task, program)
    _, perception = episode_perception(task, ctx, obs, args.seed)
    ctx = replace(ctx, perception=perception)
    ws = task.workspace
    grid = GridSpec(
        x=tuple(args.x) if args.x else ws.x,
        y=tuple(args.y) if args.y else ws.y,
        nx=args.nx,
        ny=args.ny,
        z=args.z if args.z is not None else float(ws.z[0] + ws.z[1]) / 2.0,
    )
    hidden = program.default_hidden if program is not None else {}
    heat = emit_heatmap(ctx, policy, obs, state.ee, hidden, grid, seed=args.seed)
    text = heat.to_csv()
    if args.output:
        out = Outputs(Path(args.output).parent)
        out.write(Path(args.output).name, text)
    else:
        sys.stdout.write(text)
    x, y = heat.argmax_xy
    print(f"argmax cell: row {heat.argmax[0]}, col {heat.argmax[1]}, x={x:.4f}, y={y:.4f}")
    return EXIT_OK


def collect_logs(run_dir: Path) -> list[EpisodeLog]:
    return [EpisodeLog.from_jsonl(p.read_text(encoding="utf-8")) for p in sorted(run_dir.glob("episodes/*.jsonl"))]


def metrics_table(logs: Sequence[EpisodeLog]) -> tuple[list[str], list[tuple[str, float]], dict]:
    """Success rates (percent) keyed by ((policy, alpha), task)."""
    tasks = sorted({log.task_id for log in logs})
    rows = sorted({(log.policy, float(log.alpha)) for log in logs})
    cells: dict[tuple[tuple[str, float], str], float] = {}
    for row in rows:
        for task in tasks:
            sel = [log for log in logs if (log.policy, float(log.alpha)) == row and log.task_id == task]
            if sel:
                cells[(row, task)] = 100.0 * sum(log.success for log in sel) / len(sel)
    return tasks, rows, cells


def render_table(tasks, rows, cells) -> tuple[str, str]:
    header = ["policy", "alpha", *tasks, "avg"]
    csv_rows = [header]
    text_rows = [header]
    for row in rows:
        baseline = (row[0], 0.0)
        vals = [cells.get((row, t)) for t in tasks]
        present = [v for v in vals if v is not None]
        avg = sum(present) / len(present) if present else None
        base_vals = [cells.get((baseline, t)) for t in tasks]
        base_present = [v for v in base_vals if v is not None]
        base_avg = sum(base_present) / len(base_present) if base_present else None
        csv_line = [row[0], f"{row[1]:g}"]
        text_line = [row[0], f"{row[1]:g}"]
        for v, b in [*zip(vals, base_vals), (avg, base_avg)]:
            if v is None:
                csv_line.append("")
                text_line.append("-")
                continue
            csv_line.append(f"{v:.1f}")
            cell = f"{v:.1f}"
            if row[1] != 0.0 and b is not None:
                cell += f" ({v - b:+.1f})"
            text_line.append(cell)
        csv_rows.append(csv_line)
        text_rows.append(text_line)
    widths = [max(len(r[i]) for r in text_rows) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in text_rows)
    return _csv(csv_rows), text + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    logs: list[EpisodeLog] = []
    for d in args.run_dirs:
        found = collect_logs(Path(d))
        if not found:
            print(f"config error: run_dirs: no episode logs under {d}", file=sys.stderr)
            return EXIT_CONFIG
        logs.extend(found)
    csv_text, text = render_table(*metrics_table(logs))
    if args.csv:
        out = Outputs(Path(args.csv).parent)
        out.write(Path(args.csv).name, csv_text)
    sys.stdout.write(text)
    return EXIT_OK


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment file; flags override its values")
    p.add_argument("--task", help="task fixture (JSON)")
    p.add_argument("--policy", choices=["random", "gaussian", "waypoint"])
    p.add_argument("--alpha", type=float, help="guidance factor in [0, 1]")
    p.add_argument("--n", type=int, help="candidates sampled per step")
    p.add_argument("--guidance", help="guidance .gsl file, 'agents', or 'none'")
    p.add_argument("--seeds", help="e.g. 0..49 or 1,2,3")
    p.add_argument("--out", help="output directory")
    p.add_argument("--transcript", help="scripted agent transcript (JSON)")
    p.add_argument("--fallback", choices=["base_only", "uniform_guidance"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grappa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run guided episodes over a seed batch")
    _run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("improve", help="generate, evaluate and refine guidance with the agents")
    _run_args(p)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_improve)

    p = sub.add_parser("validate", help="format-check a guidance file")
    p.add_argument("path")
    p.add_argument("--task", help="fixture whose objects count as known")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("heatmap", help="blended score over a grid of waypoints, as CSV")
    _run_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nx", type=int, default=21)
    p.add_argument("--ny", type=int, default=21)
    p.add_argument("--z", type=float)
    p.add_argument("--x", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--y", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("report", help="success table across run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FixtureError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolFailure, BackendError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
