import io
import json
import urllib.error

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grappa.agents import (
    AgentEnvironment,
    BackendConfig,
    BackendError,
    EmptyTrajectory,
    HttpBackend,
    ProtocolFailure,
    ScriptedBackend,
    TranscriptExhausted,
    extract_code_block,
    extract_keyframes,
    generate_guidance_function,
    improve,
    monitor_payload,
    route_message,
)
from grappa.agents.keyframes import pca_project
from grappa.agents.protocol import load_prompt, parse_object_request
from grappa.executor import GuidanceContext, run_episode
from grappa.gsl import validate_format
from grappa.policy import DynamicsModel, RandomPolicy

from conftest import load_guidance, transcript_path
from oracles import brute_force_partition, canonical, plateau_frames


# routing and code extraction

def test_route_message_examples():
    assert route_message("...found the handle NEXT: supervisor_agent").target == "advisor"
    assert route_message("TERMINATE") == ("terminate", None)
    assert route_message("all good\n\nTERMINATE\n").target == "terminate"
    assert route_message("plan\nNEXT: perception_agent").target == "grounding"
    assert route_message("code\nNEXT: robotic_agent.").target == "robotic"
    r = route_message("no directive here")
    assert r.target == "advisor" and r.warning
    r = route_message("NEXT: janitor")
    assert r.target == "advisor" and "janitor" in r.warning
    # only the final line counts, and the token must be exact
    assert route_message("TERMINATE\nNEXT: advisor").target == "advisor"
    assert route_message("NEXT: TERMINATED_agent").target == "advisor"


def test_extract_code_block():
    one = "plan\n```gsl\nfn guidance(state, prev) { return (1.0, prev); }\n```\n"
    assert extract_code_block(one) == "#gsl 1\nfn guidance(state, prev) { return (1.0, prev); }\n"
    two = "```\n#gsl 1\nfirst\n```\ntext\n```\n#gsl 1\nsecond\n```"
    assert extract_code_block(two) == "#gsl 1\nsecond\n"
    assert extract_code_block("no code") is None


def test_object_request_parsing():
    objs, syn, par = parse_object_request("OBJECTS: red button, knight\nSYNONYMS: knight = horse, chess knight\nPARENTS: knight = chessboard")
    assert objs == ["red button", "knight"]
    assert syn == {"knight": ["horse", "chess knight"]}
    assert par == {"knight": ["chessboard"]}


def test_prompts_exist_for_every_role():
    for role in ("advisor", "grounding", "robotic", "monitor"):
        assert load_prompt(role).strip()


# backends

def test_scripted_playback_and_exhaustion():
    b = ScriptedBackend({"advisor": ["plan A", "plan B"]})
    assert b.complete("advisor", []) == "plan A"
    assert b.complete("advisor", []) == "plan B"
    with pytest.raises(TranscriptExhausted):
        b.complete("advisor", [])
    with pytest.raises(TranscriptExhausted):
        b.complete("robotic", [])
    with pytest.raises(ValueError):
        ScriptedBackend({"janitor": ["x"]})


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(kind="scripted", transcript="t.json", temperature=0.7)
    with pytest.raises(ValueError):
        BackendConfig(kind="http")
    cfg = BackendConfig(kind="http", endpoint="http://localhost/v1")
    assert cfg.max_tokens == 2000 and cfg.temperature == 0


class FakeResponse(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


class FakeOpener:
    def __init__(self, statuses, body=None):
        self.statuses = list(statuses)
        self.body = body or {"choices": [{"message": {"content": "hello"}}]}
        self.requests = []

    def __call__(self, request, timeout=None):
        self.requests.append(request)
        status = self.statuses.pop(0)
        if status != 200:
            raise urllib.error.HTTPError(request.full_url, status, "err", {}, io.BytesIO(b"slow down"))
        return FakeResponse(json.dumps(self.body).encode())


def test_http_payload_and_auth(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "sekret")
    opener = FakeOpener([200])
    cfg = BackendConfig(kind="http", endpoint="http://llm.local/v1/chat", model="m1", api_key_env="TEST_KEY")
    out = HttpBackend(cfg, opener=opener, sleep=lambda s: None).complete("advisor", [{"role": "system", "content": "hi"}])
    assert out == "hello"
    req = opener.requests[0]
    assert req.get_header("Authorization") == "Bearer sekret"
    assert json.loads(req.data) == {
        "model": "m1", "messages": [{"role": "system", "content": "hi"}], "temperature": 0, "max_tokens": 2000,
    }


def test_http_retries_with_backoff():
    sleeps = []
    cfg = BackendConfig(kind="http", endpoint="http://llm.local", retries=3)
    opener = FakeOpener([429, 429, 429, 429])
    with pytest.raises(BackendError) as info:
        HttpBackend(cfg, opener=opener, sleep=sleeps.append).complete("advisor", [])
    assert info.value.status == 429 and "slow down" in info.value.excerpt
    assert sleeps == [1.0, 2.0, 4.0] and len(opener.requests) == 4
    ok = FakeOpener([503, 200])
    assert HttpBackend(cfg, opener=ok, sleep=lambda s: None).complete("advisor", []) == "hello"


def test_http_client_errors_are_not_retried():
    opener = FakeOpener([401, 200])
    cfg = BackendConfig(kind="http", endpoint="http://llm.local")
    with pytest.raises(BackendError) as info:
        HttpBackend(cfg, opener=opener, sleep=lambda s: None).complete("advisor", [])
    assert info.value.status == 401 and len(opener.requests) == 1


def test_http_malformed_response():
    opener = FakeOpener([200], body={"unexpected": True})
    cfg = BackendConfig(kind="http", endpoint="http://llm.local")
    with pytest.raises(BackendError):
        HttpBackend(cfg, opener=opener).complete("advisor", [])


# keyframes

def test_keyframes_singleton_and_empty():
    assert extract_keyframes([[1.0, 2.0]], k=6).indices == (0,)
    with pytest.raises(EmptyTrajectory):
        extract_keyframes([])


def test_keyframes_plateau_frames():
    rng = np.random.default_rng(0)
    frames, labels = plateau_frames(rng, [10, 10, 10])
    keys = extract_keyframes(frames, k=3, seed=0)
    assert sorted(labels[list(keys.indices)]) == [0, 1, 2]


def test_full_rank_projection_preserves_distances():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(15, 2))
    z = pca_project(x, 2)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dz = np.linalg.norm(z[:, None] - z[None], axis=-1)
    np.testing.assert_allclose(dz, dx, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 25), st.integers(1, 8), st.integers(0, 1000))
def test_keyframe_invariants(t, k, seed):
    frames = np.random.default_rng(seed).normal(size=(t, 4))
    keys = extract_keyframes(frames, k=k, seed=seed)
    idx = list(keys.indices)
    assert idx == sorted(set(idx))
    assert all(0 <= i < t for i in idx)
    assert len(idx) == min(k, t)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_keyframes_stable_under_feature_permutation(seed, perm):
    frames, _ = plateau_frames(np.random.default_rng(seed), [6, 7, 8], dim=5, noise=0.05)
    a = extract_keyframes(frames, k=3, seed=seed)
    b = extract_keyframes(frames[:, list(perm)], k=3, seed=seed)
    assert a.indices == b.indices


@pytest.mark.parametrize("seed", range(4))
def test_keyframes_match_brute_force_on_small_instances(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 4, size=3).tolist()
    frames, _ = plateau_frames(rng, sizes, dim=3, noise=0.2)
    keys = extract_keyframes(frames, k=3, p=8, seed=seed)
    assert canonical(keys.labels) == canonical(brute_force_partition(frames, 3))


# conversation protocol

def session(buttons_task, name, budget=20):
    backend = ScriptedBackend.from_file(transcript_path(name))
    env = AgentEnvironment.for_task(buttons_task)
    program, state = generate_guidance_function(buttons_task.instruction, env.observation, backend, env, budget)
    return backend, program, state


def test_golden_session(buttons_task):
    backend, program, state = session(buttons_task, "golden.json")
    assert state.terminated and state.turns <= 20
    assert state.routing() == backend.meta["routing"]
    assert validate_format(program).ok
    # order logic: pressing green first earns no flag, pressing red does
    from grappa.core import RobotState
    from grappa.gsl import evaluate
    from grappa.sim import reset

    _, obs = reset(buttons_task, 0)
    tops = {o.name: o.top for o in obs.objects}

    class Scene:
        def get_position(self, name):
            return obs.get(name.replace(" ", "_")).pose

        def get_size(self, name):
            return obs.get(name.replace(" ", "_")).size

        def get_orientation(self, name):
            return obs.get(name.replace(" ", "_")).orientation

    def flags_at(name, hidden=None):
        x, y, z = tops[name]
        _, h = evaluate(program, RobotState((x, y, z + 0.005)), hidden, perception=Scene())
        return {k for k, v in h.items() if v is True}

    assert flags_at("green button") == set()
    red = flags_at("red button")
    assert len(red) == 1


def test_corrupted_code_session(buttons_task):
    backend, program, state = session(buttons_task, "corrupted_code.json")
    assert state.routing() == backend.meta["routing"]
    assert state.critique_loops() == 1
    assert len(state.code) == 2
    assert state.reports[0].codes() == ["WrongReturnShape"] and state.reports[1].ok


def test_missing_object_session(buttons_task):
    backend, program, state = session(buttons_task, "missing_object.json")
    assert state.routing() == backend.meta["routing"]
    first = [t for t in state.search_traces if not t.found]
    assert [t.target for t in first] == ["yellow button"]
    assert "yellow button" not in program.object_names()


def test_scripted_sessions_are_deterministic(buttons_task):
    _, p1, s1 = session(buttons_task, "golden.json")
    _, p2, s2 = session(buttons_task, "golden.json")
    assert p1.source == p2.source and s1.transcript() == s2.transcript()


def test_turn_budget_is_enforced(buttons_task):
    chatter = ScriptedBackend({"advisor": ["thinking\nNEXT: supervisor_agent"] * 30})
    env = AgentEnvironment.for_task(buttons_task)
    with pytest.raises(ProtocolFailure) as info:
        generate_guidance_function("task", None, chatter, env, budget=5)
    assert info.value.state.turns == 5


def test_terminate_on_invalid_code_is_overridden(buttons_task):
    bad = "```gsl\nfn guidance(state, prev) { return 1.0; }\n```\nNEXT: robotic_agent"
    good = "```gsl\nfn guidance(state, prev) { return (1.0, prev); }\n```\nNEXT: robotic_agent"
    backend = ScriptedBackend({"advisor": [bad, good], "robotic": ["looks fine\nTERMINATE", "ok\nTERMINATE"]})
    env = AgentEnvironment.for_task(buttons_task)
    program, state = generate_guidance_function("task", None, backend, env)
    assert state.routing() == ["robotic", "advisor", "robotic", "terminate"]
    assert state.warnings and program.source.endswith("return (1.0, prev); }\n")


def test_monitor_payload(buttons_task):
    prog = load_guidance("buttons_nearest.gsl")
    ctx = GuidanceContext(prog, alpha=1.0, n=64, dyn=DynamicsModel.for_task(buttons_task))
    log = run_episode(buttons_task, RandomPolicy(buttons_task.workspace), ctx, seed=0)
    text, keys = monitor_payload(log, prog, buttons=buttons_task.buttons)
    again, _ = monitor_payload(log, prog, buttons=buttons_task.buttons)
    assert text == again
    assert sum(line.startswith("frame ") for line in text.splitlines()) == len(keys)
    assert prog.source.strip() in text


def improve_setup(task, name):
    backend = ScriptedBackend.from_file(transcript_path(name))
    ctx = GuidanceContext(None, alpha=1.0, n=256, dyn=DynamicsModel.for_task(task))
    return backend, ctx, RandomPolicy(task.workspace)


def test_improve_early_stop(buttons_task):
    backend, ctx, pol = improve_setup(buttons_task, "golden.json")
    report = improve(buttons_task, pol, ctx, backend, iterations=3, seeds=range(3))
    assert len(report.iterations) == 1 and report.rates() == [1.0]


def test_improve_all_failures(buttons_task):
    backend = ScriptedBackend({"advisor": ["no code\nNEXT: supervisor_agent"] * 10})
    ctx = GuidanceContext(None, alpha=1.0, n=8)
    report = improve(buttons_task, RandomPolicy(buttons_task.workspace), ctx, backend,
                     iterations=2, seeds=range(2), turn_budget=3)
    assert len(report.iterations) == 2 and all(it.failed for it in report.iterations)
    assert report.best is None


def test_improve_sources_validate(buttons_task):
    backend, ctx, pol = improve_setup(buttons_task, "improve_two_rounds.json")
    report = improve(buttons_task, pol, ctx, backend, iterations=2, seeds=range(6))
    from grappa.gsl import parse
    assert all(validate_format(parse(it.source)).ok for it in report.iterations if not it.failed)
    assert report.iterations[0].feedback
