import csv
import json

import pytest

from grappa import cli
from grappa.core import EpisodeLog

from conftest import fixture_path, guidance_path, transcript_path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_args(out, *extra):
    return ["run", "--task", "fixtures/buttons3.json", "--policy", "random", "--alpha", "1.0",
            "--guidance", "buttons_ordered.gsl", "--seeds", "0..3", "--n", "64", "--out", out, *extra]


def test_parse_seeds():
    assert cli.parse_seeds("0..3") == [0, 1, 2, 3]
    assert cli.parse_seeds("4,7") == [4, 7]
    assert cli.parse_seeds([1, 2]) == [1, 2]
    with pytest.raises(cli.ConfigError):
        cli.parse_seeds("a..b")


def test_run_writes_logs_summary_and_manifest(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(run_args(out), capsys)
    assert code == 0 and "buttons3" in stdout
    logs = sorted((out / "episodes").glob("*.jsonl"))
    assert len(logs) == 4
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0][:3] == ["task", "policy", "alpha"] and rows[1][4] == "4"
    manifest = (out / "manifest.txt").read_text().split()
    written = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt")
    assert manifest == written


def test_run_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(run_args(tmp_path / name), capsys)[0] == 0
    for log in (tmp_path / "a" / "episodes").iterdir():
        assert log.read_bytes() == (tmp_path / "b" / "episodes" / log.name).read_bytes()


def test_alpha_out_of_range(tmp_path, capsys):
    args = run_args(tmp_path / "x")
    args[args.index("--alpha") + 1] = "1.5"
    code, _, err = run(args, capsys)
    assert code == 2 and "alpha" in err


def test_missing_task_is_config_error(tmp_path, capsys):
    code, _, err = run(["run", "--task", "nowhere.json", "--out", tmp_path], capsys)
    assert code == 2 and "task" in err


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(
        '# annotated experiment\n'
        f'task = "{fixture_path("reach_sweep.json")}"\n'
        'alpha = 0.5\nn = 32\nseeds = "0..1"\n'
        f'out = "{tmp_path / "from_config"}"\n'
        '[policy]\nkind = "gaussian"\nbias_max = 0.05\n'
        '[guidance]\npath = "reach_peaked.gsl"\n'
        '[detector]\nmin_apparent_size = 0.02\n'
    )
    assert run(["run", "--config", cfg], capsys)[0] == 0
    rows = list(csv.reader((tmp_path / "from_config" / "metrics.csv").open()))
    assert rows[1][1:4] == ["gaussian", "0.5", "32"]
    assert run(["run", "--config", cfg, "--alpha", "0", "--out", tmp_path / "override"], capsys)[0] == 0
    rows = list(csv.reader((tmp_path / "override" / "metrics.csv").open()))
    assert rows[1][2] == "0.0"
    bad = tmp_path / "bad.toml"
    bad.write_text("alpha = [")
    assert run(["run", "--config", bad], capsys)[0] == 2


def test_agents_mode_persists_program(tmp_path, capsys):
    out = tmp_path / "agents"
    code, _, _ = run(["run", "--task", "buttons3.json", "--guidance", "agents", "--transcript",
                      transcript_path("golden.json"), "--seeds", "0", "--n", "32", "--out", out], capsys)
    assert code == 0
    assert (out / "guidance_iter1.gsl").read_text().startswith("#gsl 1")


def test_agents_backend_failure_exit_code(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"replies": {}}))
    code, _, err = run(["run", "--task", "buttons3.json", "--guidance", "agents", "--transcript", empty,
                        "--out", tmp_path / "o"], capsys)
    assert code == 3 and "backend" in err


def test_http_backend_from_environment(monkeypatch):
    monkeypatch.setenv("GRAPPA_LLM_URL", "http://llm.local/v1/chat")
    monkeypatch.setenv("GRAPPA_LLM_KEY_VAR", "MY_KEY")
    cfg = cli.RunConfig(task=fixture_path("buttons3.json"), backend={"kind": "http", "model": "m"})
    bc = cli.backend_config(cfg)
    assert bc.endpoint == "http://llm.local/v1/chat" and bc.api_key_env == "MY_KEY"


def test_validate_exit_codes(tmp_path, capsys):
    ok = tmp_path / "ok.gsl"
    ok.write_text("#gsl 1\nfn guidance(state, prev) { return (0.0, prev); }\n")
    assert run(["validate", ok], capsys)[0] == 0
    shape = tmp_path / "shape.gsl"
    shape.write_text("#gsl 1\nfn guidance(state, prev) { return 0.0; }\n")
    code, stdout, _ = run(["validate", shape], capsys)
    assert code == 1 and "WrongReturnShape" in stdout
    header = tmp_path / "header.gsl"
    header.write_text("fn guidance(state, prev) { return (0.0, prev); }\n")
    code, stdout, _ = run(["validate", header], capsys)
    assert code == 1 and "MissingHeader" in stdout
    code, stdout, _ = run(["validate", guidance_path("buttons_ordered.gsl"), "--task", "buttons3.json", "--json"], capsys)
    assert code == 0 and json.loads(stdout)["ok"] is True


def test_heatmap_outputs(tmp_path, capsys):
    code, stdout, _ = run(["heatmap", "--task", "reach_sweep.json", "--guidance", "reach_peaked.gsl",
                           "--alpha", "1", "--nx", "2", "--ny", "2"], capsys)
    lines = stdout.strip().splitlines()
    assert code == 0 and len(lines) == 4 and lines[-1].startswith("argmax cell")
    assert all(len(line.split(",")) == 3 for line in lines[:3])
    target = tmp_path / "heat.csv"
    code, stdout, _ = run(["heatmap", "--task", "reach_sweep.json", "--guidance", "reach_peaked.gsl",
                           "--alpha", "1", "--nx", "21", "--ny", "21", "--z", "0.09", "--output", target], capsys)
    assert code == 0 and len(target.read_text().splitlines()) == 22
    assert stdout.startswith("argmax cell")


def write_logs(root, policy, alpha, wins, total, task="buttons3"):
    (root / "episodes").mkdir(parents=True)
    for seed in range(total):
        log = EpisodeLog(task, seed, success=seed < wins, policy=policy, alpha=alpha)
        (root / "episodes" / f"{task}_seed{seed}.jsonl").write_text(log.to_jsonl())


def test_report_table(tmp_path, capsys):
    write_logs(tmp_path / "one", "random", 1.0, 30, 50)
    code, stdout, _ = run(["report", tmp_path / "one"], capsys)
    assert code == 0 and "60.0" in stdout
    write_logs(tmp_path / "base", "random", 0.0, 0, 10)
    write_logs(tmp_path / "guided", "random", 0.5, 9, 10)
    code, stdout, _ = run(["report", tmp_path / "base", tmp_path / "guided", "--csv", tmp_path / "t.csv"], capsys)
    assert code == 0 and "90.0 (+90.0)" in stdout
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[0] == ["policy", "alpha", "buttons3", "avg"]
    assert rows[1:] == [["random", "0", "0.0", "0.0"], ["random", "0.5", "90.0", "90.0"]]
    (tmp_path / "empty").mkdir()
    assert run(["report", tmp_path / "empty"], capsys)[0] == 2


def improve_args(out, transcript, iterations):
    return ["improve", "--task", "buttons3.json", "--policy", "random", "--alpha", "1", "--n", "256",
            "--seeds", "0..5", "--iterations", iterations, "--transcript", transcript_path(transcript), "--out", out]


def test_improve_outputs(tmp_path, capsys):
    out = tmp_path / "imp"
    assert run(improve_args(out, "improve_two_rounds.json", 2), capsys)[0] == 0
    assert sorted(p.name for p in out.glob("guidance_iter*.gsl")) == ["guidance_iter1.gsl", "guidance_iter2.gsl"]
    rates = [float(r["success_rate"]) for r in csv.DictReader((out / "metrics.csv").open())]
    assert rates == sorted(rates) and rates[0] < rates[1]
    assert "feedback_iter1.txt" in (out / "manifest.txt").read_text()


def test_improve_bounds(tmp_path, capsys):
    one = tmp_path / "one"
    assert run(improve_args(one, "improve_two_rounds.json", 1), capsys)[0] == 0
    assert len(list(one.glob("guidance_iter*.gsl"))) == 1
    early = tmp_path / "early"
    assert run(improve_args(early, "golden.json", 3), capsys)[0] == 0
    assert len(list(csv.DictReader((early / "metrics.csv").open()))) < 3


def test_improve_all_failed(tmp_path, capsys):
    silent = tmp_path / "silent.json"
    silent.write_text(json.dumps({"replies": {"advisor": ["thinking\nNEXT: supervisor_agent"] * 50}}))
    args = ["improve", "--task", "buttons3.json", "--seeds", "0", "--iterations", "2",
            "--transcript", silent, "--out", tmp_path / "f"]
    cfg = tmp_path / "c.toml"
    cfg.write_text("[improve]\nturn_budget = 3\n")
    assert run([*args, "--config", cfg], capsys)[0] == 3
