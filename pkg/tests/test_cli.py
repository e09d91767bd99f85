import csv
import json

import pytest

from lenprune import cli
from lenprune.controller import read_checkpoint_csv, select_checkpoint
from lenprune.policy import save_checkpoint
from lenprune.task import END_THINK, MINIMAL_STYLE, render_trace_text

from oracles import constant_policy

TOY = ["--modulus", "2", "--k-min", "1", "--k-max", "1"]


def warm_args(out, seed=0, steps=300):
    return ["warmstart", "--out-dir", str(out), "--seed", str(seed), "--steps", str(steps), "--batch-size", "8",
            "--gate", "0.25", "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", *TOY]


@pytest.fixture(scope="module")
def tiny_base(tmp_path_factory):
    out = tmp_path_factory.mktemp("ws")
    styles = {"max_restatements": 0, "max_recompute": 2, "max_reflections": 0}
    cfg = {"warmstart": {"eval_size": 8, "eval_every": 50, "lr": 3e-3, "prompt_limits": [64], "styles": styles},
           "eval": {"max_new_tokens": 64}, "val_size": 8, "eval_samples": 1,
           "schedule": {"limits": [64, 48]}}
    (out / "cfg.json").write_text(json.dumps(cfg))
    code = cli.main(warm_args(out) + ["--config", str(out / "cfg.json")])
    assert code == 0, (out / "warmstart_curve.json").read_text() if (out / "warmstart_curve.json").exists() else ""
    return out


def test_parse_flags_and_file_override(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 9, "grpo": {"group_size": 4}}))
    cfg, _ = cli.config_from_args(["prune", "--base-checkpoint", "b.pt", "--seed", "1", "--group-size", "2",
                                   "--limits", "100", "50", "--config", str(f)])
    assert cfg.seed == 9 and cfg.grpo.group_size == 4
    assert cfg.schedule.limits == (100, 50)


def test_partial_section_keeps_run_defaults():
    cfg, _ = cli.config_from_args(["prune", "--base-checkpoint", "b.pt", "--lr", "1e-5"])
    assert cfg.grpo.lr == 1e-5
    assert (cfg.grpo.group_size, cfg.grpo.batch_prompts) == (cli.RunConfig("prune").grpo.group_size,
                                                            cli.RunConfig("prune").grpo.batch_prompts)
    assert cfg.schedule.limits == cli.RunConfig("prune").schedule.limits


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["warmstart", "--out-dir", str(tmp_path), "--steps", "0"]) == cli.EXIT_CONFIG
    assert cli.main(["prune", "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--out-dir", str(tmp_path), "--checkpoint", str(tmp_path / "nope.pt")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grpo": {"bogus": 1}}))
    assert cli.main(["prune", "--base-checkpoint", "x", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_warmstart_gate_failure_exit_4_with_curve(tmp_path):
    args = warm_args(tmp_path, steps=2) + ["--gate", "1.0"]
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"warmstart": {"eval_size": 4, "eval_every": 1, "prompt_limits": [64]},
                               "eval": {"max_new_tokens": 16}}))
    assert cli.main(args + ["--config", str(cfg)]) == cli.EXIT_TRAINING
    curve = json.loads((tmp_path / "warmstart_curve.json").read_text())
    assert len(curve["curve"]) == 2
    assert (tmp_path / "config_warmstart.json").exists()


def test_warmstart_report_and_recheck(tiny_base):
    rep = json.loads((tiny_base / "warmstart_report.json").read_text())
    assert rep["accuracy"] >= rep["gate"]
    assert 0.0 <= rep["recheck"]["pass1"] <= 1.0
    assert (tiny_base / "base.pt").exists()


def test_warmstart_same_seed_same_hash(tiny_base, tmp_path):
    cfg = tiny_base / "cfg.json"
    assert cli.main(warm_args(tmp_path) + ["--config", str(cfg)]) == 0
    a = json.loads((tiny_base / "warmstart_report.json").read_text())["hash"]
    b = json.loads((tmp_path / "warmstart_report.json").read_text())["hash"]
    assert a == b


def test_prune_resume_and_offline_checks(tiny_base, tmp_path):
    args = ["prune", "--out-dir", str(tmp_path), "--base-checkpoint", str(tiny_base / "base.pt"),
            "--steps-per-round", "2", "--eval-every", "1", "--group-size", "2", "--batch-prompts", "2",
            "--train-size", "16", "--val-size", "4", "--eval-samples", "1", "--f64", *TOY,
            "--config", str(tiny_base / "cfg.json")]
    assert cli.main(args) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["complete"] and len(m["rounds"]) == 2
    for r, entry in enumerate(m["rounds"]):
        pts = read_checkpoint_csv(tmp_path / f"round{r}_checkpoints.csv")
        assert select_checkpoint(pts, m["baseline_pass1"]).chosen.to_dict() == entry["selected"]
    fr = json.loads((tmp_path / "frontier.json").read_text())
    assert fr["frontier"] == [p.to_dict() for p in cli.recompute_frontier(tmp_path)]
    # rerunning a complete run is a no-op on the metrics
    before = (tmp_path / "round1_train.csv").read_text()
    assert cli.main(args) == 0
    assert (tmp_path / "round1_train.csv").read_text() == before
    # schedule of length one is one-shot
    one = tmp_path / "one"
    cfg = json.loads((tiny_base / "cfg.json").read_text())
    cfg["schedule"] = {"limits": [48]}
    (tmp_path / "one.json").write_text(json.dumps(cfg))
    args = [str(one) if a == str(tmp_path) else a for a in args[:-1]] + [str(tmp_path / "one.json")]
    assert cli.main(args) == 0
    assert len(json.loads((one / "manifest.json").read_text())["rounds"]) == 1


class PerfectModel:
    def complete_instances(self, instances, n_samples, sampling, prompt_limit):
        return [[(render_trace_text(i, MINIMAL_STYLE), 10)] * n_samples for i in instances]


def test_eval_perfect_fixture_policy(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "_target", lambda cfg: PerfectModel())
    assert cli.main(["eval", "--out-dir", str(tmp_path), "--checkpoint", "unused.pt", "--size", "5",
                     "--n-samples", "2"]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["results"][0]["pass1"] == 1.0
    assert json.loads((tmp_path / "eval_plot.json").read_text())["kind"] == "accuracy_vs_length"


def test_budget_sweep_one_budget_one_row(tmp_path):
    pol = constant_policy({END_THINK: 1 / 20})
    ckpt = tmp_path / "c.pt"
    save_checkpoint(ckpt, pol)
    assert cli.main(["budget-sweep", "--out-dir", str(tmp_path), "--checkpoint", str(ckpt), "--size", "4",
                     "--budgets", "16", "--max-new-tokens", "64", "--answer-cap", "4"]) == 0
    rows = list(csv.reader(open(tmp_path / "budget_sweep.csv")))
    assert len(rows) == 2 and rows[1][0] == "16"


def test_analyze_keywords_steps_and_perplexity(tmp_path):
    traces = tmp_path / "t.jsonl"
    traces.write_text("\n".join(json.dumps({"text": t}) for t in ["wait a\n\nb", "so\n\nwait\n\nc"]) + "\n")
    pol = constant_policy({})
    ckpt = tmp_path / "c.pt"
    save_checkpoint(ckpt, pol)
    assert cli.main(["analyze", "--out-dir", str(tmp_path), "--traces", str(traces), "--keywords", "wait",
                     "--scorer-checkpoint", str(ckpt), "--f64"]) == 0
    kw = json.loads((tmp_path / "keywords.json").read_text())
    assert kw["counts"] == {"wait": 2}
    assert json.loads((tmp_path / "steps.json").read_text())["steps"] == [2, 3]
    ppl = json.loads((tmp_path / "perplexity.json").read_text())
    # uniform over the non-pad vocabulary
    assert ppl["corpus"] == pytest.approx(len(pol.vocab) - 1, rel=1e-9)


def test_analyze_missing_traces(tmp_path):
    assert cli.main(["analyze", "--out-dir", str(tmp_path), "--traces", str(tmp_path / "x")]) == cli.EXIT_CONFIG


def test_unreachable_endpoint_exit_3(tmp_path, monkeypatch):
    monkeypatch.setenv("K", "x")
    ep = tmp_path / "ep.json"
    ep.write_text(json.dumps({"base_url": "http://127.0.0.1:9/v1", "model": "m", "api_key_env": "K",
                              "max_retries": 0, "timeout": 2}))
    code = cli.main(["eval", "--out-dir", str(tmp_path), "--endpoint", str(ep), "--size", "1", "--n-samples", "1"])
    assert code == cli.EXIT_TRANSPORT
