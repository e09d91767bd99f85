import csv
import json

import httpx
import pytest

from lenprune.budget import (DEFAULT_SUFFIX, BudgetForcingConfig, forced_generate, forced_generate_batch,
                             forced_generate_endpoint, sweep, write_sweep)
from lenprune.errors import ConfigError, TransportError
from lenprune.llm_client import EndpointConfig, EndpointModel, LLMClient
from lenprune.policy import SamplingConfig, generate
from lenprune.task import END_THINK, TaskConfig, encode_prompt, instance_set

from oracles import constant_policy

SAMPLING = SamplingConfig(1.0, 1.0, 200, 0)


@pytest.fixture(scope="module")
def iid():
    # thinking closes after ~40 tokens on average; eos is rare
    return constant_policy({END_THINK: 1 / 40, "<eos>": 1 / 300})


def prompts(n):
    return [encode_prompt(i, 512) for i in instance_set(0, n, TaskConfig())]


def test_config_validation():
    for bad in (BudgetForcingConfig(0), BudgetForcingConfig(8, ""), BudgetForcingConfig(8, samples=0)):
        with pytest.raises(ConfigError):
            bad.validate()


def test_forced_rows_have_exact_budget_and_one_suffix(iid):
    cfg = BudgetForcingConfig(16, answer_token_cap=5)
    outs = forced_generate_batch(iid, prompts(40), cfg, SAMPLING, seeds=list(range(40)))
    assert any(o.forced for o in outs) and any(not o.forced for o in outs)
    for o in outs:
        assert o.think_tokens <= 16
        assert o.text.count(DEFAULT_SUFFIX) <= 1
        if o.forced:
            assert o.think_tokens == 16
            head, tail = o.text.split(DEFAULT_SUFFIX)
            assert END_THINK not in head
            assert len(iid.vocab.encode(tail)) <= 5


def test_under_budget_identical_to_unforced(iid):
    ps = prompts(40)
    seeds = list(range(100, 140))
    plain = generate(iid, ps, SAMPLING, seeds)
    outs = forced_generate_batch(iid, ps, BudgetForcingConfig(60), SAMPLING, seeds)
    n_same = 0
    for o, p in zip(outs, plain):
        if not o.forced:
            assert o.text == p.text and o.rollout.token_ids == p.token_ids
            n_same += 1
    assert n_same > 0


def test_single_prompt_wrapper(iid):
    p = prompts(1)[0]
    a = forced_generate(iid, p, BudgetForcingConfig(8), SAMPLING, seed=3)
    b = forced_generate_batch(iid, [p], BudgetForcingConfig(8), SAMPLING, [3])[0]
    assert a.text == b.text


def test_sweep_common_seeds_and_csv(iid, tmp_path):
    insts = instance_set(2, 6, TaskConfig())
    outputs = {}
    pts = sweep(iid, insts, [8, 500], BudgetForcingConfig(8), SAMPLING, outputs=outputs)
    assert [p.budget for p in pts] == [8, 500] and all(p.n == 1 for p in pts)
    assert pts[0].mean_think_len <= 8
    # the unforced rows at the large budget agree with the small-budget rows wherever neither was forced
    for a, b in zip(outputs[8], outputs[500]):
        if not a.forced and not b.forced:
            assert a.text == b.text
    write_sweep(pts[:1], tmp_path / "s.csv", tmp_path / "s.json", label="x")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["budget", "accuracy", "mean_think_len", "N"] and len(rows) == 2
    assert json.loads((tmp_path / "s.json").read_text())["series"][0]["budget"] == 8
    with pytest.raises(ConfigError):
        sweep(iid, insts, [], BudgetForcingConfig(8), SAMPLING)


# ---------------------------------------------------------------- endpoint emulation


def endpoint(handler, monkeypatch):
    monkeypatch.setenv("K", "x")
    cfg = EndpointConfig("http://mock/v1", "m", api_key_env="K", max_retries=0)
    return EndpointModel(LLMClient(cfg, transport=httpx.MockTransport(handler), sleep=lambda s: None))


def text_body(text, finish, n):
    return {"choices": [{"text": text, "finish_reason": finish}], "usage": {"completion_tokens": n}}


def test_endpoint_two_call_emulation(monkeypatch):
    seen = []

    def handler(req):
        body = json.loads(req.content)
        seen.append(body)
        if len(seen) == 1:
            return httpx.Response(200, json=text_body("<think>long thought", "length", 10))
        assert body["prompt"].endswith("long thought" + DEFAULT_SUFFIX)
        return httpx.Response(200, json=text_body("<answer>3</answer>", "stop", 4))

    out = forced_generate_endpoint(endpoint(handler, monkeypatch), None, "q", BudgetForcingConfig(10),
                                   SAMPLING)
    assert out.forced and out.think_tokens == 10 and out.total_tokens == 14
    assert seen[0]["max_tokens"] == 10 and seen[1]["max_tokens"] == 256
    assert out.text.count(DEFAULT_SUFFIX) == 1


def test_endpoint_under_budget_single_call(monkeypatch):
    calls = []

    def handler(req):
        calls.append(1)
        return httpx.Response(200, json=text_body("<think>ok</think> <answer>1</answer>", "stop", 9))

    out = forced_generate_endpoint(endpoint(handler, monkeypatch), "sys", "q", BudgetForcingConfig(50), SAMPLING)
    assert not out.forced and len(calls) == 1 and out.think_tokens <= 50


def test_endpoint_failure_keeps_partial(monkeypatch):
    calls = []

    def handler(req):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(200, json=text_body("<think>abc", "length", 10))
        return httpx.Response(503)

    with pytest.raises(TransportError) as ei:
        forced_generate_endpoint(endpoint(handler, monkeypatch), None, "q", BudgetForcingConfig(10), SAMPLING)
    assert ei.value.partial == "<think>abc" + DEFAULT_SUFFIX
