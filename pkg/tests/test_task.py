import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lenprune.errors import ConfigError, InputError
from lenprune.task import (END_THINK, EOS, MINIMAL_STYLE, VOCAB, StyleDistribution, TaskConfig, TaskInstance,
                           VerboseTraceStyle, apply_op, build_system_prompt, encode_prompt, fold,
                           generate_instance, instance_set, make_instance, minimal_length, read_jsonl,
                           render_trace_text, render_verbose_trace, write_jsonl)


def test_fold_matches_manual_arithmetic():
    inst = make_instance(3, [("add", 4), ("mul", 2), ("sub", 5)], 7)
    # (3+4)=0, 0*2=0, 0-5=-5=2 (mod 7)
    assert inst.gold_answer == 2
    assert inst.prompt_text == "3 a+4 b*2 c-5 mod 7"


def test_modulus_97_examples():
    assert make_instance(7, [("add", 3), ("mul", 2), ("sub", 5)], 97).gold_answer == 15
    inst = make_instance(42, [("add", 0)], 97)
    assert inst.gold_answer == inst.start_value
    g = generate_instance(0, 1, 97)
    assert g.gold_answer == fold(g.start_value, g.ops, 97)


def test_apply_op_rejects_unknown():
    with pytest.raises(ConfigError):
        apply_op(1, "div", 2, 7)


@pytest.mark.parametrize("bad", [
    dict(start_value=0, ops=[], modulus=7),
    dict(start_value=0, ops=[("add", 7)], modulus=7),
    dict(start_value=7, ops=[("add", 1)], modulus=7),
    dict(start_value=0, ops=[("add", 1)], modulus=8),
])
def test_make_instance_validation(bad):
    with pytest.raises(ConfigError):
        make_instance(**bad)


def test_generate_instance_deterministic():
    a = generate_instance(11, 5, 7)
    b = generate_instance(11, 5, 7)
    assert a == b
    assert len(a.ops) == 5


def test_generate_instance_rejects_bad_params():
    with pytest.raises(ConfigError):
        generate_instance(0, 0, 7)
    with pytest.raises(ConfigError):
        generate_instance(0, 3, 9)


@given(st.integers(0, 10**6), st.integers(1, 8))
@settings(max_examples=200, deadline=None)
def test_gold_answer_is_fold(seed, k):
    inst = generate_instance(seed, k, 7)
    v = inst.start_value
    for op, d in inst.ops:
        v = {"add": v + d, "sub": v - d, "mul": v * d}[op] % 7
    assert inst.gold_answer == v == fold(inst.start_value, inst.ops, 7)


def test_jsonl_round_trip(tmp_path):
    insts = instance_set(3, 25, TaskConfig())
    p = tmp_path / "set.jsonl"
    write_jsonl(p, insts)
    assert read_jsonl(p) == insts
    first = p.read_text().splitlines()[0]
    assert first == insts[0].to_json()
    assert TaskInstance.from_dict(json.loads(first)) == insts[0]


def test_instance_set_k_range():
    cfg = TaskConfig(k_min=3, k_max=4)
    assert {len(i.ops) for i in instance_set(0, 100, cfg)} == {3, 4}


def test_vocab_round_trip_and_unknown():
    text = render_trace_text(generate_instance(1, 4, 7), VerboseTraceStyle(2, 3, ("wait",)))
    assert VOCAB.decode(VOCAB.encode(text)) == text
    with pytest.raises(InputError):
        VOCAB.encode("ünknown")


def test_trace_ends_with_answer_and_eos():
    inst = generate_instance(2, 3, 7)
    text = render_trace_text(inst, MINIMAL_STYLE)
    assert text.endswith(f"<answer>{inst.gold_answer}</answer>{EOS}")
    assert text.count(END_THINK) == 1


def test_verbose_longer_than_minimal():
    inst = generate_instance(4, 6, 7)
    verbose = render_verbose_trace(inst, VerboseTraceStyle(2, 3, ("wait", "let me check")))
    assert len(verbose) > minimal_length(inst)


def test_style_distribution_respects_cap():
    sd = StyleDistribution(max_trace_tokens=200)
    rng = random.Random(0)
    for inst in instance_set(1, 50, TaskConfig()):
        style = sd.draw(rng, inst)
        assert len(render_verbose_trace(inst, style)) <= max(200, minimal_length(inst))


def test_system_prompt_contains_limit():
    s = build_system_prompt(256)
    assert "256" in s and "{N}" not in s
    with pytest.raises(ConfigError):
        build_system_prompt(0)


def test_encode_prompt_differs_by_limit():
    inst = generate_instance(0, 3, 7)
    assert encode_prompt(inst, 512) != encode_prompt(inst, 256)
