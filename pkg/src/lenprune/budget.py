"""Inference-time budget forcing: cut thinking at a token budget, then answer."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, TransportError
from .llm_client import EndpointModel, approx_token_count, question_text
from .policy import Forcing, Policy, Rollout, SamplingConfig, generate
from .reward import score_text
from .task import END_THINK, FINAL_ANSWER, TaskInstance, build_system_prompt, encode_prompt

log = logging.getLogger(__name__)

DEFAULT_SUFFIX = f"{END_THINK}\n\n{FINAL_ANSWER}\n\n"


@dataclass(frozen=True)
class BudgetForcingConfig:
    thinking_budget: int
    forcing_suffix: str = DEFAULT_SUFFIX
    answer_token_cap: int = 256
    samples: int = 1

    def validate(self) -> None:
        if self.thinking_budget <= 0:
            raise ConfigError("thinking budget must be positive")
        if not self.forcing_suffix:
            raise ConfigError("forcing suffix must be nonempty")
        if self.answer_token_cap < 1 or self.samples < 1:
            raise ConfigError("answer_token_cap and samples must be >= 1")


@dataclass
class ForcedOutput:
    text: str
    think_tokens: int
    total_tokens: int
    forced: bool
    approximate: bool = False
    rollout: Rollout | None = None


def forced_generate_batch(policy: Policy, prompts: Sequence[Sequence[int]], cfg: BudgetForcingConfig,
                          sampling: SamplingConfig, seeds: Sequence[int] | None = None) -> list[ForcedOutput]:
    cfg.validate()
    suffix = tuple(policy.vocab.encode(cfg.forcing_suffix))
    forcing = Forcing(cfg.thinking_budget, suffix, cfg.answer_token_cap)
    outs = []
    for r in generate(policy, prompts, sampling, seeds, forcing=forcing):
        outs.append(ForcedOutput(r.text, r.think_tokens, r.length, r.forced, rollout=r))
    return outs


def _split_think(text: str) -> tuple[str, bool]:
    i = text.find(END_THINK)
    return (text, False) if i < 0 else (text[:i], True)


def forced_generate_endpoint(model: EndpointModel, system: str | None, user: str, cfg: BudgetForcingConfig,
                             sampling: SamplingConfig, seed: int = 0) -> ForcedOutput:
    """Two-call emulation for backends without mid-stream control.

    Call one is capped at the thinking budget.  If the model has not closed its
    think block, the suffix is appended to the transcript and a continuation
    is requested for at most ``answer_token_cap`` tokens.
    """
    cfg.validate()
    client = model.client
    head = (system + "\n\n" if system else "") + user + "\n"
    params = {"temperature": sampling.temperature, "top_p": sampling.top_p, "seed": seed}
    first = client.complete_text(head, {**params, "max_tokens": cfg.thinking_budget})
    think_text, closed = _split_think(first.text)
    approximate = first.approximate_tokens
    if closed:
        think = approx_token_count(think_text)
        approximate = True
        text = first.text
        if first.finish_reason == "length":
            try:
                more = client.complete_text(head + text, {**params, "max_tokens": cfg.answer_token_cap})
            except TransportError as e:
                e.partial = text
                raise
            text += more.text
        return ForcedOutput(text, min(think, cfg.thinking_budget), approx_token_count(text), False, approximate)
    if first.finish_reason != "length":
        # Stopped on its own without closing the think block.
        return ForcedOutput(first.text, first.completion_tokens, first.completion_tokens, False, approximate)
    transcript = first.text + cfg.forcing_suffix
    log.info("budget forcing via two-call emulation (budget %d)", cfg.thinking_budget)
    try:
        second = client.complete_text(head + transcript, {**params, "max_tokens": cfg.answer_token_cap})
    except TransportError as e:
        e.partial = transcript
        raise
    text = transcript + second.text
    return ForcedOutput(text, min(first.completion_tokens, cfg.thinking_budget),
                        first.completion_tokens + second.completion_tokens, True,
                        approximate or second.approximate_tokens)


def forced_generate(model, prompt, cfg: BudgetForcingConfig, sampling: SamplingConfig, seed: int = 0) -> ForcedOutput:
    """Budget-forced generation for one prompt.

    ``prompt`` is a token list for a toy :class:`Policy`, or a ``(system,
    user)`` pair of strings for an :class:`EndpointModel`.
    """
    if isinstance(model, Policy):
        return forced_generate_batch(model, [prompt], cfg, sampling, [seed])[0]
    system, user = prompt
    return forced_generate_endpoint(model, system, user, cfg, sampling, seed)


@dataclass
class SweepPoint:
    budget: int
    accuracy: float
    mean_think_len: float
    n: int
    forced_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {"budget": self.budget, "accuracy": self.accuracy, "mean_think_len": self.mean_think_len,
                "n": self.n, "forced_fraction": self.forced_fraction}


def _seed(base, q, s) -> int:
    return int(np.random.SeedSequence([base, q, s]).generate_state(1)[0])


def sweep(model, instances: Sequence[TaskInstance], budgets: Sequence[int], cfg: BudgetForcingConfig,
          sampling: SamplingConfig, prompt_limit: int = 512, chunk: int = 128,
          outputs: dict | None = None) -> list[SweepPoint]:
    """One (accuracy, mean thinking length) point per budget.

    Sample ``s`` of question ``q`` uses the same seed at every budget, so
    budgets are compared on common random numbers.  Pass a dict as
    ``outputs`` to collect the raw generations keyed by budget.
    """
    if not budgets:
        raise ConfigError("budgets must be nonempty")
    if not instances:
        raise ConfigError("evaluation set is empty")
    points = []
    for b in budgets:
        bcfg = BudgetForcingConfig(b, cfg.forcing_suffix, cfg.answer_token_cap, cfg.samples)
        jobs = [(q, s) for q in range(len(instances)) for s in range(cfg.samples)]
        results: list[ForcedOutput] = []
        if isinstance(model, Policy):
            for lo in range(0, len(jobs), chunk):
                part = jobs[lo : lo + chunk]
                prompts = [encode_prompt(instances[q], prompt_limit, model.vocab) for q, _ in part]
                seeds = [_seed(sampling.rng_seed, q, s) for q, s in part]
                results.extend(forced_generate_batch(model, prompts, bcfg, sampling, seeds))
        else:
            system = build_system_prompt(prompt_limit) if model.with_limit_prompt else None

            def run(job):
                q, s = job
                return forced_generate_endpoint(model, system, question_text(instances[q]), bcfg, sampling,
                                                _seed(sampling.rng_seed, q, s))

            results = model.client.map(run, jobs)
        correct = [score_text(r.text, instances[q].gold_answer).reward for (q, _), r in zip(jobs, results)]
        per_q = np.asarray(correct, dtype=float).reshape(len(instances), cfg.samples).mean(1)
        points.append(SweepPoint(b, float(per_q.mean()), float(np.mean([r.think_tokens for r in results])),
                                 cfg.samples, float(np.mean([r.forced for r in results]))))
        if outputs is not None:
            outputs[b] = results
    return points


def write_sweep(points: Sequence[SweepPoint], csv_path: str | Path, plot_path: str | Path | None = None,
                label: str = "") -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["budget", "accuracy", "mean_think_len", "N"])
        for p in points:
            w.writerow([p.budget, repr(p.accuracy), repr(p.mean_think_len), p.n])
    if plot_path is not None:
        Path(plot_path).write_text(json.dumps({
            "kind": "budget_sweep", "label": label, "x": "mean_think_len", "y": "accuracy",
            "series": [p.to_dict() for p in points]}, indent=2) + "\n")
