"""Group-relative policy optimization with a clipped-ratio surrogate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, InputError, TrainingError
from .policy import Policy, Rollout, SamplingConfig, batch_logprobs, generate, pad_batch
from .reward import RewardSpec, score_rollout
from .task import TaskInstance, encode_prompt


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 16
    clip_eps: float = 0.2
    std_floor: float = 1e-8
    kl_coef: float = 0.0
    batch_prompts: int = 32
    epochs: int = 1
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    temperature: float = 0.6
    top_p: float = 0.95

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.batch_prompts < 1 or self.epochs < 1:
            raise ConfigError("batch_prompts and epochs must be >= 1")
        if self.kl_coef < 0 or self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("kl_coef must be >= 0; lr and grad_clip must be > 0")


@dataclass
class RolloutGroup:
    prompt_id: int
    rollouts: list[Rollout]
    rewards: np.ndarray
    advantages: np.ndarray


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """``(r - mean) / max(std, std_floor)`` with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("a group needs at least two rollouts")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centered = r - r.mean()
    return centered / max(float(r.std()), std_floor)


@dataclass
class SurrogateResult:
    loss: float
    weights: list[np.ndarray]
    ratios: list[np.ndarray]
    clip_fraction: float
    n_tokens: int


def surrogate_loss(advantages: Sequence[float], new_logprobs: Sequence[Sequence[float]],
                   old_logprobs: Sequence[Sequence[float]], clip_eps: float = 0.2,
                   ref_logprobs: Sequence[Sequence[float]] | None = None, kl_coef: float = 0.0) -> SurrogateResult:
    """Token-mean clipped surrogate for one group.

    Each rollout's advantage is broadcast to all of its tokens.  ``weights``
    holds d(loss)/d(new log-prob) per token, so the parameter gradient is
    ``grad_logprob`` applied with these weights.  The optional KL term uses
    the non-negative ``exp(ref - new) - (ref - new) - 1`` estimator.
    """
    if not (len(advantages) == len(new_logprobs) == len(old_logprobs)):
        raise InputError("advantages and log-prob sequences must align per rollout")
    n_tokens = 0
    for new, old in zip(new_logprobs, old_logprobs):
        if len(new) != len(old):
            raise InputError("new and old log-probs differ in length")
        n_tokens += len(new)
    if n_tokens == 0:
        return SurrogateResult(0.0, [np.zeros(0) for _ in new_logprobs], [np.zeros(0) for _ in new_logprobs], 0.0, 0)
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    total, clipped = 0.0, 0
    weights, ratios = [], []
    for i, (a, new, old) in enumerate(zip(advantages, new_logprobs, old_logprobs)):
        new = np.asarray(new, dtype=np.float64)
        rho = np.exp(new - np.asarray(old, dtype=np.float64))
        unclipped = rho * a
        clipped_obj = np.clip(rho, lo, hi) * a
        take_unclipped = unclipped <= clipped_obj
        total += float(-np.minimum(unclipped, clipped_obj).sum())
        w = np.where(take_unclipped, -unclipped, 0.0)
        clipped += int((~take_unclipped).sum())
        if kl_coef and ref_logprobs is not None:
            diff = np.asarray(ref_logprobs[i], dtype=np.float64) - new
            total += kl_coef * float((np.exp(diff) - diff - 1.0).sum())
            w = w + kl_coef * (1.0 - np.exp(diff))
        weights.append(w / n_tokens)
        ratios.append(rho)
    return SurrogateResult(total / n_tokens, weights, ratios, clipped / n_tokens, n_tokens)


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    mean_len: float
    clip_fraction: float
    loss: float
    length_clipped_fraction: float = 0.0
    grad_norm: float = 0.0


def make_optimizer(policy: Policy, cfg: GrpoConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(policy.model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)


def rollout_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sample_groups(policy: Policy, batch: Sequence[TaskInstance], spec: RewardSpec, cfg: GrpoConfig,
                  seed: int, prompt_ids: Sequence[int] | None = None) -> list[RolloutGroup]:
    """G rollouts per prompt under the limit's system prompt, scored and normalized.

    Generation stops one token past ``spec.limit``: clip(Y, L) only depends on
    the first L tokens, and the extra token tells whether Y was longer than L.
    Tokens beyond the limit are then discarded, so they receive no gradient.
    """
    sampling = SamplingConfig(cfg.temperature, cfg.top_p, spec.limit + 1, seed)
    prompts, seeds = [], []
    ids = list(prompt_ids) if prompt_ids is not None else list(range(len(batch)))
    for pid, inst in zip(ids, batch):
        p = encode_prompt(inst, spec.limit, policy.vocab)
        for g in range(cfg.group_size):
            prompts.append(p)
            seeds.append(rollout_seed(seed, pid, g))
    rollouts = generate(policy, prompts, sampling, seeds)
    groups = []
    for j, (pid, inst) in enumerate(zip(ids, batch)):
        rs = rollouts[j * cfg.group_size : (j + 1) * cfg.group_size]
        rewards = np.array([score_rollout(r, inst.gold_answer, spec, policy.vocab).reward for r in rs], dtype=float)
        for r in rs:
            del r.token_ids[spec.limit :], r.logprobs[spec.limit :]
            r.text = policy.vocab.decode(r.token_ids)
        groups.append(RolloutGroup(pid, rs, rewards, group_advantages(rewards, cfg.std_floor)))
    return groups


def _dump(dump_dir, step, groups, reason) -> str | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"nan_dump_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "step": step,
        "reason": reason,
        "groups": [
            {
                "prompt_id": g.prompt_id,
                "rewards": g.rewards.tolist(),
                "advantages": g.advantages.tolist(),
                "rollouts": [{"text": r.text, "logprobs": r.logprobs} for r in g.rollouts],
            }
            for g in groups
        ],
    }
    path.write_text(json.dumps(payload, default=str))
    return str(path)


def update_from_groups(policy: Policy, optimizer: torch.optim.Optimizer, groups: list[RolloutGroup],
                       cfg: GrpoConfig, step: int = 0, ref_policy: Policy | None = None,
                       dump_dir=None) -> tuple[float, float, float]:
    """Optimizer update(s) from scored groups; returns (loss, clip fraction, grad norm)."""
    rollouts = [r for g in groups for r in g.rollouts]
    seqs = [r.full_ids for r in rollouts]
    tokens, _ = pad_batch(seqs, policy.vocab.pad_id)
    starts = [len(r.prompt_ids) - 1 for r in rollouts]
    ref_lp = None
    if cfg.kl_coef and ref_policy is not None:
        with torch.no_grad():
            ref_all = batch_logprobs(ref_policy, tokens).double().numpy()
        ref_lp = [ref_all[i, s : s + r.length] for i, (s, r) in enumerate(zip(starts, rollouts))]
    loss_val = clip_val = gnorm = 0.0
    for _ in range(cfg.epochs):
        lp = batch_logprobs(policy, tokens)
        lp_np = lp.detach().double().numpy()
        w = np.zeros(lp_np.shape)
        losses, clips = [], []
        offset = 0
        for g in groups:
            idx = range(offset, offset + len(g.rollouts))
            offset += len(g.rollouts)
            new = [lp_np[i, starts[i] : starts[i] + rollouts[i].length] for i in idx]
            old = [rollouts[i].logprobs for i in idx]
            ref = [ref_lp[i] for i in idx] if ref_lp is not None else None
            res = surrogate_loss(g.advantages, new, old, cfg.clip_eps, ref, cfg.kl_coef)
            if not math.isfinite(res.loss):
                path = _dump(dump_dir, step, [g], "non-finite surrogate loss")
                raise TrainingError(f"non-finite loss at step {step} (prompt {g.prompt_id})", dump_path=path)
            losses.append(res.loss)
            clips.append((res.clip_fraction, res.n_tokens))
            for i, wi in zip(idx, res.weights):
                # batch loss is the mean of per-group losses
                w[i, starts[i] : starts[i] + len(wi)] = wi / len(groups)
        optimizer.zero_grad(set_to_none=False)
        (lp * torch.as_tensor(w, dtype=lp.dtype)).sum().backward()
        grads = [p.grad for p in policy.model.parameters()]
        if not all(torch.isfinite(gr).all() for gr in grads):
            path = _dump(dump_dir, step, groups, "non-finite gradient")
            raise TrainingError(f"non-finite gradient at step {step}", dump_path=path)
        gnorm = float(torch.nn.utils.clip_grad_norm_(policy.model.parameters(), cfg.grad_clip))
        optimizer.step()
        policy.version += 1
        loss_val = float(np.mean(losses))
        n = sum(c[1] for c in clips)
        clip_val = sum(c[0] * c[1] for c in clips) / n if n else 0.0
    return loss_val, clip_val, gnorm


def train_step(policy: Policy, optimizer: torch.optim.Optimizer, batch: Sequence[TaskInstance],
               spec: RewardSpec, cfg: GrpoConfig, step: int = 0, seed: int = 0,
               prompt_ids: Sequence[int] | None = None, ref_policy: Policy | None = None,
               dump_dir=None) -> tuple[StepMetrics, list[RolloutGroup]]:
    """Sample, score, normalize within groups, and apply one update."""
    cfg.validate()
    groups = sample_groups(policy, batch, spec, cfg, rollout_seed(seed, step), prompt_ids)
    loss, clip_frac, gnorm = update_from_groups(policy, optimizer, groups, cfg, step, ref_policy, dump_dir)
    rollouts = [r for g in groups for r in g.rollouts]
    metrics = StepMetrics(
        step=step,
        mean_reward=float(np.mean([r.reward for r in rollouts])),
        mean_len=float(np.mean([r.length for r in rollouts])),
        clip_fraction=clip_frac,
        loss=loss,
        length_clipped_fraction=float(np.mean([r.clipped for r in rollouts])),
        grad_norm=gnorm,
    )
    return metrics, groups
