"""Supervised warm start on verbose traces (the over-generating base policy)."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .policy import ModelConfig, Policy, SamplingConfig, pad_batch
from .task import (StyleDistribution, TaskConfig, TaskInstance, encode_prompt, generate_instance,
                   instance_set, render_verbose_trace)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WarmStartConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 2e-3
    min_lr: float = 1e-4
    warmup: int = 100
    eval_every: int = 500
    eval_size: int = 64
    gate: float = 0.95
    seed: int = 0
    prompt_limits: tuple[int, ...] = (512, 384, 256)
    styles: StyleDistribution = field(default_factory=StyleDistribution)

    def validate(self) -> None:
        if self.steps <= 0:
            raise ConfigError("warm start needs at least one training step")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_size < 1:
            raise ConfigError("batch_size, eval_every and eval_size must be positive")
        if not 0 < self.gate <= 1:
            raise ConfigError("gate must lie in (0, 1]")


def _train_instance(seed: int, i: int, task: TaskConfig) -> TaskInstance:
    rng = random.Random(f"ws-k:{seed}:{i}")
    k = rng.randint(task.k_min, task.k_max)
    # Offset keeps training draws disjoint from the seed ranges used by instance_set.
    return generate_instance(10**9 + seed * 10**7 + i, k, task.modulus, task.max_operand)


def example_batch(step: int, cfg: WarmStartConfig, task: TaskConfig, vocab):
    rng = random.Random(f"ws-batch:{cfg.seed}:{step}")
    seqs, starts = [], []
    for j in range(cfg.batch_size):
        inst = _train_instance(cfg.seed, step * cfg.batch_size + j, task)
        style = cfg.styles.draw(rng, inst, vocab)
        prompt = encode_prompt(inst, rng.choice(cfg.prompt_limits), vocab)
        seqs.append(prompt + render_verbose_trace(inst, style, vocab))
        starts.append(len(prompt))
    return seqs, starts


def sft_loss(policy: Policy, seqs, starts) -> torch.Tensor:
    tokens, lens = pad_batch(seqs, policy.vocab.pad_id)
    logits = policy.model(tokens[:, :-1])
    target = tokens[:, 1:]
    pos = torch.arange(target.shape[1])[None, :]
    mask = (pos >= torch.tensor(starts)[:, None] - 1) & (pos < lens[:, None] - 1)
    nll = F.cross_entropy(logits.transpose(1, 2), target, reduction="none")
    return (nll * mask).sum() / mask.sum()


@dataclass
class WarmStartResult:
    policy: Policy
    curve: list[dict]
    accuracy: float
    mean_len: float
    steps: int


def warm_start(cfg: WarmStartConfig, task: TaskConfig = TaskConfig(), model_cfg: ModelConfig | None = None,
               eval_sampling: SamplingConfig = SamplingConfig(), dtype=torch.float32,
               held_out: list[TaskInstance] | None = None, dump_dir: str | Path | None = None) -> WarmStartResult:
    """Train until held-out accuracy clears ``cfg.gate``; raise if it never does.

    On failure the learning curve is written to ``dump_dir`` (when given) and
    its path attached to the error.
    """
    from .controller import evaluate  # evaluation lives with the controller

    cfg.validate()
    task.validate()
    torch.manual_seed(cfg.seed)
    policy = Policy(model_cfg, seed=cfg.seed, dtype=dtype)
    held_out = held_out or instance_set(cfg.seed + 7_777, cfg.eval_size, task)
    opt = torch.optim.Adam(policy.model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)

    def lr_at(step):
        if step < cfg.warmup:
            return cfg.lr * (step + 1) / cfg.warmup
        frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
        return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + torch.cos(torch.tensor(frac * 3.14159265)).item())

    curve = []
    acc = mean_len = 0.0
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step)
        seqs, starts = example_batch(step, cfg, task, policy.vocab)
        loss = sft_loss(policy, seqs, starts)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.model.parameters(), 1.0)
        opt.step()
        policy.version += 1
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            ev = evaluate(policy, held_out, eval_sampling, n_samples=1, prompt_limit=cfg.prompt_limits[0])
            acc, mean_len = ev.pass1, ev.mean_len
            loss_val = float(loss.detach())
            curve.append({"step": step + 1, "loss": loss_val, "accuracy": acc, "mean_len": mean_len})
            log.info("warm-start step %d loss %.4f acc %.3f len %.1f", step + 1, loss_val, acc, mean_len)
            if acc >= cfg.gate:
                return WarmStartResult(policy, curve, acc, mean_len, step + 1)
    path = None
    if dump_dir is not None:
        path = Path(dump_dir) / "warmstart_curve.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"gate": cfg.gate, "curve": curve}, indent=2) + "\n")
    raise TrainingError(f"warm start reached accuracy {acc:.3f} < gate {cfg.gate} after {cfg.steps} steps",
                        dump_path=str(path) if path else None)
