"""Length-pruning rounds: validation, checkpoint selection, frontier."""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, TrainingError
from .grpo import GrpoConfig, StepMetrics, make_optimizer, rollout_seed, train_step
from .policy import Policy, SamplingConfig, generate, load_checkpoint, save_checkpoint
from .reward import RewardSpec, score_text
from .task import TaskInstance, encode_prompt

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    pass1: float
    mean_len: float
    per_question: list[float] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)


def _seed(base: int, q: int, s: int) -> int:
    return int(np.random.SeedSequence([base, q, s]).generate_state(1)[0])


def evaluate(model, instances: Sequence[TaskInstance], sampling: SamplingConfig, n_samples: int = 1,
             prompt_limit: int = 512, chunk: int = 128) -> EvalResult:
    """Mean-over-questions of mean-over-samples correctness, unclipped.

    ``model`` is a toy :class:`Policy` or any object with a
    ``complete_instances(instances, n_samples, sampling, prompt_limit)`` method
    returning, per instance, a list of ``(text, n_tokens)`` pairs.
    """
    if not instances:
        raise ConfigError("validation set is empty")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if isinstance(model, Policy):
        jobs = [(qi, s) for qi in range(len(instances)) for s in range(n_samples)]
        outs = {}
        for lo in range(0, len(jobs), chunk):
            part = jobs[lo : lo + chunk]
            prompts = [encode_prompt(instances[q], prompt_limit, model.vocab) for q, _ in part]
            seeds = [_seed(sampling.rng_seed, q, s) for q, s in part]
            for job, ro in zip(part, generate(model, prompts, sampling, seeds)):
                outs[job] = (ro.text, ro.length)
        results = [[outs[(q, s)] for s in range(n_samples)] for q in range(len(instances))]
    else:
        results = model.complete_instances(instances, n_samples, sampling, prompt_limit)
    per_q, lengths = [], []
    for inst, samples in zip(instances, results):
        per_q.append(float(np.mean([score_text(text, inst.gold_answer).reward for text, _ in samples])))
        lengths.extend(n for _, n in samples)
    return EvalResult(float(np.mean(per_q)), float(np.mean(lengths)), per_q, lengths)


@dataclass(frozen=True)
class LengthSchedule:
    limits: tuple[int, ...]
    eval_every: int = 20
    max_steps_per_round: int = 200

    def __post_init__(self):
        object.__setattr__(self, "limits", tuple(int(x) for x in self.limits))
        if not self.limits:
            raise ConfigError("length schedule is empty")
        if any(x <= 0 for x in self.limits):
            raise ConfigError("length limits must be positive")
        if any(a <= b for a, b in zip(self.limits, self.limits[1:])):
            raise ConfigError("length limits must be strictly decreasing")
        if self.eval_every < 1 or self.max_steps_per_round < 0:
            raise ConfigError("eval_every must be >= 1 and max_steps_per_round >= 0")


@dataclass(frozen=True)
class CheckpointMetrics:
    step: int
    round: int
    pass1: float
    mean_len: float
    checkpoint: str = ""

    def __post_init__(self):
        if not 0.0 <= self.pass1 <= 1.0:
            raise ConfigError(f"pass1 {self.pass1} outside [0, 1]")
        if self.mean_len < 0:
            raise ConfigError("mean_len must be >= 0")

    def to_dict(self) -> dict:
        return {"step": self.step, "round": self.round, "pass1": self.pass1,
                "mean_len": self.mean_len, "checkpoint": self.checkpoint}


@dataclass(frozen=True)
class Selection:
    chosen: CheckpointMetrics
    degraded: bool
    threshold: float


# Absorbs float rounding in (1 - drop) * baseline so a candidate sitting exactly
# on the boundary qualifies.
_THRESHOLD_SLACK = 1e-12


def select_checkpoint(candidates: Sequence[CheckpointMetrics], baseline_pass1: float,
                      max_rel_drop: float = 0.10) -> Selection:
    """Shortest checkpoint within the allowed relative pass@1 drop.

    Ties on length go to the earliest (round, step).  If nothing qualifies the
    best-pass1 checkpoint is returned with ``degraded=True``.
    """
    if not candidates:
        raise ConfigError("no candidate checkpoints")
    threshold = (1.0 - max_rel_drop) * baseline_pass1
    ok = [c for c in candidates if c.pass1 >= threshold - _THRESHOLD_SLACK]
    if ok:
        return Selection(min(ok, key=lambda c: (c.mean_len, c.round, c.step)), False, threshold)
    best = max(candidates, key=lambda c: (c.pass1, -c.mean_len, -c.round, -c.step))
    return Selection(best, True, threshold)


def frontier(points: Sequence[CheckpointMetrics]) -> list[CheckpointMetrics]:
    """Points whose pass1 is not beaten by any point at most as long."""
    ordered = sorted(points, key=lambda p: (p.mean_len, p.round, p.step))
    out: list[CheckpointMetrics] = []
    best_shorter = float("-inf")
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].mean_len == ordered[i].mean_len:
            j += 1
        group = ordered[i:j]
        top = max(p.pass1 for p in group)
        if top >= best_shorter:
            out.extend(p for p in group if p.pass1 == top)
        best_shorter = max(best_shorter, top)
        i = j
    return out


@dataclass
class RoundSetup:
    """Everything a round needs besides the start policy and its limit."""

    train_set: list[TaskInstance]
    val_set: list[TaskInstance]
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    eval_sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval_samples: int = 4
    seed: int = 0
    max_rel_drop: float = 0.10
    log_rollouts_every: int = 0
    log_rollouts_max: int = 4


@dataclass
class RoundResult:
    round: int
    limit: int
    checkpoints: list[CheckpointMetrics]
    selection: Selection
    policy: Policy
    steps: list[StepMetrics]


TRAIN_COLUMNS = ("step", "round", "limit", "mean_reward", "mean_len", "clip_fraction", "loss")
CHECKPOINT_COLUMNS = ("step", "round", "limit", "pass1", "mean_len", "checkpoint")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_row(f, values) -> None:
    f.write(",".join(_fmt(v) for v in values) + "\n")
    f.flush()


def checkpoint_id(round_index: int, step: int) -> str:
    return f"r{round_index}_s{step:05d}"


def _batch_indices(seed: int, round_index: int, step: int, n: int, k: int) -> list[int]:
    rng = random.Random(f"batch:{seed}:{round_index}:{step}")
    return rng.sample(range(n), min(k, n))


def run_round(policy: Policy, limit: int, schedule: LengthSchedule, setup: RoundSetup, round_index: int = 0,
              baseline_pass1: float | None = None, run_dir: str | Path | None = None,
              initial_eval: EvalResult | None = None) -> RoundResult:
    """GRPO under one length limit with periodic validation, then selection.

    Step 0 (the untouched start policy) is always a candidate.  A training
    failure re-raises with the checkpoints evaluated so far in ``partial``.
    """
    if limit <= 0:
        raise ConfigError("limit must be positive")
    spec = RewardSpec(limit)
    cfg = setup.grpo
    cfg.validate()
    policy = policy.clone()
    optimizer = make_optimizer(policy, cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    train_f = ckpt_f = roll_f = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        train_f = open(run_dir / f"round{round_index}_train.csv", "w")
        ckpt_f = open(run_dir / f"round{round_index}_checkpoints.csv", "w")
        _write_row(train_f, TRAIN_COLUMNS)
        _write_row(ckpt_f, CHECKPOINT_COLUMNS)
        if setup.log_rollouts_every:
            roll_f = open(run_dir / f"round{round_index}_rollouts.jsonl", "w")
    snapshots: dict[int, Policy] = {}
    checkpoints: list[CheckpointMetrics] = []
    steps: list[StepMetrics] = []

    def record(step: int, ev: EvalResult | None = None) -> None:
        ev = ev or evaluate(policy, setup.val_set, setup.eval_sampling, setup.eval_samples, prompt_limit=limit)
        cid = checkpoint_id(round_index, step)
        snapshots[step] = policy.clone()
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"{cid}.pt", policy, step, round_index, {"limit": limit})
        cm = CheckpointMetrics(step, round_index, ev.pass1, ev.mean_len, cid)
        checkpoints.append(cm)
        if ckpt_f:
            _write_row(ckpt_f, (step, round_index, limit, cm.pass1, cm.mean_len, cid))
        log.info("round %d step %d L=%d pass1=%.3f len=%.1f", round_index, step, limit, ev.pass1, ev.mean_len)

    try:
        record(0, initial_eval)
        n = len(setup.train_set)
        for step in range(1, schedule.max_steps_per_round + 1):
            idx = _batch_indices(setup.seed, round_index, step, n, cfg.batch_prompts)
            batch = [setup.train_set[i] for i in idx]
            m, groups = train_step(policy, optimizer, batch, spec, cfg, step=step,
                                   seed=rollout_seed(setup.seed, round_index), prompt_ids=idx,
                                   dump_dir=run_dir)
            steps.append(m)
            if train_f:
                _write_row(train_f, (step, round_index, limit, m.mean_reward, m.mean_len, m.clip_fraction, m.loss))
            if roll_f and step % setup.log_rollouts_every == 0:
                for g in groups:
                    for r in g.rollouts[: setup.log_rollouts_max]:
                        roll_f.write(json.dumps({"step": step, "round": round_index, "prompt_id": g.prompt_id,
                                                 "text": r.text, "length": r.length, **r.record.to_dict()}) + "\n")
            if step % schedule.eval_every == 0 or step == schedule.max_steps_per_round:
                record(step)
    except TrainingError as e:
        e.partial = checkpoints
        raise
    finally:
        for f in (train_f, ckpt_f, roll_f):
            if f:
                f.close()
    base = checkpoints[0].pass1 if baseline_pass1 is None else baseline_pass1
    sel = select_checkpoint(checkpoints, base, setup.max_rel_drop)
    chosen = snapshots[sel.chosen.step]
    if sel.degraded:
        log.warning("round %d: no checkpoint within %.0f%% of baseline; using best pass1",
                    round_index, 100 * setup.max_rel_drop)
    return RoundResult(round_index, limit, checkpoints, sel, chosen, steps)


@dataclass
class PruneResult:
    rounds: list[RoundResult]
    baseline: EvalResult | None
    manifest: dict
    policy: Policy

    @property
    def all_checkpoints(self) -> list[CheckpointMetrics]:
        return [c for r in self.rounds for c in r.checkpoints]


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_schedule(base: Policy, schedule: LengthSchedule, setup: RoundSetup,
                 run_dir: str | Path | None = None, resume: bool = True) -> PruneResult:
    """Chain rounds over ``schedule.limits``, each seeded by the previous selection.

    The pass@1 threshold is always relative to the base policy.  With a
    ``run_dir`` the manifest is rewritten after every round, and a rerun picks
    up after the last completed round.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    manifest = {"schedule": list(schedule.limits), "base_hash": base.content_hash(), "rounds": [],
                "complete": False}
    policy = base
    start_round = 0
    baseline: EvalResult | None = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        mpath = run_dir / "manifest.json"
        if resume and mpath.exists():
            old = json.loads(mpath.read_text())
            if old.get("schedule") != manifest["schedule"] or old.get("base_hash") != manifest["base_hash"]:
                raise ConfigError("existing manifest belongs to a different schedule or base checkpoint")
            manifest = old
            if manifest["rounds"]:
                last = manifest["rounds"][-1]
                policy, _ = load_checkpoint(run_dir / last["checkpoint_file"], base.vocab)
                policy = policy.to(base.dtype)
            start_round = len(manifest["rounds"])
    if "baseline_pass1" not in manifest:
        baseline = evaluate(base, setup.val_set, setup.eval_sampling, setup.eval_samples,
                            prompt_limit=schedule.limits[0])
        manifest["baseline_pass1"] = baseline.pass1
        manifest["baseline_mean_len"] = baseline.mean_len
    results = []
    for r in range(start_round, len(schedule.limits)):
        limit = schedule.limits[r]
        first_eval = baseline if r == 0 else None
        res = run_round(policy, limit, schedule, setup, r, manifest["baseline_pass1"], run_dir, first_eval)
        results.append(res)
        policy = res.policy
        entry = {"round": r, "limit": limit, "selected": res.selection.chosen.to_dict(),
                 "degraded": res.selection.degraded, "threshold": res.selection.threshold,
                 "policy_hash": policy.content_hash(),
                 "checkpoint_file": f"checkpoints/{res.selection.chosen.checkpoint}.pt"}
        manifest["rounds"].append(entry)
        manifest["complete"] = r == len(schedule.limits) - 1
        if run_dir is not None:
            _dump_json(run_dir / "manifest.json", manifest)
    if run_dir is not None:
        points = []
        for r in range(len(manifest["rounds"])):
            points.extend(read_checkpoint_csv(run_dir / f"round{r}_checkpoints.csv"))
        _dump_json(run_dir / "frontier.json", {
            "points": [p.to_dict() for p in points],
            "frontier": [p.to_dict() for p in frontier(points)],
        })
    return PruneResult(results, baseline, manifest, policy)


def read_checkpoint_csv(path: str | Path) -> list[CheckpointMetrics]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [CheckpointMetrics(int(r["step"]), int(r["round"]), float(r["pass1"]), float(r["mean_len"]),
                              r["checkpoint"]) for r in rows]
