"""Command-line entry point: warmstart, prune, eval, budget-sweep, analyze."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import analysis
from .budget import DEFAULT_SUFFIX, BudgetForcingConfig, sweep, write_sweep
from .controller import LengthSchedule, RoundSetup, evaluate, frontier, read_checkpoint_csv, run_schedule
from .errors import ConfigError, InputError, LenPruneError, TrainingError, TransportError
from .grpo import GrpoConfig
from .llm_client import EndpointConfig, EndpointModel, LLMClient
from .policy import ModelConfig, Policy, SamplingConfig, load_checkpoint, logprobs, save_checkpoint
from .reward import Pattern
from .task import TaskConfig, instance_set, minimal_length, read_jsonl, write_jsonl
from .warmstart import WarmStartConfig, warm_start

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_TRAINING = 0, 1, 2, 3, 4
SUBCOMMANDS = ("warmstart", "prune", "eval", "budget-sweep", "analyze")


@dataclass(frozen=True)
class EvalOptions:
    checkpoint: str | None = None
    endpoint: str | None = None
    n_samples: int = 4
    size: int = 64
    prompt_limits: tuple[int, ...] = (512,)
    max_new_tokens: int = 512
    temperature: float = 0.6
    top_p: float = 0.95
    with_limit_prompt: bool = True


@dataclass(frozen=True)
class BudgetOptions:
    budgets: tuple[int, ...] = (64, 128, 256)
    answer_token_cap: int = 32
    forcing_suffix: str = DEFAULT_SUFFIX
    samples: int = 1


@dataclass(frozen=True)
class AnalyzeOptions:
    traces: str | None = None
    keywords: tuple[str, ...] = ()
    segment_endpoint: str | None = None
    scorer_endpoint: str | None = None
    scorer_checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    out_dir: str = "runs/default"
    seed: int = 0
    f64: bool = False
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    warmstart: WarmStartConfig = field(default_factory=WarmStartConfig)
    grpo: GrpoConfig = field(default_factory=lambda: GrpoConfig(group_size=8, batch_prompts=8))
    schedule: LengthSchedule = field(default_factory=lambda: LengthSchedule((512, 384, 256)))
    pattern: str = Pattern.ANSWER_TAGS.value
    base_checkpoint: str | None = None
    train_size: int = 2000
    val_size: int = 64
    eval_samples: int = 4
    max_rel_drop: float = 0.10
    log_rollouts_every: int = 0
    eval: EvalOptions = field(default_factory=EvalOptions)
    budget: BudgetOptions = field(default_factory=BudgetOptions)
    analyze: AnalyzeOptions = field(default_factory=AnalyzeOptions)

    def validate(self) -> None:
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        self.task.validate()
        self.model.validate()
        self.warmstart.validate()
        self.grpo.validate()
        Pattern(self.pattern)
        if self.train_size < 1 or self.val_size < 1 or self.eval_samples < 1:
            raise ConfigError("train_size, val_size and eval_samples must be >= 1")
        if not 0 <= self.max_rel_drop < 1:
            raise ConfigError("max_rel_drop must lie in [0, 1)")
        if self.subcommand == "prune" and not self.base_checkpoint:
            raise ConfigError("prune needs base_checkpoint")
        if self.subcommand in ("eval", "budget-sweep") and not (self.eval.checkpoint or self.eval.endpoint):
            raise ConfigError(f"{self.subcommand} needs eval.checkpoint or eval.endpoint")
        if self.subcommand == "budget-sweep":
            if not self.budget.budgets:
                raise ConfigError("budget sweep needs at least one budget")
            for b in self.budget.budgets:
                BudgetForcingConfig(b, self.budget.forcing_suffix, self.budget.answer_token_cap,
                                    self.budget.samples).validate()
        if self.subcommand == "analyze" and not self.analyze.traces:
            raise ConfigError("analyze needs analyze.traces")
        limits = self.eval.prompt_limits
        if not limits or any(x <= 0 for x in limits):
            raise ConfigError("eval.prompt_limits must be positive")
        if max(self.schedule.limits) + 1 > self.model.max_len:
            raise ConfigError("model context is shorter than the largest length limit")
        if self.subcommand == "warmstart" and self.warmstart.styles.max_trace_tokens + 16 > self.model.max_len:
            raise ConfigError("model context cannot hold the longest warm-start trace")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- config plumbing


def _field_default(f: dataclasses.Field):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None if f.default is dataclasses.MISSING else f.default


def _build(cls, data: dict, base=None):
    """Instantiate a (nested) dataclass from plain JSON data.

    Nested sections override the parent's default for that field, so a
    partial section keeps every value it does not mention.
    """
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t) and isinstance(v, dict):
            default = getattr(base, k) if base is not None else _field_default(fields[k])
            v = _build(t, v, default)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    if p.suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(p.read_text()) or {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p}: {e}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lenprune", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON/YAML file; its values override flags")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--f64", action="store_true", default=None, help="run the toy policy in float64")
        p.add_argument("--modulus", type=int, dest="task.modulus")
        p.add_argument("--k-min", type=int, dest="task.k_min")
        p.add_argument("--k-max", type=int, dest="task.k_max")

    p = sub.add_parser("warmstart", help="supervised warm start of the verbose base policy")
    common(p)
    p.add_argument("--steps", type=int, dest="warmstart.steps")
    p.add_argument("--batch-size", type=int, dest="warmstart.batch_size")
    p.add_argument("--lr", type=float, dest="warmstart.lr")
    p.add_argument("--gate", type=float, dest="warmstart.gate")
    p.add_argument("--d-model", type=int, dest="model.d_model")
    p.add_argument("--n-layers", type=int, dest="model.n_layers")
    p.add_argument("--n-heads", type=int, dest="model.n_heads")
    p.add_argument("--d-ff", type=int, dest="model.d_ff")

    p = sub.add_parser("prune", help="one-shot or iterative length pruning")
    common(p)
    p.add_argument("--base-checkpoint", dest="base_checkpoint")
    p.add_argument("--limits", type=int, nargs="+", dest="schedule.limits")
    p.add_argument("--steps-per-round", type=int, dest="schedule.max_steps_per_round")
    p.add_argument("--eval-every", type=int, dest="schedule.eval_every")
    p.add_argument("--group-size", type=int, dest="grpo.group_size")
    p.add_argument("--batch-prompts", type=int, dest="grpo.batch_prompts")
    p.add_argument("--lr", type=float, dest="grpo.lr")
    p.add_argument("--kl-coef", type=float, dest="grpo.kl_coef")
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--val-size", type=int, dest="val_size")
    p.add_argument("--eval-samples", type=int, dest="eval_samples")
    p.add_argument("--max-rel-drop", type=float, dest="max_rel_drop")

    def target(p):
        p.add_argument("--checkpoint", dest="eval.checkpoint")
        p.add_argument("--endpoint", dest="eval.endpoint", help="endpoint config file (JSON/YAML)")
        p.add_argument("--n-samples", type=int, dest="eval.n_samples")
        p.add_argument("--size", type=int, dest="eval.size")
        p.add_argument("--max-new-tokens", type=int, dest="eval.max_new_tokens")
        p.add_argument("--temperature", type=float, dest="eval.temperature")
        p.add_argument("--top-p", type=float, dest="eval.top_p")

    p = sub.add_parser("eval", help="pass@1 and mean length of a checkpoint or endpoint")
    common(p)
    target(p)
    p.add_argument("--prompt-limits", type=int, nargs="+", dest="eval.prompt_limits")

    p = sub.add_parser("budget-sweep", help="accuracy vs thinking budget")
    common(p)
    target(p)
    p.add_argument("--budgets", type=int, nargs="+", dest="budget.budgets")
    p.add_argument("--answer-cap", type=int, dest="budget.answer_token_cap")
    p.add_argument("--samples", type=int, dest="budget.samples")

    p = sub.add_parser("analyze", help="keyword, step, phase and perplexity reports")
    common(p)
    p.add_argument("--traces", dest="analyze.traces", help="JSONL with a 'text' field per line")
    p.add_argument("--keywords", nargs="+", dest="analyze.keywords")
    p.add_argument("--segment-endpoint", dest="analyze.segment_endpoint")
    p.add_argument("--scorer-endpoint", dest="analyze.scorer_endpoint")
    p.add_argument("--scorer-checkpoint", dest="analyze.scorer_checkpoint")
    return ap


def config_from_args(argv: Sequence[str] | None = None) -> tuple[RunConfig, bool]:
    ns = build_parser().parse_args(argv)
    data: dict = {"subcommand": ns.subcommand}
    for key, val in vars(ns).items():
        if key in ("subcommand", "config", "verbose") or val is None:
            continue
        node = data
        *head, leaf = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[leaf] = val
    if ns.config:
        file_data = load_config_file(ns.config)
        file_data.pop("subcommand", None)
        data = _merge(data, file_data)
    cfg = _build(RunConfig, data)
    cfg.validate()
    return cfg, ns.verbose


# ---------------------------------------------------------------- helpers


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.f64 else torch.float32


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def prepare_run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / f"config_{cfg.subcommand}.json", cfg.to_dict())
    return out


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _val_set(cfg: RunConfig, size: int):
    return instance_set(cfg.seed * 7 + 2, size, cfg.task)


def _sampling(cfg: RunConfig) -> SamplingConfig:
    e = cfg.eval
    return SamplingConfig(e.temperature, e.top_p, e.max_new_tokens, cfg.seed)


def load_policy(path: str | None, cfg: RunConfig) -> Policy:
    if not path:
        raise ConfigError("no checkpoint given")
    policy, _ = load_checkpoint(path)
    return policy.to(_dtype(cfg))


def _endpoint_client(path: str, cfg: RunConfig) -> LLMClient:
    ecfg = EndpointConfig.from_file(path)
    if ecfg.audit_log is None:
        ecfg = dataclasses.replace(ecfg, audit_log=str(Path(cfg.out_dir) / "audit.jsonl"))
    return LLMClient(ecfg, seed=cfg.seed)


def _target(cfg: RunConfig):
    if cfg.eval.checkpoint:
        return load_policy(cfg.eval.checkpoint, cfg)
    return EndpointModel(_endpoint_client(cfg.eval.endpoint, cfg), cfg.eval.with_limit_prompt)


class PolicyScorer:
    """``score_logprobs`` over the toy vocabulary, for perplexity reports."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def score_logprobs(self, text: str) -> list[float | None]:
        ids = self.policy.vocab.encode(text)
        if not ids:
            return []
        return [None] + [float(x) for x in logprobs(self.policy, ids)]


# ---------------------------------------------------------------- commands


def cmd_warmstart(cfg: RunConfig) -> Path:
    out = prepare_run_dir(cfg)
    _seed_everything(cfg.seed)
    ws = dataclasses.replace(cfg.warmstart, seed=cfg.seed)
    sampling = SamplingConfig(cfg.eval.temperature, cfg.eval.top_p, cfg.eval.max_new_tokens, cfg.seed)
    held_out = instance_set(cfg.seed * 7 + 1, ws.eval_size, cfg.task)
    res = warm_start(ws, cfg.task, cfg.model, sampling, _dtype(cfg), held_out, dump_dir=out)
    path = out / "base.pt"
    digest = save_checkpoint(path, res.policy, res.steps, 0, {"kind": "warmstart"})
    # Independent check of the gate on a reloaded copy and a fresh held-out set.
    reloaded = load_policy(str(path), cfg)
    check_set = _val_set(cfg, cfg.val_size)
    recheck = evaluate(reloaded, check_set, sampling, cfg.eval_samples, prompt_limit=ws.prompt_limits[0])
    min_len = float(np.mean([minimal_length(i) for i in check_set]))
    _dump(out / "warmstart_report.json", {
        "checkpoint": str(path), "hash": digest, "steps": res.steps, "gate": ws.gate,
        "accuracy": res.accuracy, "mean_len": res.mean_len, "curve": res.curve,
        "recheck": {"pass1": recheck.pass1, "mean_len": recheck.mean_len, "n": len(check_set),
                    "samples": cfg.eval_samples, "mean_minimal_len": min_len},
    })
    _dump(out / "warmstart_curve.json", {"gate": ws.gate, "curve": res.curve})
    log.info("warm start passed gate at step %d (acc %.3f); checkpoint %s", res.steps, res.accuracy, path)
    return path


def cmd_prune(cfg: RunConfig) -> Path:
    out = prepare_run_dir(cfg)
    _seed_everything(cfg.seed)
    base = load_policy(cfg.base_checkpoint, cfg)
    train = instance_set(cfg.seed * 7 + 3, cfg.train_size, cfg.task)
    val = _val_set(cfg, cfg.val_size)
    write_jsonl(out / "train.jsonl", train)
    write_jsonl(out / "val.jsonl", val)
    setup = RoundSetup(train, val, cfg.grpo, _sampling(cfg), cfg.eval_samples, cfg.seed, cfg.max_rel_drop,
                       cfg.log_rollouts_every)
    res = run_schedule(base, cfg.schedule, setup, out)
    log.info("pruning finished: %d rounds, final selection %s", len(res.manifest["rounds"]),
             res.manifest["rounds"][-1]["selected"] if res.manifest["rounds"] else None)
    return out


def cmd_eval(cfg: RunConfig) -> Path:
    out = prepare_run_dir(cfg)
    model = _target(cfg)
    val = _val_set(cfg, cfg.eval.size)
    sampling = _sampling(cfg)
    rows = []
    for lim in cfg.eval.prompt_limits:
        ev = evaluate(model, val, sampling, cfg.eval.n_samples, prompt_limit=lim)
        rows.append({"prompt_limit": lim, "pass1": ev.pass1, "mean_len": ev.mean_len, "n": len(val),
                     "samples": cfg.eval.n_samples, "per_question": ev.per_question})
    _dump(out / "eval.json", {"results": rows})
    _dump(out / "eval_plot.json", {"kind": "accuracy_vs_length", "x": "mean_len", "y": "pass1",
                                   "series": [{k: r[k] for k in ("prompt_limit", "pass1", "mean_len")}
                                              for r in rows]})
    return out


def cmd_budget_sweep(cfg: RunConfig) -> Path:
    out = prepare_run_dir(cfg)
    model = _target(cfg)
    val = _val_set(cfg, cfg.eval.size)
    b = cfg.budget
    bcfg = BudgetForcingConfig(b.budgets[0], b.forcing_suffix, b.answer_token_cap, b.samples)
    points = sweep(model, val, b.budgets, bcfg, _sampling(cfg), prompt_limit=cfg.eval.prompt_limits[0])
    write_sweep(points, out / "budget_sweep.csv", out / "budget_sweep_plot.json",
                label=cfg.eval.checkpoint or cfg.eval.endpoint or "")
    return out


def cmd_analyze(cfg: RunConfig) -> Path:
    out = prepare_run_dir(cfg)
    a = cfg.analyze
    path = Path(a.traces)
    if not path.exists():
        raise ConfigError(f"traces file {path} not found")
    records = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise InputError(f"{path}:{n}: {e}") from None
    texts = [r["text"] for r in records]
    keywords = a.keywords or tuple(k for group in analysis.DEFAULT_KEYWORDS.values() for k in group)
    report = analysis.keyword_frequency(texts, keywords)
    _dump(out / "keywords.json", report.to_dict())
    _dump(out / "keywords_plot.json", {"kind": "keyword_frequency", "unit": "per 1000 tokens",
                                       "series": report.frequency})
    _dump(out / "steps.json", {"steps": [analysis.count_steps(t) for t in texts]})
    if a.segment_endpoint:
        with _endpoint_client(a.segment_endpoint, cfg) as client:
            anns = []
            for rec in records:
                try:
                    anns.append(analysis.segment_phases(rec["text"], client, rec.get("question", "")))
                except LenPruneError as e:
                    if not isinstance(e, analysis.ParseError):
                        raise
                    log.warning("unparseable segmentation response kept in report")
                    anns.append(analysis.TraceAnnotation([], e.raw))
        dist = analysis.phase_distribution(anns)
        _dump(out / "phases.json", {"annotations": [x.to_dict() for x in anns]})
        _dump(out / "phases_plot.json", {"kind": "phase_distribution", "percent": dist.percent,
                                         "steps": dist.steps, "unresolved_chunks": dist.unresolved_chunks,
                                         "total_chunks": dist.total_chunks})
    scorer = None
    if a.scorer_checkpoint:
        scorer = PolicyScorer(load_policy(a.scorer_checkpoint, cfg))
    elif a.scorer_endpoint:
        scorer = _endpoint_client(a.scorer_endpoint, cfg)
    if scorer is not None:
        ppl = analysis.perplexity(texts, scorer)
        _dump(out / "perplexity.json", {"per_trace": ppl.per_trace, "corpus": ppl.corpus, "tokens": ppl.tokens})
    return out


COMMANDS = {"warmstart": cmd_warmstart, "prune": cmd_prune, "eval": cmd_eval,
            "budget-sweep": cmd_budget_sweep, "analyze": cmd_analyze}


def recompute_frontier(run_dir: str | Path) -> list:
    """Frontier over every round's checkpoint CSV in ``run_dir``."""
    points = []
    for p in sorted(Path(run_dir).glob("round*_checkpoints.csv")):
        points.extend(read_checkpoint_csv(p))
    return frontier(points)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg, verbose = config_from_args(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[cfg.subcommand](cfg)
    except (ConfigError, InputError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except TrainingError as e:
        extra = f" (dump: {e.dump_path})" if e.dump_path else ""
        print(f"training error: {e}{extra}", file=sys.stderr)
        return EXIT_TRAINING
    except LenPruneError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
