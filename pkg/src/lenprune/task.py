"""Synthetic chain-arithmetic reasoning task.

An instance is a start value followed by ``k`` labelled operations applied
left to right modulo a prime.  The toy policy is warm-started on deliberately
verbose traces (restatements, repeated computations, reflection phrases) so
that it over-generates in the same way a distilled long-CoT model does.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, InputError

OPS = {"add": "+", "sub": "-", "mul": "*"}
SYMBOL_TO_OP = {v: k for k, v in OPS.items()}
STEP_LABELS = "abcdefghijklmnopqrstuvwxyz"

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
LIMIT = "<lim>"
THINK = "<think>"
END_THINK = "</think>"
ANSWER = "<answer>"
END_ANSWER = "</answer>"
FINAL_ANSWER = "**Final Answer:**"

SPECIAL_TOKENS = (PAD, BOS, EOS, LIMIT, THINK, END_THINK, ANSWER, END_ANSWER, FINAL_ANSWER)
_PUNCT = ("\n\n", "\n", " ", "=", ":", ".", ",", "?", "(", ")")

# Table-3 style instruction used for the R1-distilled family.
SYSTEM_PROMPT_TEMPLATE = (
    "You answer the user's question. Put your reasoning between <think> and </think>, "
    "then give only the final answer between <answer> and </answer>. "
    "Your whole reply must fit in {N} tokens."
)

DEFAULT_REFLECTIONS = (
    "wait",
    "hmm let me check that again",
    "wait let me verify each step",
    "let me double check the result",
    "so the answer should be correct",
)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    d = 3
    while d * d <= n:
        if n % d == 0:
            return False
        d += 2
    return True


class Vocab:
    """Closed vocabulary with greedy longest-match encoding.

    Every marker is a single entry, so clipping a token sequence at any
    position never splits one.
    """

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate vocabulary entries")
        self.tokens = tuple(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        self._by_first: dict[str, list[str]] = {}
        for t in sorted(self.tokens, key=len, reverse=True):
            self._by_first.setdefault(t[0], []).append(t)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.id_of[token]

    def encode(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for cand in self._by_first.get(text[i], ()):
                if text.startswith(cand, i):
                    ids.append(self.id_of[cand])
                    i += len(cand)
                    break
            else:
                raise InputError(f"character {text[i]!r} at offset {i} is not in the vocabulary")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise InputError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return "".join(out)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\x00".join(self.tokens).encode()).hexdigest()[:16]

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS]


def default_vocab() -> Vocab:
    tokens = list(SPECIAL_TOKENS) + list(_PUNCT) + list("0123456789") + list("+-*")
    tokens += list("abcdefghijklmnopqrstuvwxyz")
    return Vocab(tokens)


VOCAB = default_vocab()


@dataclass(frozen=True)
class TaskInstance:
    prompt_text: str
    start_value: int
    ops: tuple[tuple[str, int], ...]
    modulus: int
    gold_answer: int

    def to_json(self) -> str:
        d = asdict(self)
        d["ops"] = [list(o) for o in self.ops]
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        return cls(
            prompt_text=d["prompt_text"],
            start_value=int(d["start_value"]),
            ops=tuple((str(o), int(v)) for o, v in d["ops"]),
            modulus=int(d["modulus"]),
            gold_answer=int(d["gold_answer"]),
        )


def apply_op(value: int, op: str, operand: int, modulus: int) -> int:
    if op == "add":
        return (value + operand) % modulus
    if op == "sub":
        return (value - operand) % modulus
    if op == "mul":
        return (value * operand) % modulus
    raise ConfigError(f"unknown operator {op!r}")


def fold(start_value: int, ops: Sequence[tuple[str, int]], modulus: int) -> int:
    v = start_value % modulus
    for op, d in ops:
        v = apply_op(v, op, d, modulus)
    return v


def prompt_text_for(start_value: int, ops: Sequence[tuple[str, int]], modulus: int) -> str:
    parts = [str(start_value)]
    for label, (op, d) in zip(STEP_LABELS, ops):
        parts.append(f"{label}{OPS[op]}{d}")
    return " ".join(parts) + f" mod {modulus}"


def make_instance(start_value: int, ops: Sequence[tuple[str, int]], modulus: int) -> TaskInstance:
    if not is_prime(modulus):
        raise ConfigError(f"modulus {modulus} is not prime")
    ops = tuple((op, int(d)) for op, d in ops)
    if not ops:
        raise ConfigError("an instance needs at least one operation")
    if len(ops) > len(STEP_LABELS):
        raise ConfigError(f"at most {len(STEP_LABELS)} operations are supported")
    for op, d in ops:
        if op not in OPS:
            raise ConfigError(f"unknown operator {op!r}")
        if not 0 <= d < modulus:
            raise ConfigError(f"operand {d} must lie in [0, {modulus})")
    if not 0 <= start_value < modulus:
        raise ConfigError(f"start value {start_value} must lie in [0, {modulus})")
    return TaskInstance(
        prompt_text=prompt_text_for(start_value, ops, modulus),
        start_value=start_value,
        ops=ops,
        modulus=modulus,
        gold_answer=fold(start_value, ops, modulus),
    )


def generate_instance(seed: int, k: int, modulus: int, max_operand: int | None = None) -> TaskInstance:
    """Deterministically draw one instance with ``k`` operations."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not is_prime(modulus):
        raise ConfigError(f"modulus {modulus} is not prime")
    hi = modulus - 1 if max_operand is None else min(max_operand, modulus - 1)
    rng = random.Random(f"instance:{seed}:{k}:{modulus}:{hi}")
    start = rng.randrange(modulus)
    ops = [(rng.choice(tuple(OPS)), rng.randint(0, hi)) for _ in range(k)]
    return make_instance(start, ops, modulus)


@dataclass(frozen=True)
class TaskConfig:
    modulus: int = 7
    k_min: int = 2
    k_max: int = 8
    max_operand: int | None = None

    def validate(self) -> None:
        if not is_prime(self.modulus):
            raise ConfigError(f"modulus {self.modulus} is not prime")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= k_min <= k_max")


def instance_set(seed: int, n: int, cfg: TaskConfig) -> list[TaskInstance]:
    """``n`` instances whose k is drawn uniformly from [k_min, k_max]."""
    cfg.validate()
    rng = random.Random(f"set:{seed}")
    out = []
    for i in range(n):
        k = rng.randint(cfg.k_min, cfg.k_max)
        out.append(generate_instance(seed * 1_000_003 + i, k, cfg.modulus, cfg.max_operand))
    return out


def write_jsonl(path: str | Path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(inst.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[TaskInstance]:
    with open(path) as f:
        return [TaskInstance.from_dict(json.loads(line)) for line in f if line.strip()]


@dataclass(frozen=True)
class VerboseTraceStyle:
    restatement_repeats: int = 0
    per_step_recompute: int = 1
    reflection_phrases: tuple[str, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        if self.restatement_repeats < 0:
            raise ConfigError("restatement_repeats must be >= 0")
        if self.per_step_recompute < 1:
            raise ConfigError("per_step_recompute must be >= 1")


MINIMAL_STYLE = VerboseTraceStyle()


def step_line(label: str, value: int, op: str, operand: int, result: int) -> str:
    return f"{label} {value}{OPS[op]}{operand}={result}"


def render_trace_text(inst: TaskInstance, style: VerboseTraceStyle) -> str:
    style.validate()
    parts = [THINK]
    for _ in range(style.restatement_repeats):
        parts.append(f"we have {inst.prompt_text}\n\n")
    v = inst.start_value
    for label, (op, d) in zip(STEP_LABELS, inst.ops):
        r = apply_op(v, op, d, inst.modulus)
        line = step_line(label, v, op, d, r)
        parts.append(line + "\n\n")
        parts.extend(f"again {line}\n\n" for _ in range(style.per_step_recompute - 1))
        v = r
    parts.extend(f"{p}\n\n" for p in style.reflection_phrases)
    parts.append(f"{END_THINK}\n\n{FINAL_ANSWER}\n\n{ANSWER}{inst.gold_answer}{END_ANSWER}{EOS}")
    return "".join(parts)


def render_verbose_trace(inst: TaskInstance, style: VerboseTraceStyle, vocab: Vocab = VOCAB) -> list[int]:
    """Token ids of a correct trace for ``inst`` written in ``style``."""
    return vocab.encode(render_trace_text(inst, style))


def minimal_length(inst: TaskInstance, vocab: Vocab = VOCAB) -> int:
    return len(render_verbose_trace(inst, MINIMAL_STYLE, vocab))


@dataclass(frozen=True)
class StyleDistribution:
    """Per-instance random verbosity used for warm-start data."""

    max_restatements: int = 3
    max_recompute: int = 4
    max_reflections: int = 4
    reflections: tuple[str, ...] = DEFAULT_REFLECTIONS
    max_trace_tokens: int = 480

    def draw(self, rng: random.Random, inst: TaskInstance, vocab: Vocab = VOCAB) -> VerboseTraceStyle:
        for _ in range(64):
            n_ref = rng.randint(0, self.max_reflections)
            style = VerboseTraceStyle(
                restatement_repeats=rng.randint(0, self.max_restatements),
                per_step_recompute=rng.randint(1, self.max_recompute),
                reflection_phrases=tuple(rng.choice(self.reflections) for _ in range(n_ref)),
            )
            if len(render_verbose_trace(inst, style, vocab)) <= self.max_trace_tokens:
                return style
        return MINIMAL_STYLE


def build_system_prompt(limit: int) -> str:
    """Instruction text announcing the output-length limit to an external model."""
    if not isinstance(limit, int) or limit <= 0:
        raise ConfigError(f"length limit must be a positive integer, got {limit!r}")
    return SYSTEM_PROMPT_TEMPLATE.replace("{N}", str(limit))


def encode_prompt(inst: TaskInstance, limit: int, vocab: Vocab = VOCAB) -> list[int]:
    """Toy-policy prompt: a compact limit header followed by the question.

    The header is the token-level analogue of the length instruction in
    :func:`build_system_prompt`; the full English template would not fit
    the toy context window.
    """
    if limit <= 0:
        raise ConfigError(f"length limit must be positive, got {limit}")
    return vocab.encode(f"{BOS}{LIMIT}{limit}\n{inst.prompt_text}\n")
