"""Reasoning-trace analytics: keyword rates, phase segmentation, step counts, perplexity."""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import ConfigError, ParseError
from .llm_client import approx_token_count

log = logging.getLogger(__name__)

# Illustrative groups only; no authoritative phrase list exists.
DEFAULT_KEYWORDS = {
    "hesitation": ("wait", "hmm", "alternatively", "but"),
    "verification": ("let me check", "verify", "double check", "again"),
    "computation": ("so", "therefore", "compute", "we have"),
}

PHASES = (
    "Understanding the Problem",
    "Reformulating the Problem",
    "Applying Known Theorems/Properties",
    "Breaking Down into Subproblems",
    "Computing or Simplifying Expressions",
    "Substituting Known Values or Results",
    "Reassess and Verify Local Steps",
    "Reassess the Whole Solution",
    "Exploring Alternative Approaches",
    "Finalize and Present the Answer",
)

PHASE_HINTS = (
    "what is given, what is asked, which definitions apply",
    "renaming variables or rewriting the expression into a handier form",
    "invoking a standard formula, identity or property",
    "splitting the task into smaller parts",
    "algebra or arithmetic that produces a new value",
    "plugging earlier results or constants back in",
    "checking one recent step for mistakes",
    "reviewing the whole argument for consistency",
    "trying or weighing a different method",
    "stating the final result",
)

_PHASE_LIST = "\n".join(f"{i}. **{name}**: {hint}." for i, (name, hint) in
                        enumerate(zip(PHASES, PHASE_HINTS), 1))

SEGMENTATION_PROMPT = f"""### **Task Description**

You will receive a math question and a worked solution. Steps of the solution are separated by a blank line
("\\n\\n"). Group consecutive steps into phases of problem solving and report, for each phase, its name plus
the exact text of its first and last step.

### **Rules**

1. Cover the whole solution, in order, with consecutive phases.
2. The same phase name may be used several times.
3. Copy step text exactly as written; do not paraphrase it.
4. Give only the first and last step of each phase.

### **Phase Names**

Use only these {len(PHASES)} names:

{_PHASE_LIST}

### **Output Format**

Write one block per phase, separated by a blank line:

```
[Phase X]: {{Phase Name}}
[Start]: {{exact text of the first step}}
[End]: {{exact text of the last step}}
```

X counts phases from 1. Output nothing else."""


def segmentation_request(question: str, solution: str) -> str:
    return f"{SEGMENTATION_PROMPT}\n\n### **Question**\n\n{question}\n\n### **Solution**\n\n{solution}"


# ---------------------------------------------------------------- keywords


@dataclass
class KeywordReport:
    frequency: dict[str, float]
    counts: dict[str, int]
    total_tokens: int
    per_response: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"frequency_per_1000": self.frequency, "counts": self.counts,
                "total_tokens": self.total_tokens, "per_response": self.per_response}


def keyword_frequency(corpus: Sequence[str], keywords: Sequence[str],
                      count_tokens: Callable[[str], int] = approx_token_count) -> KeywordReport:
    """Case-insensitive, non-overlapping occurrences per 1000 tokens."""
    if not keywords:
        raise ConfigError("keyword list is empty")
    counts = {k: 0 for k in keywords}
    total = 0
    per = []
    for text in corpus:
        low = text.lower()
        n_tok = count_tokens(text)
        c = {k: low.count(k.lower()) for k in keywords}
        for k in keywords:
            counts[k] += c[k]
        total += n_tok
        per.append({"tokens": n_tok, "counts": c,
                    "frequency": {k: (1000.0 * v / n_tok if n_tok else 0.0) for k, v in c.items()}})
    if total == 0:
        return KeywordReport({}, {}, 0, per)
    freq = {k: 1000.0 * v / total for k, v in counts.items()}
    return KeywordReport(freq, counts, total, per)


# ---------------------------------------------------------------- steps

_DELIM = "\n\n"


def step_segments(trace: str) -> list[tuple[int, int]]:
    """Character spans of the nonempty "\\n\\n"-separated segments."""
    spans = []
    pos = 0
    for part in trace.split(_DELIM):
        if part.strip():
            spans.append((pos, pos + len(part)))
        pos += len(part) + len(_DELIM)
    return spans


def count_steps(trace: str, span: tuple[int, int] | None = None) -> int:
    """Number of nonempty step segments intersecting ``span`` (default: whole trace)."""
    start, end = span if span is not None else (0, len(trace))
    if not 0 <= start <= end <= len(trace):
        raise ConfigError(f"span {span} outside trace of length {len(trace)}")
    return sum(1 for a, b in step_segments(trace) if a < end and b > start)


# ---------------------------------------------------------------- segmentation


@dataclass
class Chunk:
    phase: str
    start_excerpt: str
    end_excerpt: str
    start: int | None = None
    end: int | None = None
    steps: int = 0
    resolved: bool = False
    fuzzy: bool = False
    clipped: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TraceAnnotation:
    chunks: list[Chunk]
    raw_response: str = ""

    @property
    def resolved(self) -> list[Chunk]:
        return [c for c in self.chunks if c.resolved]

    def to_dict(self) -> dict:
        return {"chunks": [c.to_dict() for c in self.chunks], "raw_response": self.raw_response}


_BLOCK_RE = re.compile(
    r"\[\s*Phase\s*(\d+)\s*\]\s*:\s*(.+?)\s*\n\s*\[\s*Start\s*\]\s*:\s*(.*?)\s*\n\s*\[\s*End\s*\]\s*:\s*(.*?)\s*"
    r"(?=\n\s*\[\s*Phase|\n\s*```|\Z)",
    re.S | re.I,
)


def parse_phase_blocks(response: str) -> list[tuple[str, str, str]]:
    """(phase name, start excerpt, end excerpt) triples from an LLM response."""
    blocks = [(m.group(2).strip(), m.group(3).strip(), m.group(4).strip()) for m in _BLOCK_RE.finditer(response)]
    if not blocks:
        raise ParseError("no [Phase X]/[Start]/[End] blocks found", raw=response)
    return blocks


def _normalized_index(text: str) -> tuple[str, list[int]]:
    """Whitespace-collapsed copy of ``text`` and a map back to original offsets."""
    out, where = [], []
    prev_space = False
    for i, ch in enumerate(text):
        if ch.isspace():
            if not prev_space and out:
                out.append(" ")
                where.append(i)
            prev_space = True
        else:
            out.append(ch)
            where.append(i)
            prev_space = False
    return "".join(out), where


def _norm(s: str) -> str:
    return " ".join(s.split())


def locate(trace: str, excerpt: str, start_at: int = 0) -> tuple[int, int, bool] | None:
    """(start, end, fuzzy) of ``excerpt`` in ``trace``; exact match first."""
    if not excerpt:
        return None
    i = trace.find(excerpt, start_at)
    if i < 0:
        i = trace.find(excerpt)
    if i >= 0:
        return i, i + len(excerpt), False
    target = _norm(excerpt)
    if not target:
        return None
    flat, where = _normalized_index(trace)
    j = flat.find(target, _flat_pos(where, start_at))
    if j < 0:
        j = flat.find(target)
    if j < 0:
        return None
    return where[j], where[j + len(target) - 1] + 1, True


def _flat_pos(where: list[int], orig: int) -> int:
    for k, w in enumerate(where):
        if w >= orig:
            return k
    return len(where)


def annotate(trace: str, blocks: Iterable[tuple[str, str, str]], raw: str = "") -> TraceAnnotation:
    """Anchor parsed phase blocks in the trace by string matching."""
    if not trace:
        raise ConfigError("trace is empty")
    chunks = []
    cursor = 0
    prev_end = 0
    for phase, s_ex, e_ex in blocks:
        ch = Chunk(phase, s_ex, e_ex)
        chunks.append(ch)
        s = locate(trace, s_ex, cursor)
        if s is None:
            continue
        e = locate(trace, e_ex, s[0])
        if e is None or e[1] < s[0]:
            continue
        start, end = s[0], e[1]
        if start < prev_end:
            log.info("clipping chunk %r start %d to previous end %d", phase, start, prev_end)
            ch.clipped = True
            start = prev_end
            if start >= end:
                continue
        ch.start, ch.end = start, end
        ch.fuzzy = s[2] or e[2]
        ch.steps = max(1, count_steps(trace, (start, end)))
        ch.resolved = True
        cursor = prev_end = end
    return TraceAnnotation(chunks, raw)


def segment_phases(trace: str, client, question: str = "") -> TraceAnnotation:
    """Ask the LLM for phase boundaries and anchor them in ``trace``."""
    if not trace:
        raise ConfigError("trace is empty")
    result = client.complete(None, segmentation_request(question, trace), {"temperature": 0})
    return annotate(trace, parse_phase_blocks(result.text), result.text)


@dataclass
class PhaseDistribution:
    percent: dict[str, float]
    steps: dict[str, int]
    unresolved_chunks: int
    total_chunks: int


def phase_distribution(annotations: Sequence[TraceAnnotation]) -> PhaseDistribution:
    steps: dict[str, int] = defaultdict(int)
    unresolved = total = 0
    for ann in annotations:
        for c in ann.chunks:
            total += 1
            if c.resolved:
                steps[c.phase] += c.steps
            else:
                unresolved += 1
    n = sum(steps.values())
    pct = {k: 100.0 * v / n for k, v in steps.items()} if n else {}
    return PhaseDistribution(pct, dict(steps), unresolved, total)


# ---------------------------------------------------------------- perplexity


@dataclass
class PerplexityReport:
    per_trace: list[float]
    corpus: float
    tokens: list[int]


def perplexity_from_logprobs(scored: Sequence[Sequence[float | None]]) -> PerplexityReport:
    """exp(-mean log-prob) per trace and token-weighted over the corpus.

    ``None`` entries (unconditioned first tokens) are skipped.
    """
    per, ntok = [], []
    total_nll, total_n = 0.0, 0
    for lps in scored:
        vals = [float(x) for x in lps if x is not None]
        ntok.append(len(vals))
        if vals:
            nll = -math.fsum(vals)
            per.append(math.exp(nll / len(vals)))
            total_nll += nll
            total_n += len(vals)
        else:
            per.append(float("nan"))
    corpus = math.exp(total_nll / total_n) if total_n else float("nan")
    return PerplexityReport(per, corpus, ntok)


def perplexity(traces: Sequence[str], scorer) -> PerplexityReport:
    """Score each trace through ``scorer.score_logprobs`` and aggregate."""
    return perplexity_from_logprobs([scorer.score_logprobs(t) for t in traces])
