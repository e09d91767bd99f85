"""Length-clipped binary correctness reward."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import ConfigError
from .task import ANSWER, END_ANSWER, VOCAB, Vocab


class Pattern(str, enum.Enum):
    ANSWER_TAGS = "answer_tags"
    BOXED = "boxed"


class Failure(str, enum.Enum):
    NONE = "none"
    CLIPPED_NO_ANSWER = "clipped_no_answer"
    MALFORMED = "malformed"
    WRONG_ANSWER = "wrong_answer"


@dataclass(frozen=True)
class RewardSpec:
    limit: int
    pattern: Pattern = Pattern.ANSWER_TAGS

    def __post_init__(self):
        if not isinstance(self.limit, int) or self.limit <= 0:
            raise ConfigError(f"reward limit must be a positive integer, got {self.limit!r}")
        object.__setattr__(self, "pattern", Pattern(self.pattern))


@dataclass(frozen=True)
class RewardRecord:
    reward: int
    clipped: bool
    extracted_answer: str | None
    failure_reason: Failure

    def to_dict(self) -> dict:
        return {
            "reward": self.reward,
            "clipped": self.clipped,
            "extracted_answer": self.extracted_answer,
            "failure_reason": self.failure_reason.value,
        }


def clip_tokens(tokens: Sequence[int], limit: int) -> list[int]:
    if limit <= 0:
        raise ConfigError("limit must be positive")
    return list(tokens[:limit])


_TAG_RE = re.compile(re.escape(ANSWER) + r"(.*?)" + re.escape(END_ANSWER), re.S)


def _last_boxed(text: str) -> str | None:
    found = None
    key = "\\boxed{"
    i = text.find(key)
    while i != -1:
        depth, j = 1, i + len(key)
        while j < len(text) and depth:
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
            j += 1
        if depth == 0:
            found = text[i + len(key) : j - 1]
        i = text.find(key, i + 1)
    return found


def extract_answer(text: str, pattern: Pattern | str = Pattern.ANSWER_TAGS) -> str | None:
    """Content of the last complete answer span, or ``None``."""
    pattern = Pattern(pattern)
    if pattern is Pattern.BOXED:
        return _last_boxed(text)
    matches = _TAG_RE.findall(text)
    return matches[-1] if matches else None


def normalize(value: str) -> Fraction | str:
    """Canonical form for answer comparison.

    Numbers (integers, decimals, simple ``a/b`` fractions) compare as exact
    rationals, so ``007``, ``+7`` and ``7.0`` agree; anything else compares as
    its whitespace-stripped string.
    """
    s = "".join(value.split())
    if s.startswith("+"):
        s = s[1:]
    try:
        if "/" in s:
            num, den = s.split("/", 1)
            return Fraction(Fraction(num), Fraction(den))
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return s


def answers_match(extracted: str, gold) -> bool:
    return normalize(extracted) == normalize(str(gold))


def score_text(text: str, gold, pattern: Pattern | str = Pattern.ANSWER_TAGS, clipped: bool = False) -> RewardRecord:
    """Score already-clipped output text."""
    ans = extract_answer(text, pattern)
    if ans is None:
        reason = Failure.CLIPPED_NO_ANSWER if clipped else Failure.MALFORMED
        return RewardRecord(0, clipped, None, reason)
    if not answers_match(ans, gold):
        return RewardRecord(0, clipped, ans, Failure.WRONG_ANSWER)
    return RewardRecord(1, clipped, ans, Failure.NONE)


def score(tokens: Sequence[int], gold, spec: RewardSpec, vocab: Vocab = VOCAB) -> RewardRecord:
    """Reward of an output token sequence under the length limit.

    The output is clipped to ``spec.limit`` tokens first; an answer that only
    completes after the limit cannot be extracted and earns nothing.
    """
    clipped = len(tokens) > spec.limit
    return score_text(vocab.decode(clip_tokens(tokens, spec.limit)), gold, spec.pattern, clipped)


def score_rollout(rollout, gold, spec: RewardSpec, vocab: Vocab = VOCAB) -> RewardRecord:
    rec = score(rollout.token_ids, gold, spec, vocab)
    rollout.reward = float(rec.reward)
    rollout.clipped = rec.clipped
    rollout.record = rec
    return rec
