"""Independent reference implementations used by the tests.

These are written the slow, obvious way on purpose and share no code with
the package beyond the public data types.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch

from lenprune.policy import logprobs


# ---------------------------------------------------------------- reward

def reward_predicate(position: int, limit: int, kind: str) -> int:
    """Planted answer ending at token ``position`` under limit ``limit``."""
    return int(kind == "correct" and position <= limit)


# ---------------------------------------------------------------- sampling

def nucleus_probs(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    kept, mass = [], 0.0
    for i in order:
        kept.append(i)
        mass += p[i]
        if mass >= top_p:
            break
    out = np.zeros_like(p)
    out[kept] = p[kept]
    return out / out.sum()


# ---------------------------------------------------------------- gradients

def weighted_logprob(policy, tokens, weights) -> float:
    return float(np.dot(logprobs(policy, tokens), weights))


def finite_difference(policy, tokens, weights, name: str, index: tuple, h: float = 1e-5) -> float:
    p = dict(policy.model.named_parameters())[name]
    with torch.no_grad():
        orig = p[index].item()
        p[index] = orig + h
        up = weighted_logprob(policy, tokens, weights)
        p[index] = orig - h
        down = weighted_logprob(policy, tokens, weights)
        p[index] = orig
    return (up - down) / (2 * h)


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------- advantages / surrogate

def advantages_oracle(rewards):
    n = len(rewards)
    mean = math.fsum(rewards) / n
    var = math.fsum((r - mean) ** 2 for r in rewards) / n
    if all(r == rewards[0] for r in rewards):
        return [0.0] * n
    sd = max(math.sqrt(var), 1e-8)
    return [(r - mean) / sd for r in rewards]


def surrogate_oracle(adv, new, old, eps):
    terms = []
    for a, ns, os_ in zip(adv, new, old):
        for n, o in zip(ns, os_):
            rho = math.exp(n - o)
            terms.append(-min(rho * a, min(max(rho, 1 - eps), 1 + eps) * a))
    return math.fsum(terms) / len(terms) if terms else 0.0


# ---------------------------------------------------------------- selection / frontier

def select_oracle(rows, baseline, max_rel_drop=Fraction(1, 10)):
    """rows: (step, round, pass1 Fraction, mean_len Fraction). Exact arithmetic."""
    thr = (1 - max_rel_drop) * baseline
    ok = [r for r in rows if r[2] >= thr]
    if ok:
        best = None
        for r in ok:
            if best is None or (r[3], r[1], r[0]) < (best[3], best[1], best[0]):
                best = r
        return best, False
    best = None
    for r in rows:
        key = (r[2], -r[3], -r[1], -r[0])
        if best is None or key > (best[2], -best[3], -best[1], -best[0]):
            best = r
    return best, True


def frontier_oracle(points):
    """Kept iff no other point is at most as long with strictly higher pass1."""
    keep = []
    for i, p in enumerate(points):
        dominated = any(q.mean_len <= p.mean_len and q.pass1 > p.pass1 for j, q in enumerate(points) if j != i)
        if not dominated:
            keep.append(p)
    return keep


# ---------------------------------------------------------------- analysis

def naive_count(text: str, keyword: str) -> int:
    t, k = text.lower(), keyword.lower()
    n, i = 0, 0
    while i + len(k) <= len(t):
        if t[i : i + len(k)] == k:
            n += 1
            i += len(k)
        else:
            i += 1
    return n


def naive_steps(trace: str, start: int, end: int) -> int:
    n, pos = 0, 0
    for seg in trace.split("\n\n"):
        a, b = pos, pos + len(seg)
        if seg.strip() and a < end and b > start:
            n += 1
        pos = b + 2
    return n


# ---------------------------------------------------------------- fixture policies

def constant_policy(probs: dict[str, float], cfg=None, dtype=torch.float64):
    """Policy whose next-token distribution ignores context.

    Zeroing the final layer-norm gain makes its output the bias vector, so the
    logits are one fixed column of the head.  Tokens not in ``probs`` share the
    remaining mass equally.
    """
    from lenprune.policy import ModelConfig, Policy

    pol = Policy(cfg or ModelConfig(d_model=8, n_heads=1, n_layers=1, d_ff=8, max_len=640), dtype=dtype)
    vocab = pol.vocab
    rest = 1.0 - sum(probs.values())
    others = [i for i in range(len(vocab)) if vocab.tokens[i] not in probs and i != vocab.pad_id]
    p = torch.zeros(len(vocab), dtype=torch.float64)
    for tok, q in probs.items():
        p[vocab[tok]] = q
    p[others] = rest / len(others)
    with torch.no_grad():
        m = pol.model
        m.ln_f.weight.zero_()
        m.ln_f.bias.zero_()
        m.ln_f.bias[0] = 1.0
        m.head.weight.zero_()
        m.head.weight[:, 0] = torch.where(p > 0, p.log(), torch.full_like(p, -1e4)).to(dtype)
    return pol
