"""Toy causal transformer policy: exact log-probs, nucleus sampling, gradients."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .task import END_THINK, VOCAB, Vocab


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(VOCAB)
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 640
    d_ff: int = 256
    rope: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.rope and (self.d_model // self.n_heads) % 2:
            raise ConfigError("rotary embeddings need an even head width")
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_len, self.d_ff) < 1:
            raise ConfigError("model dimensions must be positive")


def rotate(x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Rotary position embedding on the last dim of (B, H, T, Dh) at positions ``pos`` (T,)."""
    half = x.shape[-1] // 2
    freq = 10000.0 ** (-torch.arange(half, dtype=x.dtype) / half)
    ang = pos.to(x.dtype)[:, None] * freq[None, :]
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.rope = cfg.rope
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, cfg.d_ff)
        self.out = nn.Linear(cfg.d_ff, cfg.d_model)

    def _split(self, x, pos):
        b, t, c = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(c, dim=-1)
        shape = (b, t, self.n_heads, c // self.n_heads)
        q, k, v = [z.view(shape).transpose(1, 2) for z in (q, k, v)]
        if self.rope:
            q, k = rotate(q, pos), rotate(k, pos)
        return q, k, v

    def _merge(self, x, y):
        b, h, t, dh = y.shape
        x = x + self.proj(y.transpose(1, 2).reshape(b, t, h * dh))
        return x + self.out(F.gelu(self.fc(self.ln2(x))))

    def forward(self, x):
        q, k, v = self._split(x, torch.arange(x.shape[1]))
        return self._merge(x, F.scaled_dot_product_attention(q, k, v, is_causal=True))

    def step(self, x, cache, t):
        """One decoding position; ``cache`` holds preallocated (K, V)."""
        q, k, v = self._split(x, torch.tensor([t]))
        kc, vc = cache
        kc[:, :, t : t + 1] = k
        vc[:, :, t : t + 1] = v
        att = (q @ kc[:, :, : t + 1].transpose(-2, -1)) / math.sqrt(q.shape[-1])
        return self._merge(x, att.softmax(-1) @ vc[:, :, : t + 1])


class TinyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = None if cfg.rope else nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        t = tokens.shape[1]
        if t > self.cfg.max_len:
            raise InputError(f"sequence length {t} exceeds context {self.cfg.max_len}")
        x = self.tok(tokens)
        if self.pos is not None:
            x = x + self.pos.weight[:t]
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x))

    def new_cache(self, batch: int, length: int):
        c = self.cfg
        shape = (batch, c.n_heads, length, c.d_model // c.n_heads)
        dt = self.tok.weight.dtype
        return [(torch.empty(shape, dtype=dt), torch.empty(shape, dtype=dt)) for _ in self.blocks]

    def step(self, tokens: torch.Tensor, cache, t: int) -> torch.Tensor:
        """Logits for position ``t`` given token ids (B,) at that position."""
        x = self.tok(tokens)
        if self.pos is not None:
            x = x + self.pos.weight[t]
        x = x[:, None, :]
        for blk, kv in zip(self.blocks, cache):
            x = blk.step(x, kv, t)
        return self.head(self.ln_f(x))[:, 0]


class Policy:
    """Trainable parameters plus the vocabulary they were trained against.

    ``version`` counts optimizer updates.  Treat instances as snapshots:
    :meth:`clone` before mutating if the original must survive.
    """

    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocab = VOCAB, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        self.cfg = cfg or ModelConfig(vocab_size=len(vocab))
        if self.cfg.vocab_size != len(vocab):
            raise ConfigError("model vocab_size does not match vocabulary")
        self.vocab = vocab
        gen = torch.Generator().manual_seed(seed)
        self.model = TinyTransformer(self.cfg)
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "ln" in name:
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
        self.model.to(dtype)
        self.version = 0

    @property
    def dtype(self) -> torch.dtype:
        return self.model.tok.weight.dtype

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    def clone(self) -> "Policy":
        new = copy.copy(self)
        new.model = copy.deepcopy(self.model)
        return new

    def to(self, dtype: torch.dtype) -> "Policy":
        new = self.clone()
        new.model.to(dtype)
        return new

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def _check_ids(policy: Policy, ids) -> None:
    if len(ids) and (min(ids) < 0 or max(ids) >= policy.cfg.vocab_size):
        raise InputError("token id outside vocabulary")


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    lens = torch.tensor([len(s) for s in seqs])
    return out, lens


def next_token_logprobs(policy: Policy, tokens: torch.Tensor) -> torch.Tensor:
    """Full log-distribution over the vocab at every position: (B, T-1, V)."""
    return F.log_softmax(policy.model(tokens[:, :-1]), dim=-1)


def batch_logprobs(policy: Policy, tokens: torch.Tensor) -> torch.Tensor:
    """Log-prob of each realized next token, (B, T-1). Differentiable."""
    logp = next_token_logprobs(policy, tokens)
    return logp.gather(-1, tokens[:, 1:, None])[..., 0]


def logprobs(policy: Policy, tokens: Sequence[int]) -> np.ndarray:
    """Per-token log-probs of ``tokens[1:]`` given their prefixes."""
    _check_ids(policy, tokens)
    if len(tokens) < 2:
        return np.zeros(0)
    with torch.no_grad():
        lp = batch_logprobs(policy, torch.as_tensor([list(tokens)]))
    return lp[0].numpy().astype(np.float64)


def grad_logprob(policy: Policy, tokens: Sequence[int], weights: Sequence[float]) -> dict[str, torch.Tensor]:
    """Gradient of ``sum_i weights[i] * logprob[i]`` w.r.t. every parameter tensor."""
    _check_ids(policy, tokens)
    if len(weights) != len(tokens) - 1:
        raise InputError(f"expected {len(tokens) - 1} weights, got {len(weights)}")
    return grad_weighted_batch(policy, [tokens], [weights])


def grad_weighted_batch(policy: Policy, seqs, weights) -> dict[str, torch.Tensor]:
    params = policy.named_tensors()
    for p in params.values():
        p.grad = None
    tokens, _ = pad_batch(seqs, policy.vocab.pad_id)
    w = torch.zeros(tokens.shape[0], tokens.shape[1] - 1, dtype=policy.dtype)
    for i, wi in enumerate(weights):
        w[i, : len(wi)] = torch.as_tensor(np.asarray(wi, dtype=np.float64), dtype=policy.dtype)
    obj = (batch_logprobs(policy, tokens) * w).sum()
    grads = torch.autograd.grad(obj, list(params.values()), allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(params.items(), grads)}


@dataclass(frozen=True)
class SamplingConfig:
    """``temperature == 0`` selects greedy (argmax) decoding."""

    temperature: float = 0.6
    top_p: float = 0.95
    max_new_tokens: int = 512
    rng_seed: int = 0

    def validate(self) -> None:
        if not self.temperature >= 0:
            raise ConfigError("temperature must be > 0 (or exactly 0 for greedy)")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")


@dataclass
class Rollout:
    prompt_ids: list[int]
    token_ids: list[int]
    logprobs: list[float]
    text: str = ""
    finished: bool = False
    reward: float | None = None
    clipped: bool = False
    record: object = None
    forced: bool = False
    think_tokens: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def full_ids(self) -> list[int]:
        return self.prompt_ids + self.token_ids


def nucleus_choice(logits: torch.Tensor, temperature: float, top_p: float, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draw from the tempered nucleus distribution, one per row.

    ``u`` holds one uniform variate per row, so each row's draw depends only on
    its own logits and its own random stream.
    """
    if temperature == 0:
        return logits.argmax(-1)
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    sp, idx = probs.sort(dim=-1, descending=True, stable=True)
    cum = sp.cumsum(-1)
    keep = (cum - sp) < top_p
    keep[:, 0] = True
    sp = sp * keep
    cum = sp.cumsum(-1)
    target = u.double()[:, None] * cum[:, -1:]
    pick = (cum <= target).sum(-1).clamp(max=keep.sum(-1) - 1)
    return idx.gather(-1, pick[:, None])[:, 0]


def nucleus_set(logits: torch.Tensor, temperature: float, top_p: float) -> set[int]:
    """Token ids in the minimal nucleus of cumulative tempered mass >= top_p."""
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    sp, idx = probs.sort(dim=-1, descending=True, stable=True)
    cum = sp.cumsum(0)
    keep = (cum - sp) < top_p
    keep[0] = True
    return set(idx[keep].tolist())


def row_uniforms(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).random(n)


@dataclass(frozen=True)
class Forcing:
    """Budget-forcing controls for :func:`generate`."""

    budget: int
    suffix: tuple[int, ...]
    answer_cap: int


@torch.no_grad()
def generate(policy: Policy, prompts: Sequence[Sequence[int]], cfg: SamplingConfig,
             seeds: Sequence[int] | None = None, forcing: Forcing | None = None) -> list[Rollout]:
    """Batched autoregressive sampling with a KV cache.

    Row ``i`` draws from its own uniform stream seeded by ``seeds[i]``, and the
    cache always spans the full context, so a row's tokens do not depend on
    what else is in the batch.  Stored log-probs are those of the untempered
    model distribution.

    With ``forcing``, a row that has produced ``budget`` thinking tokens
    without closing its think block gets ``suffix`` injected and may then
    generate at most ``answer_cap`` further tokens.
    """
    cfg.validate()
    if not prompts:
        return []
    for p in prompts:
        if not p:
            raise InputError("empty prompt")
        _check_ids(policy, p)
    vocab = policy.vocab
    eos, end_think = vocab.eos_id, vocab[END_THINK]
    n = len(prompts)
    if seeds is None:
        seeds = [cfg.rng_seed * 1_000_003 + i for i in range(n)]
    ctx = policy.cfg.max_len
    plens = [len(p) for p in prompts]
    if max(plens) >= ctx:
        raise InputError("prompt does not fit the context window")
    u = torch.as_tensor(np.stack([row_uniforms(s, ctx) for s in seeds]))

    model = policy.model
    cache = model.new_cache(n, ctx)
    out: list[list[int]] = [[] for _ in range(n)]
    lps: list[list[float]] = [[] for _ in range(n)]
    done = [False] * n
    finished = [False] * n
    in_think = [True] * n
    think = [0] * n
    forced = [False] * n
    queue: list[list[int]] = [[] for _ in range(n)]
    answer_toks = [0] * n
    # Prompts are left-aligned; each row starts sampling once its own prompt
    # has been consumed.
    cur = torch.tensor([p[0] for p in prompts])
    for t in range(ctx - 1):
        logits = model.step(cur, cache, t)
        logp = F.log_softmax(logits, dim=-1)
        choice = nucleus_choice(logits, cfg.temperature, cfg.top_p, u[:, t + 1])
        nxt = []
        for i in range(n):
            if t + 1 < plens[i]:
                nxt.append(prompts[i][t + 1])
                continue
            if done[i]:
                nxt.append(vocab.pad_id)
                continue
            if forcing is not None and in_think[i] and think[i] >= forcing.budget:
                forced[i] = True
                queue[i] = list(forcing.suffix)
            if queue[i]:
                tok = queue[i].pop(0)
            else:
                tok = int(choice[i])
                if forced[i]:
                    answer_toks[i] += 1
            out[i].append(tok)
            lps[i].append(float(logp[i, tok]))
            if in_think[i]:
                if tok == end_think:
                    in_think[i] = False
                else:
                    think[i] += 1
            if tok == eos:
                done[i] = finished[i] = True
            elif forced[i]:
                done[i] = not queue[i] and answer_toks[i] >= forcing.answer_cap
            else:
                done[i] = len(out[i]) >= cfg.max_new_tokens
            done[i] = done[i] or plens[i] + len(out[i]) >= ctx
            nxt.append(tok)
        if all(done):
            break
        cur = torch.tensor(nxt)
    return [
        Rollout(prompt_ids=list(prompts[i]), token_ids=out[i], logprobs=lps[i],
                text=vocab.decode(out[i]), finished=finished[i], forced=forced[i],
                think_tokens=think[i])
        for i in range(n)
    ]


def sample(policy: Policy, prompt: Sequence[int], cfg: SamplingConfig) -> Rollout:
    return generate(policy, [prompt], cfg, seeds=[cfg.rng_seed])[0]


def save_checkpoint(path: str | Path, policy: Policy, step: int = 0, round_index: int = 0,
                    extra: dict | None = None) -> str:
    state = {
        "format": "lenprune-checkpoint/1",
        "model_config": policy.cfg.__dict__,
        "vocab_hash": policy.vocab.hash,
        "version": policy.version,
        "step": step,
        "round": round_index,
        "tensors": {k: v.detach().clone() for k, v in policy.model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(state, path)
    return policy.content_hash()


def load_checkpoint(path: str | Path, vocab: Vocab = VOCAB) -> tuple[Policy, dict]:
    try:
        state = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} not found") from None
    if state.get("vocab_hash") != vocab.hash:
        raise ConfigError(f"checkpoint {path} was trained against a different vocabulary")
    cfg = ModelConfig(**state["model_config"])
    tensors = state["tensors"]
    policy = Policy(cfg, vocab, dtype=next(iter(tensors.values())).dtype)
    policy.model.load_state_dict(tensors)
    policy.version = state["version"]
    meta = {k: state[k] for k in ("step", "round", "version", "extra")}
    return policy, meta
