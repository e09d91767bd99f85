"""Client for OpenAI-compatible chat/completions endpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from .errors import (AuthError, CapabilityError, ConfigError, MalformedResponseError, TransportError)

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    sampling: dict = field(default_factory=dict)
    audit_log: str | None = None

    def validate(self) -> None:
        if not self.base_url or not self.model:
            raise ConfigError("endpoint needs base_url and model")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "EndpointConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class CompletionResult:
    text: str
    finish_reason: str | None
    prompt_tokens: int | None
    completion_tokens: int
    approximate_tokens: bool = False
    logprobs: list[float] | None = None
    latency: float = 0.0
    retries: int = 0
    request_id: str = ""


def approx_token_count(text: str) -> int:
    """Fallback when a backend reports no usage: one token per four bytes."""
    return math.ceil(len(text.encode("utf-8")) / 4)


class LLMClient:
    """Thread-safe handle with bounded in-flight requests and retry/backoff."""

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self._http = httpx.Client(base_url=cfg.base_url.rstrip("/") + "/", timeout=cfg.timeout,
                                  transport=transport)
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)
        self._audit_lock = threading.Lock()
        self._sleep = sleep
        self._jitter = random.Random(seed)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _api_key(self) -> str:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise AuthError(f"environment variable {self.cfg.api_key_env} is not set")
        return key

    def _audit(self, record: dict) -> None:
        if not self.cfg.audit_log:
            return
        with self._audit_lock, open(self.cfg.audit_log, "a") as f:
            f.write(json.dumps(record, default=str) + "\n")

    def _backoff(self, attempt: int) -> float:
        cap = min(self.cfg.backoff_max, self.cfg.backoff_base * 2**attempt)
        return cap * (0.5 + 0.5 * self._jitter.random())

    def post(self, path: str, payload: dict) -> tuple[dict, int, float, str]:
        """POST with retries; returns (json body, retries used, latency, request id)."""
        headers = {"Authorization": f"Bearer {self._api_key()}", "Content-Type": "application/json"}
        request_id = uuid.uuid4().hex
        headers["X-Request-ID"] = request_id
        attempts: list[Any] = []
        t0 = time.monotonic()
        last_error = "no attempt made"
        body = None
        with self._slots:
            for attempt in range(self.cfg.max_retries + 1):
                if attempt:
                    self._sleep(self._backoff(attempt - 1))
                try:
                    resp = self._http.post(path.lstrip("/"), json=payload, headers=headers)
                except (httpx.TimeoutException, httpx.TransportError) as e:
                    last_error = f"{type(e).__name__}: {e}"
                    attempts.append(last_error)
                    continue
                attempts.append(resp.status_code)
                if resp.status_code in (401, 403):
                    self._audit({"request_id": request_id, "path": path, "payload": payload,
                                 "attempts": attempts, "error": "auth"})
                    raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
                if resp.status_code in RETRYABLE_STATUS:
                    last_error = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    self._audit({"request_id": request_id, "path": path, "payload": payload,
                                 "attempts": attempts, "error": resp.text[:2000]})
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    body = resp.json()
                except ValueError:
                    raise MalformedResponseError("response is not JSON", raw=resp.text) from None
                break
        latency = time.monotonic() - t0
        retries = len(attempts) - 1
        self._audit({"request_id": request_id, "path": path, "payload": payload, "attempts": attempts,
                     "retries": max(retries, 0), "latency": latency, "response": body})
        if body is None:
            raise TransportError(f"gave up after {len(attempts)} attempts: {last_error}")
        if retries:
            log.info("request %s succeeded after %d retries", request_id, retries)
        return body, retries, latency, request_id

    def _sampling(self, sampling: dict | None) -> dict:
        out = dict(self.cfg.sampling)
        out.update(sampling or {})
        return out

    def complete(self, system: str | None, user: str, sampling: dict | None = None) -> CompletionResult:
        messages = ([{"role": "system", "content": system}] if system else []) + [{"role": "user", "content": user}]
        payload = {"model": self.cfg.model, "messages": messages, **self._sampling(sampling)}
        body, retries, latency, rid = self.post("chat/completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            finish = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError):
            raise MalformedResponseError("chat response lacks choices[0].message.content", raw=body) from None
        return self._result(body, text, finish, latency, retries, rid)

    def complete_text(self, prompt: str, sampling: dict | None = None) -> CompletionResult:
        """Raw continuation of ``prompt`` (completions endpoint)."""
        payload = {"model": self.cfg.model, "prompt": prompt, **self._sampling(sampling)}
        body, retries, latency, rid = self.post("completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["text"] or ""
            finish = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError):
            raise MalformedResponseError("completion response lacks choices[0].text", raw=body) from None
        return self._result(body, text, finish, latency, retries, rid)

    @staticmethod
    def _result(body, text, finish, latency, retries, rid) -> CompletionResult:
        usage = body.get("usage") or {}
        n = usage.get("completion_tokens")
        approx = n is None
        if approx:
            n = approx_token_count(text)
        if n < 0:
            raise MalformedResponseError("negative token count", raw=body)
        return CompletionResult(text, finish, usage.get("prompt_tokens"), int(n), approx,
                                latency=latency, retries=retries, request_id=rid)

    def score_logprobs(self, text: str) -> list[float | None]:
        """Per-token log-probs of ``text`` under the backend's tokenizer.

        The first entry is ``None`` when the backend has no context to
        condition the first token on.
        """
        if not text:
            return []
        payload = {"model": self.cfg.model, "prompt": text, "max_tokens": 0, "echo": True, "logprobs": 0,
                   "temperature": 0}
        body, *_ = self.post("completions", payload)
        try:
            lp = body["choices"][0].get("logprobs")
        except (KeyError, IndexError, TypeError, AttributeError):
            raise MalformedResponseError("completion response lacks choices[0]", raw=body) from None
        if not lp or lp.get("token_logprobs") is None:
            raise CapabilityError("endpoint did not echo prompt log-probs")
        return list(lp["token_logprobs"])

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply ``fn`` concurrently (bounded) and return results in input order."""
        with ThreadPoolExecutor(max_workers=self.cfg.max_concurrency) as pool:
            return list(pool.map(fn, items))


def question_text(inst) -> str:
    return (f"Start from {inst.start_value} and apply the labelled operations in order, reducing modulo "
            f"{inst.modulus} after each one: {inst.prompt_text}. Give the final value inside "
            f"<answer></answer> tags.")


class EndpointModel:
    """Adapter letting controller/budget code drive a hosted model."""

    def __init__(self, client: LLMClient, with_limit_prompt: bool = True):
        self.client = client
        self.with_limit_prompt = with_limit_prompt

    def _params(self, sampling, seed: int) -> dict:
        return {"temperature": sampling.temperature, "top_p": sampling.top_p,
                "max_tokens": sampling.max_new_tokens, "seed": seed}

    def complete_instances(self, instances, n_samples: int, sampling, prompt_limit: int):
        from .task import build_system_prompt

        system = build_system_prompt(prompt_limit) if self.with_limit_prompt else None
        jobs = [(q, s) for q in range(len(instances)) for s in range(n_samples)]

        def run(job):
            q, s = job
            res = self.client.complete(system, question_text(instances[q]),
                                       self._params(sampling, sampling.rng_seed + 1000 * q + s))
            return res.text, res.completion_tokens

        flat = self.client.map(run, jobs)
        return [flat[q * n_samples : (q + 1) * n_samples] for q in range(len(instances))]
