"""Uniform chat-completion interface over HTTP backends and a deterministic
offline mock.

Two wire dialects cover the real provider families: a messages-array chat
dialect and a single-prompt dialect, both JSON over HTTPS with bearer-token
auth read from an environment variable named in the registry file. The mock
replays a rule table keyed on (task, drug, route) extracted from the prompt
text itself, so it keeps working when the surrounding template changes.
"""

from __future__ import annotations

import json
import os
import random
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import csv

import httpx

from .domain import CLASS_LABELS, TaskSpec
from .errors import ConfigError, DataError, ProviderError

MOCK_RULE_COLUMNS = ["task", "drug", "route", "output"]

RuleKey = tuple[str, str, str]


class TransportError(ProviderError):
    """Transient failure that survived all retries."""


class PermanentRequestError(ProviderError):
    """Request rejected for a non-transient reason (4xx other than 429)."""


class NoRuleError(ProviderError):
    """Mock provider found no rule for the request and fallback is disabled."""


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    temperature: float
    prompt_text: str
    max_output_tokens: int = 64

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class CompletionResponse:
    output_text: str
    latency_ms: int
    provider_meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")

    @property
    def attempt_count(self) -> int:
        return int(self.provider_meta.get("attempts", 1))


@dataclass(frozen=True)
class MockRule:
    """One mock response, keyed on what the prompt asks about."""

    task: str
    drug_raw: str
    route_raw: str
    output: str
    corrupted: bool = False

    @property
    def key(self) -> RuleKey:
        return (self.task, self.drug_raw, self.route_raw)


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with jitter for transient failures only."""

    max_retries: int = 2
    base_delay_s: float = 0.5
    max_delay_s: float = 30.0

    def delay(self, attempt: int, rng: random.Random) -> float:
        # attempt is 1-based: first retry waits ~base, then doubles.
        raw = min(self.base_delay_s * (2 ** (attempt - 1)), self.max_delay_s)
        return raw * (0.5 + rng.random())


class RateLimiter:
    """Sliding-window admission gate: at most `rpm` request starts in any 60
    second window. Linearizable; this is the single shared mutable element
    between concurrent provider calls.

    Clock and sleep are injectable so tests can run on virtual time.
    """

    WINDOW_S = 60.0

    def __init__(
        self,
        rpm: Optional[int],
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if rpm is not None and rpm < 1:
            raise ValueError("rpm bound must be >= 1")
        self.rpm = rpm
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._starts: deque[float] = deque()

    def acquire(self) -> None:
        """Block until a request may start, then record its start time."""
        if self.rpm is None:
            return
        while True:
            with self._lock:
                now = self._clock()
                while self._starts and now - self._starts[0] >= self.WINDOW_S:
                    self._starts.popleft()
                if len(self._starts) < self.rpm:
                    self._starts.append(now)
                    return
                wait = self._starts[0] + self.WINDOW_S - now
            self._sleep(max(wait, 0.0))


class Provider:
    """Interface all backends implement."""

    kind = "abstract"

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError


# Query pair as rendered by the prompt builder: quoted strings inside square
# brackets. The unquoted [drugname, route] in the preamble never matches.
_PAIR_RE = re.compile(r'\["(.*?)", "(.*?)"\]')
_BINARY_TASK_RE = re.compile(r'is classified as "([^"]+)", otherwise')
_FREETEXT_TASK_RE = re.compile(r"output only the generic (name|route) of")

_LABEL_TO_CLASS = {label: class_id for class_id, label in CLASS_LABELS.items()}


def extract_prompt_key(prompt_text: str) -> Optional[RuleKey]:
    """Recover (task, drug, route) from a rendered prompt. Returns None when
    the prompt does not look like one of ours."""
    pair = _PAIR_RE.search(prompt_text)
    if pair is None:
        return None
    drug, route = pair.group(1), pair.group(2)
    m = _BINARY_TASK_RE.search(prompt_text)
    if m is not None:
        class_id = _LABEL_TO_CLASS.get(m.group(1))
        if class_id is None:
            return None
        return (class_id, drug, route)
    m = _FREETEXT_TASK_RE.search(prompt_text)
    if m is not None:
        return (f"generic_{m.group(1)}", drug, route)
    return None


class MockProvider(Provider):
    """Deterministic offline backend: a pure function of the rule table and
    the (task, drug, route) embedded in the prompt. Latency is reported as 0
    so result files are byte-stable across machines and runs."""

    kind = "mock"

    def __init__(self, rules: Iterable[MockRule], fallback: Optional[str] = None) -> None:
        self.rules: dict[RuleKey, MockRule] = {}
        for rule in rules:
            if rule.key in self.rules:
                raise ConfigError(f"duplicate mock rule for key {rule.key}")
            self.rules[rule.key] = rule
        # fallback=None means a missing rule is an error; any string is
        # returned verbatim for unmatched requests.
        self.fallback = fallback

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        key = extract_prompt_key(request.prompt_text)
        rule = self.rules.get(key) if key is not None else None
        if rule is None:
            if self.fallback is None:
                raise NoRuleError(f"no mock rule for prompt key {key}")
            return CompletionResponse(output_text=self.fallback, latency_ms=0)
        return CompletionResponse(output_text=rule.output, latency_ms=0)


def load_mock_rules(path: Path) -> list[MockRule]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None or [c for c in MOCK_RULE_COLUMNS if c not in header]:
                raise DataError(
                    f"mock rule table {path} must have header columns {MOCK_RULE_COLUMNS}, got {header}"
                )
            rules = []
            for row in reader:
                rules.append(
                    MockRule(
                        task=(row.get("task") or "").strip(),
                        drug_raw=(row.get("drug") or "").strip(),
                        route_raw=(row.get("route") or "").strip(),
                        output=row.get("output") or "",
                    )
                )
            return rules
    except OSError as exc:
        raise DataError(f"cannot read mock rule table {path}: {exc}") from exc


def save_mock_rules(rules: Iterable[MockRule], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(MOCK_RULE_COLUMNS)
        for rule in rules:
            writer.writerow([rule.task, rule.drug_raw, rule.route_raw, rule.output])


def rules_from_gold(
    gold_by_key: dict[tuple[str, str], object],
    entries_by_id: dict[str, object],
) -> list[MockRule]:
    """Build an oracle rule table that answers every (entry, task) with its
    gold value. Used for offline end-to-end verification."""
    rules = []
    for (entry_id, task), value in gold_by_key.items():
        entry = entries_by_id[entry_id]
        rules.append(
            MockRule(
                task=task,
                drug_raw=entry.drug_raw,  # type: ignore[attr-defined]
                route_raw=entry.route_raw,  # type: ignore[attr-defined]
                output=str(value),
            )
        )
    return rules


_TRANSIENT_STATUSES = {429, 500, 502, 503, 504}


class HttpProvider(Provider):
    """Shared machinery for the two real wire dialects."""

    def __init__(
        self,
        model_id: str,
        endpoint: str,
        api_key: str,
        retry: RetryPolicy = RetryPolicy(),
        rate_limiter: Optional[RateLimiter] = None,
        rng: Optional[random.Random] = None,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
        timeout_s: float = 60.0,
    ) -> None:
        self.model_id = model_id
        self.endpoint = endpoint
        self.api_key = api_key
        self.retry = retry
        self.rate_limiter = rate_limiter or RateLimiter(rpm=None)
        self.rng = rng or random.Random()
        self.client = client or httpx.Client(timeout=timeout_s)
        self._sleep = sleep

    def _body(self, request: CompletionRequest) -> dict:
        raise NotImplementedError

    def _parse(self, payload: dict) -> str:
        raise NotImplementedError

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        headers = {
            "Authorization": f"Bearer {self.api_key}",
            "Content-Type": "application/json",
        }
        body = self._body(request)
        last_error: Optional[str] = None
        attempts = 0
        for attempt in range(self.retry.max_retries + 1):
            attempts = attempt + 1
            self.rate_limiter.acquire()
            started = time.monotonic()
            try:
                resp = self.client.post(self.endpoint, headers=headers, json=body)
            except httpx.HTTPError as exc:
                last_error = f"network error: {exc}"
                if attempt < self.retry.max_retries:
                    self._sleep(self.retry.delay(attempt + 1, self.rng))
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            if resp.status_code == 200:
                try:
                    text = self._parse(resp.json())
                except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                    raise PermanentRequestError(
                        f"{self.model_id}: unparseable response body: {exc}"
                    ) from exc
                meta = {"attempts": attempts, "status": resp.status_code}
                request_id = resp.headers.get("x-request-id")
                if request_id:
                    meta["request_id"] = request_id
                return CompletionResponse(output_text=text, latency_ms=latency_ms, provider_meta=meta)
            if resp.status_code in _TRANSIENT_STATUSES:
                last_error = f"transient status {resp.status_code}"
                if attempt < self.retry.max_retries:
                    self._sleep(self.retry.delay(attempt + 1, self.rng))
                continue
            # Other 4xx: never retried.
            raise PermanentRequestError(
                f"{self.model_id}: request rejected with status {resp.status_code}: {resp.text[:200]}"
            )
        raise TransportError(
            f"{self.model_id}: {attempts} attempts exhausted, last error: {last_error}"
        )


class ChatProvider(HttpProvider):
    """Messages-array chat dialect. The whole prompt goes in a single user
    message; no system message."""

    kind = "chat"

    def _body(self, request: CompletionRequest) -> dict:
        return {
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": [{"role": "user", "content": request.prompt_text}],
        }

    def _parse(self, payload: dict) -> str:
        return payload["choices"][0]["message"]["content"]


class PromptProvider(HttpProvider):
    """Single-prompt completion dialect."""

    kind = "prompt"

    def _body(self, request: CompletionRequest) -> dict:
        return {
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "prompt": request.prompt_text,
        }

    def _parse(self, payload: dict) -> str:
        return payload["completion"]


@dataclass(frozen=True)
class ProviderSpec:
    """One registry record: how to reach one model."""

    model_id: str
    provider_kind: str
    endpoint: Optional[str] = None
    api_key_env: Optional[str] = None
    rpm: Optional[int] = None
    rules_path: Optional[Path] = None
    fallback: Optional[str] = None
    max_output_tokens: int = 64


class ProviderRegistry:
    """Maps every configured model_id to exactly one backend. Misconfiguration
    surfaces here, at startup, never at call time."""

    def __init__(self, specs: Iterable[ProviderSpec]) -> None:
        self.specs: dict[str, ProviderSpec] = {}
        for spec in specs:
            if spec.model_id in self.specs:
                raise ConfigError(f"duplicate provider registry entry for {spec.model_id!r}")
            if spec.provider_kind not in ("chat", "prompt", "mock"):
                raise ConfigError(
                    f"{spec.model_id!r}: unknown provider_kind {spec.provider_kind!r}"
                )
            if spec.provider_kind in ("chat", "prompt"):
                if not spec.endpoint or not spec.api_key_env:
                    raise ConfigError(
                        f"{spec.model_id!r}: {spec.provider_kind} providers need endpoint and api_key_env"
                    )
            else:
                if spec.rules_path is None:
                    raise ConfigError(f"{spec.model_id!r}: mock providers need a rules path")
            self.specs[spec.model_id] = spec
        self._limiters: dict[str, RateLimiter] = {}

    @classmethod
    def from_file(cls, path: Path) -> "ProviderRegistry":
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read provider registry {path}: {exc}") from exc
        records = raw.get("providers")
        if not isinstance(records, list):
            raise ConfigError(f"provider registry {path} must contain a 'providers' list")
        specs = []
        for rec in records:
            rules = rec.get("rules")
            specs.append(
                ProviderSpec(
                    model_id=rec.get("model_id", ""),
                    provider_kind=rec.get("provider_kind", ""),
                    endpoint=rec.get("endpoint"),
                    api_key_env=rec.get("api_key_env"),
                    rpm=rec.get("rpm"),
                    rules_path=(path.parent / rules) if rules else None,
                    fallback=rec.get("fallback"),
                    max_output_tokens=rec.get("max_output_tokens", 64),
                )
            )
        if not all(s.model_id for s in specs):
            raise ConfigError(f"provider registry {path}: every record needs a model_id")
        return cls(specs)

    def spec_for(self, model_id: str) -> ProviderSpec:
        spec = self.specs.get(model_id)
        if spec is None:
            raise ConfigError(
                f"model {model_id!r} is not in the provider registry "
                f"(known: {sorted(self.specs)})"
            )
        return spec

    def _limiter_for(self, spec: ProviderSpec) -> RateLimiter:
        # One limiter per model id, shared across builds so per-provider
        # bounds stay independent and global within the process.
        if spec.model_id not in self._limiters:
            self._limiters[spec.model_id] = RateLimiter(rpm=spec.rpm)
        return self._limiters[spec.model_id]

    def build(
        self,
        model_id: str,
        retry: RetryPolicy = RetryPolicy(),
        rng: Optional[random.Random] = None,
        client: Optional[httpx.Client] = None,
    ) -> Provider:
        spec = self.spec_for(model_id)
        if spec.provider_kind == "mock":
            assert spec.rules_path is not None
            return MockProvider(load_mock_rules(spec.rules_path), fallback=spec.fallback)
        assert spec.api_key_env is not None and spec.endpoint is not None
        api_key = os.environ.get(spec.api_key_env)
        if not api_key:
            raise ConfigError(
                f"{model_id!r}: credential env var {spec.api_key_env} is not set"
            )
        cls = ChatProvider if spec.provider_kind == "chat" else PromptProvider
        return cls(
            model_id=model_id,
            endpoint=spec.endpoint,
            api_key=api_key,
            retry=retry,
            rate_limiter=self._limiter_for(spec),
            rng=rng,
            client=client,
        )
