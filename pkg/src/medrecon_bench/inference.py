"""Inference backends, the append-only run store, and resumable campaigns."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Protocol, Sequence

import httpx

from .fhir_ingest import GroundTruth

logger = logging.getLogger(__name__)

DEFAULT_BACKEND_URL = "http://localhost:11434"
BACKEND_URL_ENV = "MEDRECON_BACKEND_URL"
STORE_PATH_ENV = "MEDRECON_STORE"
MAX_ATTEMPTS = 3
ECHO_CHARS = 500
GARBLE_TEXT = "]] }{ ,, ::tion ;;ation ##@@ ~~ ¤¤ 0x7f ..MG MG MG ..ral Tabl )) (( ;; ==> <|> ]]"
MOCK_MODES = ("oracle", "omit_k_longest", "hallucinate_k", "echo_prompt", "garble", "empty")


class BackendError(RuntimeError):
    """Transport-level failure talking to an inference backend (retryable)."""


class StoreCorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    runtime_context_tokens: int
    temperature: float = 0.0
    backend_url: str = DEFAULT_BACKEND_URL
    request_timeout_seconds: int = 600

    def __post_init__(self) -> None:
        if self.runtime_context_tokens <= 0:
            raise ValueError("runtime_context_tokens must be positive")


# num_ctx values used for the five models in the original runs (64K / 32K).
PAPER_MODELS = (
    ModelConfig("phi3.5:3.8b", 65536),
    ModelConfig("mistral:7b", 65536),
    ModelConfig("biomistral:7b", 65536),
    ModelConfig("llama3.1:8b", 65536),
    ModelConfig("llama3.3:70b", 32768),
)


@dataclass(frozen=True)
class RunResult:
    patient_id: str
    model_id: str
    strategy: str
    raw_output: str
    latency_ms: int
    started_at: str
    backend_kind: str
    attempt: int = 1

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.patient_id, self.model_id, self.strategy)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunResult":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


class Backend(Protocol):
    kind: str

    def generate(self, prompt: str, cfg: ModelConfig, patient_id: str, strategy: str) -> str: ...


class OllamaBackend:
    """HTTP client for an Ollama-compatible ``/api/generate`` endpoint."""

    kind = "live"

    def __init__(self, base_url: str | None = None, client: httpx.Client | None = None):
        self.base_url = (base_url or os.environ.get(BACKEND_URL_ENV) or DEFAULT_BACKEND_URL).rstrip("/")
        self._client = client

    def request_body(self, prompt: str, cfg: ModelConfig) -> dict[str, Any]:
        return {
            "model": cfg.model_id,
            "prompt": prompt,
            "stream": False,
            "options": {"temperature": cfg.temperature, "num_ctx": cfg.runtime_context_tokens},
        }

    def generate(self, prompt: str, cfg: ModelConfig, patient_id: str = "", strategy: str = "") -> str:
        url = f"{self.base_url}/api/generate"
        body = self.request_body(prompt, cfg)
        try:
            if self._client is not None:
                resp = self._client.post(url, json=body, timeout=cfg.request_timeout_seconds)
            else:
                resp = httpx.post(url, json=body, timeout=cfg.request_timeout_seconds)
        except httpx.HTTPError as exc:
            raise BackendError(f"{url}: {type(exc).__name__}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            text = resp.json()["response"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"{url}: response body has no 'response' field") from exc
        if not isinstance(text, str):
            raise BackendError(f"{url}: 'response' is not a string")
        return text


class MockBackend:
    """Deterministic stand-in for a model, driven by the ground truth.

    ``oracle`` returns the exact ground truth; ``omit_k_longest`` drops the k
    longest names; ``hallucinate_k`` appends k invented names; ``echo_prompt``
    returns the first 500 characters of the prompt; ``garble`` returns a fixed
    non-JSON string; ``empty`` returns "".
    """

    kind = "mock"

    def __init__(self, mode: str, ground_truth: Mapping[str, GroundTruth], k: int = 1):
        if mode not in MOCK_MODES:
            raise ValueError(f"unknown mock mode {mode!r}; expected one of {', '.join(MOCK_MODES)}")
        if k < 0:
            raise ValueError("k must be >= 0")
        self.mode = mode
        self.ground_truth = ground_truth
        self.k = k

    def names_for(self, patient_id: str) -> list[str]:
        names = sorted(self.ground_truth[patient_id].active_names)
        if self.mode == "omit_k_longest":
            dropped = set(sorted(names, key=lambda s: (-len(s), s))[: self.k])
            return [n for n in names if n not in dropped]
        if self.mode == "hallucinate_k":
            return names + [f"Hallucinated Medication {i + 1} MG Oral Tablet" for i in range(self.k)]
        return names

    def generate(self, prompt: str, cfg: ModelConfig, patient_id: str, strategy: str = "") -> str:
        if self.mode == "echo_prompt":
            return prompt[:ECHO_CHARS]
        if self.mode == "garble":
            return GARBLE_TEXT
        if self.mode == "empty":
            return ""
        return json.dumps(self.names_for(patient_id), ensure_ascii=False)


def mock_backend(mode: str, ground_truth: Mapping[str, GroundTruth], **params: Any) -> MockBackend:
    return MockBackend(mode, ground_truth, **params)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def run_inference(
    prompt: str,
    cfg: ModelConfig,
    backend: Backend,
    patient_id: str = "",
    strategy: str = "",
    max_attempts: int = MAX_ATTEMPTS,
    backoff_seconds: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> RunResult:
    """Send one prompt, retrying transport failures with exponential backoff.

    A response that arrives but is garbage is returned as-is; only
    :class:`BackendError` triggers a retry.  After ``max_attempts`` failures
    the last error is re-raised.
    """
    last: BackendError | None = None
    for attempt in range(1, max_attempts + 1):
        started = _now()
        t0 = time.perf_counter()
        try:
            raw = backend.generate(prompt, cfg, patient_id, strategy)
        except BackendError as exc:
            last = exc
            logger.warning("attempt %d/%d failed for %s/%s/%s: %s", attempt, max_attempts, patient_id, cfg.model_id, strategy, exc)
            if attempt < max_attempts:
                sleep(backoff_seconds * 2 ** (attempt - 1))
            continue
        return RunResult(
            patient_id=patient_id,
            model_id=cfg.model_id,
            strategy=strategy,
            raw_output=raw,
            latency_ms=int(round((time.perf_counter() - t0) * 1000)),
            started_at=started,
            backend_kind=getattr(backend, "kind", "live"),
            attempt=attempt,
        )
    assert last is not None
    raise last


def _checksum(record: dict[str, Any]) -> str:
    canonical = json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunStore:
    """Append-only JSONL store of RunResults, one checksummed record per line.

    On open, a final line without a trailing newline is treated as a torn
    write from an interrupted run and truncated away.  Any complete line that
    fails to parse or fails its checksum raises :class:`StoreCorruptionError`.
    """

    def __init__(self, path: str | Path, durable: bool = True):
        self.path = Path(path)
        self.durable = durable
        self._results: dict[tuple[str, str, str], RunResult] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            cut = data.rfind(b"\n") + 1
            logger.warning("%s: dropping torn final line (%d bytes)", self.path, len(data) - cut)
            with self.path.open("r+b") as fh:
                fh.truncate(cut)
            data = data[:cut]
        for lineno, line in enumerate(data.decode("utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                record, digest = doc["record"], doc["sha256"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise StoreCorruptionError(f"{self.path}:{lineno}: unreadable line") from exc
            if _checksum(record) != digest:
                raise StoreCorruptionError(f"{self.path}:{lineno}: checksum mismatch")
            try:
                result = RunResult.from_dict(record)
            except (KeyError, TypeError) as exc:
                raise StoreCorruptionError(f"{self.path}:{lineno}: malformed record") from exc
            if result.key in self._results:
                raise StoreCorruptionError(f"{self.path}:{lineno}: duplicate key {result.key}")
            self._results[result.key] = result

    def __contains__(self, key: tuple[str, str, str]) -> bool:
        return key in self._results

    def __len__(self) -> int:
        return len(self._results)

    def __iter__(self) -> Iterator[RunResult]:
        return iter(self._results.values())

    def keys(self) -> set[tuple[str, str, str]]:
        return set(self._results)

    def get(self, key: tuple[str, str, str]) -> RunResult | None:
        return self._results.get(key)

    def append(self, result: RunResult) -> None:
        if result.key in self._results:
            raise ValueError(f"run {result.key} already stored")
        record = result.to_dict()
        line = json.dumps({"record": record, "sha256": _checksum(record)}, ensure_ascii=False, sort_keys=True)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            if self.durable:
                os.fsync(fh.fileno())
        self._results[result.key] = result


@dataclass
class CampaignReport:
    done: int = 0
    skipped: int = 0
    failed: int = 0
    errors: list[str] = field(default_factory=list)
    results: list[RunResult] = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return self.done + self.skipped + self.failed


def campaign_keys(
    patient_ids: Sequence[str], strategies: Sequence[str], models: Sequence[ModelConfig]
) -> list[tuple[str, ModelConfig, str]]:
    return [(pid, cfg, s) for cfg in models for pid in patient_ids for s in strategies]


def run_campaign(
    patient_ids: Sequence[str],
    strategies: Sequence[str],
    models: Sequence[ModelConfig],
    backend: Backend,
    store: RunStore,
    prompt_for: Callable[[str, str], str],
    concurrency: int = 1,
    max_attempts: int = MAX_ATTEMPTS,
    backoff_seconds: float = 1.0,
    stop_on_error: bool = True,
    on_result: Callable[[RunResult], None] | None = None,
) -> CampaignReport:
    """Run every (patient, model, strategy) key not already in ``store``.

    ``prompt_for(patient_id, strategy_code)`` supplies the full prompt text.
    Results are written in key order by this thread only, so the store stays
    single-writer even when ``concurrency > 1``.
    """
    strategies = [str(getattr(s, "value", s)) for s in strategies]
    report = CampaignReport()
    pending = []
    for pid, cfg, strategy in campaign_keys(patient_ids, strategies, models):
        if (pid, cfg.model_id, strategy) in store:
            report.skipped += 1
        else:
            pending.append((pid, cfg, strategy))

    def call(item: tuple[str, ModelConfig, str]) -> RunResult | BackendError:
        pid, cfg, strategy = item
        try:
            return run_inference(
                prompt_for(pid, strategy), cfg, backend, pid, strategy,
                max_attempts=max_attempts, backoff_seconds=backoff_seconds,
            )
        except BackendError as exc:
            return exc

    def consume(outcomes: Iterable[RunResult | BackendError], items: list) -> None:
        for item, outcome in zip(items, outcomes):
            if isinstance(outcome, BackendError):
                report.failed += 1
                report.errors.append(f"{item[0]}/{item[1].model_id}/{item[2]}: {outcome}")
                if stop_on_error:
                    return
                continue
            store.append(outcome)
            report.done += 1
            report.results.append(outcome)
            if on_result is not None:
                on_result(outcome)

    if concurrency <= 1:
        consume((call(item) for item in pending), pending)
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            consume(pool.map(call, pending), pending)
            pool.shutdown(wait=True, cancel_futures=True)
    return report
