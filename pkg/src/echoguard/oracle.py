"""Transcription backends.

Real ASR systems are reached through a process boundary: a command
template with an ``{audio}`` placeholder is run on a temporary WAV file
and its UTF-8 standard output is the transcript. A mock backend scores
each word of a known clip by segment STOI, so acoustic damage maps to
dropped words without any speech model.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .audio import AudioBuffer, write_wav
from .metrics import tokenize
from .stoi import segment_stoi

PLACEHOLDER = "{audio}"
CACHE_ENV = "ECHOGUARD_CACHE"
KINDS = ("external-command", "mock")


class OracleError(RuntimeError):
    """Base class; every subclass is safe to retry."""


class OracleTimeout(OracleError):
    pass


class OracleBackendError(OracleError):
    pass


class OracleDecodeError(OracleError):
    pass


class UnknownSample(OracleError):
    pass


@dataclass(frozen=True)
class OracleSpec:
    kind: str = "mock"
    command: Optional[str] = None
    timeout_s: float = 60.0
    concurrency_safe: bool = False
    cache_dir: Optional[str] = None
    segment_stoi_threshold: float = 0.7

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"oracle kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "external-command":
            if not self.command or PLACEHOLDER not in self.command:
                raise ValueError(f"external command must contain the {PLACEHOLDER} placeholder")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")

    @property
    def identity(self) -> str:
        """Cache namespace: the fields that change what a backend would return."""
        if self.kind == "mock":
            return json.dumps({"kind": "mock", "threshold": self.segment_stoi_threshold})
        return json.dumps({"kind": self.kind, "command": self.command})

    def resolved_cache_dir(self) -> Optional[str]:
        return os.environ.get(CACHE_ENV) or self.cache_dir

    def to_dict(self) -> dict:
        return {"kind": self.kind, "command": self.command, "timeout_s": self.timeout_s,
                "concurrency_safe": self.concurrency_safe, "cache_dir": self.cache_dir,
                "segment_stoi_threshold": self.segment_stoi_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSpec":
        allowed = set(cls().to_dict())
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown oracle keys: {sorted(extra)}")
        return cls(**d)


def audio_digest(audio: AudioBuffer) -> str:
    h = hashlib.sha256()
    h.update(str(audio.sample_rate).encode())
    h.update(np.ascontiguousarray(audio.samples, dtype="<f8").tobytes())
    return h.hexdigest()


class TranscriptCache:
    """One UTF-8 file per key, named by the hex SHA-256 of (spec identity, audio content)."""

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(identity: str, audio: AudioBuffer, sample_id: Optional[str] = None) -> str:
        h = hashlib.sha256()
        h.update(identity.encode())
        h.update(b"\0")
        h.update((sample_id or "").encode())
        h.update(b"\0")
        h.update(audio_digest(audio).encode())
        return h.hexdigest()

    def path(self, key: str) -> str:
        return os.path.join(self.directory, key)

    def get(self, key: str) -> Optional[str]:
        try:
            with open(self.path(key), encoding="utf-8") as fh:
                return fh.read()
        except FileNotFoundError:
            return None

    def put(self, key: str, text: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, self.path(key))


@dataclass
class MockAsrConfig:
    references: Dict[str, List[str]] = field(default_factory=dict)
    clean_audio: Dict[str, AudioBuffer] = field(default_factory=dict)
    segment_stoi_threshold: float = 0.7

    def register(self, sample_id: str, clean: AudioBuffer, transcript) -> None:
        self.references[sample_id] = tokenize(transcript)
        self.clean_audio[sample_id] = clean

    def fingerprint(self, sample_id: str) -> str:
        return audio_digest(self.clean_audio[sample_id])


def word_segments(n_samples: int, n_words: int) -> List[tuple]:
    """Equal-duration word timeline as (start, stop) sample ranges."""
    edges = np.linspace(0, n_samples, n_words + 1).round().astype(int)
    return list(zip(edges[:-1], edges[1:]))


def segment_scores(clean: AudioBuffer, degraded: AudioBuffer, n_words: int) -> List[float]:
    if degraded.sample_rate != clean.sample_rate:
        raise ValueError("clean and degraded sample rates differ")
    y = np.zeros(len(clean))
    n = min(len(clean), len(degraded))
    y[:n] = degraded.samples[:n]
    fs = clean.sample_rate
    return [segment_stoi(clean.samples[a:b], y[a:b], fs)
            for a, b in word_segments(len(clean), n_words)]


def _resolve_sample(cfg: MockAsrConfig, sample_id: Optional[str], probe: AudioBuffer) -> str:
    if sample_id is None:
        digest = audio_digest(probe)
        sample_id = next((k for k in cfg.clean_audio if cfg.fingerprint(k) == digest), None)
    if sample_id is None or sample_id not in cfg.references:
        raise UnknownSample(f"clip not registered with the mock oracle: {sample_id!r}")
    return sample_id


def mock_transcribe(cfg: MockAsrConfig, clean: AudioBuffer, degraded: AudioBuffer,
                    sample_id: Optional[str] = None) -> List[str]:
    """Keep each reference word whose segment STOI reaches the threshold."""
    sid = _resolve_sample(cfg, sample_id, clean)
    words = cfg.references[sid]
    if not words or cfg.segment_stoi_threshold <= 0:
        return list(words)
    scores = segment_scores(cfg.clean_audio[sid], degraded, len(words))
    return [w for w, s in zip(words, scores) if s >= cfg.segment_stoi_threshold]


class Oracle:
    """Cached, optionally serialized access to one transcription backend.

    ``calls`` counts backend invocations (cache hits do not count).
    """

    def __init__(self, spec: OracleSpec, mock: Optional[MockAsrConfig] = None):
        self.spec = spec
        self.mock = mock
        if spec.kind == "mock" and mock is None:
            self.mock = MockAsrConfig(segment_stoi_threshold=spec.segment_stoi_threshold)
        cache_dir = spec.resolved_cache_dir()
        self.cache = TranscriptCache(cache_dir) if cache_dir else None
        self.calls = 0
        self._count_lock = threading.Lock()
        self._serial = None if spec.concurrency_safe else threading.Lock()

    @property
    def concurrency_safe(self) -> bool:
        return self.spec.concurrency_safe

    def transcribe(self, audio: AudioBuffer, sample_id: Optional[str] = None) -> List[str]:
        key = None
        if self.cache is not None:
            key = TranscriptCache.key(self.spec.identity, audio,
                                      sample_id if self.spec.kind == "mock" else None)
            hit = self.cache.get(key)
            if hit is not None:
                return hit.split()
        if self._serial is not None:
            if not self._serial.acquire(timeout=self.spec.timeout_s):
                raise OracleTimeout("timed out waiting for the serialized ASR backend")
            try:
                text = self._invoke(audio, sample_id)
            finally:
                self._serial.release()
        else:
            text = self._invoke(audio, sample_id)
        if key is not None:
            self.cache.put(key, text)
        return text.split()

    def _invoke(self, audio: AudioBuffer, sample_id: Optional[str]) -> str:
        with self._count_lock:
            self.calls += 1
        if self.spec.kind == "mock":
            sid = _resolve_sample(self.mock, sample_id, audio)
            return " ".join(mock_transcribe(self.mock, self.mock.clean_audio[sid], audio, sid))
        return run_command(self.spec, audio)


def run_command(spec: OracleSpec, audio: AudioBuffer) -> str:
    with tempfile.TemporaryDirectory(prefix="echoguard-asr-") as tmp:
        wav = os.path.join(tmp, "audio.wav")
        write_wav(audio, wav, "pcm16")
        argv = [arg.replace(PLACEHOLDER, wav) for arg in shlex.split(spec.command)]
        try:
            proc = subprocess.run(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                  timeout=spec.timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise OracleTimeout(f"ASR command timed out after {spec.timeout_s}s") from exc
        except OSError as exc:
            raise OracleBackendError(f"cannot run ASR command: {exc}") from exc
    if proc.returncode != 0:
        err = proc.stderr.decode("utf-8", "replace").strip()
        raise OracleBackendError(f"ASR command exited {proc.returncode}: {err}")
    try:
        return proc.stdout.decode("utf-8").rstrip()
    except UnicodeDecodeError as exc:
        raise OracleDecodeError("ASR command output is not valid UTF-8") from exc


def transcribe(spec: OracleSpec, audio: AudioBuffer, mock: Optional[MockAsrConfig] = None,
               sample_id: Optional[str] = None) -> List[str]:
    """One-shot convenience wrapper; prefer a long-lived :class:`Oracle` to keep call counts."""
    return Oracle(spec, mock).transcribe(audio, sample_id)
