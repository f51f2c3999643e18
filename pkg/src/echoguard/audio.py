"""Mono audio buffers and WAV file I/O.

Everything downstream works on float64 samples at a known sample rate.
Files are RIFF/WAVE with either PCM-16 or IEEE float-32 payloads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.io import wavfile

CANONICAL_RATE = 16000
PCM16_SCALE = 32768.0

# Resampler kernel length (taps on each side = RESAMPLE_TAPS // 2).
RESAMPLE_TAPS = 64


class AudioError(Exception):
    """Base class for audio I/O failures."""


class AudioFileNotFound(AudioError):
    pass


class UnsupportedEncoding(AudioError):
    pass


class EmptyAudio(AudioError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.samples, dtype=np.float64)
        if data.ndim != 1:
            raise ValueError(f"AudioBuffer is mono; got array of shape {data.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(data)):
            raise ValueError("AudioBuffer samples must be finite")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


def read_wav(path) -> AudioBuffer:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise AudioFileNotFound(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise UnsupportedEncoding(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        data = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: sample type {data.dtype} (need PCM-16 or float-32)")

    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.shape[0] == 0:
        raise EmptyAudio(path)
    return AudioBuffer(data, rate)


def write_wav(buffer: AudioBuffer, path, encoding: str = "pcm16") -> None:
    if len(buffer) == 0:
        raise EmptyAudio("refusing to write an empty buffer")
    if encoding == "pcm16":
        clipped = np.clip(buffer.samples, -1.0, (PCM16_SCALE - 1) / PCM16_SCALE)
        data = np.round(clipped * PCM16_SCALE).astype(np.int16)
    elif encoding == "float32":
        data = buffer.samples.astype(np.float32)
    else:
        raise UnsupportedEncoding(f"unknown encoding {encoding!r}")
    try:
        wavfile.write(os.fspath(path), buffer.sample_rate, data)
    except OSError as exc:
        raise AudioError(f"cannot write {path}: {exc}") from exc


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling with a Blackman-windowed sinc kernel.

    Each output sample is a 64-tap weighted sum of the input around its
    fractional source position. The cutoff sits at the lower of the two
    Nyquist frequencies so downsampling does not alias.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    src_rate = buffer.sample_rate
    if target_rate == src_rate:
        return buffer
    x = buffer.samples
    n_in = len(x)
    n_out = int(round(n_in * target_rate / src_rate))
    if n_out == 0 or n_in == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)

    ratio = target_rate / src_rate
    cutoff = min(1.0, ratio)  # relative to the input Nyquist
    half = RESAMPLE_TAPS // 2
    padded = np.concatenate([np.zeros(half + 1), x, np.zeros(half + 1)])
    taps = np.arange(-half + 1, half + 1)

    out = np.empty(n_out)
    chunk = 8192
    for start in range(0, n_out, chunk):
        j = np.arange(start, min(start + chunk, n_out))
        pos = j / ratio
        idx = np.floor(pos).astype(np.int64)[:, None] + taps[None, :]
        dist = idx - pos[:, None]
        window = 0.42 + 0.5 * np.cos(np.pi * dist / half) + 0.08 * np.cos(2 * np.pi * dist / half)
        kernel = cutoff * np.sinc(dist * cutoff) * window
        out[start:start + len(j)] = np.sum(padded[idx + half + 1] * kernel, axis=1)
    return AudioBuffer(out, target_rate)


@dataclass(frozen=True, eq=False)
class Frame:
    """One analysis frame. `samples` is always frame_len long; `length` is how many are real."""
    index: int
    start: int
    length: int
    samples: np.ndarray = field(repr=False)


def frames(buffer: AudioBuffer, frame_len: int, hop: int) -> List[Frame]:
    if frame_len < 1 or hop < 1:
        raise ValueError("frame_len and hop must be >= 1")
    x = buffer.samples
    out = []
    for k, start in enumerate(range(0, len(x), hop)):
        chunk = x[start:start + frame_len]
        length = len(chunk)
        if length < frame_len:
            chunk = np.concatenate([chunk, np.zeros(frame_len - length)])
        out.append(Frame(k, start, length, chunk))
    return out
