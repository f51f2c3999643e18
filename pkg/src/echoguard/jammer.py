"""The EchoGuard transformation: reverberation, microphone oscillation, transient attenuation.

Whole-buffer form lives here; the frame-at-a-time processor is in
:mod:`echoguard.streaming` and reproduces these results sample for sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .audio import AudioBuffer
from .room import (DEFAULT_MAX_ORDER, SPEED_OF_SOUND, OPTIMIZED_ROOM, DirectionalRirSet, ImpulseResponse,
                   RoomConfig, RoomError, cached_directional_set, validate_room)

MIN_BLOCK = 4096
PEAK_TARGET = 0.9
GAIN_MODES = ("peak-normalize", "none")
SELECTION_MODES = ("random", "energy")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OscillationSchedule:
    rotation_hz: float = 5.0
    n_mics: int = 4

    def __post_init__(self):
        if not self.rotation_hz > 0:
            raise ConfigError(f"rotation_hz must be > 0 (got {self.rotation_hz})")
        if int(self.n_mics) < 1:
            raise ConfigError(f"n_mics must be >= 1 (got {self.n_mics})")

    @property
    def period_s(self) -> float:
        return 1.0 / self.rotation_hz

    @property
    def window_s(self) -> float:
        # adjacent windows overlap by half
        return 2.0 * self.period_s / self.n_mics

    @property
    def centers(self) -> np.ndarray:
        return np.arange(self.n_mics) / (self.rotation_hz * self.n_mics)


@dataclass(frozen=True)
class AttenuationConfig:
    frame_s: float = 0.020
    select_prob: float = 0.30
    alpha: float = 0.70
    seed: int = 0
    selection: str = "random"

    def __post_init__(self):
        if not self.frame_s > 0:
            raise ConfigError(f"frame_s must be > 0 (got {self.frame_s})")
        if not 0.0 <= self.select_prob <= 1.0:
            raise ConfigError(f"select_prob must be in [0, 1] (got {self.select_prob})")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1] (got {self.alpha})")
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"selection must be one of {SELECTION_MODES}")

    def frame_len(self, sample_rate: int) -> int:
        return max(1, int(round(self.frame_s * sample_rate)))


@dataclass(frozen=True)
class JammerConfig:
    room: RoomConfig = OPTIMIZED_ROOM
    n_mics: int = 4
    rotation_hz: float = 5.0
    attenuation: AttenuationConfig = field(default_factory=AttenuationConfig)
    sample_rate: int = 16000
    max_order: int = DEFAULT_MAX_ORDER
    output_gain_mode: str = "peak-normalize"
    stream_frame_s: float = 0.010
    block_size: int = MIN_BLOCK

    def __post_init__(self):
        problems = validate_room(self.room)
        if problems:
            raise ConfigError("; ".join(problems))
        if self.output_gain_mode not in GAIN_MODES:
            raise ConfigError(f"output_gain_mode must be one of {GAIN_MODES}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.max_order < 0:
            raise ConfigError("max_order must be >= 0")
        if self.block_size < MIN_BLOCK:
            raise ConfigError(f"block_size must be >= {MIN_BLOCK}")
        if not self.stream_frame_s > 0:
            raise ConfigError("stream_frame_s must be > 0")
        self.schedule  # validates rotation_hz / n_mics

    @property
    def schedule(self) -> OscillationSchedule:
        return OscillationSchedule(self.rotation_hz, self.n_mics)

    def directional_set(self) -> DirectionalRirSet:
        return cached_directional_set(self.room, self.n_mics, self.sample_rate, self.max_order)

    def to_dict(self) -> dict:
        return {
            "room": self.room.to_dict(),
            "n_mics": self.n_mics,
            "oscillation": {"rotation_hz": self.rotation_hz},
            "attenuation": {f.name: getattr(self.attenuation, f.name)
                            for f in fields(AttenuationConfig)},
            "sample_rate": self.sample_rate,
            "max_order": self.max_order,
            "output_gain_mode": self.output_gain_mode,
            "stream": {"frame_s": self.stream_frame_s, "block_size": self.block_size},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JammerConfig":
        """Build from the JSON layout produced by :meth:`to_dict`; missing keys take defaults.

        A bare room object (as written by ``optimize``) is also accepted.
        """
        if not isinstance(d, dict):
            raise ConfigError("jammer config must be a JSON object")
        if "length_m" in d:
            d = {"room": d}
        known = {"room", "n_mics", "oscillation", "attenuation", "sample_rate",
                 "max_order", "output_gain_mode", "stream"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            if "room" in d:
                kwargs["room"] = RoomConfig.from_dict(d["room"])
            for key, conv in (("n_mics", int), ("sample_rate", int), ("max_order", int),
                              ("output_gain_mode", str)):
                if key in d:
                    kwargs[key] = conv(d[key])
            osc = d.get("oscillation", {})
            if "rotation_hz" in osc:
                kwargs["rotation_hz"] = float(osc["rotation_hz"])
            if "attenuation" in d:
                att = dict(d["attenuation"])
                names = {f.name for f in fields(AttenuationConfig)}
                if set(att) - names:
                    raise ConfigError(f"unknown attenuation keys: {sorted(set(att) - names)}")
                kwargs["attenuation"] = AttenuationConfig(**att)
            stream = d.get("stream", {})
            if "frame_s" in stream:
                kwargs["stream_frame_s"] = float(stream["frame_s"])
            if "block_size" in stream:
                kwargs["block_size"] = int(stream["block_size"])
        except RoomError as exc:
            raise ConfigError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed jammer config: {exc}") from exc
        return cls(**kwargs)

    def with_seed(self, seed: int) -> "JammerConfig":
        return replace(self, attenuation=replace(self.attenuation, seed=int(seed)))


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def fft_plan(ir_len: int, block_size: int = MIN_BLOCK):
    """FFT size and input block length for overlap-add with an IR of ir_len taps."""
    nfft = _next_pow2(max(block_size, MIN_BLOCK) + ir_len - 1)
    return nfft, nfft - ir_len + 1


def overlap_add(x: np.ndarray, taps: np.ndarray, block_size: int = MIN_BLOCK) -> np.ndarray:
    """Full linear convolution of x with each row of taps (2-D) by FFT overlap-add."""
    taps = np.atleast_2d(taps)
    n, m = len(x), taps.shape[1]
    out = np.zeros((taps.shape[0], n + m - 1))
    if n == 0:
        return out
    nfft, block = fft_plan(m, block_size)
    spectra = np.fft.rfft(taps, nfft, axis=1)
    total = n + m - 1
    for start in range(0, n, block):
        seg = np.fft.irfft(np.fft.rfft(x[start:start + block], nfft) * spectra, nfft, axis=1)
        stop = min(start + nfft, total)
        out[:, start:stop] += seg[:, :stop - start]
    return out


def convolve(audio: AudioBuffer, ir: ImpulseResponse) -> AudioBuffer:
    if audio.sample_rate != ir.sample_rate:
        raise ValueError(f"sample-rate mismatch: audio {audio.sample_rate} Hz, IR {ir.sample_rate} Hz")
    return audio.with_samples(overlap_add(audio.samples, ir.taps)[0])


def oscillation_weights(t, schedule: OscillationSchedule) -> np.ndarray:
    """Normalized blending weight of each mic at time(s) t.

    Returns shape (n_mics,) for scalar t, else (n_mics, len(t)).
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    period = schedule.period_s
    win = schedule.window_s
    offset = t[None, :] - schedule.centers[:, None]
    # distance to the nearest periodic image of each window center
    d = np.mod(offset + period / 2.0, period) - period / 2.0
    raw = np.where(np.abs(d) <= win / 2.0, 0.5 * (1.0 + np.cos(2.0 * np.pi * d / win)), 0.0)
    w = raw / raw.sum(axis=0, keepdims=True)
    return w[:, 0] if scalar else w


def _check_rates(audio: AudioBuffer, rir_set: DirectionalRirSet):
    if audio.sample_rate != rir_set.sample_rate:
        raise ValueError(f"sample-rate mismatch: audio {audio.sample_rate} Hz, "
                         f"RIR set {rir_set.sample_rate} Hz")


def blend(convolved: np.ndarray, schedule: OscillationSchedule, sample_rate: int,
          start: int = 0) -> np.ndarray:
    """Mix per-mic signals (rows) with the oscillation weights for samples start, start+1, ..."""
    t = (start + np.arange(convolved.shape[1])) / sample_rate
    return np.sum(oscillation_weights(t, schedule) * convolved, axis=0)


def apply_oscillation(audio: AudioBuffer, rir_set: DirectionalRirSet,
                      schedule: OscillationSchedule, block_size: int = MIN_BLOCK) -> AudioBuffer:
    _check_rates(audio, rir_set)
    if schedule.n_mics != len(rir_set):
        raise ValueError(f"schedule has {schedule.n_mics} mics, RIR set has {len(rir_set)}")
    taps = np.stack([ir.taps for ir in rir_set.irs])
    convolved = overlap_add(audio.samples, taps, block_size)
    return audio.with_samples(blend(convolved, schedule, audio.sample_rate))


def attenuation_curve(length: int, alpha: float) -> np.ndarray:
    t = np.linspace(-2.0, 2.0, length)
    return 1.0 - (1.0 - alpha) * np.exp(-t * t)


def select_frames(x: np.ndarray, cfg: AttenuationConfig, frame_len: int) -> np.ndarray:
    n_frames = math.ceil(len(x) / frame_len)
    if cfg.selection == "energy":
        k = int(round(cfg.select_prob * n_frames))
        padded = np.zeros(n_frames * frame_len)
        padded[:len(x)] = x
        rms = np.sqrt(np.mean(padded.reshape(n_frames, frame_len) ** 2, axis=1))
        chosen = np.zeros(n_frames, dtype=bool)
        # stable sort: ties resolve to the earlier frame
        chosen[np.argsort(-rms, kind="stable")[:k]] = True
        return chosen
    return np.random.default_rng(cfg.seed).random(n_frames) < cfg.select_prob


def attenuate_frames(x: np.ndarray, selected: np.ndarray, frame_len: int, alpha: float,
                     first_frame: int = 0) -> np.ndarray:
    """Apply the Gaussian dip in place to selected frames of x (x starts at frame first_frame)."""
    if alpha == 1.0:
        return x
    for k in np.nonzero(selected)[0]:
        start = (int(k) - first_frame) * frame_len
        seg = x[start:start + frame_len]
        seg *= attenuation_curve(len(seg), alpha)
    return x


def apply_attenuation(audio: AudioBuffer, cfg: AttenuationConfig) -> AudioBuffer:
    frame_len = cfg.frame_len(audio.sample_rate)
    x = np.array(audio.samples)
    if len(x) == 0:
        return audio
    selected = select_frames(x, cfg, frame_len)
    return audio.with_samples(attenuate_frames(x, selected, frame_len, cfg.alpha))


def peak_normalize(x: np.ndarray, target: float = PEAK_TARGET) -> np.ndarray:
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return x if peak == 0 else x * (target / peak)


def echoguard(audio: AudioBuffer, cfg: Optional[JammerConfig] = None) -> AudioBuffer:
    cfg = cfg or JammerConfig()
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(f"audio is {audio.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
    reverbed = apply_oscillation(audio, cfg.directional_set(), cfg.schedule, cfg.block_size)
    out = apply_attenuation(reverbed, cfg.attenuation)
    if cfg.output_gain_mode == "peak-normalize":
        out = out.with_samples(peak_normalize(out.samples))
    return out


def identity_config(sample_rate: int = 16000, **overrides) -> JammerConfig:
    """A near-transparent config: one mic aimed at a source 16 samples away, fully absorbing walls, no dips."""
    gap = SPEED_OF_SOUND * 16 / sample_rate
    room = RoomConfig(4.0, 4.0, 3.0, (1.0, 2.0, 1.5), (1.0 + gap, 2.0, 1.5), 1.0)
    base = dict(room=room, n_mics=1, attenuation=AttenuationConfig(select_prob=0.0),
                sample_rate=sample_rate)
    base.update(overrides)
    return JammerConfig(**base)
