"""Frame-at-a-time EchoGuard for live audio.

Input arrives in fixed frames (10 ms by default). Convolution runs by
uniform overlap-add blocks, so every output frame lags its input by
exactly one block; the IR tail is emitted by :meth:`StreamProcessor.flush`.
With ``output_gain_mode="none"`` the concatenated output, with the first
``latency_samples`` dropped, equals :func:`echoguard.jammer.echoguard`.
"""

from __future__ import annotations

from typing import Iterable, Iterator, List, Optional

import numpy as np

from .jammer import (PEAK_TARGET, ConfigError, JammerConfig, attenuation_curve, blend,
                     fft_plan)


class StreamError(RuntimeError):
    pass


class StreamProcessor:
    """Stateful, single-owner streaming jammer. Not thread-safe; use one per stream."""

    def __init__(self, cfg: Optional[JammerConfig] = None, frame_len: Optional[int] = None):
        self.cfg = cfg = cfg or JammerConfig()
        if cfg.attenuation.selection != "random":
            raise ConfigError("energy-ranked frame selection needs the whole signal; "
                              "streaming supports selection='random' only")
        fs = cfg.sample_rate
        self.frame_len = int(frame_len or max(1, round(cfg.stream_frame_s * fs)))
        rir_set = cfg.directional_set()
        self._taps = np.stack([ir.taps for ir in rir_set.irs])
        self.ir_len = self._taps.shape[1]
        self.nfft, self.block = fft_plan(self.ir_len, cfg.block_size)
        if self.block < self.frame_len:
            raise ConfigError("stream frame longer than the FFT block")
        self._spectra = np.fft.rfft(self._taps, self.nfft, axis=1)
        self._schedule = cfg.schedule

        att = cfg.attenuation
        self._att_len = att.frame_len(fs)
        self._att_curve = attenuation_curve(self._att_len, att.alpha)
        self._rng = np.random.default_rng(att.seed)
        self._selected = np.zeros(0, dtype=bool)

        if cfg.output_gain_mode == "peak-normalize":
            # causal stand-in for peak normalization: no input in [-1, 1] can exceed PEAK_TARGET
            self.gain = PEAK_TARGET / float(np.max(np.sum(np.abs(self._taps), axis=1)))
        else:
            self.gain = 1.0

        self._pending: List[np.ndarray] = []
        self._pending_len = 0
        self._acc = np.zeros((self._taps.shape[0], self.nfft))
        self._block_start = 0        # absolute index of the next block's first input sample
        self._ready = np.zeros(0)    # blended, finalized output not yet emitted
        self._ready_start = 0
        self._emit_pos = -self.block  # absolute output index of the next emitted sample
        self._n_in = 0
        self._flushed = False

    @property
    def latency_samples(self) -> int:
        return self.block

    @property
    def tail_samples(self) -> int:
        return self.ir_len - 1

    def latency_report(self) -> dict:
        fs = self.cfg.sample_rate
        return {
            "frame_samples": self.frame_len,
            "block_samples": self.block,
            "fft_size": self.nfft,
            "latency_samples": self.latency_samples,
            "latency_s": self.latency_samples / fs,
            "ir_tail_samples": self.tail_samples,
            "ir_tail_s": self.tail_samples / fs,
            "gain": self.gain,
        }

    def _run_block(self, x: np.ndarray):
        if len(x):
            self._acc += np.fft.irfft(np.fft.rfft(x, self.nfft) * self._spectra, self.nfft, axis=1)
        done = self._acc[:, :self.block]
        mixed = blend(done, self._schedule, self.cfg.sample_rate, self._block_start)
        self._append_ready(mixed)
        self._acc = np.concatenate([self._acc[:, self.block:],
                                    np.zeros((self._acc.shape[0], self.block))], axis=1)
        self._block_start += self.block

    def _append_ready(self, mixed: np.ndarray):
        keep = self._emit_pos - self._ready_start
        if keep > 0:
            self._ready = self._ready[keep:]
            self._ready_start += keep
        self._ready = np.concatenate([self._ready, mixed])

    def _selection(self, upto_frame: int) -> np.ndarray:
        need = upto_frame - len(self._selected)
        if need > 0:
            draws = self._rng.random(need) < self.cfg.attenuation.select_prob
            self._selected = np.concatenate([self._selected, draws])
        return self._selected

    def _emit(self, count: int, total: Optional[int] = None) -> np.ndarray:
        """Take `count` output samples starting at the emit position, attenuated and scaled."""
        start, stop = self._emit_pos, self._emit_pos + count
        out = np.zeros(count)
        lo = max(start, 0)
        if stop > lo:
            out[lo - start:] = self._ready[lo - self._ready_start:stop - self._ready_start]
            self._attenuate(out[lo - start:], lo, total)
        self._emit_pos = stop
        return out * self.gain if self.gain != 1.0 else out

    def _attenuate(self, seg: np.ndarray, start: int, total: Optional[int]):
        if self.cfg.attenuation.alpha == 1.0 or len(seg) == 0:
            return
        fl = self._att_len
        first, last = start // fl, (start + len(seg) - 1) // fl
        selected = self._selection(last + 1)
        for k in range(first, last + 1):
            if not selected[k]:
                continue
            f0 = k * fl
            a, b = max(f0, start), min(f0 + fl, start + len(seg))
            curve = self._att_curve
            if total is not None and f0 + fl > total:
                curve = attenuation_curve(total - f0, self.cfg.attenuation.alpha)
            seg[a - start:b - start] *= curve[a - f0:b - f0]

    def process(self, frame) -> np.ndarray:
        """Consume one input frame, return one output frame (delayed by latency_samples)."""
        if self._flushed:
            raise StreamError("stream already flushed")
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 1 or len(frame) != self.frame_len:
            raise StreamError(f"frame length changed: expected {self.frame_len}, got {frame.shape}")
        self._pending.append(frame)
        self._pending_len += len(frame)
        self._n_in += len(frame)
        if self._pending_len >= self.block:
            buf = np.concatenate(self._pending)
            while len(buf) >= self.block:
                self._run_block(buf[:self.block])
                buf = buf[self.block:]
            self._pending = [buf] if len(buf) else []
            self._pending_len = len(buf)
        return self._emit(self.frame_len)

    def flush(self) -> List[np.ndarray]:
        """Drain the pending block and the IR tail. The last frame may be short."""
        if self._flushed:
            return []
        self._flushed = True
        total = self._n_in + self.ir_len - 1 if self._n_in else 0
        if self._pending_len:
            self._run_block(np.concatenate(self._pending))
            self._pending, self._pending_len = [], 0
        while self._block_start < total:
            self._run_block(np.zeros(0))
        frames = []
        while self._emit_pos < total:
            frames.append(self._emit(min(self.frame_len, total - self._emit_pos), total))
        return frames


def process_stream(frame_source: Iterable, cfg: Optional[JammerConfig] = None,
                   frame_len: Optional[int] = None) -> Iterator[np.ndarray]:
    """Generator form: yields one output frame per input frame, then the flushed tail."""
    proc = None
    for frame in frame_source:
        if proc is None:
            proc = StreamProcessor(cfg, frame_len or len(frame))
        yield proc.process(frame)
    if proc is not None:
        yield from proc.flush()
