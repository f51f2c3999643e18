"""Short-time objective intelligibility (STOI), following Taal et al. (2011).

Both signals are taken to 10 kHz, frames that are more than 40 dB below the
loudest clean frame are dropped, and one-third-octave band envelopes of
the two signals are correlated over 384 ms (30-frame) segments.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioBuffer, resample

FS = 10000
FRAME = 256
HOP = FRAME // 2
NFFT = 512
N_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30
BETA_DB = -15.0
DYN_RANGE_DB = 40.0
EPS = np.finfo(np.float64).eps


class StoiError(ValueError):
    pass


def third_octave_bands(fs: int = FS, nfft: int = NFFT, n_bands: int = N_BANDS,
                       min_freq: float = MIN_FREQ) -> np.ndarray:
    """Binary (n_bands, nfft//2 + 1) matrix grouping FFT bins into one-third-octave bands."""
    freqs = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(n_bands)
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((n_bands, len(freqs)))
    for band, (lo, hi) in enumerate(zip(lows, highs)):
        lo_bin = int(np.argmin((freqs - lo) ** 2))
        hi_bin = int(np.argmin((freqs - hi) ** 2))
        obm[band, lo_bin:hi_bin] = 1.0
    return obm


_OBM = third_octave_bands()
_WINDOW = np.hanning(FRAME + 2)[1:-1]


def _frames(x: np.ndarray) -> np.ndarray:
    # frame starts 0, HOP, ... strictly below len(x) - FRAME, as in the reference code
    n = max(0, (len(x) - FRAME - 1) // HOP + 1) if len(x) > FRAME else 0
    if n == 0:
        return np.zeros((0, FRAME))
    return sliding_window_view(x, FRAME)[::HOP][:n] * _WINDOW


def _overlap_add(frames: np.ndarray) -> np.ndarray:
    out = np.zeros((len(frames) - 1) * HOP + FRAME) if len(frames) else np.zeros(0)
    for i, f in enumerate(frames):
        out[i * HOP:i * HOP + FRAME] += f
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = DYN_RANGE_DB):
    xf, yf = _frames(x), _frames(y)
    if len(xf) == 0:
        return np.zeros(0), np.zeros(0)
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep]), _overlap_add(yf[keep])


def band_envelopes(x: np.ndarray) -> np.ndarray:
    """(N_BANDS, n_frames) one-third-octave magnitudes of a 10 kHz signal."""
    spec = np.fft.rfft(_frames(x), NFFT, axis=1)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)


def envelope_correlation(x_env: np.ndarray, y_env: np.ndarray, segment: int = SEGMENT) -> float:
    """Mean clipped envelope correlation over all bands and all `segment`-frame windows."""
    xs = sliding_window_view(x_env, segment, axis=1)  # (bands, n_seg, segment)
    ys = sliding_window_view(y_env, segment, axis=1)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    y_clip = np.minimum(ys * scale, xs * (1.0 + 10.0 ** (-BETA_DB / 20.0)))
    y_c = y_clip - y_clip.mean(axis=2, keepdims=True)
    x_c = xs - xs.mean(axis=2, keepdims=True)
    y_c = y_c / (np.linalg.norm(y_c, axis=2, keepdims=True) + EPS)
    x_c = x_c / (np.linalg.norm(x_c, axis=2, keepdims=True) + EPS)
    return float(np.mean(np.sum(x_c * y_c, axis=2)))


def _prepare(clean, degraded, fs):
    if isinstance(clean, AudioBuffer):
        fs = clean.sample_rate
        clean = clean.samples
    if isinstance(degraded, AudioBuffer):
        if fs is not None and degraded.sample_rate != fs:
            raise StoiError("clean and degraded sample rates differ")
        fs = degraded.sample_rate
        degraded = degraded.samples
    if fs is None:
        raise StoiError("sample rate required for raw arrays")
    n = min(len(clean), len(degraded))
    x = np.asarray(clean[:n], dtype=np.float64)
    y = np.asarray(degraded[:n], dtype=np.float64)
    if fs != FS:
        x = resample(AudioBuffer(x, fs), FS).samples
        y = resample(AudioBuffer(y, fs), FS).samples
    return x, y


def stoi(clean, degraded, sample_rate: int = None) -> float:
    """STOI of `degraded` against `clean`; both are trimmed to the shorter length.

    Accepts AudioBuffers or raw arrays plus `sample_rate`.
    """
    x, y = _prepare(clean, degraded, sample_rate)
    if len(_frames(x)) < SEGMENT:
        raise StoiError(f"need at least {SEGMENT} analysis frames (about 384 ms) of audio")
    if not np.any(x):
        raise StoiError("clean signal is entirely silent")
    x, y = remove_silent_frames(x, y)
    x_env, y_env = band_envelopes(x), band_envelopes(y)
    if x_env.shape[1] < SEGMENT:
        raise StoiError(f"fewer than {SEGMENT} non-silent frames remain")
    return envelope_correlation(x_env, y_env)


def segment_stoi(clean, degraded, sample_rate: int = None, min_frames: int = 4) -> float:
    """STOI for short excerpts: the segment length shrinks to the frames available.

    Returns 1.0 when the clean excerpt has no usable frames (nothing to lose).
    """
    x, y = _prepare(clean, degraded, sample_rate)
    if not np.any(x):
        return 1.0
    x, y = remove_silent_frames(x, y)
    x_env, y_env = band_envelopes(x), band_envelopes(y)
    n = x_env.shape[1]
    if n < min_frames:
        return 1.0
    return envelope_correlation(x_env, y_env, min(SEGMENT, n))
