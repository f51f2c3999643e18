"""Synthetic speech-like test signals (no corpus ships with the tests)."""

import numpy as np
from scipy.signal import lfilter

from echoguard.audio import AudioBuffer

VOCAB = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
         "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa"]


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    return lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], x)


def _syllable(n, fs, rng):
    t = np.arange(n) / fs
    f0 = rng.uniform(95, 210) * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    source = sum(np.sin(k * phase) / k for k in range(1, 30))
    if rng.random() < 0.35:
        source = source + 0.6 * rng.standard_normal(n)
    out = np.zeros(n)
    for formant, bw in ((rng.uniform(300, 900), 80), (rng.uniform(900, 2400), 120),
                        (rng.uniform(2400, 3400), 200)):
        out += _resonator(source, formant, bw, fs)
    env = np.sin(np.pi * np.linspace(0, 1, n)) ** 0.7
    return out * env


def speech_like(duration=3.0, fs=16000, seed=0, n_words=6):
    """A clip of n_words equal-length 'words', each a few formant-shaped syllables and a short pause."""
    rng = np.random.default_rng(seed)
    total = int(round(duration * fs))
    bounds = np.linspace(0, total, n_words + 1).astype(int)
    x = np.zeros(total)
    for w in range(n_words):
        start, stop = bounds[w], bounds[w + 1]
        usable = int((stop - start) * 0.85)
        n_syl = rng.integers(1, 4)
        edges = np.linspace(0, usable, n_syl + 1).astype(int)
        for a, b in zip(edges[:-1], edges[1:]):
            x[start + a:start + b] += _syllable(b - a, fs, rng) * rng.uniform(0.5, 1.0)
    x /= np.max(np.abs(x)) / 0.5
    return AudioBuffer(x, fs)


def words_for(seed, n_words=6):
    rng = np.random.default_rng(1000 + seed)
    return [VOCAB[i] for i in rng.integers(0, len(VOCAB), n_words)]
