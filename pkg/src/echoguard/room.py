"""Rectangular-room impulse responses by the image-source method."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

SPEED_OF_SOUND = 343.0
DISTANCE_FLOOR = 0.1
DEFAULT_MAX_ORDER = 30
TAIL_ENERGY_FRACTION = 1e-6

Vec3 = Tuple[float, float, float]


class RoomError(ValueError):
    """Raised when a room configuration violates its invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class RoomConfig:
    length_m: float
    width_m: float
    height_m: float
    mic_pos: Vec3
    src_pos: Vec3
    absorption: float

    def __post_init__(self):
        object.__setattr__(self, "mic_pos", tuple(float(v) for v in self.mic_pos))
        object.__setattr__(self, "src_pos", tuple(float(v) for v in self.src_pos))
        for name in ("length_m", "width_m", "height_m", "absorption"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])

    @property
    def direct_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.src_pos, self.mic_pos)))

    def to_vector(self) -> np.ndarray:
        """The 10-gene layout: dims, mic xyz, source xyz, absorption."""
        return np.array([self.length_m, self.width_m, self.height_m,
                         *self.mic_pos, *self.src_pos, self.absorption])

    @classmethod
    def from_vector(cls, r: Sequence[float]) -> "RoomConfig":
        r = [float(v) for v in r]
        if len(r) != 10:
            raise ValueError(f"expected 10 parameters, got {len(r)}")
        return cls(r[0], r[1], r[2], tuple(r[3:6]), tuple(r[6:9]), r[9])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mic_pos"] = list(self.mic_pos)
        d["src_pos"] = list(self.src_pos)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoomConfig":
        try:
            return cls(d["length_m"], d["width_m"], d["height_m"],
                       tuple(d["mic_pos"]), tuple(d["src_pos"]), d["absorption"])
        except (KeyError, TypeError) as exc:
            raise RoomError([f"malformed room config: {exc!r}"]) from exc


# Optimized room reported for the deployed jammer.
OPTIMIZED_ROOM = RoomConfig(68.55, 58.89, 20.73, (24.87, 23.59, 1.75), (36.11, 0.97, 1.00), 0.5)


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("impulse response must be a non-empty 1-D tap array")
        if not np.all(np.isfinite(taps)):
            raise ValueError("impulse response taps must be finite")
        taps = taps.copy()
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)

    def __len__(self):
        return self.taps.size

    @property
    def energy(self) -> float:
        return float(np.dot(self.taps, self.taps))


@dataclass(frozen=True, eq=False)
class DirectionalRirSet:
    angles: np.ndarray
    irs: List[ImpulseResponse] = field(repr=False)
    room: RoomConfig

    @property
    def sample_rate(self) -> int:
        return self.irs[0].sample_rate

    def __len__(self):
        return len(self.irs)


def validate_room(config: RoomConfig) -> List[str]:
    """Return every violated invariant; an empty list means the room is valid."""
    problems = []
    dims = (config.length_m, config.width_m, config.height_m)
    for name, value in zip(("length", "width", "height"), dims):
        if not np.isfinite(value) or value <= 0:
            problems.append(f"room {name} must be > 0 (got {value})")
    for label, pos in (("mic", config.mic_pos), ("source", config.src_pos)):
        if len(pos) != 3:
            problems.append(f"{label} position must have 3 coordinates")
            continue
        for axis, coord, limit in zip("xyz", pos, dims):
            if not (0.0 < coord < limit):
                problems.append(f"{label} outside room: {axis}={coord} not in (0, {limit})")
    if not (0.0 <= config.absorption <= 1.0):
        problems.append(f"absorption {config.absorption} not in [0, 1]")
    return problems


def _check(config: RoomConfig, max_order: int) -> None:
    problems = validate_room(config)
    if max_order < 0:
        problems.append(f"max_order must be >= 0 (got {max_order})")
    if problems:
        raise RoomError(problems)


@lru_cache(maxsize=64)
def _lattice(max_order: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer image indices (n, q) per axis with total reflection order <= max_order."""
    rng = np.arange(-((max_order + 1) // 2), (max_order + 1) // 2 + 1)
    per_axis = []
    for n in rng:
        for q in (0, 1):
            order = abs(2 * int(n) - q)
            if order <= max_order:
                per_axis.append((int(n), q, order))
    axis = np.array(per_axis, dtype=np.int64)
    n_ax, q_ax, o_ax = axis[:, 0], axis[:, 1], axis[:, 2]
    ix, iy, iz = np.meshgrid(np.arange(len(axis)), np.arange(len(axis)),
                             np.arange(len(axis)), indexing="ij")
    total = o_ax[ix] + o_ax[iy] + o_ax[iz]
    keep = total <= max_order
    ix, iy, iz = ix[keep], iy[keep], iz[keep]
    n = np.stack([n_ax[ix], n_ax[iy], n_ax[iz]], axis=1)
    q = np.stack([q_ax[ix], q_ax[iy], q_ax[iz]], axis=1)
    return n, q, total[keep]


def image_sources(config: RoomConfig, max_order: int):
    """Positions, reflection counts and distances of every image source up to max_order."""
    n, q, order = _lattice(int(max_order))
    src = np.asarray(config.src_pos)
    images = (1 - 2 * q) * src + 2 * n * config.dims
    dist = np.linalg.norm(images - np.asarray(config.mic_pos), axis=1)
    return images, order, dist


def _place_taps(delays: np.ndarray, amps: np.ndarray) -> np.ndarray:
    base = np.floor(delays).astype(np.int64)
    frac = delays - base
    taps = np.zeros(int(base.max()) + 2)
    np.add.at(taps, base, amps * (1.0 - frac))
    np.add.at(taps, base + 1, amps * frac)
    return taps


def _trim_length(taps: np.ndarray) -> int:
    energy = taps * taps
    tail = np.cumsum(energy[::-1])[::-1]
    keep = np.nonzero(tail >= TAIL_ENERGY_FRACTION * tail[0])[0]
    return int(keep[-1]) + 1


def _tap_model(config: RoomConfig, sample_rate: int, max_order: int):
    images, order, dist = image_sources(config, max_order)
    if config.absorption >= 1.0:
        live = order == 0
        images, order, dist = images[live], order[live], dist[live]
    reflect = (1.0 - config.absorption) ** (order / 2.0)
    amps = reflect / np.maximum(dist, DISTANCE_FLOOR)
    delays = dist / SPEED_OF_SOUND * sample_rate
    return images, delays, amps


def generate_rir(config: RoomConfig, sample_rate: int = 16000,
                 max_order: int = DEFAULT_MAX_ORDER) -> ImpulseResponse:
    _check(config, max_order)
    _, delays, amps = _tap_model(config, sample_rate, max_order)
    taps = _place_taps(delays, amps)
    return ImpulseResponse(taps[:_trim_length(taps)], sample_rate)


def cardioid_gain(arrival: np.ndarray, aim: float) -> np.ndarray:
    return 0.5 * (1.0 + np.cos(arrival - aim))


def generate_directional_set(config: RoomConfig, n_mics: int, sample_rate: int = 16000,
                             max_order: int = DEFAULT_MAX_ORDER) -> DirectionalRirSet:
    """One cardioid IR per microphone azimuth 2*pi*k/n_mics.

    Directivity is horizontal only: each image source's arrival azimuth at
    the mic sets its gain. All IRs are trimmed to a common length taken
    from the omnidirectional response so they can be blended sample-wise.
    """
    if n_mics < 1:
        raise ValueError(f"n_mics must be >= 1 (got {n_mics})")
    _check(config, max_order)
    images, delays, amps = _tap_model(config, sample_rate, max_order)
    mic = np.asarray(config.mic_pos)
    arrival = np.arctan2(images[:, 1] - mic[1], images[:, 0] - mic[0])
    length = _trim_length(_place_taps(delays, amps))
    angles = 2.0 * np.pi * np.arange(n_mics) / n_mics
    irs = []
    for aim in angles:
        taps = _place_taps(delays, amps * cardioid_gain(arrival, aim))[:length]
        irs.append(ImpulseResponse(taps, sample_rate))
    return DirectionalRirSet(angles, irs, config)


@lru_cache(maxsize=16)
def cached_directional_set(config: RoomConfig, n_mics: int, sample_rate: int,
                           max_order: int) -> DirectionalRirSet:
    return generate_directional_set(config, n_mics, sample_rate, max_order)
