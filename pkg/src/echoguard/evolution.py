"""Evolutionary search over 10-gene room configurations.

Genes follow the room vector layout: length, width, height, mic xyz,
source xyz, absorption. Fitness rewards transcription damage and
penalizes intelligibility loss below a STOI floor:

    fitness = mean_wer - stoi_penalty * max(0, stoi_floor - mean_stoi)

Every random draw comes from a generator keyed on (seed, generation,
index), so results do not depend on how many workers evaluate a generation.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .audio import AudioBuffer
from .jammer import JammerConfig, echoguard
from .metrics import wer
from .oracle import Oracle, OracleError
from .room import RoomConfig, validate_room
from .stoi import stoi

log = logging.getLogger(__name__)

N_GENES = 10
GENE_NAMES = ("length_m", "width_m", "height_m", "mic_x", "mic_y", "mic_z",
              "src_x", "src_y", "src_z", "absorption")
POSITION_GENES = {3: 0, 4: 1, 5: 2, 6: 0, 7: 1, 8: 2}  # gene -> room-dimension gene
ORACLE_ATTEMPTS = 3
REPAIR_ATTEMPTS = 100


class BoundsError(ValueError):
    pass


class RepairError(RuntimeError):
    pass


class EvolutionAborted(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def default_bounds(dim_range=(2.0, 80.0)) -> np.ndarray:
    lo, hi = dim_range
    return np.array([[lo, hi]] * 3 + [[0.0, hi]] * 6 + [[0.0, 1.0]])


def check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape != (N_GENES, 2):
        raise BoundsError(f"bounds must have shape ({N_GENES}, 2), got {b.shape}")
    bad = [GENE_NAMES[i] for i in range(N_GENES) if not b[i, 0] <= b[i, 1]]
    if bad:
        raise BoundsError(f"lower bound exceeds upper bound for: {', '.join(bad)}")
    if np.any(b[:3, 0] <= 0):
        raise BoundsError("room dimensions must be bounded away from zero")
    if b[9, 0] < 0 or b[9, 1] > 1:
        raise BoundsError("absorption bounds must lie within [0, 1]")
    return b


@dataclass(frozen=True)
class EaConfig:
    population_size: int = 200
    generations: int = 11
    crossover_rate: float = 0.5
    mutation_rate: float = 0.5
    tournament_size: int = 3
    mutation_sigma: float = 0.1
    stoi_floor: float = 0.75
    stoi_penalty: float = 2.0
    seed: int = 0
    max_failed_fraction: float = 0.5

    def __post_init__(self):
        if self.population_size < 1 or self.generations < 1:
            raise ValueError("population_size and generations must be >= 1")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")
        for name in ("crossover_rate", "mutation_rate", "max_failed_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EaConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown EA config keys: {sorted(extra)}")
        return cls(**d)


def combine_fitness(mean_wer: float, mean_stoi: float, cfg: EaConfig) -> float:
    return mean_wer - cfg.stoi_penalty * max(0.0, cfg.stoi_floor - mean_stoi)


@dataclass
class FitnessRecord:
    genome: np.ndarray
    mean_wer: float
    mean_stoi: float
    fitness: float
    generation: int = 0
    failed: bool = False

    @property
    def room(self) -> RoomConfig:
        return RoomConfig.from_vector(self.genome)


@dataclass
class HistoryRow:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_wer: float
    best_stoi: float


@dataclass
class EvolutionResult:
    best: FitnessRecord
    history: List[HistoryRow]
    evaluations: int
    population: List[FitnessRecord] = field(default_factory=list)


def genome_rng(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(generation), int(index)])


def repair(genome: np.ndarray, bounds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Clamp to bounds, then resample any position that is not strictly inside the room."""
    g = np.clip(np.asarray(genome, dtype=np.float64), bounds[:, 0], bounds[:, 1])
    for gene, dim in POSITION_GENES.items():
        limit = g[dim]
        lo, hi = max(bounds[gene, 0], 0.0), min(bounds[gene, 1], limit)
        if 0.0 < g[gene] < limit:
            continue
        for _ in range(REPAIR_ATTEMPTS):
            value = rng.uniform(lo, hi) if hi > lo else lo
            if 0.0 < value < limit:
                g[gene] = value
                break
        else:
            raise RepairError(f"cannot place {GENE_NAMES[gene]} inside a {limit:.3f} m room "
                              f"within bounds [{bounds[gene, 0]}, {bounds[gene, 1]}]")
    return g


def init_population(cfg: EaConfig, bounds=None) -> List[np.ndarray]:
    bounds = check_bounds(default_bounds() if bounds is None else bounds)
    population = []
    for i in range(cfg.population_size):
        rng = genome_rng(cfg.seed, 0, i)
        genome = rng.uniform(bounds[:, 0], bounds[:, 1])
        population.append(repair(genome, bounds, rng))
    return population


AudioItem = Tuple[str, AudioBuffer, Sequence[str]]


def _transcribe_with_retry(oracle: Oracle, audio: AudioBuffer, sample_id: str) -> List[str]:
    for attempt in range(1, ORACLE_ATTEMPTS + 1):
        try:
            return oracle.transcribe(audio, sample_id)
        except OracleError as exc:
            log.warning("oracle failure on %s (attempt %d/%d): %s",
                        sample_id, attempt, ORACLE_ATTEMPTS, exc)
            if attempt == ORACLE_ATTEMPTS:
                raise


def evaluate_fitness(genome, audio_set: Sequence[AudioItem], oracle: Oracle, cfg: EaConfig,
                     jam_template: Optional[JammerConfig] = None,
                     generation: int = 0) -> FitnessRecord:
    if not audio_set:
        raise ValueError("audio_set is empty")
    genome = np.asarray(genome, dtype=np.float64)
    template = jam_template or JammerConfig(sample_rate=audio_set[0][1].sample_rate)
    jam_cfg = replace(template, room=RoomConfig.from_vector(genome))
    wers, stois = [], []
    try:
        for sample_id, clean, reference in audio_set:
            jammed = echoguard(clean, jam_cfg)
            hyp = _transcribe_with_retry(oracle, jammed, sample_id)
            wers.append(wer(reference, hyp).wer)
            stois.append(stoi(clean, jammed))
    except OracleError:
        return FitnessRecord(genome, math.nan, math.nan, -math.inf, generation, failed=True)
    mean_wer, mean_stoi = float(np.mean(wers)), float(np.mean(stois))
    return FitnessRecord(genome, mean_wer, mean_stoi, combine_fitness(mean_wer, mean_stoi, cfg),
                         generation)


def _tournament(fitness: np.ndarray, size: int, rng: np.random.Generator) -> int:
    entrants = rng.choice(len(fitness), size=min(size, len(fitness)), replace=False)
    # ties go to the lowest index
    return int(min(entrants, key=lambda i: (-fitness[i], i)))


def best_index(records: Sequence[FitnessRecord]) -> int:
    return int(min(range(len(records)), key=lambda i: (-records[i].fitness, i)))


def select_crossover_mutate(parents: Sequence[FitnessRecord], cfg: EaConfig, bounds=None,
                            generation: int = 1) -> List[np.ndarray]:
    """Next population: the best parent unchanged, then tournament-bred, mutated children."""
    bounds = check_bounds(default_bounds() if bounds is None else bounds)
    fitness = np.array([p.fitness for p in parents])
    span = bounds[:, 1] - bounds[:, 0]
    children = [np.array(parents[best_index(parents)].genome)]
    for i in range(1, cfg.population_size):
        rng = genome_rng(cfg.seed, generation, i)
        a = parents[_tournament(fitness, cfg.tournament_size, rng)].genome
        b = parents[_tournament(fitness, cfg.tournament_size, rng)].genome
        child = np.where(rng.random(N_GENES) < cfg.crossover_rate, b, a)
        mutate = rng.random(N_GENES) < cfg.mutation_rate
        noise = rng.normal(0.0, 1.0, N_GENES) * cfg.mutation_sigma * span
        child = child + np.where(mutate, noise, 0.0)
        children.append(repair(child, bounds, rng))
    return children


FitnessFn = Callable[[np.ndarray], Tuple[float, float]]


class Evaluator:
    """Runs fitness evaluations for one search, memoizing by genome and counting calls."""

    def __init__(self, cfg: EaConfig, audio_set=None, oracle=None, fitness_fn: FitnessFn = None,
                 jam_template: Optional[JammerConfig] = None, workers: int = 1):
        if fitness_fn is None and (not audio_set or oracle is None):
            raise ValueError("need either fitness_fn or (audio_set, oracle)")
        self.cfg = cfg
        self.audio_set = audio_set
        self.oracle = oracle
        self.fitness_fn = fitness_fn
        self.jam_template = jam_template
        self.workers = max(1, int(workers))
        self.evaluations = 0
        self._memo = {}

    def _one(self, genome: np.ndarray, generation: int) -> FitnessRecord:
        if self.fitness_fn is not None:
            mean_wer, mean_stoi = map(float, self.fitness_fn(genome))
            return FitnessRecord(genome, mean_wer, mean_stoi,
                                 combine_fitness(mean_wer, mean_stoi, self.cfg), generation)
        return evaluate_fitness(genome, self.audio_set, self.oracle, self.cfg,
                                self.jam_template, generation)

    def __call__(self, population: Sequence[np.ndarray], generation: int) -> List[FitnessRecord]:
        todo = []
        for g in population:
            key = g.tobytes()
            if key not in self._memo and key not in {k for k, _ in todo}:
                todo.append((key, g))
        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                fresh = list(pool.map(lambda kg: self._one(kg[1], generation), todo))
        else:
            fresh = [self._one(g, generation) for _, g in todo]
        self.evaluations += len(fresh)
        for (key, _), rec in zip(todo, fresh):
            self._memo[key] = rec
        return [self._memo[g.tobytes()] for g in population]


def evolve(cfg: EaConfig, bounds=None, audio_set=None, oracle=None, *,
           fitness_fn: FitnessFn = None, jam_template: Optional[JammerConfig] = None,
           workers: int = 1, on_generation: Callable[[HistoryRow], None] = None) -> EvolutionResult:
    """Run `cfg.generations` evaluate-select-breed rounds and return the best configuration."""
    bounds = check_bounds(default_bounds() if bounds is None else bounds)
    evaluate = Evaluator(cfg, audio_set, oracle, fitness_fn, jam_template, workers)
    population = init_population(cfg, bounds)
    history: List[HistoryRow] = []
    records: List[FitnessRecord] = []
    for gen in range(1, cfg.generations + 1):
        if gen > 1:
            population = select_crossover_mutate(records, cfg, bounds, gen)
        records = evaluate(population, gen)
        failed = sum(r.failed for r in records)
        if failed / len(records) > cfg.max_failed_fraction:
            raise EvolutionAborted(f"generation {gen}: {failed}/{len(records)} evaluations failed",
                                   history)
        best = records[best_index(records)]
        finite = [r.fitness for r in records if math.isfinite(r.fitness)]
        row = HistoryRow(gen, best.fitness, float(np.mean(finite)) if finite else -math.inf,
                         best.mean_wer, best.mean_stoi)
        history.append(row)
        log.info("generation %d: best %.4f mean %.4f", gen, row.best_fitness, row.mean_fitness)
        if on_generation is not None:
            on_generation(row)
    budget = cfg.population_size * (cfg.generations + 1)
    assert evaluate.evaluations <= budget, (evaluate.evaluations, budget)
    return EvolutionResult(records[best_index(records)], history, evaluate.evaluations, records)


def validate_genome(genome, bounds) -> List[str]:
    """Bound and room-validity violations of a genome (empty when valid)."""
    b = check_bounds(bounds)
    g = np.asarray(genome, dtype=np.float64)
    problems = [f"{GENE_NAMES[i]}={g[i]} outside [{b[i, 0]}, {b[i, 1]}]"
                for i in range(N_GENES) if not b[i, 0] <= g[i] <= b[i, 1]]
    return problems + validate_room(RoomConfig.from_vector(g))
