"""Evolutionary search over genotypes with a pluggable scorer.

Each iteration scores the not-yet-scored members of the population, keeps
the top-k (score descending, ties broken by the lexicographically smaller
genotype), and builds the next population from those elites, uniform
crossover children of elite pairs, and mutants of single elites. A genotype
is scored at most once per run.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import EmptyHistory, InfeasibleConfig, ScorerFailure
from .searchspace import (
    DEFAULT_ENUMERATION_CAP,
    Genotype,
    SearchSpaceSpec,
    crossover,
    decode,
    encode,
    enumerate_all,
    mutate,
    random_genotype,
)

log = logging.getLogger(__name__)

ORIGINS = ("seed_random", "crossover", "mutation", "elite")


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 100
    iterations: int = 20
    top_k: int | None = None
    crossover_count: int | None = None
    mutation_count: int | None = None
    mutation_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        pop = self.population_size
        if pop < 2:
            raise InfeasibleConfig("population_size must be >= 2")
        if self.iterations < 1:
            raise InfeasibleConfig("iterations must be >= 1")
        top_k = pop // 2 if self.top_k is None else self.top_k
        cross = (pop - top_k) // 2 if self.crossover_count is None else self.crossover_count
        mut = pop - top_k - cross if self.mutation_count is None else self.mutation_count
        object.__setattr__(self, "top_k", top_k)
        object.__setattr__(self, "crossover_count", cross)
        object.__setattr__(self, "mutation_count", mut)
        if not 1 <= top_k <= pop:
            raise InfeasibleConfig(f"top_k={top_k} must lie in [1, population_size={pop}]")
        if cross < 0 or mut < 0:
            raise InfeasibleConfig("offspring counts must be >= 0")
        if top_k + cross + mut < pop:
            raise InfeasibleConfig(
                f"top_k + crossover_count + mutation_count = {top_k + cross + mut} < population_size {pop}"
            )
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise InfeasibleConfig("mutation_rate must lie in [0, 1]")


@dataclass(frozen=True)
class Candidate:
    genotype: Genotype
    score: float
    origin: str


Snapshot = list  # list[Candidate], one per iteration


def _rank_key(c: Candidate):
    return (-c.score, c.genotype)


def best_of_history(history: Iterable[Snapshot]) -> Candidate:
    best = None
    for snap in history:
        for c in snap:
            if best is None or _rank_key(c) < _rank_key(best):
                best = c
    if best is None:
        raise EmptyHistory("history holds no scored candidates")
    return best


class _Pool:
    """Source of never-seen genotypes."""

    def __init__(self, space: SearchSpaceSpec, rng: np.random.Generator, cap: int) -> None:
        self.space = space
        self.rng = rng
        self.cap = cap
        self.seen: set[Genotype] = set()

    def exhausted(self) -> bool:
        return len(self.seen) >= self.space.size

    def claim(self, g: Genotype) -> bool:
        if g in self.seen:
            return False
        self.seen.add(g)
        return True

    def fresh(self, attempts: int = 64) -> Genotype | None:
        if self.exhausted():
            return None
        for _ in range(attempts):
            g = random_genotype(self.space, self.rng)
            if self.claim(g):
                return g
        if self.space.size > self.cap:
            return None
        unseen = [g for g in enumerate_all(self.space, self.cap) if g not in self.seen]
        g = unseen[int(self.rng.integers(len(unseen)))]
        self.seen.add(g)
        return g


def evolve(
    space: SearchSpaceSpec,
    scorer: Callable[[Genotype], float],
    cfg: EvolutionConfig,
    *,
    jobs: int = 1,
    failures: list[ScorerFailure] | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
    max_attempts: int = 16,
) -> tuple[Candidate, list[Snapshot]]:
    """Search ``space`` for the genotype maximising ``scorer``.

    Returns the best candidate ever scored and one population snapshot per
    iteration. Scorer exceptions discard the candidate; they are appended to
    ``failures`` when a list is given.
    """
    rng = np.random.default_rng(cfg.seed)
    pool = _Pool(space, rng, cap)
    scores: dict[Genotype, float] = {}

    population: list[tuple[Genotype, str]] = []
    while len(population) < cfg.population_size:
        g = pool.fresh()
        if g is None:
            break
        population.append((g, "seed_random"))

    history: list[Snapshot] = []
    for it in range(cfg.iterations):
        todo = [g for g, _ in population if g not in scores]
        for g, value in zip(todo, _score_all(scorer, todo, jobs)):
            if isinstance(value, BaseException):
                err = ScorerFailure(g, value)
                log.warning("%s", err)
                if failures is not None:
                    failures.append(err)
                continue
            try:
                value = float(value)
            except (TypeError, ValueError):
                value = math.nan
            if math.isnan(value):
                err = ScorerFailure(g, ValueError("scorer returned a non-number"))
                if failures is not None:
                    failures.append(err)
                continue
            scores[g] = value
        snapshot = [Candidate(g, scores[g], origin) for g, origin in population if g in scores]
        history.append(snapshot)
        log.debug("iteration %d: %d scored candidates", it, len(snapshot))
        if it == cfg.iterations - 1:
            break

        elites = sorted(snapshot, key=_rank_key)[: cfg.top_k]
        nxt: list[tuple[Genotype, str]] = [(c.genotype, "elite") for c in elites]
        if elites:
            for _ in range(cfg.crossover_count):
                if len(nxt) >= cfg.population_size:
                    break
                for _ in range(max_attempts):
                    a = elites[int(rng.integers(len(elites)))].genotype
                    b = elites[int(rng.integers(len(elites)))].genotype
                    child = crossover(a, b, rng)
                    if pool.claim(child):
                        nxt.append((child, "crossover"))
                        break
            for _ in range(cfg.mutation_count):
                if len(nxt) >= cfg.population_size:
                    break
                for _ in range(max_attempts):
                    parent = elites[int(rng.integers(len(elites)))].genotype
                    child = mutate(parent, cfg.mutation_rate, rng, space)
                    if pool.claim(child):
                        nxt.append((child, "mutation"))
                        break
        while len(nxt) < cfg.population_size:
            g = pool.fresh()
            if g is None:
                break
            nxt.append((g, "seed_random"))
        population = nxt

    return best_of_history(history), history


def _score_all(scorer, genotypes: list[Genotype], jobs: int) -> list:
    def safe(g):
        try:
            return scorer(g)
        except Exception as exc:  # recorded as a candidate-level failure
            return exc

    if jobs <= 1 or len(genotypes) < 2:
        return [safe(g) for g in genotypes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(safe, genotypes))


# ---------------------------------------------------------------- history log


def history_lines(history: list[Snapshot], space: SearchSpaceSpec) -> list[str]:
    lines = []
    for it, snap in enumerate(history):
        for c in snap:
            rec = {"iteration": it, "genotype": encode(c.genotype, space), "score": c.score, "origin": c.origin}
            lines.append(json.dumps(rec, sort_keys=True))
    return lines


def save_history(
    history: list[Snapshot], space: SearchSpaceSpec, path: str | Path, header: dict | None = None
) -> None:
    lines = history_lines(history, space)
    if header is not None:
        lines.insert(0, json.dumps({"header": header}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_history(path: str | Path, space: SearchSpaceSpec) -> list[Snapshot]:
    history: list[Snapshot] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "header" in rec:
            continue
        it = rec["iteration"]
        while len(history) <= it:
            history.append([])
        history[it].append(Candidate(decode(rec["genotype"], space), float(rec["score"]), rec["origin"]))
    return history
