"""Architecture scoring: validation loss/accuracy, angle, flatness and combinations.

All scores are "higher is better" so search can always take the argmax.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import FlatNASError, NonFiniteLoss, ZeroVector
from .nncore import MASKS, Batch, ParamSet, draw_direction, forward, perturb
from .searchspace import Genotype, SearchSpaceSpec, decode, encode
from .seeding import derive_seed

FLAT_MAX = 1e12

# (2e-3, 1e-2, 2e-2) is the default; the others are the alternative ranges
# exposed for the perturbation-range sweep.
SIGMA_GRIDS = {
    "tiny": (1e-6, 5e-6, 1e-5),
    "small": (5e-4, 1e-3, 2e-3),
    "default": (2e-3, 1e-2, 2e-2),
    "wide": (2e-3, 2e-2, 4e-2),
    "darts-c10": (1e-5, 5e-5, 1e-4),
    "darts-c100": (1e-3, 3e-3, 6e-3),
}


@dataclass(frozen=True)
class FlatnessConfig:
    sigmas: tuple[float, ...] = SIGMA_GRIDS["default"]
    alpha: float = 1.0
    replicates: int = 8
    mode: str = "ray"
    mask: str = "all"
    eval_subset_size: int = 512
    signed_variant: bool = False
    epsilon: float = 1e-12
    subset_seed: int = 0

    def __post_init__(self) -> None:
        sig = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        if len(sig) < 2:
            raise ValueError("need at least two sigmas")
        if any(not s > 0 or not math.isfinite(s) for s in sig):
            raise ValueError("sigmas must be finite and > 0")
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError("sigmas must be strictly increasing")
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and >= 0")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.mode not in ("ray", "independent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mask not in MASKS:
            raise ValueError(f"unknown mask {self.mask!r}")
        if self.eval_subset_size < 1:
            raise ValueError("eval_subset_size must be >= 1")
        if not 0 < self.epsilon <= 1e-6:
            raise ValueError("epsilon must lie in (0, 1e-6]")

    @property
    def flat_max(self) -> float:
        return 1.0 / self.epsilon

    def digest(self) -> str:
        return config_digest(asdict(self))


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- PBS


def eval_loss_acc(
    params: ParamSet, genotype: Genotype, space: SearchSpaceSpec, eval_set: Batch
) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy (ties go to the lowest class index)."""
    logits, loss = forward(params, genotype, space, eval_set)
    acc = float(np.mean(np.argmax(logits, axis=1) == eval_set.labels))
    return loss, acc


def eval_subset(eval_set: Batch, size: int, seed: int) -> Batch:
    n = len(eval_set)
    if size >= n:
        return eval_set
    idx = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
    return Batch(eval_set.inputs[idx], eval_set.labels[idx])


# ---------------------------------------------------------------- flatness


def flatness_denominator(
    losses: Sequence[float], sigmas: Sequence[float], alpha: float, signed: bool = False
) -> float:
    """Summed loss slopes across the sigma grid plus the alpha-weighted depth term.

    ``losses[i]`` is the loss at perturbation scale ``sigmas[i]``.
    """
    total = 0.0
    for i in range(len(sigmas) - 1):
        slope = (losses[i + 1] - losses[i]) / (sigmas[i + 1] - sigmas[i])
        total += slope if signed else abs(slope)
    depth = losses[0] / sigmas[0]
    total += alpha * (depth if signed else abs(depth))
    return total


def flatness_from_losses(loss_rows: Iterable[Sequence[float]], cfg: FlatnessConfig) -> float:
    """Inverse of the replicate-averaged denominator, clamped below at ``cfg.epsilon``."""
    dens = [flatness_denominator(row, cfg.sigmas, cfg.alpha, cfg.signed_variant) for row in loss_rows]
    if not dens:
        raise ValueError("no replicates")
    mean = float(np.mean(dens))
    if not math.isfinite(mean):
        raise NonFiniteLoss(f"flatness denominator is {mean}")
    if mean <= cfg.epsilon:
        return cfg.flat_max
    return 1.0 / mean


DirectionSource = Callable[[ParamSet, np.random.Generator], Mapping[str, np.ndarray]]


def perturbed_losses(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    cfg: FlatnessConfig,
    rng: np.random.Generator,
    direction_source: DirectionSource = draw_direction,
) -> list[list[float]]:
    """Loss at every sigma for every replicate.

    In ray mode one direction per replicate is rescaled across the grid; in
    independent mode each sigma gets a fresh draw.
    """
    rows = []
    for _ in range(cfg.replicates):
        if cfg.mode == "ray":
            g = direction_source(params, rng)
            dirs = [g] * len(cfg.sigmas)
        else:
            dirs = [direction_source(params, rng) for _ in cfg.sigmas]
        row = []
        for sigma, g in zip(cfg.sigmas, dirs):
            value = float(loss_fn(perturb(params, sigma, g, cfg.mask)))
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss {value} at sigma={sigma}")
            row.append(value)
        rows.append(row)
    return rows


def flatness_of(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    cfg: FlatnessConfig,
    rng: np.random.Generator,
    direction_source: DirectionSource = draw_direction,
) -> float:
    """Flatness of an arbitrary loss surface around ``params``."""
    return flatness_from_losses(perturbed_losses(loss_fn, params, cfg, rng, direction_source), cfg)


def flatness_score(
    params: ParamSet,
    genotype: Genotype,
    space: SearchSpaceSpec,
    val_set: Batch,
    cfg: FlatnessConfig,
    rng: np.random.Generator,
) -> float:
    """Flatness-and-depth score of a network on a fixed seeded validation subset."""
    subset = eval_subset(val_set, cfg.eval_subset_size, cfg.subset_seed)

    def loss_fn(p: ParamSet) -> float:
        return forward(p, genotype, space, subset)[1]

    return flatness_of(loss_fn, params, cfg, rng)


# ---------------------------------------------------------------- angle / combined


def angle_score(initial: ParamSet, final: ParamSet) -> float:
    """Angle between the flattened initial and final weight vectors, in [0, pi]."""
    if [(n, s) for n, s, _ in initial.structure()] != [(n, s) for n, s, _ in final.structure()]:
        raise ValueError("initial and final ParamSets differ in structure")
    v0 = initial.flatten()
    vf = final.flatten()
    n0 = float(np.linalg.norm(v0))
    nf = float(np.linalg.norm(vf))
    if n0 < 1e-30 or nf < 1e-30:
        raise ZeroVector("angle is undefined for a zero weight vector")
    cos = float(np.dot(v0, vf)) / (n0 * nf)
    return math.acos(min(1.0, max(-1.0, cos)))


def combined_score(base: float, flatness: float, gamma: float, sigma1: float) -> float:
    """``base + gamma * flatness / sigma1``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not sigma1 > 0:
        raise ValueError("sigma1 must be > 0")
    return base + gamma * (1.0 / sigma1) * flatness


# ---------------------------------------------------------------- population scoring

METRICS = ("flatness", "accuracy", "loss", "angle", "combined")
BASE_METRICS = ("accuracy", "loss", "angle")


@dataclass(frozen=True)
class MetricSpec:
    """Which score to compute. ``loss`` is the negated validation loss."""

    name: str = "flatness"
    flatness: FlatnessConfig = field(default_factory=FlatnessConfig)
    base: str | None = None
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if self.name not in METRICS:
            raise ValueError(f"unknown metric {self.name!r}; choose from {METRICS}")
        if self.name == "combined":
            if self.base not in BASE_METRICS:
                raise ValueError(f"combined metric needs a base in {BASE_METRICS}")
            if not self.gamma >= 0:
                raise ValueError("gamma must be >= 0")

    @property
    def label(self) -> str:
        if self.name == "combined":
            return f"combined({self.base},{self.gamma!r})"
        return self.name

    def digest(self) -> str:
        return config_digest(asdict(self))


@dataclass(frozen=True)
class ScoreRecord:
    genotype: Genotype
    metric_name: str
    value: float
    seed: int
    config_digest: str


class GenotypeScoringError(FlatNASError):
    def __init__(self, genotype: Genotype, cause: BaseException) -> None:
        super().__init__(f"scoring {genotype} failed: {cause!r}")
        self.genotype = genotype
        self.cause = cause


def score_subnet(
    metric: MetricSpec,
    space: SearchSpaceSpec,
    genotype: Genotype,
    params: ParamSet,
    initial: ParamSet | None,
    val_set: Batch,
    seed: int,
) -> float:
    """Value of ``metric`` for one subnet; ``seed`` drives the flatness noise."""

    def base_value(name: str) -> float:
        if name == "angle":
            if initial is None:
                raise ValueError("angle metric needs the initial weights")
            return angle_score(initial, params)
        loss, acc = eval_loss_acc(params, genotype, space, val_set)
        return acc if name == "accuracy" else -loss

    if metric.name == "flatness":
        return flatness_score(params, genotype, space, val_set, metric.flatness, np.random.default_rng(seed))
    if metric.name in BASE_METRICS:
        return base_value(metric.name)
    base = base_value(metric.base)
    flat = flatness_score(params, genotype, space, val_set, metric.flatness, np.random.default_rng(seed))
    return combined_score(base, flat, metric.gamma, metric.flatness.sigmas[0])


def score_population(
    supernet,
    genotypes: Sequence[Genotype],
    metric: MetricSpec,
    val_set: Batch,
    base_seed: int,
    jobs: int = 1,
) -> list[ScoreRecord]:
    """Score every genotype's inherited subnet; records come back in input order.

    Each genotype gets its own noise seed ``base_seed ^ hash(genotype string)``,
    so results do not depend on list order or on ``jobs``.
    """
    from .supernet import extract_initial_subnet, extract_subnet

    space = supernet.space
    digest = metric.digest()

    def one(g: Genotype) -> ScoreRecord:
        key = encode(g, space)
        seed = derive_seed(base_seed, key)
        try:
            params = extract_subnet(supernet, g)
            initial = extract_initial_subnet(supernet, g) if _needs_initial(metric) else None
            value = score_subnet(metric, space, g, params, initial, val_set, seed)
        except Exception as exc:
            raise GenotypeScoringError(g, exc) from exc
        return ScoreRecord(g, metric.label, value, seed, digest)

    if jobs <= 1 or len(genotypes) < 2:
        return [one(g) for g in genotypes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, genotypes))


def _needs_initial(metric: MetricSpec) -> bool:
    return metric.name == "angle" or (metric.name == "combined" and metric.base == "angle")


# ---------------------------------------------------------------- CSV I/O

SCORE_COLUMNS = ["genotype", "metric", "value", "seed", "config_digest"]


def records_to_csv(records: Iterable[ScoreRecord], space: SearchSpaceSpec) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for r in records:
        w.writerow([encode(r.genotype, space), r.metric_name, repr(float(r.value)), r.seed, r.config_digest])
    return buf.getvalue()


def save_records(records: Iterable[ScoreRecord], space: SearchSpaceSpec, path: str | Path) -> None:
    Path(path).write_text(records_to_csv(records, space), encoding="utf-8")


def load_records(path: str | Path, space: SearchSpaceSpec) -> list[ScoreRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != SCORE_COLUMNS:
        raise ValueError(f"{path}: missing header {','.join(SCORE_COLUMNS)}")
    return [
        ScoreRecord(decode(g, space), m, float(v), int(s), d) for g, m, v, s, d in rows[1:]
    ]
