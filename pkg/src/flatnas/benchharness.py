"""Ground-truth oracle, rank correlation and loss-curvature profiling."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batches
from .errors import GenotypeSetMismatch, LengthMismatch, NonFiniteLoss, Undefined
from .metrics import DirectionSource, ScoreRecord, config_digest, eval_loss_acc
from .nncore import (
    Batch,
    OptimizerConfig,
    ParamSet,
    backward_step,
    cosine_lr,
    draw_direction,
    forward,
    init_params,
    perturb,
)
from .searchspace import (
    DEFAULT_ENUMERATION_CAP,
    Genotype,
    SearchSpaceSpec,
    decode,
    encode,
    enumerate_all,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- oracle training


def train_from_scratch(
    genotype: Genotype,
    space: SearchSpaceSpec,
    data: Dataset,
    cfg: OptimizerConfig,
    seed: int,
) -> tuple[float, float, ParamSet]:
    """Train one architecture from a fresh seeded init.

    Returns (test accuracy, final validation loss, trained parameters).
    """
    space.validate(genotype)
    rng = np.random.default_rng(derive_seed(seed, "init"))
    params = init_params(space, data.input_dim, data.num_classes, rng, genotype)
    shuffle_seed = derive_seed(seed, "shuffle")
    velocity: dict = {}
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg)
        for batch in batches(data, "train", cfg.batch_size, shuffle_seed, epoch):
            params, _ = backward_step(params, genotype, space, batch, lr, cfg, velocity, step=step)
            step += 1
    val_loss, _ = eval_loss_acc(params, genotype, space, data.split("val"))
    _, test_acc = eval_loss_acc(params, genotype, space, data.split("test"))
    return test_acc, val_loss, params


@dataclass(frozen=True)
class TruthEntry:
    test_accuracy: float
    final_val_loss: float
    seed_count: int


@dataclass
class GroundTruthTable:
    entries: dict[str, TruthEntry]
    space_preset: str
    training_config_digest: str
    complete: bool = True

    def accuracy_of(self, genotype_str: str) -> float:
        return self.entries[genotype_str].test_accuracy

    def __len__(self) -> int:
        return len(self.entries)


TRUTH_COLUMNS = ["genotype", "test_accuracy", "final_val_loss", "seed_count"]


def _truth_row(key: str, e: TruthEntry) -> str:
    return f"{key},{e.test_accuracy!r},{e.final_val_loss!r},{e.seed_count}\n"


def _footer(preset: str, digest: str) -> str:
    return f"# space_preset={preset} config_digest={digest}\n"


def table_to_csv(table: GroundTruthTable) -> str:
    out = [",".join(TRUTH_COLUMNS) + "\n"]
    out += [_truth_row(k, e) for k, e in table.entries.items()]
    out.append(_footer(table.space_preset, table.training_config_digest))
    return "".join(out)


def save_table(table: GroundTruthTable, path: str | Path) -> None:
    Path(path).write_text(table_to_csv(table), encoding="utf-8")


def load_table(path: str | Path, space: SearchSpaceSpec | None = None) -> GroundTruthTable:
    entries: dict[str, TruthEntry] = {}
    preset, digest, complete = "", "", False
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split(",") != TRUTH_COLUMNS:
        raise ValueError(f"{path}: missing header {','.join(TRUTH_COLUMNS)}")
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            fields = dict(part.split("=", 1) for part in line[1:].split())
            preset = fields.get("space_preset", "")
            digest = fields.get("config_digest", "")
            complete = True
            continue
        if not line.strip():
            continue
        try:
            g, acc, loss, n = line.split(",")
            entry = TruthEntry(float(acc), float(loss), int(n))
        except ValueError:
            if lineno == len(lines):
                break  # row cut short by an interrupted writer
            raise
        if space is not None:
            decode(g, space)
        entries[g] = entry
    return GroundTruthTable(entries, preset, digest, complete)


def training_digest(space: SearchSpaceSpec, data: Dataset, cfg: OptimizerConfig, seeds_per_arch: int, seed: int) -> str:
    return config_digest(
        {
            "space": space.name,
            "edges": space.edges,
            "ops": space.op_names,
            "cells": space.cells_per_network,
            "channels": space.channels,
            "data": data.digest(),
            "optimizer": asdict(cfg),
            "seeds_per_arch": seeds_per_arch,
            "seed": seed,
        }
    )


def oracle_seed(seed: int, genotype_str: str, replicate: int) -> int:
    return derive_seed(seed, "oracle", genotype_str, replicate)


def evaluate_genotype(
    genotype: Genotype,
    space: SearchSpaceSpec,
    data: Dataset,
    cfg: OptimizerConfig,
    seeds_per_arch: int,
    seed: int,
) -> TruthEntry:
    key = encode(genotype, space)
    accs, losses = [], []
    for r in range(seeds_per_arch):
        acc, loss, _ = train_from_scratch(genotype, space, data, cfg, oracle_seed(seed, key, r))
        accs.append(acc)
        losses.append(loss)
    return TruthEntry(float(np.mean(accs)), float(np.mean(losses)), seeds_per_arch)


def build_ground_truth_table(
    space: SearchSpaceSpec,
    data: Dataset,
    cfg: OptimizerConfig,
    seeds_per_arch: int = 1,
    seed: int = 0,
    *,
    path: str | Path | None = None,
    max_new_entries: int | None = None,
    progress: Callable[[int, int, str], None] | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
    jobs: int = 1,
) -> GroundTruthTable:
    """Train every genotype of ``space`` ``seeds_per_arch`` times and tabulate mean test accuracy.

    With ``path`` set, rows are appended to the file as they finish and an
    existing partial table at ``path`` is resumed. ``max_new_entries`` stops
    early (leaving a partial table), which is how interruption is simulated.
    """
    if seeds_per_arch < 1:
        raise ValueError("seeds_per_arch must be >= 1")
    genotypes = enumerate_all(space, cap)
    digest = training_digest(space, data, cfg, seeds_per_arch, seed)
    done: dict[str, TruthEntry] = {}
    if path is not None and Path(path).exists():
        prior = load_table(path, space)
        if prior.training_config_digest and prior.training_config_digest != digest:
            raise ValueError(f"{path} was built with a different configuration")
        done = prior.entries

    pending = [g for g in genotypes if encode(g, space) not in done]
    if max_new_entries is not None:
        pending = pending[:max_new_entries]

    def run(g: Genotype) -> TruthEntry:
        return evaluate_genotype(g, space, data, cfg, seeds_per_arch, seed)

    entries: dict[str, TruthEntry] = {}
    fh = None
    executor = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    if path is not None:
        fh = open(path, "w", encoding="utf-8")
        fh.write(",".join(TRUTH_COLUMNS) + "\n")
    try:
        # results arrive in enumeration order, so the single writer below keeps row order fixed
        fresh = executor.map(run, pending) if executor is not None else map(run, pending)
        todo = set(pending)
        for i, g in enumerate(genotypes):
            key = encode(g, space)
            if key in done:
                entry = done[key]
            elif g in todo:
                entry = next(fresh)
            else:
                break
            entries[key] = entry
            if fh is not None:
                fh.write(_truth_row(key, entry))
                fh.flush()
            if progress is not None:
                progress(i + 1, len(genotypes), key)
        complete = len(entries) == len(genotypes)
        if fh is not None and complete:
            fh.write(_footer(space.name, digest))
    finally:
        if executor is not None:
            executor.shutdown(cancel_futures=True)
        if fh is not None:
            fh.close()
    return GroundTruthTable(entries, space.name, digest, complete)


# ---------------------------------------------------------------- Kendall's tau


@dataclass(frozen=True)
class PairCounts:
    n: int
    concordant: int
    discordant: int
    ties_x_only: int
    ties_y_only: int
    ties_both: int

    @property
    def pairs(self) -> int:
        return self.n * (self.n - 1) // 2


def _tie_pairs(sorted_values: np.ndarray) -> int:
    _, counts = np.unique(sorted_values, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _count_inversions(values: np.ndarray) -> int:
    """Pairs i < j with values[i] > values[j], by bottom-up merge sort."""
    a = np.array(values, copy=True)
    n = len(a)
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n - width, 2 * width):
            mid = lo + width
            hi = min(lo + 2 * width, n)
            left, right = a[lo:mid], a[mid:hi]
            # each right element is inverted with every strictly larger left element
            inversions += int(np.sum(len(left) - np.searchsorted(left, right, side="right")))
            a[lo:hi] = np.sort(a[lo:hi], kind="mergesort")
        width *= 2
    return inversions


def pair_counts(x: Sequence[float], y: Sequence[float]) -> PairCounts:
    """Concordant/discordant/tied pair counts in O(n log n)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"lengths differ: {x.shape} vs {y.shape}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("NaN in rank correlation input")
    n = len(x)
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    tx = _tie_pairs(xs)
    ty = _tie_pairs(np.sort(y))
    # joint ties: runs equal in both coordinates of the lexsorted sequence
    txy = 0
    if n:
        change = np.concatenate(([True], (xs[1:] != xs[:-1]) | (ys[1:] != ys[:-1])))
        starts = np.flatnonzero(change)
        runs = np.diff(np.append(starts, n))
        txy = int(np.sum(runs * (runs - 1) // 2))
    disc = _count_inversions(ys)
    total = n * (n - 1) // 2
    conc = total - tx - ty + txy - disc
    return PairCounts(n, conc, disc, tx - txy, ty - txy, txy)


def tau_from_counts(c: PairCounts) -> float:
    denom_x = c.concordant + c.discordant + c.ties_x_only
    denom_y = c.concordant + c.discordant + c.ties_y_only
    if denom_x == 0 or denom_y == 0:
        raise Undefined("Kendall's tau is undefined when one input is entirely tied")
    return (c.concordant - c.discordant) / math.sqrt(denom_x * denom_y)


def kendall_tau(scores: Sequence[float], ground_truth: Sequence[float]) -> float:
    """Kendall's tau-b; equals tau-a when neither input has ties."""
    if len(scores) != len(ground_truth):
        raise LengthMismatch(f"{len(scores)} scores vs {len(ground_truth)} ground-truth values")
    if len(scores) < 2:
        raise LengthMismatch("need at least two pairs")
    return tau_from_counts(pair_counts(scores, ground_truth))


def kendall_tau_a(scores: Sequence[float], ground_truth: Sequence[float]) -> float:
    if len(scores) != len(ground_truth):
        raise LengthMismatch(f"{len(scores)} scores vs {len(ground_truth)} ground-truth values")
    if len(scores) < 2:
        raise LengthMismatch("need at least two pairs")
    c = pair_counts(scores, ground_truth)
    return (c.concordant - c.discordant) / c.pairs


def tau_report(scores: Sequence[float], ground_truth: Sequence[float]) -> dict:
    """tau-b and tau-a side by side, with the tie counts that separate them."""
    c = pair_counts(scores, ground_truth)
    if c.n < 2:
        raise LengthMismatch("need at least two pairs")
    return {
        "n": c.n,
        "tau_b": tau_from_counts(c),
        "tau_a": (c.concordant - c.discordant) / c.pairs,
        "concordant": c.concordant,
        "discordant": c.discordant,
        "ties_scores_only": c.ties_x_only,
        "ties_truth_only": c.ties_y_only,
        "ties_both": c.ties_both,
    }


def align_by_genotype(
    a: Sequence[ScoreRecord], b: Sequence[ScoreRecord]
) -> tuple[list[Genotype], list[float], list[float]]:
    va = {r.genotype: r.value for r in a}
    vb = {r.genotype: r.value for r in b}
    if len(va) != len(a) or len(vb) != len(b):
        raise GenotypeSetMismatch("duplicate genotypes in a record list")
    if va.keys() != vb.keys():
        raise GenotypeSetMismatch(
            f"record lists cover different genotypes ({len(va.keys() - vb.keys())} only in first, "
            f"{len(vb.keys() - va.keys())} only in second)"
        )
    keys = sorted(va)
    return keys, [va[k] for k in keys], [vb[k] for k in keys]


def metric_rank_correlation(records_a: Sequence[ScoreRecord], records_b: Sequence[ScoreRecord]) -> float:
    _, xa, xb = align_by_genotype(records_a, records_b)
    return kendall_tau(xa, xb)


# ---------------------------------------------------------------- curvature profiles


@dataclass(frozen=True)
class CurvatureProfile:
    sigmas: tuple[float, ...]
    mean_losses: tuple[float, ...]
    genotype: Genotype | None
    replicates: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma", "mean_loss"])
        for s, l in zip(self.sigmas, self.mean_losses):
            w.writerow([repr(float(s)), repr(float(l))])
        return buf.getvalue()


def curvature_of(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    sigmas: Sequence[float],
    replicates: int,
    rng: np.random.Generator,
    direction_source: DirectionSource = draw_direction,
    mask: str = "all",
) -> list[float]:
    """Mean loss along ``replicates`` random rays, one value per sigma."""
    sig = [float(s) for s in sigmas]
    if not sig or any(s < 0 for s in sig) or any(b < a for a, b in zip(sig, sig[1:])):
        raise ValueError("sigmas must be non-negative and ascending")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    totals = np.zeros(len(sig))
    for _ in range(replicates):
        g = direction_source(params, rng)
        for i, s in enumerate(sig):
            value = float(loss_fn(perturb(params, s, g, mask)))
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss {value} at sigma={s}")
            totals[i] += value
    return [float(t / replicates) for t in totals]


def loss_curvature_profile(
    params: ParamSet,
    genotype: Genotype,
    space: SearchSpaceSpec,
    val_set: Batch,
    sigmas: Sequence[float],
    replicates: int = 16,
    rng: np.random.Generator | None = None,
    mask: str = "all",
) -> CurvatureProfile:
    if rng is None:
        rng = np.random.default_rng(0)

    def loss_fn(p: ParamSet) -> float:
        return forward(p, genotype, space, val_set)[1]

    means = curvature_of(loss_fn, params, sigmas, replicates, rng, mask=mask)
    return CurvatureProfile(tuple(float(s) for s in sigmas), tuple(means), genotype, replicates)
