"""Command-line front end: ``flatnas <command> [flags]``.

Every command reads an optional JSON config, applies flag overrides, prints
the digest of the inputs it depends on and embeds that digest in each file it
writes. All randomness is derived from the root seed through named streams.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import benchharness as bh
from . import checkpoint
from .data import Dataset, from_spec, load_csv, to_csv
from .errors import FlatNASError, InvalidParameter, MissingOracle
from .evolution import EvolutionConfig, evolve, save_history
from .metrics import (
    BASE_METRICS,
    SCORE_COLUMNS,
    SIGMA_GRIDS,
    FlatnessConfig,
    MetricSpec,
    ScoreRecord,
    config_digest,
    load_records,
    save_records,
    score_population,
)
from .nncore import OptimizerConfig
from .searchspace import PRESETS, SearchSpaceSpec, decode, encode, preset
from .seeding import derive_seed
from .supernet import build_supernet, extract_subnet, train_supernet

log = logging.getLogger("flatnas")

STREAMS = ("data", "supernet-init", "supernet-train", "flatness", "evolution", "oracle", "profile")

DEFAULT_DATASET = {"name": "spirals", "classes": 3, "per_class": 300, "noise_std": 0.15, "lift_dim": 16}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    space_preset: str = "micro"
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    oracle_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=40))
    oracle_seeds: int = 1
    flatness: FlatnessConfig = field(default_factory=FlatnessConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    metric: str = "flatness"
    base_metric: str = "accuracy"
    gamma: float = 0.0
    output_dir: str = "runs"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.space_preset not in PRESETS:
            raise UsageError(f"unknown preset {self.space_preset!r}; choose from {sorted(PRESETS)}")
        if self.oracle_seeds < 1:
            raise UsageError("oracle_seeds must be >= 1")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        try:
            self.metric_spec()
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def space(self) -> SearchSpaceSpec:
        return preset(self.space_preset)

    def stream(self, name: str) -> int:
        assert name in STREAMS, name
        return derive_seed(self.seed, name)

    def metric_spec(self, **overrides) -> MetricSpec:
        kw = {"name": self.metric, "flatness": self.flatness, "gamma": self.gamma}
        kw["base"] = self.base_metric if self.metric == "combined" else None
        kw.update(overrides)
        return MetricSpec(**kw)

    def dataset_spec(self) -> dict:
        spec = dict(self.dataset)
        spec.setdefault("seed", self.stream("data") % 2**32)
        return spec


_SECTIONS = {
    "optimizer": OptimizerConfig,
    "oracle_optimizer": OptimizerConfig,
    "flatness": FlatnessConfig,
    "evolution": EvolutionConfig,
}


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the JSON file, then flag overrides."""
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    sections = {k: dict(raw.pop(k, {})) for k in _SECTIONS}
    for key in ("alpha", "sigmas"):
        if overrides.get(key) is not None:
            sections["flatness"][key] = overrides.pop(key)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        for name, cls in _SECTIONS.items():
            raw[name] = cls(**sections[name])
    except (TypeError, ValueError, FlatNASError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return RunConfig(**raw)


def _config_dict(rc: RunConfig) -> dict:
    d = asdict(rc)
    d.pop("output_dir")
    d.pop("jobs")
    return d


def command_digest(command: str, rc: RunConfig, **inputs) -> str:
    """Digest of the configuration a command's outputs depend on."""
    c = _config_dict(rc)
    parts = {"dataset": rc.dataset_spec(), "space": c["space_preset"]}
    if command in ("train-supernet", "search", "profile", "sweep"):
        parts["optimizer"] = c["optimizer"]
        parts["seed"] = rc.seed
    if command in ("search", "sweep", "profile"):
        parts["flatness"] = c["flatness"]
    if command == "search":
        parts.update(evolution=c["evolution"], metric=rc.metric_spec().label)
    if command == "sweep":
        parts.update(oracle_optimizer=c["oracle_optimizer"], oracle_seeds=rc.oracle_seeds)
        parts["base_metric"] = rc.base_metric
    parts.update(inputs)
    parts["command"] = command
    return config_digest(parts)


# ---------------------------------------------------------------- helpers


def _out(rc: RunConfig) -> Path:
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(rc: RunConfig, path: str | None) -> Dataset:
    p = Path(path) if path else Path(rc.output_dir) / "dataset.csv"
    if not p.exists():
        raise FileNotFoundError(f"dataset file {p} not found; run gen-data first")
    return load_csv(p)


def _load_net(rc: RunConfig, path: str | None):
    p = Path(path) if path else Path(rc.output_dir) / "supernet.ckpt"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found; run train-supernet first")
    net, meta = checkpoint.load_supernet(p)
    return net, meta


def _emit(digest: str, message: str = "") -> None:
    print(f"config_digest={digest}")
    if message:
        print(message)


def parse_sigmas(text: str) -> tuple[float, ...]:
    if text in SIGMA_GRIDS:
        return SIGMA_GRIDS[text]
    try:
        return tuple(float(v) for v in text.replace("/", ",").split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad sigma list {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(rc: RunConfig, args) -> int:
    spec = rc.dataset_spec()
    try:
        ds = from_spec(spec)
    except (TypeError, InvalidParameter) as exc:
        raise UsageError(f"invalid dataset spec: {exc}") from None
    digest = command_digest("gen-data", rc)
    path = _out(rc) / "dataset.csv"
    lines = to_csv(ds).split("\n", 1)
    path.write_text(lines[0] + "\n" + f"# config_digest: {digest}\n" + lines[1], encoding="utf-8")
    _emit(digest, f"dataset_digest={ds.digest()}")
    return 0


def cmd_oracle(rc: RunConfig, args) -> int:
    data = _load_data(rc, args.data)
    space = rc.space()
    path = _out(rc) / "ground_truth.csv"
    seed = rc.stream("oracle")
    digest = bh.training_digest(space, data, rc.oracle_optimizer, rc.oracle_seeds, seed)

    def progress(i, n, key):
        log.info("oracle %d/%d %s", i, n, key)

    table = bh.build_ground_truth_table(
        space,
        data,
        rc.oracle_optimizer,
        rc.oracle_seeds,
        seed,
        path=path,
        max_new_entries=args.limit,
        progress=progress,
        jobs=rc.jobs,
    )
    _emit(digest, f"entries={len(table)} complete={str(table.complete).lower()}")
    return 0


def cmd_train_supernet(rc: RunConfig, args) -> int:
    data = _load_data(rc, args.data)
    space = rc.space()
    digest = command_digest("train-supernet", rc, data=data.digest())
    net = build_supernet(space, data.input_dim, data.num_classes, np.random.default_rng(rc.stream("supernet-init")))
    out = _out(rc)
    lines: list[str] = []

    def on_epoch(epoch: int, loss: float) -> None:
        lines.append(f"epoch={epoch} mean_path_loss={loss!r} config_digest={digest}")

    net = train_supernet(net, data, rc.optimizer, np.random.default_rng(rc.stream("supernet-train")), on_epoch)
    (out / "supernet_train.log").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    checkpoint.save_supernet(out / "supernet.ckpt", net, rc.seed, {"config_digest": digest})
    _emit(digest, f"epochs={net.epoch}")
    return 0


def run_search(rc: RunConfig, net, data: Dataset, metric: MetricSpec | None = None):
    """Evolutionary search on inherited supernet weights; returns (best, history, records)."""
    metric = metric or rc.metric_spec()
    val = data.split("val")
    base_seed = rc.stream("flatness")
    records: dict = {}

    def scorer(g):
        rec = score_population(net, [g], metric, val, base_seed)[0]
        records[g] = rec
        return rec.value

    cfg = dataclasses.replace(rc.evolution, seed=rc.stream("evolution") % 2**63)
    best, history = evolve(net.space, scorer, cfg, jobs=rc.jobs)
    return best, history, [records[g] for g in sorted(records)]


def cmd_search(rc: RunConfig, args) -> int:
    data = _load_data(rc, args.data)
    net, meta = _load_net(rc, args.checkpoint)
    digest = command_digest("search", rc, data=data.digest(), checkpoint=meta.get("config_digest"))
    best, history, records = run_search(rc, net, data)
    out = _out(rc)
    space = net.space
    header = {"config_digest": digest, "metric": rc.metric_spec().label, "space_preset": space.name}
    save_history(history, space, out / "history.jsonl", header)
    (out / "best.txt").write_text(
        f"genotype={encode(best.genotype, space)}\nscore={best.score!r}\nconfig_digest={digest}\n",
        encoding="utf-8",
    )
    records = [dataclasses.replace(r, config_digest=digest) for r in records]
    save_records(records, space, out / "search_scores.csv")
    _emit(digest, f"best={encode(best.genotype, space)} score={best.score!r}")
    return 0


def _load_truth_records(path: Path, space: SearchSpaceSpec) -> list[ScoreRecord]:
    """A ground-truth table, or any score CSV used as the reference ranking."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header == ",".join(SCORE_COLUMNS):
        return load_records(path, space)
    table = bh.load_table(path, space)
    return [ScoreRecord(decode(k, space), "test_accuracy", e.test_accuracy, 0, "") for k, e in table.entries.items()]


def cmd_tau(rc: RunConfig, args) -> int:
    space = rc.space()
    out = _out(rc)
    scores_path = Path(args.scores) if args.scores else out / "search_scores.csv"
    truth_path = Path(args.truth) if args.truth else out / "ground_truth.csv"
    if not truth_path.exists():
        raise MissingOracle(f"ground-truth table {truth_path} not found; run oracle first")
    records = load_records(scores_path, space)
    truth = _load_truth_records(truth_path, space)
    if args.subset:
        keep = {r.genotype for r in records}
        truth = [t for t in truth if t.genotype in keep]
    _, xs, ys = bh.align_by_genotype(records, truth)
    report = bh.tau_report(xs, ys)
    digest = command_digest(
        "tau", rc, scores=config_digest(scores_path.read_text()), truth=config_digest(truth_path.read_text())
    )
    report["config_digest"] = digest
    report["metric"] = records[0].metric_name if records else ""
    (out / "tau_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit(digest, f"tau={report['tau_b']!r}")
    return 0


def cmd_profile(rc: RunConfig, args) -> int:
    if not args.genotype:
        raise UsageError("profile needs --genotype")
    data = _load_data(rc, args.data)
    net, meta = _load_net(rc, args.checkpoint)
    g = decode(args.genotype, net.space)
    sigmas = parse_sigmas(args.profile_sigmas) if args.profile_sigmas else (0.0,) + rc.flatness.sigmas
    prof = bh.loss_curvature_profile(
        extract_subnet(net, g),
        g,
        net.space,
        data.split("val"),
        sigmas,
        args.replicates,
        np.random.default_rng(rc.stream("profile")),
        rc.flatness.mask,
    )
    digest = command_digest(
        "profile", rc, data=data.digest(), checkpoint=meta.get("config_digest"),
        genotype=args.genotype, sigmas=list(sigmas), replicates=args.replicates,
    )
    name = args.genotype.replace("|", "-")
    path = _out(rc) / f"profile_{name}.csv"
    path.write_text(prof.to_csv() + f"# config_digest={digest}\n", encoding="utf-8")
    _emit(digest, f"wrote {path}")
    return 0


SWEEP_PARAMS = ("alpha", "gamma", "sigma_grid")


def sweep_metric(rc: RunConfig, param: str, value: str) -> MetricSpec:
    if param == "alpha":
        return rc.metric_spec(name="flatness", base=None, flatness=dataclasses.replace(rc.flatness, alpha=float(value)))
    if param == "sigma_grid":
        return rc.metric_spec(name="flatness", base=None, flatness=dataclasses.replace(rc.flatness, sigmas=parse_sigmas(value)))
    if rc.base_metric not in BASE_METRICS:
        raise UsageError(f"gamma sweep needs base_metric in {BASE_METRICS}")
    return rc.metric_spec(name="combined", base=rc.base_metric, gamma=float(value))


def cmd_sweep(rc: RunConfig, args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"--param must be one of {SWEEP_PARAMS}")
    if not args.values:
        raise UsageError("sweep needs --values")
    values = [v for v in args.values.split(";" if args.param == "sigma_grid" else ",") if v.strip()]
    out = _out(rc)
    truth_path = Path(args.truth) if args.truth else out / "ground_truth.csv"
    if not truth_path.exists():
        raise MissingOracle(f"ground-truth table {truth_path} not found; run oracle first")
    data = _load_data(rc, args.data)
    net, meta = _load_net(rc, args.checkpoint)
    table = bh.load_table(truth_path, net.space)
    genotypes = sorted(decode(k, net.space) for k in table.entries)
    truth = [table.accuracy_of(encode(g, net.space)) for g in genotypes]
    digest = command_digest(
        "sweep", rc, data=data.digest(), checkpoint=meta.get("config_digest"),
        truth=config_digest(truth_path.read_text()), param=args.param, values=values,
    )
    rows = ["parameter,value,metric,tau_b,tau_a,n"]
    for v in values:
        metric = sweep_metric(rc, args.param, v)
        recs = score_population(net, genotypes, metric, data.split("val"), rc.stream("flatness"), rc.jobs)
        rep = bh.tau_report([r.value for r in recs], truth)
        rows.append(f"{args.param},{v.replace(',', '/')},{metric.label.replace(',', ' ')},{rep['tau_b']!r},{rep['tau_a']!r},{rep['n']}")
        print(f"{args.param}={v} tau={rep['tau_b']!r}")
    path = out / f"sweep_{args.param}.csv"
    path.write_text("\n".join(rows) + f"\n# config_digest={digest}\n", encoding="utf-8")
    _emit(digest, f"wrote {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "oracle": cmd_oracle,
    "train-supernet": cmd_train_supernet,
    "search": cmd_search,
    "tau": cmd_tau,
    "profile": cmd_profile,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", dest="output_dir")
    common.add_argument("--metric", choices=("flatness", "accuracy", "loss", "angle", "combined"))
    common.add_argument("--base-metric", dest="base_metric", choices=BASE_METRICS)
    common.add_argument("--gamma", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--sigmas", type=parse_sigmas, help="comma-separated floats or a grid name")
    common.add_argument("--preset", dest="space_preset", choices=sorted(PRESETS))
    common.add_argument("--data", help="dataset CSV (default: <out>/dataset.csv)")
    common.add_argument("--checkpoint", help="supernet checkpoint (default: <out>/supernet.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="flatnas", description="Flatness-guided architecture search on a desk-scale benchmark.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write the dataset CSV")
    p = sub.add_parser("oracle", parents=[common], help="train every architecture from scratch")
    p.add_argument("--limit", type=int, help="stop after this many new entries (resume later)")
    sub.add_parser("train-supernet", parents=[common], help="single-path supernet training")
    sub.add_parser("search", parents=[common], help="evolutionary search with the chosen metric")
    p = sub.add_parser("tau", parents=[common], help="Kendall's tau of scores against the oracle")
    p.add_argument("--scores", help="score CSV (default: <out>/search_scores.csv)")
    p.add_argument("--truth", help="ground-truth CSV (default: <out>/ground_truth.csv)")
    p.add_argument("--subset", action="store_true", help="restrict the oracle to the scored genotypes")
    p = sub.add_parser("profile", parents=[common], help="loss curvature profile of one architecture")
    p.add_argument("--genotype", help="op names joined by '|'")
    p.add_argument("--profile-sigmas", dest="profile_sigmas", help="sigma list (default: 0 plus the flatness grid)")
    p.add_argument("--replicates", type=int, default=16)
    p = sub.add_parser("sweep", parents=[common], help="tau per value of alpha, gamma or sigma grid")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated; sigma grids separated by ';'")
    p.add_argument("--truth", help="ground-truth CSV (default: <out>/ground_truth.csv)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        overrides = {
            k: getattr(args, k)
            for k in ("seed", "jobs", "output_dir", "metric", "base_metric", "gamma", "alpha", "sigmas", "space_preset")
        }
        rc = load_run_config(args.config, overrides)
        return COMMANDS[args.command](rc, args)
    except UsageError as exc:
        print(f"flatnas: usage error: {exc}", file=sys.stderr)
        return 1
    except (FlatNASError, OSError, ValueError, KeyError) as exc:
        print(f"flatnas: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
