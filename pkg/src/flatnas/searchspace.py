"""Cell search spaces, genotypes and the genetic operators used by search.

A cell is a small DAG. Node 0 receives the cell input, every other node sums
the outputs of its incoming edges, and the last node is the cell output. A
genotype picks one operation per edge.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import EnumerationCapExceeded, ParseError, SpaceMismatch

DEFAULT_ENUMERATION_CAP = 2**16

OPS = ("zeroize", "skip", "linear", "relu_linear", "scale")
PARAMETRIC_OPS = frozenset({"linear", "relu_linear", "scale"})


@dataclass(frozen=True)
class SearchSpaceSpec:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    op_names: tuple[str, ...]
    cells_per_network: int = 3
    channels: int = 16
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple((int(s), int(t)) for s, t in self.edges))
        object.__setattr__(self, "op_names", tuple(self.op_names))
        if self.node_count < 2:
            raise ValueError("node_count must be >= 2")
        if not self.edges:
            raise ValueError("a cell needs at least one edge")
        if not self.op_names:
            raise ValueError("op_names must be non-empty")
        if len(set(self.op_names)) != len(self.op_names):
            raise ValueError("op_names must be unique")
        for s, t in self.edges:
            if not 0 <= s < t < self.node_count:
                raise ValueError(f"edge ({s}, {t}) violates source < target < node_count")
        if self.cells_per_network < 1 or self.channels < 1:
            raise ValueError("cells_per_network and channels must be >= 1")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_ops(self) -> int:
        return len(self.op_names)

    @property
    def size(self) -> int:
        return self.num_ops**self.num_edges

    def validate(self, g: "Genotype") -> None:
        if len(g) != self.num_edges:
            raise SpaceMismatch(f"genotype has {len(g)} edges, space has {self.num_edges}")
        for i in g.op_indices:
            if not 0 <= i < self.num_ops:
                raise SpaceMismatch(f"op index {i} outside [0, {self.num_ops})")

    def op_of(self, g: "Genotype", edge: int) -> str:
        return self.op_names[g.op_indices[edge]]


@dataclass(frozen=True, order=True)
class Genotype:
    """One op index per cell edge. Ordering is lexicographic on the indices."""

    op_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "op_indices", tuple(int(i) for i in self.op_indices))

    def __len__(self) -> int:
        return len(self.op_indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.op_indices)

    def __getitem__(self, i: int) -> int:
        return self.op_indices[i]

    def __repr__(self) -> str:
        return f"Genotype({list(self.op_indices)})"


def micro_space() -> SearchSpaceSpec:
    return SearchSpaceSpec(
        node_count=3,
        edges=((0, 1), (0, 2), (1, 2)),
        op_names=("zeroize", "skip", "relu_linear"),
        name="micro",
    )


def nano201_space() -> SearchSpaceSpec:
    return SearchSpaceSpec(
        node_count=4,
        edges=((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)),
        op_names=OPS,
        name="nano201",
    )


PRESETS = {"micro": micro_space, "nano201": nano201_space}


def preset(name: str, **overrides) -> SearchSpaceSpec:
    try:
        base = PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown space preset {name!r}; choose from {sorted(PRESETS)}") from None
    if not overrides:
        return base
    fields = dict(
        node_count=base.node_count,
        edges=base.edges,
        op_names=base.op_names,
        cells_per_network=base.cells_per_network,
        channels=base.channels,
        name=base.name,
    )
    fields.update(overrides)
    return SearchSpaceSpec(**fields)


def enumerate_all(space: SearchSpaceSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> list[Genotype]:
    """Every genotype of ``space`` in lexicographic order."""
    if space.size > cap:
        raise EnumerationCapExceeded(f"space has {space.size} genotypes, cap is {cap}")
    return [Genotype(t) for t in itertools.product(range(space.num_ops), repeat=space.num_edges)]


def genotype_index(g: Genotype, space: SearchSpaceSpec) -> int:
    """Position of ``g`` in ``enumerate_all(space)``."""
    idx = 0
    for i in g.op_indices:
        idx = idx * space.num_ops + i
    return idx


def random_genotype(space: SearchSpaceSpec, rng: np.random.Generator) -> Genotype:
    return Genotype(tuple(int(i) for i in rng.integers(space.num_ops, size=space.num_edges)))


def mutate(
    g: Genotype, per_edge_rate: float, rng: np.random.Generator, space: SearchSpaceSpec
) -> Genotype:
    """Reassign each edge, with probability ``per_edge_rate``, to a different op.

    Per edge the stream consumes one uniform draw; when it fires and an
    alternative exists, one more integer draw in ``[0, num_ops - 1)`` picks the
    replacement, skipping over the current op.
    """
    if not 0.0 <= per_edge_rate <= 1.0:
        raise ValueError("per_edge_rate must lie in [0, 1]")
    num_ops = space.num_ops
    out = list(g.op_indices)
    for e, cur in enumerate(out):
        fire = rng.random() < per_edge_rate
        if fire and num_ops > 1:
            r = int(rng.integers(num_ops - 1))
            out[e] = r if r < cur else r + 1
    return Genotype(tuple(out))


def crossover(a: Genotype, b: Genotype, rng: np.random.Generator) -> Genotype:
    """Uniform crossover: coordinate i comes from ``a`` when a fair coin lands below 0.5."""
    if len(a) != len(b):
        raise SpaceMismatch(f"cannot cross genotypes of length {len(a)} and {len(b)}")
    take_a = rng.random(len(a)) < 0.5
    return Genotype(tuple(x if t else y for x, y, t in zip(a.op_indices, b.op_indices, take_a)))


def encode(g: Genotype, space: SearchSpaceSpec) -> str:
    space.validate(g)
    return "|".join(space.op_names[i] for i in g.op_indices)


def decode(s: str, space: SearchSpaceSpec) -> Genotype:
    parts = s.split("|")
    if len(parts) != space.num_edges:
        raise ParseError(f"{s!r} has {len(parts)} ops, expected {space.num_edges}")
    lookup = {name: i for i, name in enumerate(space.op_names)}
    try:
        return Genotype(tuple(lookup[p] for p in parts))
    except KeyError as exc:
        raise ParseError(f"unknown op name {exc.args[0]!r} in {s!r}") from None


def export_dot(g: Genotype, space: SearchSpaceSpec) -> str:
    """Graphviz DOT description of the cell selected by ``g``."""
    space.validate(g)
    lines = ["digraph cell {", "  rankdir=LR;"]
    last = space.node_count - 1
    for n in range(space.node_count):
        role = "input" if n == 0 else "output" if n == last else "inner"
        lines.append(f'  n{n} [label="{n}", role="{role}"];')
    for e, (s, t) in enumerate(space.edges):
        lines.append(f'  n{s} -> n{t} [label="{space.op_of(g, e)}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def parametric_edges(g: Genotype, space: SearchSpaceSpec) -> Sequence[int]:
    return [e for e in range(space.num_edges) if space.op_of(g, e) in PARAMETRIC_OPS]
