"""Minimal dense-network engine for cell architectures.

Network layout for a genotype over a :class:`SearchSpaceSpec`::

    stem   : h = x @ stem.W + stem.b           (linear, no activation)
    cell c : node 0 = h, node t = sum of op_e(node s) over edges e = (s, t)
             h = last node
    head   : logits = h @ head.W + head.b

Each cell instance owns its own weights. Gradients are written out by hand
and checked against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from .searchspace import PARAMETRIC_OPS, Genotype, SearchSpaceSpec

GROUPS = ("stem", "cell", "head")
MASKS = ("all", "cells_only")


class ParamSet:
    """Ordered, read-only mapping of parameter name to float64 array.

    Every entry also carries a group tag (stem, cell or head) used by the
    perturbation masks. Arrays are flagged read-only so a ParamSet can be
    shared freely; all "updates" build a new ParamSet.
    """

    __slots__ = ("_values", "_groups")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray, str]]) -> None:
        values: dict[str, np.ndarray] = {}
        groups: dict[str, str] = {}
        for name, arr, group in entries:
            if name in values:
                raise ValueError(f"duplicate parameter name {name!r}")
            if group not in GROUPS:
                raise ValueError(f"unknown group {group!r}")
            a = np.array(arr, dtype=np.float64, copy=True)
            a.setflags(write=False)
            values[name] = a
            groups[name] = group
        if not values or sum(a.size for a in values.values()) == 0:
            raise ValueError("a ParamSet needs at least one element")
        self._values = values
        self._groups = groups

    @classmethod
    def _trusted(cls, values: dict[str, np.ndarray], groups: dict[str, str]) -> "ParamSet":
        # arrays must already be read-only float64
        obj = cls.__new__(cls)
        obj._values = values
        obj._groups = groups
        return obj

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def group(self, name: str) -> str:
        return self._groups[name]

    def structure(self) -> list[tuple[str, tuple[int, ...], str]]:
        return [(n, a.shape, self._groups[n]) for n, a in self._values.items()]

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self._values.values()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._values.values()])

    def copy(self) -> "ParamSet":
        return ParamSet((n, a, self._groups[n]) for n, a in self._values.items())

    def subset(self, names: Iterable[str]) -> "ParamSet":
        """Independent copy restricted to ``names`` (kept in this set's order)."""
        wanted = set(names)
        missing = wanted - self._values.keys()
        if missing:
            raise ShapeMismatch(f"missing parameters: {sorted(missing)}")
        return ParamSet((n, a, self._groups[n]) for n, a in self._values.items() if n in wanted)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        values = dict(self._values)
        for name, arr in updates.items():
            old = values.get(name)
            if old is None:
                raise KeyError(name)
            a = np.array(arr, dtype=np.float64, copy=True)
            if a.shape != old.shape:
                raise ShapeMismatch(f"{name}: shape {a.shape} != {old.shape}")
            a.setflags(write=False)
            values[name] = a
        return ParamSet._trusted(values, dict(self._groups))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._values.values())

    def bit_equal(self, other: "ParamSet") -> bool:
        if self.structure() != other.structure():
            return False
        return all(self[n].tobytes() == other[n].tobytes() for n in self)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ParamSet) and self.bit_equal(other)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries, {self.size} values)"


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeMismatch(f"inputs must be a non-empty matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeMismatch(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        if not np.isfinite(x).all():
            raise ValueError("batch inputs must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class OptimizerConfig:
    lr_max: float = 0.025
    lr_min: float = 0.001
    weight_decay: float = 5e-4
    epochs: int = 60
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self) -> None:
        if not self.lr_max > 0:
            raise ValueError("lr_max must be > 0")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------- naming


def block_prefix(cell: int, edge: int, op: str) -> str:
    return f"cell{cell}.e{edge}.{op}"


def op_param_names(cell: int, edge: int, op: str) -> list[str]:
    p = block_prefix(cell, edge, op)
    if op in ("linear", "relu_linear"):
        return [f"{p}.W", f"{p}.b"]
    if op == "scale":
        return [f"{p}.g"]
    return []


STEM_NAMES = ("stem.W", "stem.b")
HEAD_NAMES = ("head.W", "head.b")


def required_names(genotype: Genotype, space: SearchSpaceSpec) -> list[str]:
    """Parameter names a genotype reads, in canonical order."""
    names = list(STEM_NAMES)
    for c in range(space.cells_per_network):
        for e in range(space.num_edges):
            names += op_param_names(c, e, space.op_of(genotype, e))
    return names + list(HEAD_NAMES)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    space: SearchSpaceSpec,
    input_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    genotype: Genotype | None = None,
) -> ParamSet:
    """Seeded initialisation of every (cell, edge, op) block.

    The full supernet layout is always drawn in the same order, so a subnet
    initialised from a given seed holds exactly the values the supernet would
    hold for those blocks.
    """
    C = space.channels
    entries: list[tuple[str, np.ndarray, str]] = [
        ("stem.W", _glorot(rng, input_dim, C), "stem"),
        ("stem.b", np.zeros(C), "stem"),
    ]
    for c in range(space.cells_per_network):
        for e in range(space.num_edges):
            for op in space.op_names:
                if op in ("linear", "relu_linear"):
                    W, b = op_param_names(c, e, op)
                    entries.append((W, _glorot(rng, C, C), "cell"))
                    entries.append((b, np.zeros(C), "cell"))
                elif op == "scale":
                    entries.append((op_param_names(c, e, op)[0], np.ones(1), "cell"))
    entries.append(("head.W", _glorot(rng, C, num_classes), "head"))
    entries.append(("head.b", np.zeros(num_classes), "head"))
    full = ParamSet(entries)
    if genotype is None:
        return full
    return full.subset(required_names(genotype, space))


# ---------------------------------------------------------------- forward / backward


def _incoming(space: SearchSpaceSpec) -> list[list[tuple[int, int]]]:
    inc: list[list[tuple[int, int]]] = [[] for _ in range(space.node_count)]
    for e, (s, t) in enumerate(space.edges):
        inc[t].append((e, s))
    return inc


def _check(params: ParamSet, genotype: Genotype, space: SearchSpaceSpec, x: np.ndarray) -> None:
    space.validate(genotype)
    for name in required_names(genotype, space):
        if name not in params:
            raise ShapeMismatch(f"parameter {name!r} required by genotype is missing")
    W = params["stem.W"]
    if x.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"input dim {x.shape[1]} does not match stem ({W.shape[0]})")
    C = space.channels
    if W.shape[1] != C or params["head.W"].shape[0] != C:
        raise ShapeMismatch(f"stem/head widths do not match channels={C}")


def _op_forward(op: str, p: str, params: ParamSet, x: np.ndarray):
    if op == "zeroize":
        return np.zeros_like(x), None
    if op == "skip":
        return x, None
    if op == "linear":
        return x @ params[p + ".W"] + params[p + ".b"], x
    if op == "relu_linear":
        z = x @ params[p + ".W"] + params[p + ".b"]
        return np.maximum(z, 0.0), (x, z)
    if op == "scale":
        return params[p + ".g"][0] * x, x
    raise ValueError(f"unknown op {op!r}")


def _op_backward(op: str, p: str, params: ParamSet, g: np.ndarray, cache, grads: dict):
    """Accumulate parameter grads into ``grads``; return the input gradient."""
    if op == "zeroize":
        return None
    if op == "skip":
        return g
    if op == "linear":
        x = cache
        grads[p + ".W"] = x.T @ g
        grads[p + ".b"] = g.sum(axis=0)
        return g @ params[p + ".W"].T
    if op == "relu_linear":
        x, z = cache
        gz = g * (z > 0.0)
        grads[p + ".W"] = x.T @ gz
        grads[p + ".b"] = gz.sum(axis=0)
        return gz @ params[p + ".W"].T
    if op == "scale":
        x = cache
        grads[p + ".g"] = np.array([np.sum(g * x)])
        return params[p + ".g"][0] * g
    raise ValueError(f"unknown op {op!r}")


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    loss = -float(np.mean(logp[np.arange(len(labels)), labels]))
    return loss, logp


def _network(params, genotype, space, x, want_cache):
    inc = _incoming(space)
    caches = []
    h = x @ params["stem.W"] + params["stem.b"]
    for c in range(space.cells_per_network):
        nodes: list[np.ndarray] = [h]
        edge_cache: dict[int, object] = {}
        for t in range(1, space.node_count):
            acc = np.zeros_like(h)
            for e, s in inc[t]:
                op = space.op_of(genotype, e)
                out, cache = _op_forward(op, block_prefix(c, e, op), params, nodes[s])
                acc = acc + out
                edge_cache[e] = cache
            nodes.append(acc)
        if want_cache:
            caches.append(edge_cache)
        h = nodes[-1]
    logits = h @ params["head.W"] + params["head.b"]
    return logits, h, caches


def forward(
    params: ParamSet, genotype: Genotype, space: SearchSpaceSpec, batch: Batch
) -> tuple[np.ndarray, float]:
    """Logits and mean cross-entropy loss of ``genotype`` on ``batch``."""
    _check(params, genotype, space, batch.inputs)
    if batch.labels.min() < 0 or batch.labels.max() >= params["head.W"].shape[1]:
        raise ShapeMismatch("labels outside the head's class range")
    with np.errstate(over="ignore", invalid="ignore"):
        logits, _, _ = _network(params, genotype, space, batch.inputs, want_cache=False)
        loss, _ = _cross_entropy(logits, batch.labels)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    return logits, loss


def loss_and_grads(
    params: ParamSet, genotype: Genotype, space: SearchSpaceSpec, batch: Batch
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus gradients for every parameter the genotype reads."""
    x, y = batch.inputs, batch.labels
    _check(params, genotype, space, x)
    with np.errstate(over="ignore", invalid="ignore"):
        logits, h_last, caches = _network(params, genotype, space, x, want_cache=True)
        loss, logp = _cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    grads: dict[str, np.ndarray] = {}
    g_logits = np.exp(logp)
    g_logits[np.arange(len(y)), y] -= 1.0
    g_logits /= len(y)
    grads["head.W"] = h_last.T @ g_logits
    grads["head.b"] = g_logits.sum(axis=0)
    g_h = g_logits @ params["head.W"].T

    inc = _incoming(space)
    for c in reversed(range(space.cells_per_network)):
        node_grads: list[np.ndarray | None] = [None] * space.node_count
        node_grads[-1] = g_h
        for t in reversed(range(1, space.node_count)):
            gt = node_grads[t]
            if gt is None:
                continue
            for e, s in inc[t]:
                op = space.op_of(genotype, e)
                gin = _op_backward(op, block_prefix(c, e, op), params, gt, caches[c][e], grads)
                if gin is not None:
                    node_grads[s] = gin if node_grads[s] is None else node_grads[s] + gin
        g_h = node_grads[0] if node_grads[0] is not None else np.zeros_like(g_h)
        # ops whose input gradient never arrived still own a (zero) gradient
        for e in range(space.num_edges):
            op = space.op_of(genotype, e)
            for name in op_param_names(c, e, op):
                if name not in grads:
                    grads[name] = np.zeros_like(params[name])

    grads["stem.W"] = x.T @ g_h
    grads["stem.b"] = g_h.sum(axis=0)
    return loss, grads


MomentumBuffers = dict


def backward_step(
    params: ParamSet,
    genotype: Genotype,
    space: SearchSpaceSpec,
    batch: Batch,
    lr: float,
    config: OptimizerConfig,
    velocity: MomentumBuffers | None = None,
    *,
    step: int | None = None,
) -> tuple[ParamSet, float]:
    """One momentum-SGD step on the parameters ``genotype`` reads.

    The L2 term ``weight_decay * w`` is added to the gradient before the
    momentum update. ``velocity`` holds the momentum buffers keyed by name and
    is updated in place; buffers of untouched parameters are left alone.
    Returns the updated ParamSet and the pre-step loss.
    """
    if not lr > 0:
        raise ValueError("lr must be > 0")
    loss, grads = loss_and_grads(params, genotype, space, batch)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}", step)
    if velocity is None:
        velocity = {}
    updates = {}
    for name, g in grads.items():
        w = params[name]
        d = g + config.weight_decay * w if config.weight_decay else g
        if config.momentum:
            v = velocity.get(name)
            v = d.copy() if v is None else config.momentum * v + d
            velocity[name] = v
            d = v
        updates[name] = w - lr * d
    return params.replace(updates), loss


def cosine_lr(epoch: int, total_epochs: int, cfg: OptimizerConfig) -> float:
    if total_epochs <= 0:
        return cfg.lr_max
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch == 0:
        return cfg.lr_max
    if epoch == total_epochs:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------- perturbation


def draw_direction(params: ParamSet, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Standard-normal draw for every entry, in the ParamSet's order."""
    return {name: rng.standard_normal(a.shape) for name, a in params.items()}


def _masked(params: ParamSet, mask: str) -> list[str]:
    if mask == "all":
        return params.names()
    if mask == "cells_only":
        return [n for n in params if params.group(n) == "cell"]
    raise ValueError(f"unknown mask {mask!r}; choose from {MASKS}")


def perturb(
    params: ParamSet, sigma: float, direction: Mapping[str, np.ndarray], mask: str = "all"
) -> ParamSet:
    """Return ``w + sigma * g`` on masked entries; others are carried unchanged."""
    if not math.isfinite(sigma):
        raise ValueError("sigma must be finite")
    names = _masked(params, mask)
    updates = {}
    for name in names:
        if name not in direction:
            raise ShapeMismatch(f"direction has no entry for {name!r}")
        g = np.asarray(direction[name], dtype=np.float64)
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"direction {name}: shape {g.shape} != {params[name].shape}")
        updates[name] = params[name] + sigma * g
    return params.replace(updates)


def is_parametric(op: str) -> bool:
    return op in PARAMETRIC_OPS
