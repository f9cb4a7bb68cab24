"""``flatnas-ckpt-v1`` container for ParamSets.

Layout::

    b"flatnas-ckpt-v1\\n"
    one line of JSON: {"format", "meta", "sections": [{"name", "entries": [{"name", "shape", "group"}]}]}
    raw little-endian float64 values of every entry, sections and entries in header order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nncore import ParamSet
from .searchspace import SearchSpaceSpec

FORMAT = "flatnas-ckpt-v1"
MAGIC = (FORMAT + "\n").encode("ascii")


def dumps(sections: dict[str, ParamSet], meta: dict) -> bytes:
    header = {
        "format": FORMAT,
        "meta": meta,
        "sections": [
            {
                "name": sec,
                "entries": [
                    {"name": n, "shape": list(shape), "group": grp}
                    for n, shape, grp in params.structure()
                ],
            }
            for sec, params in sections.items()
        ],
    }
    parts = [MAGIC, json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    for params in sections.values():
        for _, arr in params.items():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, ParamSet]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"not a {FORMAT} file")
    end = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC) : end].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unsupported format {header.get('format')!r}")
    offset = end + 1
    sections: dict[str, ParamSet] = {}
    for sec in header["sections"]:
        entries = []
        for e in sec["entries"]:
            shape = tuple(e["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if offset + nbytes > len(blob):
                raise CheckpointError("checkpoint is truncated")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
            entries.append((e["name"], arr, e["group"]))
            offset += nbytes
        sections[sec["name"]] = ParamSet(entries)
    if offset != len(blob):
        raise CheckpointError("trailing bytes after the last record")
    return header["meta"], sections


def save(path: str | Path, sections: dict[str, ParamSet], meta: dict) -> None:
    Path(path).write_bytes(dumps(sections, meta))


def load(path: str | Path) -> tuple[dict, dict[str, ParamSet]]:
    return loads(Path(path).read_bytes())


def space_to_dict(space: SearchSpaceSpec) -> dict:
    return {
        "name": space.name,
        "node_count": space.node_count,
        "edges": [list(e) for e in space.edges],
        "op_names": list(space.op_names),
        "cells_per_network": space.cells_per_network,
        "channels": space.channels,
    }


def space_from_dict(d: dict) -> SearchSpaceSpec:
    return SearchSpaceSpec(
        node_count=d["node_count"],
        edges=tuple(tuple(e) for e in d["edges"]),
        op_names=tuple(d["op_names"]),
        cells_per_network=d["cells_per_network"],
        channels=d["channels"],
        name=d.get("name", "custom"),
    )


def save_supernet(path: str | Path, net, seed: int, extra: dict | None = None) -> None:
    meta = {
        "kind": "supernet",
        "space_preset": net.space.name,
        "space": space_to_dict(net.space),
        "seed": int(seed),
        "epoch": int(net.epoch),
        "input_dim": int(net.input_dim),
        "num_classes": int(net.num_classes),
    }
    if extra:
        meta.update(extra)
    save(path, {"current": net.shared_params, "initial": net.initial_snapshot}, meta)


def load_supernet(path: str | Path):
    from .supernet import SuperNet

    meta, sections = load(path)
    if meta.get("kind") != "supernet" or set(sections) != {"current", "initial"}:
        raise CheckpointError(f"{path} is not a supernet checkpoint")
    net = SuperNet(
        space=space_from_dict(meta["space"]),
        shared_params=sections["current"],
        initial_snapshot=sections["initial"],
        input_dim=meta["input_dim"],
        num_classes=meta["num_classes"],
        epoch=meta["epoch"],
    )
    return net, meta
