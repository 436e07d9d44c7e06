"""Binary checkpoints for continual-learning states.

Layout::

    b"HALRP01\\n"
    uint32 LE      header length H
    H bytes        JSON header (sorted keys): format version, config echo,
                   network layout, task records and the array table
    payload        little-endian float64 arrays, concatenated in table order
    uint64 LE      BLAKE2b-64 checksum of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .engine import ContinualState, ExperimentConfig, ReferenceState
from .linalg import LowRankFactors
from .nn import Head, LayerSpec, Network
from .perturb import TaskLayerParams, TaskPrivateParams
from .reg_prune import PruneSpec

MAGIC = b"HALRP01\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class _Packer:
    def __init__(self):
        self.table, self.chunks, self.offset = [], [], 0

    def add(self, name: str, a) -> str:
        a = np.ascontiguousarray(a, dtype="<f8")
        self.table.append({"name": name, "shape": list(a.shape), "offset": self.offset})
        raw = a.tobytes()
        self.chunks.append(raw)
        self.offset += len(raw)
        return name


def _pack_network(pk: _Packer, net: Network, prefix: str) -> dict:
    return {
        "layers": [[s.kind, s.in_dim, s.out_dim, s.kernel, s.stride, s.padding] for s in net.layers],
        "input_shape": list(net.input_shape),
        "weights": {str(i): pk.add(f"{prefix}.w{i}", w) for i, w in net.weights.items()},
        "biases": {str(i): pk.add(f"{prefix}.b{i}", b) for i, b in net.biases.items()},
        "heads": {str(t): [pk.add(f"{prefix}.head{t}.w", h.weight), pk.add(f"{prefix}.head{t}.b", h.bias)]
                  for t, h in net.heads.items()},
    }


def _pack_task(pk: _Packer, p: TaskPrivateParams) -> dict:
    pre = f"task{p.task_id}"
    return {
        "task_id": p.task_id,
        "biases": {str(i): pk.add(f"{pre}.b{i}", b) for i, b in p.biases.items()},
        "head": [pk.add(f"{pre}.head.w", p.head_weight), pk.add(f"{pre}.head.b", p.head_bias)],
        "layers": {
            str(i): {
                "layer_index": lp.layer_index,
                "r": pk.add(f"{pre}.r{i}", lp.r),
                "s": pk.add(f"{pre}.s{i}", lp.s),
                "U": pk.add(f"{pre}.U{i}", lp.low_rank.U),
                "sigma": pk.add(f"{pre}.sigma{i}", lp.low_rank.sigma),
                "V": pk.add(f"{pre}.V{i}", lp.low_rank.V),
            }
            for i, lp in p.layers.items()
        },
    }


def _matrix_to_json(A):
    return [[None if math.isnan(v) else float(v) for v in row] for row in np.asarray(A)]


def _matrix_from_json(rows):
    return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)


def save_checkpoint(path, state, extra: dict | None = None) -> None:
    pk = _Packer()
    header = {
        "version": VERSION,
        "config": state.config.as_dict(),
        "history": _matrix_to_json(state.history),
        "task_names": [int(x) for x in state.task_names],
        "extra": extra or {},
    }
    if isinstance(state, ContinualState):
        header["kind"] = "halrp"
        header["base"] = _pack_network(pk, state.base, "base")
        header["tasks"] = [_pack_task(pk, state.tasks[t]) for t in sorted(state.tasks)]
        header["log"] = state.log
    elif isinstance(state, ReferenceState):
        header["kind"] = "reference"
        if state.shared is not None:
            header["shared"] = _pack_network(pk, state.shared, "shared")
        header["networks"] = {str(t): _pack_network(pk, n, f"net{t}") for t, n in state.networks.items()}
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    header["arrays"] = pk.table
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(pk.chunks)
    Path(path).write_bytes(body + struct.pack("<Q", _checksum(body)))


def _read(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if _checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<I", body, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = body[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        arrays[entry["name"]] = a.astype(np.float64).reshape(entry["shape"])
    return header, arrays


def _config_from(d: dict) -> ExperimentConfig:
    d = dict(d)
    prune = PruneSpec(d.pop("prune"), d.pop("prune_tau"), d.pop("prune_gamma"))
    d["hidden"] = tuple(d["hidden"])
    return ExperimentConfig(prune=prune, **d)


def _unpack_network(h: dict, arrays) -> Network:
    layers = [LayerSpec(*row) for row in h["layers"]]
    return Network(
        layers,
        tuple(h["input_shape"]),
        {int(i): arrays[n] for i, n in h["weights"].items()},
        {int(i): arrays[n] for i, n in h["biases"].items()},
        {int(t): Head(arrays[w], arrays[b]) for t, (w, b) in h["heads"].items()},
    )


def _unpack_task(h: dict, arrays) -> TaskPrivateParams:
    layers = {
        int(i): TaskLayerParams(
            arrays[e["r"]], arrays[e["s"]],
            LowRankFactors(arrays[e["U"]], arrays[e["sigma"]], arrays[e["V"]]),
            e["layer_index"],
        )
        for i, e in h["layers"].items()
    }
    return TaskPrivateParams(
        h["task_id"], layers,
        {int(i): arrays[n] for i, n in h["biases"].items()},
        arrays[h["head"][0]], arrays[h["head"][1]],
    )


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; verifies magic, version and checksum."""
    header, arrays = _read(path)
    cfg = _config_from(header["config"])
    history = _matrix_from_json(header["history"])
    names = header["task_names"]
    if header["kind"] == "halrp":
        tasks = {p.task_id: p for p in (_unpack_task(h, arrays) for h in header["tasks"])}
        return ContinualState(_unpack_network(header["base"], arrays), tasks, history, cfg, names,
                              header.get("log", []))
    shared = _unpack_network(header["shared"], arrays) if "shared" in header else None
    nets = {int(t): _unpack_network(h, arrays) for t, h in header["networks"].items()}
    return ReferenceState(nets, history, cfg, names, shared)


def read_extra(path) -> dict:
    return _read(path)[0].get("extra", {})
