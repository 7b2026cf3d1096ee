"""Binary checkpoints: a JSON header plus length-prefixed float64 records.

Layout (little-endian)::

    b"RQCK" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_records | records...

    record: u16 name_len | name | u8 ndim | u32 dim * ndim | u64 nbytes | float64 data

Record names carry a kind prefix: ``param/``, ``buffer/``, ``mask/``, ``w/``,
``u/`` and ``momentum/``. Records are written in sorted name order so that
saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointVersionError, FormatError
from .nets import BatchNorm, Conv2d, Linear, Network, NetworkSpec, build_network
from .quantizer import QuantConfig, QuantState
from .sparsity import BoundTrace

logger = logging.getLogger(__name__)

MAGIC = b"RQCK"
VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume a run or evaluate a trained network."""

    spec: NetworkSpec
    weights: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    quant: Optional[QuantState] = None
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Optional[dict] = None
    trace: BoundTrace = field(default_factory=BoundTrace)
    config: dict = field(default_factory=dict)
    config_digest: str = ""
    epoch: int = 0

    @classmethod
    def from_network(cls, net: Network, **kwargs) -> "Checkpoint":
        masks = {conv.name: conv.mask.copy() for conv in net.conv_layers if conv.mask is not None}
        return cls(
            spec=net.spec,
            weights={k: v.copy() for k, v in net.weights.items()},
            buffers={k: v.copy() for k, v in net.buffers.items()},
            masks=masks,
            **kwargs,
        )

    def network(self) -> Network:
        return restore_network(self.spec, self.weights, self.buffers, self.masks)

    def rng(self) -> np.random.Generator:
        """Generator positioned exactly where the checkpointed run left off."""
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def restore_network(spec: NetworkSpec, weights: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray],
                    masks: Optional[Dict[str, np.ndarray]] = None) -> Network:
    """Rebuild the layer structure for ``spec`` and size it from the stored arrays.

    Channel counts are taken from the arrays so pruned networks restore too.
    """
    template = build_network(spec, seed=0)
    masks = masks or {}
    for layer in template.layers():
        if isinstance(layer, Conv2d):
            shape = _require(weights, layer.weight_name)
            layer.out_channels, layer.in_channels = int(shape[0]), int(shape[1])
            if layer.name in masks:
                layer.mask = masks[layer.name].copy()
        elif isinstance(layer, BatchNorm):
            layer.channels = int(_require(weights, f"{layer.name}.gamma")[0])
        elif isinstance(layer, Linear):
            shape = _require(weights, layer.weight_name)
            layer.out_features, layer.in_features = int(shape[0]), int(shape[1])
    return Network(spec, template.members,
                   {k: v.copy() for k, v in weights.items()},
                   {k: v.copy() for k, v in buffers.items()})


def _require(weights: Dict[str, np.ndarray], name: str) -> Tuple[int, ...]:
    if name not in weights:
        raise FormatError(f"checkpoint has no array for {name}")
    return weights[name].shape


def _meta(ckpt: Checkpoint) -> dict:
    meta = {
        "spec": ckpt.spec.to_dict(),
        "rng_state": ckpt.rng_state,
        "trace": list(ckpt.trace.values),
        "config": ckpt.config,
        "config_digest": ckpt.config_digest,
        "epoch": ckpt.epoch,
        "quant": None,
    }
    if ckpt.quant is not None:
        q = ckpt.quant
        meta["quant"] = {
            "scheme": {
                "variant": q.scheme.variant,
                "algorithm": q.scheme.algorithm,
                "lam0": q.scheme.lam0,
                "rho": q.scheme.rho,
                "cutoff": q.scheme.cutoff,
                "ternary_method": q.scheme.ternary_method,
                "exempt_first": q.scheme.exempt_first,
                "exempt_last": q.scheme.exempt_last,
            },
            "scales": q.scales,
            "lam": q.lam,
            "cutoff": q.cutoff,
            "epoch": q.epoch,
            "steps": q.steps,
            "float_params": list(q.float_params),
        }
    return meta


def _records(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    records = []
    groups = [("param/", ckpt.weights), ("buffer/", ckpt.buffers), ("mask/", ckpt.masks),
              ("momentum/", ckpt.momentum)]
    if ckpt.quant is not None:
        groups += [("w/", ckpt.quant.w), ("u/", ckpt.quant.u)]
    for prefix, arrays in groups:
        records.extend((prefix + name, np.asarray(array, dtype=np.float64)) for name, array in arrays.items())
    return sorted(records, key=lambda item: item[0])


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(_meta(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = _records(ckpt)
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(records))]
    for name, array in records:
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f8").tobytes()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    return b"".join(parts)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dumps(ckpt)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    logger.info(f"Saved checkpoint ({len(payload)} bytes, epoch {ckpt.epoch}) to {path}")
    return path


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.payload):
            raise FormatError(f"checkpoint truncated at byte {self.offset} (wanted {size} more)")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(4) != MAGIC:
        raise FormatError("not a robustq checkpoint (bad magic)")
    version, meta_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc

    (count,) = reader.unpack("<I")
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"corrupt record name at byte {reader.offset}") from exc
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        (nbytes,) = reader.unpack("<Q")
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise FormatError(f"record {name}: {nbytes} bytes for shape {shape}")
        array = np.frombuffer(reader.take(nbytes), dtype="<f8").astype(np.float64).reshape(shape)
        prefix, _, key = name.partition("/")
        groups.setdefault(prefix, {})[key] = array
    if reader.offset != len(payload):
        raise FormatError(f"{len(payload) - reader.offset} trailing bytes after the last record")

    try:
        spec = NetworkSpec.from_dict(meta["spec"])
        quant = None
        if meta["quant"] is not None:
            q = meta["quant"]
            quant = QuantState(
                scheme=QuantConfig(**q["scheme"]),
                w=groups.get("w", {}),
                u=groups.get("u", {}),
                scales={k: float(v) for k, v in q["scales"].items()},
                lam=float(q["lam"]),
                cutoff=int(q["cutoff"]),
                epoch=int(q["epoch"]),
                steps=int(q["steps"]),
                float_params=list(q["float_params"]),
            )
        return Checkpoint(
            spec=spec,
            weights=groups.get("param", {}),
            buffers=groups.get("buffer", {}),
            masks=groups.get("mask", {}),
            quant=quant,
            momentum=groups.get("momentum", {}),
            rng_state=meta["rng_state"],
            trace=BoundTrace(tuple(float(v) for v in meta["trace"])),
            config=meta["config"],
            config_digest=meta["config_digest"],
            epoch=int(meta["epoch"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header is missing fields: {exc}") from exc


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    ckpt = loads(path.read_bytes())
    logger.info(f"Loaded checkpoint from {path} (epoch {ckpt.epoch})")
    return ckpt
