"""Read/write support for the NWF v1 network-weight container.

Layout, byte-exact:

    bytes 0-3    magic ``3ASW``
    bytes 4-7    version, u32 little-endian (currently 1)
    bytes 8-15   header length, u64 little-endian
    then         UTF-8 JSON header: {"layers": [...], "metadata": {...}}
    remainder    payload, raw float32 little-endian, row-major

Each header layer entry carries name, kind, shape and byte_offset into the
payload, plus optional coupling_group, follows and spatial_multiplier fields.
Batch-norm layers store their four per-channel vectors stacked as one (4, C)
tensor, rows in the order gamma, beta, running_mean, running_var.

Loaded networks are immutable and fully validated: shapes positive, offsets
in bounds, names unique, follows edges resolving to earlier conv layers, and
every stored value finite.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .canonical import canonical_json, write_bytes_atomic
from .errors import (
    BadMagic,
    CorruptHeader,
    InvalidNetwork,
    IoFailure,
    NonFiniteWeight,
    VersionUnsupported,
)

MAGIC = b"3ASW"
VERSION = 1

BN_ROWS = ("gamma", "beta", "running_mean", "running_var")


class LayerKind(enum.Enum):
    CONV2D = "conv2d"
    BATCHNORM = "batchnorm"
    LINEAR = "linear"


@dataclass(frozen=True)
class LayerRecord:
    """Header entry describing one tensor in the payload."""

    name: str
    kind: LayerKind
    shape: tuple[int, ...]
    byte_offset: int
    coupling_group: str | None = None
    follows: str | None = None
    spatial_multiplier: int | None = None

    @property
    def num_values(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def num_bytes(self) -> int:
        return 4 * self.num_values


@dataclass(frozen=True)
class LayerTensor:
    """Builder input: one named float32 tensor plus its graph attributes."""

    name: str
    kind: LayerKind
    values: np.ndarray
    coupling_group: str | None = None
    follows: str | None = None
    spatial_multiplier: int | None = None


@dataclass(frozen=True)
class NetworkWeights:
    """An ordered set of layer tensors over one contiguous f32 payload."""

    layers: tuple[LayerRecord, ...]
    payload: np.ndarray  # 1-D float32, little-endian, read-only
    metadata: Mapping[str, str] = field(default_factory=dict)

    @cached_property
    def _by_name(self) -> dict[str, LayerRecord]:
        return {rec.name: rec for rec in self.layers}

    def layer(self, name: str) -> LayerRecord:
        return self._by_name[name]

    def tensor(self, name: str) -> np.ndarray:
        """Read-only view of one layer's values in its declared shape."""
        rec = self._by_name[name]
        start = rec.byte_offset // 4
        view = self.payload[start : start + rec.num_values].reshape(rec.shape)
        view.flags.writeable = False
        return view

    def conv_layers(self) -> tuple[LayerRecord, ...]:
        return tuple(r for r in self.layers if r.kind is LayerKind.CONV2D)


def _check_structure(
    layers: Sequence[LayerRecord], payload_len: int, metadata: Mapping
) -> None:
    """Raise InvalidNetwork on any container-invariant violation."""
    seen: dict[str, int] = {}
    for idx, rec in enumerate(layers):
        where = f"layer {rec.name!r}"
        if not rec.name or not isinstance(rec.name, str):
            raise InvalidNetwork(f"layer {idx}: name must be a non-empty string")
        if rec.name in seen:
            raise InvalidNetwork(f"duplicate layer name {rec.name!r}")
        seen[rec.name] = idx
        if not rec.shape or any(
            not isinstance(d, int) or isinstance(d, bool) or d < 1 for d in rec.shape
        ):
            raise InvalidNetwork(f"{where}: shape must be positive integers")
        if rec.kind is LayerKind.CONV2D:
            if len(rec.shape) != 4:
                raise InvalidNetwork(f"{where}: conv tensors must be rank 4")
            if rec.shape[2] != rec.shape[3]:
                raise InvalidNetwork(f"{where}: conv kernels must be square")
        elif rec.kind is LayerKind.BATCHNORM:
            if len(rec.shape) != 2 or rec.shape[0] != len(BN_ROWS):
                raise InvalidNetwork(
                    f"{where}: batchnorm tensors must have shape (4, channels)"
                )
        elif rec.kind is LayerKind.LINEAR:
            if len(rec.shape) != 2:
                raise InvalidNetwork(f"{where}: linear tensors must be rank 2")
        if not isinstance(rec.byte_offset, int) or rec.byte_offset < 0:
            raise InvalidNetwork(f"{where}: byte_offset must be a non-negative integer")
        if rec.byte_offset % 4 != 0:
            raise InvalidNetwork(f"{where}: byte_offset not aligned to 4 bytes")
        if rec.byte_offset + rec.num_bytes > payload_len:
            raise InvalidNetwork(
                f"{where}: tensor extends past end of payload "
                f"({rec.byte_offset} + {rec.num_bytes} > {payload_len})"
            )
        if rec.follows is not None:
            if rec.follows not in seen or seen[rec.follows] >= idx:
                raise InvalidNetwork(
                    f"{where}: follows {rec.follows!r} which is not an earlier layer"
                )
        if rec.coupling_group is not None and rec.kind is not LayerKind.CONV2D:
            raise InvalidNetwork(f"{where}: coupling_group only applies to conv layers")
        if rec.spatial_multiplier is not None:
            if rec.kind is not LayerKind.LINEAR:
                raise InvalidNetwork(
                    f"{where}: spatial_multiplier only applies to linear layers"
                )
            if not isinstance(rec.spatial_multiplier, int) or rec.spatial_multiplier < 1:
                raise InvalidNetwork(f"{where}: spatial_multiplier must be >= 1")
    for key, value in metadata.items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise InvalidNetwork("metadata must map strings to strings")


def _check_finite(net: NetworkWeights) -> None:
    for rec in net.layers:
        start = rec.byte_offset // 4
        block = net.payload[start : start + rec.num_values]
        if not np.isfinite(block).all():
            raise NonFiniteWeight(f"non-finite value in layer {rec.name!r}")


def validate(net: NetworkWeights) -> None:
    """Check all container invariants; InvalidNetwork / NonFiniteWeight on failure."""
    if net.payload.ndim != 1 or net.payload.dtype != np.dtype("<f4"):
        raise InvalidNetwork("payload must be a 1-D little-endian float32 array")
    _check_structure(net.layers, 4 * net.payload.size, net.metadata)
    _check_finite(net)


def build_network(
    tensors: Sequence[LayerTensor], metadata: Mapping[str, str] | None = None
) -> NetworkWeights:
    """Assemble a validated NetworkWeights with contiguous payload offsets."""
    records = []
    blocks = []
    offset = 0
    for t in tensors:
        values = np.asarray(t.values)
        if values.dtype != np.dtype("<f4"):
            if values.dtype != np.float32:
                raise InvalidNetwork(
                    f"layer {t.name!r}: values must be float32, got {values.dtype}"
                )
            values = values.astype("<f4")
        records.append(
            LayerRecord(
                name=t.name,
                kind=t.kind,
                shape=tuple(int(d) for d in values.shape),
                byte_offset=offset,
                coupling_group=t.coupling_group,
                follows=t.follows,
                spatial_multiplier=t.spatial_multiplier,
            )
        )
        blocks.append(np.ascontiguousarray(values, dtype="<f4").reshape(-1))
        offset += 4 * values.size
    payload = (
        np.concatenate(blocks) if blocks else np.empty(0, dtype="<f4")
    )
    payload.flags.writeable = False
    net = NetworkWeights(
        layers=tuple(records), payload=payload, metadata=dict(metadata or {})
    )
    validate(net)
    return net


def _record_to_json(rec: LayerRecord) -> dict:
    entry: dict = {
        "name": rec.name,
        "kind": rec.kind.value,
        "shape": list(rec.shape),
        "byte_offset": rec.byte_offset,
    }
    if rec.coupling_group is not None:
        entry["coupling_group"] = rec.coupling_group
    if rec.follows is not None:
        entry["follows"] = rec.follows
    if rec.spatial_multiplier is not None:
        entry["spatial_multiplier"] = rec.spatial_multiplier
    return entry


def _record_from_json(entry: object, idx: int) -> LayerRecord:
    if not isinstance(entry, dict):
        raise CorruptHeader(f"layer entry {idx} is not an object")
    try:
        name = entry["name"]
        kind = entry["kind"]
        shape = entry["shape"]
        byte_offset = entry["byte_offset"]
    except (KeyError, TypeError) as exc:
        raise CorruptHeader(f"layer entry {idx}: missing field {exc}") from exc
    try:
        kind = LayerKind(kind)
    except ValueError as exc:
        raise CorruptHeader(f"layer entry {idx}: unknown kind {kind!r}") from exc
    if not isinstance(shape, list):
        raise CorruptHeader(f"layer entry {idx}: shape must be a list")
    extra = {}
    for key in ("coupling_group", "follows", "spatial_multiplier"):
        if key in entry:
            extra[key] = entry[key]
    try:
        return LayerRecord(
            name=name,
            kind=kind,
            shape=tuple(shape),
            byte_offset=byte_offset,
            **extra,
        )
    except TypeError as exc:
        raise CorruptHeader(f"layer entry {idx}: {exc}") from exc


def serialize(net: NetworkWeights) -> bytes:
    """Encode a validated network in canonical NWF v1 bytes."""
    validate(net)
    header_obj = {
        "layers": [_record_to_json(rec) for rec in net.layers],
        "metadata": dict(net.metadata),
    }
    header = canonical_json(header_obj).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", VERSION),
            struct.pack("<Q", len(header)),
            header,
            net.payload.tobytes(),
        ]
    )


def deserialize(data: bytes) -> NetworkWeights:
    """Decode NWF bytes, rejecting any malformed or truncated input."""
    import json

    if data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise CorruptHeader("file truncated before version field")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VersionUnsupported(f"container version {version} not supported")
    if len(data) < 16:
        raise CorruptHeader("file truncated before header length field")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    if 16 + header_len > len(data):
        raise CorruptHeader(
            f"declared header length {header_len} exceeds file size"
        )
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptHeader("header must be a JSON object")
    layers_json = header.get("layers")
    metadata = header.get("metadata")
    if not isinstance(layers_json, list) or not isinstance(metadata, dict):
        raise CorruptHeader("header must contain a layers list and a metadata object")

    payload_bytes = data[16 + header_len :]
    if len(payload_bytes) % 4 != 0:
        raise CorruptHeader("payload size is not a multiple of 4 bytes")
    payload = np.frombuffer(payload_bytes, dtype="<f4")

    records = tuple(_record_from_json(e, i) for i, e in enumerate(layers_json))
    try:
        _check_structure(records, len(payload_bytes), metadata)
    except InvalidNetwork as exc:
        raise CorruptHeader(str(exc)) from exc
    net = NetworkWeights(layers=records, payload=payload, metadata=dict(metadata))
    _check_finite(net)
    return net


def read_weights(path) -> NetworkWeights:
    """Load and validate an NWF v1 file."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return deserialize(data)


def write_weights(net: NetworkWeights, path) -> None:
    """Write a network to disk atomically in canonical NWF v1 form."""
    data = serialize(net)
    try:
        write_bytes_atomic(path, data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def network_fingerprint(net: NetworkWeights) -> str:
    """Content hash of the canonical serialization of a network."""
    return "sha256:" + hashlib.sha256(serialize(net)).hexdigest()
