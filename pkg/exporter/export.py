#!/usr/bin/env python3
"""Convert a PyTorch checkpoint into an NWF v1 weight container.

Supported model family: plain sequential/VGG-style CNNs and basic residual
CNNs built from Conv2d (bias-free, ungrouped), BatchNorm2d (affine, with
running stats), MaxPool2d/AvgPool2d, ReLU/flatten-style shape ops, elementwise
adds, and at most one Linear head per channel path.

The output container is NWF v1:

    magic `3ASW` | version u32 LE | header_len u64 LE | header JSON | payload

The header JSON is canonical (sorted keys, no whitespace) and lists one record
per tensor: name, kind (conv2d/batchnorm/linear), shape, byte_offset, plus
optional `follows` (producing conv), `coupling_group` (convs summed together
by residual adds) and `spatial_multiplier` (flatten-connected linear layers).
The payload is the raw float32 little-endian tensor data, bit-exact from the
checkpoint: conv and linear weights as-is, each BatchNorm2d as a (4, C) block
of gamma/beta/running_mean/running_var rows.

Channel-dependency edges (`follows`) and residual coupling groups are read
from a `torch.fx` symbolic trace of the model.  When the model cannot be
traced (data-dependent control flow), a user-supplied `--groups` JSON map
{tag: [conv names]} enables a sequential fallback walk; coupling is never
guessed silently.

Invocation: export.py <checkpoint> -o <out.nwf> [--groups groups.json]
"""

from __future__ import annotations

import argparse
import json
import operator
import os
import struct
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.fx import Node

MAGIC = b"3ASW"
VERSION = 1


class ExportError(Exception):
    """Base class for everything this script can reject."""


class UnsupportedLayer(ExportError):
    """A layer kind or configuration NWF v1 cannot represent."""


class GraphAmbiguity(ExportError):
    """Channel flow or coupling cannot be inferred from the model."""


@dataclass(frozen=True)
class ExportManifest:
    """What to export and where to put it.

    checkpoint  path to a torch.save()d nn.Module (or {"model": module} dict)
    output      destination .nwf path
    groups      optional {tag: [conv names]} coupling map; required when the
                model cannot be symbolically traced
    rename      optional {module qualified name: exported name} overrides
    """

    checkpoint: str
    output: str
    groups: Mapping[str, Sequence[str]] | None = None
    rename: Mapping[str, str] | None = None


@dataclass
class _Tensor:
    name: str
    kind: str
    values: np.ndarray
    follows: str | None = None
    spatial_multiplier: int | None = None
    coupling_group: str | None = None


@dataclass
class _Walk:
    """Everything gathered while tracing the model graph."""

    tensors: list[_Tensor] = field(default_factory=list)
    conv_out: dict[str, int] = field(default_factory=dict)
    stride: dict[str, int] = field(default_factory=dict)
    padding: dict[str, str] = field(default_factory=dict)
    pool_after: dict[str, int] = field(default_factory=dict)
    coupled_pairs: list[tuple[str, str]] = field(default_factory=list)


_TRANSPARENT_MODULES = (
    nn.ReLU,
    nn.Dropout,
    nn.Identity,
    nn.Flatten,
)
_TRANSPARENT_FUNCTIONS = {
    F.relu,
    torch.relu,
    torch.flatten,
    F.dropout,
}
_ADD_FUNCTIONS = {operator.add, operator.iadd, torch.add}
_TRANSPARENT_METHODS = {"relu", "flatten", "reshape", "view", "contiguous", "mean"}


def _f32_array(tensor: torch.Tensor, where: str) -> np.ndarray:
    if tensor.dtype != torch.float32:
        raise UnsupportedLayer(f"{where}: only float32 tensors are supported, got {tensor.dtype}")
    return np.ascontiguousarray(tensor.detach().cpu().numpy())


def _square(value, where: str) -> int:
    """Collapse an int-or-pair hyperparameter, rejecting rectangles."""
    if isinstance(value, (tuple, list)):
        if len(value) != 2 or value[0] != value[1]:
            raise UnsupportedLayer(f"{where}: non-square value {value!r} is not supported")
        return int(value[0])
    return int(value)


def _export_conv(walk: _Walk, name: str, mod: nn.Conv2d, src: str | None) -> None:
    if mod.groups != 1:
        raise UnsupportedLayer(f"layer {name!r}: grouped convolution (groups={mod.groups})")
    if mod.bias is not None:
        raise UnsupportedLayer(
            f"layer {name!r}: convolution bias cannot be represented; re-export with bias=False"
        )
    if _square(mod.dilation, name) != 1:
        raise UnsupportedLayer(f"layer {name!r}: dilated convolution")
    _square(mod.kernel_size, name)  # reject rectangular kernels
    if src is not None and mod.in_channels != walk.conv_out[src]:
        raise GraphAmbiguity(
            f"layer {name!r} consumes {mod.in_channels} channels but {src!r} produces {walk.conv_out[src]}"
        )
    if name in walk.conv_out:
        raise UnsupportedLayer(f"layer {name!r} is applied more than once; weight sharing is not supported")
    walk.tensors.append(_Tensor(name, "conv2d", _f32_array(mod.weight, name), follows=src))
    walk.conv_out[name] = mod.out_channels
    stride = _square(mod.stride, name)
    if stride != 1:
        walk.stride[name] = stride
    if mod.padding == "same":
        walk.padding[name] = "same"
    else:
        walk.padding[name] = str(_square(mod.padding, name))


def _export_batchnorm(walk: _Walk, name: str, mod: nn.BatchNorm2d, src: str | None) -> None:
    if src is None:
        raise GraphAmbiguity(f"layer {name!r}: batch norm is not fed by any convolution")
    if not mod.affine or not mod.track_running_stats:
        raise UnsupportedLayer(
            f"layer {name!r}: batch norm must be affine and track running stats"
        )
    if mod.num_features != walk.conv_out[src]:
        raise GraphAmbiguity(
            f"layer {name!r} normalizes {mod.num_features} channels but {src!r} produces {walk.conv_out[src]}"
        )
    if any(t.name == name for t in walk.tensors):
        raise UnsupportedLayer(f"layer {name!r} is applied more than once; weight sharing is not supported")
    rows = np.stack(
        [
            _f32_array(mod.weight, name),
            _f32_array(mod.bias, name),
            _f32_array(mod.running_mean, name),
            _f32_array(mod.running_var, name),
        ]
    )
    walk.tensors.append(_Tensor(name, "batchnorm", rows, follows=src))


def _export_linear(walk: _Walk, name: str, mod: nn.Linear, src: str | None) -> None:
    if mod.bias is not None:
        raise UnsupportedLayer(
            f"layer {name!r}: linear bias cannot be represented; re-export with bias=False"
        )
    if src is None:
        raise GraphAmbiguity(
            f"layer {name!r}: linear layer is not fed by a convolution (a second "
            "linear head cannot be sliced and is not supported)"
        )
    channels = walk.conv_out[src]
    if mod.in_features % channels != 0:
        raise GraphAmbiguity(
            f"layer {name!r}: in_features={mod.in_features} is not a multiple of "
            f"the {channels} channels produced by {src!r}"
        )
    if any(t.name == name for t in walk.tensors):
        raise UnsupportedLayer(f"layer {name!r} is applied more than once; weight sharing is not supported")
    mult = mod.in_features // channels
    walk.tensors.append(
        _Tensor(
            name,
            "linear",
            _f32_array(mod.weight, name),
            follows=src,
            spatial_multiplier=mult if mult > 1 else None,
        )
    )


def _export_pool(walk: _Walk, name: str, mod, src: str | None) -> None:
    if src is None:
        raise GraphAmbiguity(f"layer {name!r}: pooling before any convolution is not supported")
    kernel = _square(mod.kernel_size, name)
    stride = _square(mod.stride if mod.stride is not None else mod.kernel_size, name)
    if stride != kernel or _square(mod.padding, name) != 0:
        raise UnsupportedLayer(
            f"layer {name!r}: only non-overlapping, unpadded pooling is supported"
        )
    walk.pool_after[src] = walk.pool_after.get(src, 1) * kernel


def _record_add(walk: _Walk, node: Node, source: dict[Node, str | None]) -> str | None:
    node_args = [arg for arg in node.args if isinstance(arg, Node)]
    if len(node_args) == 1:
        return source[node_args[0]]
    if len(node_args) != 2:
        raise GraphAmbiguity(f"add at {node.name!r} does not combine exactly two tensors")
    left, right = (source[arg] for arg in node_args)
    if left is None or right is None:
        raise GraphAmbiguity(
            f"add at {node.name!r} combines branches whose channel source is unknown"
        )
    if walk.conv_out[left] != walk.conv_out[right]:
        raise GraphAmbiguity(
            f"add at {node.name!r} sums {left!r} ({walk.conv_out[left]} channels) with "
            f"{right!r} ({walk.conv_out[right]} channels)"
        )
    walk.coupled_pairs.append((left, right))
    return left


def _walk_traced(model: nn.Module) -> _Walk:
    graph = torch.fx.symbolic_trace(model).graph
    modules = dict(model.named_modules())
    walk = _Walk()
    source: dict[Node, str | None] = {}
    for node in graph.nodes:
        if node.op in ("placeholder", "get_attr"):
            source[node] = None
        elif node.op == "call_module":
            mod = modules[node.target]
            src = source[node.args[0]]
            if isinstance(mod, nn.Conv2d):
                _export_conv(walk, node.target, mod, src)
                source[node] = node.target
            elif isinstance(mod, nn.BatchNorm2d):
                _export_batchnorm(walk, node.target, mod, src)
                source[node] = src
            elif isinstance(mod, nn.Linear):
                _export_linear(walk, node.target, mod, src)
                source[node] = None
            elif isinstance(mod, (nn.MaxPool2d, nn.AvgPool2d)):
                _export_pool(walk, node.target, mod, src)
                source[node] = src
            elif isinstance(mod, nn.AdaptiveAvgPool2d):
                if _square(mod.output_size, node.target) != 1:
                    raise UnsupportedLayer(
                        f"layer {node.target!r}: only global (1x1) adaptive pooling is supported"
                    )
                source[node] = src
            elif isinstance(mod, _TRANSPARENT_MODULES):
                source[node] = src
            else:
                raise UnsupportedLayer(
                    f"layer {node.target!r}: {type(mod).__name__} is not supported"
                )
        elif node.op == "call_function":
            if node.target in _ADD_FUNCTIONS:
                source[node] = _record_add(walk, node, source)
            elif node.target in _TRANSPARENT_FUNCTIONS:
                source[node] = source[node.args[0]]
            else:
                raise UnsupportedLayer(f"operation {getattr(node.target, '__name__', node.target)!r} is not supported")
        elif node.op == "call_method":
            if node.target == "add":
                source[node] = _record_add(walk, node, source)
            elif node.target in _TRANSPARENT_METHODS:
                source[node] = source[node.args[0]]
            else:
                raise UnsupportedLayer(f"method {node.target!r} is not supported")
        elif node.op == "output":
            pass
        else:
            raise UnsupportedLayer(f"graph node kind {node.op!r} is not supported")
    return walk


def _walk_sequential(model: nn.Module) -> _Walk:
    """Fallback for untraceable models: registration order defines the chain."""
    walk = _Walk()
    last_conv: str | None = None
    for name, mod in model.named_modules():
        if isinstance(mod, nn.Conv2d):
            _export_conv(walk, name, mod, last_conv)
            last_conv = name
        elif isinstance(mod, nn.BatchNorm2d):
            _export_batchnorm(walk, name, mod, last_conv)
        elif isinstance(mod, nn.Linear):
            _export_linear(walk, name, mod, last_conv)
        elif isinstance(mod, (nn.MaxPool2d, nn.AvgPool2d)):
            _export_pool(walk, name, mod, last_conv)
        elif isinstance(mod, nn.AdaptiveAvgPool2d) or isinstance(mod, _TRANSPARENT_MODULES):
            pass
        elif list(mod.parameters(recurse=False)):
            raise UnsupportedLayer(f"layer {name!r}: {type(mod).__name__} is not supported")
    return walk


def _merge_groups(
    walk: _Walk, user_groups: Mapping[str, Sequence[str]] | None
) -> dict[str, str]:
    """Union inferred add-couplings with the user map; one tag per conv."""
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x: str, y: str) -> None:
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[ry] = rx

    preferred_tag: dict[str, str] = {}
    for left, right in walk.coupled_pairs:
        union(left, right)
    for tag, members in (user_groups or {}).items():
        names = list(members)
        if len(names) < 2:
            raise GraphAmbiguity(f"coupling group {tag!r} needs at least two layers")
        for member in names:
            if member not in walk.conv_out:
                raise GraphAmbiguity(
                    f"coupling group {tag!r} names {member!r}, which is not an exported conv layer"
                )
            if walk.conv_out[member] != walk.conv_out[names[0]]:
                raise GraphAmbiguity(
                    f"coupling group {tag!r} mixes layers with different filter counts"
                )
            union(names[0], member)
        preferred_tag[find(names[0])] = tag

    members_by_root: dict[str, list[str]] = {}
    for conv in walk.conv_out:
        root = find(conv)
        members_by_root.setdefault(root, []).append(conv)

    tags: dict[str, str] = {}
    auto = 0
    for conv in walk.conv_out:  # export order makes auto tags deterministic
        root = find(conv)
        if len(members_by_root[root]) < 2 or root in tags:
            continue
        if find(root) in preferred_tag:
            tags[root] = preferred_tag[find(root)]
        else:
            tags[root] = f"g{auto}"
            auto += 1
    return {conv: tags[find(conv)] for conv in walk.conv_out if find(conv) in tags}


def _apply_rename(walk: _Walk, tag_by_conv: dict[str, str], rename: Mapping[str, str] | None):
    mapping = dict(rename or {})
    new_names = [mapping.get(t.name, t.name) for t in walk.tensors]
    if len(set(new_names)) != len(new_names):
        raise ExportError("rename map collapses two layers onto the same name")
    renamed = lambda n: mapping.get(n, n)
    for tensor in walk.tensors:
        tensor.coupling_group = tag_by_conv.get(tensor.name)
        tensor.name = renamed(tensor.name)
        if tensor.follows is not None:
            tensor.follows = renamed(tensor.follows)
    walk.stride = {renamed(k): v for k, v in walk.stride.items()}
    walk.padding = {renamed(k): v for k, v in walk.padding.items()}
    walk.pool_after = {renamed(k): v for k, v in walk.pool_after.items()}


def _encode_nwf(walk: _Walk) -> bytes:
    records = []
    payload = bytearray()
    for tensor in walk.tensors:
        arr = np.ascontiguousarray(tensor.values.astype("<f4", copy=False))
        entry: dict = {
            "name": tensor.name,
            "kind": tensor.kind,
            "shape": list(arr.shape),
            "byte_offset": len(payload),
        }
        if tensor.coupling_group is not None:
            entry["coupling_group"] = tensor.coupling_group
        if tensor.follows is not None:
            entry["follows"] = tensor.follows
        if tensor.spatial_multiplier is not None:
            entry["spatial_multiplier"] = tensor.spatial_multiplier
        records.append(entry)
        payload += arr.tobytes()
    metadata = {f"stride:{k}": str(v) for k, v in walk.stride.items()}
    metadata.update({f"padding:{k}": v for k, v in walk.padding.items()})
    metadata.update({f"pool_after:{k}": str(v) for k, v in walk.pool_after.items()})
    header = json.dumps(
        {"layers": records, "metadata": metadata},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8")
    return b"".join(
        [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header, payload]
    )


def _load_model(path: str) -> nn.Module:
    try:
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise ExportError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if isinstance(obj, dict) and isinstance(obj.get("model"), nn.Module):
        obj = obj["model"]
    if not isinstance(obj, nn.Module):
        raise ExportError(
            f"checkpoint {path!r} does not contain a model object; save the full "
            "module (state_dicts alone carry no graph structure)"
        )
    return obj.eval()


def export_checkpoint(manifest: ExportManifest) -> None:
    """Write the checkpoint named by the manifest as an NWF v1 file."""
    model = _load_model(manifest.checkpoint)
    try:
        walk = _walk_traced(model)
    except ExportError:
        raise
    except Exception as exc:
        if manifest.groups is None:
            raise GraphAmbiguity(
                f"model cannot be symbolically traced ({exc}); pass --groups to "
                "supply residual coupling explicitly"
            ) from exc
        walk = _walk_sequential(model)
    if not walk.tensors:
        raise ExportError("model contains no exportable layers")
    tag_by_conv = _merge_groups(walk, manifest.groups)
    _apply_rename(walk, tag_by_conv, manifest.rename)
    blob = _encode_nwf(walk)

    directory = os.path.dirname(manifest.output) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, manifest.output)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _load_groups(path: str) -> dict[str, list[str]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot read groups file {path!r}: {exc}") from exc
    if not isinstance(obj, dict) or not all(
        isinstance(tag, str)
        and isinstance(members, list)
        and all(isinstance(m, str) for m in members)
        for tag, members in obj.items()
    ):
        raise ExportError(f"groups file {path!r} must map tag strings to lists of layer names")
    return obj


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="export.py",
        description="Export a PyTorch CNN checkpoint to an NWF v1 weight container.",
    )
    parser.add_argument("checkpoint", help="torch.save()d model file")
    parser.add_argument("-o", "--output", required=True, help="destination .nwf path")
    parser.add_argument(
        "--groups",
        help="JSON file mapping coupling-group tags to conv layer names "
        "(required when the model cannot be symbolically traced)",
    )
    args = parser.parse_args(argv)
    try:
        groups = _load_groups(args.groups) if args.groups else None
        export_checkpoint(
            ExportManifest(checkpoint=args.checkpoint, output=args.output, groups=groups)
        )
    except ExportError as exc:
        print(f"export.py: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
