"""Parameter and FLOP accounting for original and slimmed architectures.

FLOPs follow the multiply-accumulate-times-two convention; pass macs=True to
report raw MAC counts instead (exactly half). Spatial sizes are propagated
from a user-supplied input shape through conv strides/padding and optional
pooling recorded in network metadata:

    metadata["stride:<layer>"]     conv stride (default 1)
    metadata["padding:<layer>"]    integer padding, or "same" (default)
    metadata["pool_after:<layer>"] stride of a pooling step after the layer

Also emits the per-layer cumulative-contribution curves as CSV so the kept
fraction per layer can be plotted externally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import LayerSetMismatch, ShapeMismatch
from .spectral_core import LayerSpectrum
from .weights_io import LayerKind, NetworkWeights


@dataclass(frozen=True)
class ArchLayer:
    """Shape-level description of one layer, detached from its weights."""

    name: str
    kind: LayerKind
    out_dim: int  # conv filters / bn channels / linear out_features
    in_dim: int  # conv in_channels / bn channels / linear in_features
    kernel: int = 1
    stride: int = 1
    padding: int | str = "same"
    pool_after: int | None = None
    follows: str | None = None
    spatial_multiplier: int = 1
    bias: bool = False


@dataclass(frozen=True)
class LayerStats:
    layer_name: str
    params: int
    flops: int
    out_spatial: tuple[int, int]


@dataclass(frozen=True)
class ModelStats:
    per_layer: tuple[LayerStats, ...]
    total_params: int
    total_flops: int

    @classmethod
    def from_layers(cls, per_layer: Sequence[LayerStats]) -> "ModelStats":
        return cls(
            per_layer=tuple(per_layer),
            total_params=sum(s.params for s in per_layer),
            total_flops=sum(s.flops for s in per_layer),
        )

    def to_json_obj(self) -> dict:
        return {
            "per_layer": [
                {
                    "layer_name": s.layer_name,
                    "params": s.params,
                    "flops": s.flops,
                    "out_spatial": list(s.out_spatial),
                }
                for s in self.per_layer
            ],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }


def _meta_int(metadata: Mapping[str, str], key: str, default: int) -> int:
    raw = metadata.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ShapeMismatch(f"metadata {key!r} must be an integer, got {raw!r}") from exc


def architecture_from_network(net: NetworkWeights) -> list[ArchLayer]:
    """Derive the shape-level architecture of a network from its records."""
    arch = []
    for rec in net.layers:
        if rec.kind is LayerKind.CONV2D:
            padding_raw = net.metadata.get(f"padding:{rec.name}", "same")
            padding: int | str = (
                "same" if padding_raw == "same" else int(padding_raw)
            )
            arch.append(
                ArchLayer(
                    name=rec.name,
                    kind=rec.kind,
                    out_dim=rec.shape[0],
                    in_dim=rec.shape[1],
                    kernel=rec.shape[2],
                    stride=_meta_int(net.metadata, f"stride:{rec.name}", 1),
                    padding=padding,
                    pool_after=(
                        _meta_int(net.metadata, f"pool_after:{rec.name}", 0) or None
                    ),
                    follows=rec.follows,
                )
            )
        elif rec.kind is LayerKind.BATCHNORM:
            channels = rec.shape[1]
            arch.append(
                ArchLayer(
                    name=rec.name,
                    kind=rec.kind,
                    out_dim=channels,
                    in_dim=channels,
                    follows=rec.follows,
                )
            )
        else:
            arch.append(
                ArchLayer(
                    name=rec.name,
                    kind=rec.kind,
                    out_dim=rec.shape[0],
                    in_dim=rec.shape[1],
                    follows=rec.follows,
                    spatial_multiplier=rec.spatial_multiplier or 1,
                )
            )
    return arch


def apply_kept(arch: Sequence[ArchLayer], kept: Mapping[str, int]) -> list[ArchLayer]:
    """Shrink conv widths to the kept counts and re-chain consumer dims."""
    out_dims = {}
    slimmed = []
    for layer in arch:
        changes: dict = {}
        if layer.kind is LayerKind.CONV2D and layer.name in kept:
            n = kept[layer.name]
            if not 1 <= n <= layer.out_dim:
                raise ShapeMismatch(
                    f"kept count {n} out of range for {layer.name!r} "
                    f"({layer.out_dim} filters)"
                )
            changes["out_dim"] = n
        if layer.follows is not None and layer.follows in out_dims:
            upstream = out_dims[layer.follows]
            if layer.kind is LayerKind.CONV2D:
                changes["in_dim"] = upstream
            elif layer.kind is LayerKind.BATCHNORM:
                changes["in_dim"] = upstream
                changes["out_dim"] = upstream
            else:
                changes["in_dim"] = upstream * layer.spatial_multiplier
        new = ArchLayer(**{**layer.__dict__, **changes})
        slimmed.append(new)
        if new.kind is LayerKind.CONV2D:
            out_dims[new.name] = new.out_dim
    return slimmed


def _conv_out(size: int, kernel: int, stride: int, padding: int | str) -> int:
    pad = kernel // 2 if padding == "same" else int(padding)
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatch(
            f"spatial size collapses to {out} (input {size}, kernel {kernel}, "
            f"stride {stride}, padding {pad})"
        )
    return out


def count_stats(
    arch: Sequence[ArchLayer],
    input_shape: tuple[int, int, int],
    macs: bool = False,
) -> ModelStats:
    """Per-layer and total parameter/FLOP counts for an architecture."""
    in_channels, in_h, in_w = input_shape
    # convs and linears consume post-pool sizes; BN sits before the pool and
    # consumes its conv's raw output
    feed = {}  # conv name -> (channels, h, w) after any pool_after
    raw_out = {}  # conv name -> (h, w) before pooling
    rows = []
    for layer in arch:
        if layer.follows is not None:
            if layer.follows not in feed:
                raise ShapeMismatch(
                    f"{layer.name!r} follows {layer.follows!r} which is not an "
                    "earlier conv layer"
                )
            src_c, src_h, src_w = feed[layer.follows]
        else:
            src_c, src_h, src_w = in_channels, in_h, in_w

        if layer.kind is LayerKind.CONV2D:
            if layer.in_dim != src_c:
                raise ShapeMismatch(
                    f"{layer.name!r} expects {layer.in_dim} input channels but "
                    f"receives {src_c}"
                )
            h = _conv_out(src_h, layer.kernel, layer.stride, layer.padding)
            w = _conv_out(src_w, layer.kernel, layer.stride, layer.padding)
            mac = layer.out_dim * layer.in_dim * layer.kernel * layer.kernel * h * w
            params = layer.out_dim * layer.in_dim * layer.kernel * layer.kernel
            if layer.bias:
                params += layer.out_dim
            out_h, out_w = h, w
            if layer.pool_after:
                out_h, out_w = h // layer.pool_after, w // layer.pool_after
                if out_h < 1 or out_w < 1:
                    raise ShapeMismatch(
                        f"pooling after {layer.name!r} collapses spatial size"
                    )
            feed[layer.name] = (layer.out_dim, out_h, out_w)
            raw_out[layer.name] = (h, w)
            rows.append(LayerStats(layer.name, params, 2 * mac, (h, w)))
        elif layer.kind is LayerKind.BATCHNORM:
            if layer.follows is not None:
                if layer.in_dim != src_c:
                    raise ShapeMismatch(
                        f"{layer.name!r} normalizes {layer.in_dim} channels but its "
                        f"conv produces {src_c}"
                    )
                h, w = raw_out[layer.follows]
            else:
                h, w = 1, 1
            rows.append(
                LayerStats(
                    layer.name, 4 * layer.in_dim, 2 * layer.in_dim * h * w, (h, w)
                )
            )
        else:
            if layer.follows is not None:
                expected = src_c * layer.spatial_multiplier
                if layer.in_dim != expected:
                    raise ShapeMismatch(
                        f"{layer.name!r} expects {layer.in_dim} input features but "
                        f"receives {src_c} channels x {layer.spatial_multiplier}"
                    )
            params = layer.out_dim * layer.in_dim
            if layer.bias:
                params += layer.out_dim
            rows.append(
                LayerStats(layer.name, params, 2 * layer.out_dim * layer.in_dim, (1, 1))
            )
    if macs:
        rows = [
            LayerStats(s.layer_name, s.params, s.flops // 2, s.out_spatial)
            for s in rows
        ]
    return ModelStats.from_layers(rows)


@dataclass(frozen=True)
class ReductionRow:
    layer_name: str
    params_before: int
    params_after: int
    params_pct: float
    flops_before: int
    flops_after: int
    flops_pct: float


@dataclass(frozen=True)
class ReductionReport:
    rows: tuple[ReductionRow, ...]
    total: ReductionRow

    def to_text(self) -> str:
        header = (
            f"{'layer':<16}{'params':>12}{'-> params':>12}{'pruned%':>9}"
            f"{'flops':>14}{'-> flops':>14}{'pruned%':>9}"
        )
        lines = [header, "-" * len(header)]
        for r in list(self.rows) + [self.total]:
            lines.append(
                f"{r.layer_name:<16}{r.params_before:>12}{r.params_after:>12}"
                f"{r.params_pct:>9.2f}{r.flops_before:>14}{r.flops_after:>14}"
                f"{r.flops_pct:>9.2f}"
            )
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        def row(r: ReductionRow) -> dict:
            return {
                "layer_name": r.layer_name,
                "params_before": r.params_before,
                "params_after": r.params_after,
                "params_pct": r.params_pct,
                "flops_before": r.flops_before,
                "flops_after": r.flops_after,
                "flops_pct": r.flops_pct,
            }

        return {"per_layer": [row(r) for r in self.rows], "total": row(self.total)}


def _pct(before: int, after: int) -> float:
    if before == 0:
        return 0.0
    return 100.0 * (1.0 - after / before)


def reduction_report(before: ModelStats, after: ModelStats) -> ReductionReport:
    """Per-layer and total percentage reductions between two stat sets."""
    before_by = {s.layer_name: s for s in before.per_layer}
    after_by = {s.layer_name: s for s in after.per_layer}
    if set(before_by) != set(after_by):
        raise LayerSetMismatch(
            f"layer sets differ: {sorted(set(before_by) ^ set(after_by))}"
        )
    rows = []
    for s in before.per_layer:
        a = after_by[s.layer_name]
        rows.append(
            ReductionRow(
                layer_name=s.layer_name,
                params_before=s.params,
                params_after=a.params,
                params_pct=_pct(s.params, a.params),
                flops_before=s.flops,
                flops_after=a.flops,
                flops_pct=_pct(s.flops, a.flops),
            )
        )
    total = ReductionRow(
        layer_name="TOTAL",
        params_before=before.total_params,
        params_after=after.total_params,
        params_pct=_pct(before.total_params, after.total_params),
        flops_before=before.total_flops,
        flops_after=after.total_flops,
        flops_pct=_pct(before.total_flops, after.total_flops),
    )
    return ReductionReport(rows=tuple(rows), total=total)


def curve_csv(spectra: Sequence[LayerSpectrum]) -> str:
    """CSV of cumulative-contribution curves plus a kept/total summary block.

    Two sections separated by a blank line: rows (layer, n, alpha) for every
    prefix size, then rows (layer, kept, total). Floats use 17 significant
    digits so re-parsing recovers the exact values.
    """
    if not spectra:
        raise ValueError("no spectra to report")
    lines = ["layer,n,alpha"]
    for spectrum in spectra:
        for n, a in enumerate(spectrum.alpha, start=1):
            lines.append(f"{spectrum.layer_name},{n},{format(float(a), '.17g')}")
    lines.append("")
    lines.append("layer,kept,total")
    for spectrum in spectra:
        lines.append(f"{spectrum.layer_name},{spectrum.selected},{spectrum.alpha.size}")
    return "\n".join(lines) + "\n"
