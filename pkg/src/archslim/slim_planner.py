"""Whole-network slimming plans: per-layer kept-filter budgets.

Runs the spectral analysis over every conv layer, resolves residual coupling
groups to a shared filter count, and emits an ArchitecturePlan that downstream
code uses either to prune weights or to instantiate a thin student network.
Plans serialize to canonical JSON and carry a fingerprint of the source
weights so stale plans are rejected.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import model_stats
from .canonical import canonical_json
from .errors import (
    DeltaOutOfRange,
    EmptyNetwork,
    FingerprintMismatch,
    InvalidNetwork,
    InvalidPlan,
    ZeroVariance,
)
from .spectral_core import LayerSpectrum, analyze_layer, select_count
from .weights_io import LayerKind, NetworkWeights, network_fingerprint


class CouplingPolicy(enum.Enum):
    MAX = "max"
    MIN = "min"


@dataclass(frozen=True)
class PlanEntry:
    layer_name: str
    original_filters: int
    kept_filters: int
    preserve_ratio: float
    alpha_curve: tuple[float, ...]
    warnings: tuple[str, ...]


@dataclass(frozen=True)
class ArchitecturePlan:
    entries: tuple[PlanEntry, ...]
    delta: float
    coupling_policy: CouplingPolicy
    source_fingerprint: str

    def kept_by_layer(self) -> dict[str, int]:
        return {e.layer_name: e.kept_filters for e in self.entries}


def _check_delta(delta: float) -> float:
    if not 0.0 <= delta <= 1.0:
        raise DeltaOutOfRange(f"delta must be in [0, 1], got {delta}")
    return float(delta)


def _layer_spectra(
    net: NetworkWeights, zscore: bool
) -> list[tuple[str, int, LayerSpectrum | None]]:
    """Analyze every conv layer once; None marks zero-variance layers.

    The spectrum is computed with delta=0 and re-thresholded cheaply per
    requested delta, so threshold sweeps do not repeat the eigen work.
    """
    convs = net.conv_layers()
    if not convs:
        raise EmptyNetwork("network contains no conv layers")
    for rec in convs:
        if rec.follows is None:
            continue
        src = net.layer(rec.follows)
        if src.kind is LayerKind.CONV2D and rec.shape[1] != src.shape[0]:
            raise InvalidNetwork(
                f"layer {rec.name!r} consumes {rec.shape[1]} of "
                f"{src.shape[0]} channels from {rec.follows!r}; grouped and "
                "depthwise convolutions are not supported"
            )
    out = []
    for rec in convs:
        try:
            spectrum = analyze_layer(net.tensor(rec.name), 0.0, rec.name, zscore=zscore)
        except ZeroVariance:
            spectrum = None
        out.append((rec.name, rec.shape[0], spectrum))
    return out


def _assemble_plan(
    net: NetworkWeights,
    spectra: Sequence[tuple[str, int, LayerSpectrum | None]],
    delta: float,
    policy: CouplingPolicy,
    delta_overrides: Mapping[str, float] | None,
    fingerprint: str,
) -> ArchitecturePlan:
    overrides = dict(delta_overrides or {})
    for name, d in overrides.items():
        _check_delta(d)

    kept: dict[str, int] = {}
    curves: dict[str, tuple[float, ...]] = {}
    warnings: dict[str, list[str]] = {}
    originals: dict[str, int] = {}
    for name, original, spectrum in spectra:
        originals[name] = original
        warnings[name] = []
        if spectrum is None:
            kept[name] = 1
            curves[name] = ()
            warnings[name].append(
                "all filters identical up to a constant; keeping 1 filter"
            )
        else:
            kept[name] = select_count(spectrum.alpha, overrides.get(name, delta))
            curves[name] = tuple(float(a) for a in spectrum.alpha)

    groups: dict[str, list[str]] = {}
    for rec in net.conv_layers():
        if rec.coupling_group is not None:
            groups.setdefault(rec.coupling_group, []).append(rec.name)
    for tag in sorted(groups):
        members = groups[tag]
        if len(members) < 2:
            continue
        raw = [kept[m] for m in members]
        shared = max(raw) if policy is CouplingPolicy.MAX else min(raw)
        cap = min(originals[m] for m in members)
        if shared > cap:
            shared = cap
            for m in members:
                warnings[m].append(
                    f"coupling group {tag!r}: shared count capped at {cap}"
                )
        for m, r in zip(members, raw):
            if r != shared:
                warnings[m].append(
                    f"coupling group {tag!r}: kept adjusted {r} -> {shared}"
                )
            kept[m] = shared

    entries = tuple(
        PlanEntry(
            layer_name=name,
            original_filters=originals[name],
            kept_filters=kept[name],
            preserve_ratio=kept[name] / originals[name],
            alpha_curve=curves[name],
            warnings=tuple(warnings[name]),
        )
        for name, _, _ in spectra
    )
    return ArchitecturePlan(
        entries=entries,
        delta=delta,
        coupling_policy=policy,
        source_fingerprint=fingerprint,
    )


def plan_architecture(
    net: NetworkWeights,
    delta: float,
    policy: CouplingPolicy = CouplingPolicy.MAX,
    zscore: bool = False,
    delta_overrides: Mapping[str, float] | None = None,
) -> ArchitecturePlan:
    """Kept-filter budget for every conv layer at variance threshold delta."""
    delta = _check_delta(delta)
    spectra = _layer_spectra(net, zscore)
    return _assemble_plan(
        net, spectra, delta, policy, delta_overrides, network_fingerprint(net)
    )


def plan_to_json_obj(plan: ArchitecturePlan) -> dict:
    return {
        "entries": [
            {
                "layer_name": e.layer_name,
                "original_filters": e.original_filters,
                "kept_filters": e.kept_filters,
                "preserve_ratio": e.preserve_ratio,
                "alpha_curve": list(e.alpha_curve),
                "warnings": list(e.warnings),
            }
            for e in plan.entries
        ],
        "delta": plan.delta,
        "coupling_policy": plan.coupling_policy.value,
        "source_fingerprint": plan.source_fingerprint,
    }


def plan_from_json_obj(obj: object) -> ArchitecturePlan:
    """Rebuild a plan from parsed JSON, validating every invariant."""
    if not isinstance(obj, dict):
        raise InvalidPlan("plan must be a JSON object")
    try:
        entries_json = obj["entries"]
        delta = float(obj["delta"])
        policy = CouplingPolicy(obj["coupling_policy"])
        fingerprint = obj["source_fingerprint"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidPlan(f"malformed plan: {exc}") from exc
    if not 0.0 <= delta <= 1.0 or not isinstance(fingerprint, str):
        raise InvalidPlan("malformed plan: bad delta or fingerprint")
    if not isinstance(entries_json, list) or not entries_json:
        raise InvalidPlan("plan has no entries")
    entries = []
    for e in entries_json:
        try:
            name = e["layer_name"]
            original = int(e["original_filters"])
            kept = int(e["kept_filters"])
            curve = tuple(float(a) for a in e["alpha_curve"])
            warns = tuple(str(w) for w in e["warnings"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidPlan(f"malformed plan entry: {exc}") from exc
        if not 1 <= kept <= original:
            raise InvalidPlan(
                f"entry {name!r}: kept_filters {kept} not in [1, {original}]"
            )
        entries.append(
            PlanEntry(
                layer_name=name,
                original_filters=original,
                kept_filters=kept,
                preserve_ratio=kept / original,
                alpha_curve=curve,
                warnings=warns,
            )
        )
    return ArchitecturePlan(
        entries=tuple(entries),
        delta=delta,
        coupling_policy=policy,
        source_fingerprint=fingerprint,
    )


def plan_to_json(plan: ArchitecturePlan) -> str:
    return canonical_json(plan_to_json_obj(plan))


def plan_from_json(text: str) -> ArchitecturePlan:
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise InvalidPlan(f"plan is not valid JSON: {exc}") from exc
    return plan_from_json_obj(obj)


def student_manifest(plan: ArchitecturePlan, net: NetworkWeights) -> dict:
    """Architecture-only description of the slimmed network, no weights.

    Lists every layer with its post-slimming dimensions and graph edges,
    enough to instantiate the thin network in a training framework.
    """
    if plan.source_fingerprint != network_fingerprint(net):
        raise FingerprintMismatch("plan was generated from different weights")
    arch = model_stats.architecture_from_network(net)
    slimmed = model_stats.apply_kept(arch, plan.kept_by_layer())
    by_record = {rec.name: rec for rec in net.layers}
    layers = []
    for layer in slimmed:
        entry: dict = {"name": layer.name, "kind": layer.kind.value}
        if layer.follows is not None:
            entry["follows"] = layer.follows
        if layer.kind is LayerKind.CONV2D:
            entry["out_channels"] = layer.out_dim
            entry["in_channels"] = layer.in_dim
            entry["kernel_size"] = layer.kernel
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
            if layer.pool_after:
                entry["pool_after"] = layer.pool_after
            group = by_record[layer.name].coupling_group
            if group is not None:
                entry["coupling_group"] = group
        elif layer.kind is LayerKind.BATCHNORM:
            entry["num_features"] = layer.in_dim
        else:
            entry["out_features"] = layer.out_dim
            entry["in_features"] = layer.in_dim
            if layer.spatial_multiplier != 1:
                entry["spatial_multiplier"] = layer.spatial_multiplier
        layers.append(entry)
    return {
        "delta": plan.delta,
        "layers": layers,
        "source_fingerprint": plan.source_fingerprint,
    }


@dataclass(frozen=True)
class TargetSearchResult:
    plan: ArchitecturePlan
    delta: float
    achieved_remaining: float
    within_tolerance: bool


def search_delta_for_target(
    net: NetworkWeights,
    metric: str,
    target_remaining: float,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    policy: CouplingPolicy = CouplingPolicy.MAX,
    zscore: bool = False,
    max_iterations: int = 30,
    tolerance: float = 0.005,
) -> TargetSearchResult:
    """Bisect over delta to hit a target remaining fraction of params/flops/filters.

    The remaining fraction is a non-decreasing step function of delta, so
    bisection homes in on the plateau closest to the target; the best delta
    seen is returned even when the target is not reachable within tolerance.
    """
    if metric not in ("params", "flops", "filters"):
        raise ValueError(f"unknown target metric {metric!r}")
    if not 0.0 < target_remaining < 1.0:
        raise ValueError(f"target ratio must be in (0, 1), got {target_remaining}")

    spectra = _layer_spectra(net, zscore)
    fingerprint = network_fingerprint(net)
    arch = model_stats.architecture_from_network(net)
    if metric in ("params", "flops"):
        before = model_stats.count_stats(arch, input_shape)
        baseline = before.total_params if metric == "params" else before.total_flops

    def evaluate(delta: float) -> tuple[ArchitecturePlan, float]:
        plan = _assemble_plan(net, spectra, delta, policy, None, fingerprint)
        kept = plan.kept_by_layer()
        if metric == "filters":
            remaining = sum(kept.values()) / sum(
                e.original_filters for e in plan.entries
            )
        else:
            after = model_stats.count_stats(
                model_stats.apply_kept(arch, kept), input_shape
            )
            total = after.total_params if metric == "params" else after.total_flops
            remaining = total / baseline
        return plan, remaining

    best: tuple[float, float, ArchitecturePlan, float] | None = None

    def consider(delta: float) -> float:
        nonlocal best
        plan, remaining = evaluate(delta)
        diff = abs(remaining - target_remaining)
        if best is None or diff < best[0]:
            best = (diff, delta, plan, remaining)
        return remaining

    lo, hi = 0.0, 1.0
    consider(lo)
    consider(hi)
    for _ in range(max_iterations):
        if best[0] <= tolerance:
            break
        mid = (lo + hi) / 2.0
        remaining = consider(mid)
        if remaining < target_remaining:
            lo = mid
        else:
            hi = mid
    diff, delta, plan, achieved = best
    return TargetSearchResult(
        plan=plan,
        delta=delta,
        achieved_remaining=achieved,
        within_tolerance=diff <= tolerance,
    )
