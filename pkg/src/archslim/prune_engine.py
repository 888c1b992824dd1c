"""Filter scoring and structured weight pruning.

Ranks each conv layer's filters under one of four importance criteria,
picks the survivors a plan budgets for, and rewrites the weight container
with the losing filters and every tensor slice they feed removed. Surviving
values are copied bit-for-bit; only shapes change.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    CouplingConflict,
    DanglingFollows,
    FingerprintMismatch,
    InvalidPlan,
    KeepOutOfRange,
    LengthMismatch,
    MissingBnGamma,
    WrongRank,
)
from .slim_planner import ArchitecturePlan
from .weights_io import (
    LayerKind,
    LayerTensor,
    NetworkWeights,
    build_network,
    network_fingerprint,
)


class Criterion(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    GM = "gm"
    BN_SCALE = "bn"


@dataclass(frozen=True)
class GeometricMedianResult:
    point: np.ndarray
    iterations: int
    converged: bool


def geometric_median(points: np.ndarray) -> GeometricMedianResult:
    """Weiszfeld iteration for the point minimizing summed euclidean distance.

    Uses the modified step of Vardi and Zhang when the iterate lands on a
    data point, where the plain update would divide by zero. Stops when the
    gradient norm falls below 1e-7 of the mean pairwise distance, or after
    500 iterations.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty 2-D array")
    n = pts.shape[0]
    if n == 1:
        return GeometricMedianResult(pts[0].copy(), 0, True)

    gram = pts @ pts.T
    norms = np.diag(gram)
    sq = norms[:, None] - 2.0 * gram + norms[None, :]
    np.clip(sq, 0.0, None, out=sq)
    scale = np.sqrt(sq[np.triu_indices(n, k=1)]).mean()
    if scale == 0.0:
        return GeometricMedianResult(pts[0].copy(), 0, True)
    grad_tol = 1e-7 * scale
    snap_tol = 1e-12 * scale

    y = pts.mean(axis=0)
    converged = False
    iterations = 0
    for iterations in range(1, 501):
        diff = pts - y
        dist = np.linalg.norm(diff, axis=1)
        near = dist < snap_tol
        if near.any():
            far = ~near
            r_vec = (diff[far] / dist[far, None]).sum(axis=0)
            r = np.linalg.norm(r_vec)
            eta = float(near.sum())
            if r <= eta:
                converged = True
                break
            w = 1.0 / dist[far]
            t_point = (pts[far] * w[:, None]).sum(axis=0) / w.sum()
            beta = eta / r
            y = (1.0 - beta) * t_point + beta * y
            continue
        grad = (diff / dist[:, None]).sum(axis=0)
        if np.linalg.norm(grad) <= grad_tol:
            converged = True
            break
        w = 1.0 / dist
        y = (pts * w[:, None]).sum(axis=0) / w.sum()
    return GeometricMedianResult(y, iterations, converged)


def score_filters(
    tensor: np.ndarray,
    criterion: Criterion,
    bn_gamma: np.ndarray | None = None,
) -> np.ndarray:
    """Importance score per filter; higher means keep first."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 4:
        raise WrongRank(f"conv tensor must be rank 4, got rank {tensor.ndim}")
    if bn_gamma is not None and criterion is not Criterion.BN_SCALE:
        raise ValueError("bn_gamma only applies to the bn criterion")
    flat = tensor.reshape(tensor.shape[0], -1).astype(np.float64)
    if criterion is Criterion.L1:
        return np.abs(flat).sum(axis=1)
    if criterion is Criterion.L2:
        return np.sqrt((flat * flat).sum(axis=1))
    if criterion is Criterion.GM:
        median = geometric_median(flat).point
        return np.linalg.norm(flat - median, axis=1)
    if bn_gamma is None:
        raise MissingBnGamma("bn criterion needs the batch-norm scale vector")
    gamma = np.asarray(bn_gamma, dtype=np.float64).reshape(-1)
    if gamma.size != tensor.shape[0]:
        raise LengthMismatch(
            f"{gamma.size} scale values for {tensor.shape[0]} filters"
        )
    return np.abs(gamma)


def select_survivors(scores: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the keep highest-scoring filters, ascending.

    Ties break toward the lower index so results are deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 1 <= keep <= scores.size:
        raise KeepOutOfRange(f"keep {keep} not in [1, {scores.size}]")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep])


def survivor_sets(
    net: NetworkWeights,
    plan: ArchitecturePlan,
    criterion: Criterion,
) -> dict[str, np.ndarray]:
    """Survivor index set for every conv layer, honoring coupling groups.

    Coupled layers are scored jointly (element-wise sum over the group) so
    every member keeps the same filter positions.
    """
    if plan.source_fingerprint != network_fingerprint(net):
        raise FingerprintMismatch("plan was generated from different weights")
    kept = plan.kept_by_layer()
    convs = net.conv_layers()
    for rec in convs:
        if rec.name not in kept:
            raise InvalidPlan(f"plan has no entry for conv layer {rec.name!r}")

    bn_for_conv = {
        rec.follows: rec
        for rec in net.layers
        if rec.kind is LayerKind.BATCHNORM and rec.follows is not None
    }
    scores: dict[str, np.ndarray] = {}
    for rec in convs:
        tensor = net.tensor(rec.name)
        if criterion is Criterion.BN_SCALE:
            bn = bn_for_conv.get(rec.name)
            if bn is None:
                raise MissingBnGamma(
                    f"no batch-norm layer follows conv {rec.name!r}"
                )
            gamma = net.tensor(bn.name)[0]
            scores[rec.name] = score_filters(tensor, criterion, bn_gamma=gamma)
        else:
            scores[rec.name] = score_filters(tensor, criterion)

    groups: dict[str, list[str]] = {}
    for rec in convs:
        if rec.coupling_group is not None:
            groups.setdefault(rec.coupling_group, []).append(rec.name)

    survivors: dict[str, np.ndarray] = {}
    for tag in sorted(groups):
        members = groups[tag]
        counts = {net.layer(m).shape[0] for m in members}
        if len(counts) > 1:
            raise CouplingConflict(
                f"coupling group {tag!r}: filter counts differ ({sorted(counts)})"
            )
        if len({kept[m] for m in members}) > 1:
            raise CouplingConflict(
                f"coupling group {tag!r}: plan disagrees on kept count"
            )
        joint = np.sum([scores[m] for m in members], axis=0)
        shared = select_survivors(joint, kept[members[0]])
        for m in members:
            survivors[m] = shared
    for rec in convs:
        if rec.name not in survivors:
            survivors[rec.name] = select_survivors(scores[rec.name], kept[rec.name])
    return survivors


def _in_channel_index(rec, net: NetworkWeights, survivors) -> np.ndarray:
    if rec.follows not in survivors:
        raise DanglingFollows(
            f"{rec.name!r} follows {rec.follows!r} which is not a conv layer"
        )
    return survivors[rec.follows]


def prune_network(
    net: NetworkWeights,
    plan: ArchitecturePlan,
    criterion: Criterion,
) -> NetworkWeights:
    """Rewrite the container with losing filters and dependent slices removed.

    Convs lose output filters (and input channels when they follow a pruned
    conv), batch-norms lose the matching columns, linears lose the feature
    block each pruned channel produced. Metadata is carried over unchanged.
    """
    survivors = survivor_sets(net, plan, criterion)
    tensors = []
    for rec in net.layers:
        vals = net.tensor(rec.name)
        if rec.kind is LayerKind.CONV2D:
            new = vals[survivors[rec.name]]
            if rec.follows is not None:
                keep_in = _in_channel_index(rec, net, survivors)
                src = net.layer(rec.follows)
                if vals.shape[1] != src.shape[0]:
                    raise DanglingFollows(
                        f"{rec.name!r} has {vals.shape[1]} input channels but "
                        f"{rec.follows!r} has {src.shape[0]} filters"
                    )
                new = new[:, keep_in]
        elif rec.kind is LayerKind.BATCHNORM:
            if rec.follows is None:
                new = vals
            else:
                keep = _in_channel_index(rec, net, survivors)
                src = net.layer(rec.follows)
                if vals.shape[1] != src.shape[0]:
                    raise DanglingFollows(
                        f"{rec.name!r} normalizes {vals.shape[1]} channels but "
                        f"{rec.follows!r} has {src.shape[0]} filters"
                    )
                new = vals[:, keep]
        else:
            if rec.follows is None:
                new = vals
            else:
                keep = _in_channel_index(rec, net, survivors)
                src = net.layer(rec.follows)
                mult = rec.spatial_multiplier or 1
                if vals.shape[1] != src.shape[0] * mult:
                    raise DanglingFollows(
                        f"{rec.name!r} has {vals.shape[1]} input features but "
                        f"{rec.follows!r} supplies {src.shape[0]} channels "
                        f"x {mult}"
                    )
                # feature f of the flattened input comes from channel f // mult
                cols = (keep[:, None] * mult + np.arange(mult)[None, :]).reshape(-1)
                new = vals[:, cols]
        tensors.append(
            LayerTensor(
                name=rec.name,
                kind=rec.kind,
                values=np.ascontiguousarray(new),
                coupling_group=rec.coupling_group,
                follows=rec.follows,
                spatial_multiplier=rec.spatial_multiplier,
            )
        )
    return build_network(tensors, metadata=dict(net.metadata))
