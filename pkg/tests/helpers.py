"""Shared builders for synthetic networks and rank-controlled conv tensors."""

import numpy as np

from archslim import LayerKind, LayerTensor, build_network


def low_rank_conv(rng, filters, channels, kernel, rank, noise=1e-6):
    """Conv tensor whose flattened filter matrix has intrinsic rank `rank`.

    Built as U S V^T with orthonormal factors, singular values in [1, 2],
    and V orthogonal to the all-ones vector so row-centering is a no-op.
    The smallest eigenvalue then holds >= 1/(4 rank) of the total variance,
    far above any threshold derived from the noise floor.
    """
    cols = channels * kernel * kernel
    assert 1 <= rank <= min(filters, cols - 1)
    u, _ = np.linalg.qr(rng.normal(size=(filters, rank)))
    g = rng.normal(size=(cols, rank))
    g -= g.mean(axis=0, keepdims=True)  # project out the ones direction
    v, _ = np.linalg.qr(g)
    s = rng.uniform(1.0, 2.0, size=rank)
    flat = (u * s) @ v.T
    if noise:
        flat = flat + rng.uniform(-noise, noise, size=flat.shape)
    return flat.reshape(filters, channels, kernel, kernel).astype(np.float32)


def conv_tensor(name, values, **kw):
    return LayerTensor(name, LayerKind.CONV2D, np.asarray(values, np.float32), **kw)


def bn_tensor(name, follows, gamma, beta=None, mean=None, var=None):
    gamma = np.asarray(gamma, np.float64)
    c = gamma.size
    rows = np.stack(
        [
            gamma,
            np.zeros(c) if beta is None else np.asarray(beta, np.float64),
            np.zeros(c) if mean is None else np.asarray(mean, np.float64),
            np.ones(c) if var is None else np.asarray(var, np.float64),
        ]
    )
    return LayerTensor(name, LayerKind.BATCHNORM, rows.astype(np.float32), follows=follows)


def linear_tensor(name, follows, values, spatial_multiplier=None):
    return LayerTensor(
        name,
        LayerKind.LINEAR,
        np.asarray(values, np.float32),
        follows=follows,
        spatial_multiplier=spatial_multiplier,
    )


def chain_net(rng, filters=(8, 12), in_channels=3, kernel=3, with_bn=True):
    """Plain sequential conv stack, random full-rank weights."""
    tensors = []
    prev_name, prev_c = None, in_channels
    for i, f in enumerate(filters):
        name = f"conv{i}"
        tensors.append(
            conv_tensor(
                name,
                rng.normal(size=(f, prev_c, kernel, kernel)),
                follows=prev_name,
            )
        )
        if with_bn:
            tensors.append(bn_tensor(f"bn{i}", name, rng.normal(size=f)))
        prev_name, prev_c = name, f
    return build_network(tensors)


def random_net(rng, with_linear=True):
    """Random valid toy network: 2-8 convs, optional BN, one coupled pair.

    The two coupled convs get equal filter counts so the network admits a
    residual add; everything else is a sequential chain.
    """
    n_convs = int(rng.integers(2, 9))
    filters = [int(rng.integers(4, 33)) for _ in range(n_convs)]
    couple = None
    if n_convs >= 2 and rng.random() < 0.7:
        i, j = sorted(rng.choice(n_convs, size=2, replace=False))
        filters[j] = filters[i]
        couple = (int(i), int(j))
    kernels = [int(rng.choice([1, 3, 5])) for _ in range(n_convs)]
    pooled = set(rng.choice(n_convs, size=min(2, n_convs), replace=False))

    tensors = []
    metadata = {}
    prev_name, prev_c = None, 3
    for i in range(n_convs):
        name = f"conv{i}"
        group = "res0" if couple is not None and i in couple else None
        tensors.append(
            conv_tensor(
                name,
                rng.normal(size=(filters[i], prev_c, kernels[i], kernels[i])),
                follows=prev_name,
                coupling_group=group,
            )
        )
        if rng.random() < 0.5:
            tensors.append(bn_tensor(f"bn{i}", name, rng.normal(size=filters[i])))
        if i in pooled:
            metadata[f"pool_after:{name}"] = "2"
        prev_name, prev_c = name, filters[i]
    if with_linear and rng.random() < 0.6:
        mult = int(rng.choice([1, 4, 16]))
        tensors.append(
            linear_tensor(
                "fc",
                prev_name,
                rng.normal(size=(10, prev_c * mult)),
                spatial_multiplier=mult if mult > 1 else None,
            )
        )
    return build_network(tensors, metadata=metadata)
