"""Shared test utilities: gradient comparison and brute-force oracles."""

from __future__ import annotations

import itertools

import numpy as np

from seqdet.tensor import ConvKernel, numeric_gradient


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    na = np.linalg.norm(analytic)
    nn = np.linalg.norm(numeric)
    return np.linalg.norm(analytic - numeric) / max(na, nn, 1e-12)


def kernel_vector(kernels: list[ConvKernel]) -> np.ndarray:
    parts = []
    for k in kernels:
        parts.append(k.weight.ravel().copy())
        if k.bias is not None:
            parts.append(k.bias.ravel().copy())
    return np.concatenate(parts)


def write_kernel_vector(kernels: list[ConvKernel], vec: np.ndarray) -> None:
    i = 0
    for k in kernels:
        n = k.weight.size
        k.weight[...] = vec[i:i + n].reshape(k.weight.shape)
        i += n
        if k.bias is not None:
            n = k.bias.size
            k.bias[...] = vec[i:i + n]
            i += n
    assert i == vec.size


def kernel_grad_vector(kernels: list[ConvKernel]) -> np.ndarray:
    parts = []
    for k in kernels:
        gw = k.gweight if k.gweight is not None else np.zeros_like(k.weight)
        parts.append(gw.ravel())
        if k.bias is not None:
            gb = k.gbias if k.gbias is not None else np.zeros_like(k.bias)
            parts.append(gb.ravel())
    return np.concatenate(parts)


def check_kernel_gradients(loss_fn, kernels: list[ConvKernel],
                           step: float = 1e-5) -> float:
    """Relative error between backward() gradients and the central-difference
    oracle, over every weight and bias of `kernels`.

    loss_fn() must rebuild the forward graph from the kernels' current
    parameters and return the scalar loss node.
    """
    for k in kernels:
        k.zero_grad()
    node = loss_fn()
    node.backward()
    analytic = kernel_grad_vector(kernels)

    vec0 = kernel_vector(kernels)

    def f(vec):
        write_kernel_vector(kernels, vec)
        try:
            return loss_fn().item()
        finally:
            write_kernel_vector(kernels, vec0)

    numeric = numeric_gradient(f, vec0, step)
    write_kernel_vector(kernels, vec0)
    return rel_error(analytic, numeric)


def brute_force_kmeans_partition(shapes, k: int = 3) -> frozenset:
    """Exhaustive-partition optimum for k-means under 1 - IoU distance with
    mean centroids: enumerate every k-labeling (point 0 pinned to cluster 0
    to cut label symmetry), vectorized over all labelings at once."""
    pts = np.array([(s.w, s.h) for s in shapes], dtype=np.float64)
    n = len(pts)
    rest = np.array(list(itertools.product(range(k), repeat=n - 1)), dtype=np.int8)
    labels = np.concatenate(
        [np.zeros((rest.shape[0], 1), dtype=np.int8), rest], axis=1)
    total = np.zeros(labels.shape[0])
    valid = np.ones(labels.shape[0], dtype=bool)
    for c in range(k):
        mask = labels == c  # (num_labelings, n)
        counts = mask.sum(axis=1)
        valid &= counts > 0
        cnt = np.maximum(counts, 1).astype(np.float64)
        cw = (mask @ pts[:, 0]) / cnt
        ch = (mask @ pts[:, 1]) / cnt
        iw = np.minimum(pts[None, :, 0], cw[:, None])
        ih = np.minimum(pts[None, :, 1], ch[:, None])
        inter = iw * ih
        union = pts[None, :, 0] * pts[None, :, 1] + (cw * ch)[:, None] - inter
        total += ((1.0 - inter / union) * mask).sum(axis=1)
    total[~valid] = np.inf
    best = labels[int(total.argmin())]
    return frozenset(
        frozenset(np.flatnonzero(best == c).tolist()) for c in range(k)
    )
