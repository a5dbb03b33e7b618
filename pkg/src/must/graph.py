"""Admission-similarity graph and GraphSAGE message passing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, DimensionError, ParameterError
from .init import uniform_fan_in
from .tensor import Tensor

Metric = Literal["cosine_distance", "euclidean"]


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    delta: float
    sigma: float

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def permuted(self, perm) -> "AdjacencyMatrix":
        perm = np.asarray(perm)
        return AdjacencyMatrix(self.weights[np.ix_(perm, perm)], self.delta, self.sigma)

    def dump(self, path) -> None:
        """Write the weights as comma-separated rows."""
        np.savetxt(path, self.weights, delimiter=",", fmt="%.17g")

    @classmethod
    def load_dump(cls, path, delta: float, sigma: float) -> "AdjacencyMatrix":
        return cls(np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64)), delta, sigma)


@dataclass
class SageParams:
    W_self: Tensor
    W_neigh: Tensor
    bias: Tensor


def pool_node_features(values, mask) -> np.ndarray:
    """Masked mean over the time axis: ``(a, l, d)`` -> ``(a, d)``."""
    v = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=float)
    m = (mask.data if isinstance(mask, Tensor) else np.asarray(mask)).astype(v.dtype)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        bad = np.flatnonzero(counts == 0).tolist()
        raise DegenerateInputError(f"nodes {bad} have no valid timestep to pool")
    return (v * m[:, :, None]).sum(axis=1) / counts[:, None]


def pairwise_distances(pooled: np.ndarray, metric: Metric = "cosine_distance") -> np.ndarray:
    x = np.asarray(pooled, dtype=np.float64)
    if metric == "euclidean":
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
        dist = np.sqrt(d2)
    elif metric == "cosine_distance":
        norms = np.linalg.norm(x, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = x / safe[:, None]
        # zero vectors have similarity 0 with everything
        dist = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    else:
        raise ParameterError(f"unknown metric {metric!r}")
    np.fill_diagonal(dist, 0.0)
    return (dist + dist.T) / 2.0


def median_bandwidth(pooled: np.ndarray, metric: Metric = "cosine_distance") -> float:
    """Median off-diagonal pairwise distance; 1.0 when it is zero or undefined."""
    dist = pairwise_distances(pooled, metric)
    a = dist.shape[0]
    if a < 2:
        return 1.0
    med = float(np.median(dist[np.triu_indices(a, k=1)]))
    return med if med > 0 else 1.0


def build_adjacency(pooled, sigma: float, delta: float,
                    metric: Metric = "cosine_distance") -> AdjacencyMatrix:
    """Gaussian-kernel similarity, thresholded at ``delta``, with unit diagonal."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= delta < 1.0:
        raise ParameterError(f"delta must lie in [0, 1), got {delta}")
    pooled = pooled.data if isinstance(pooled, Tensor) else pooled
    dist = pairwise_distances(pooled, metric)
    w = np.exp(-(dist ** 2) / sigma ** 2)
    w[w < delta] = 0.0
    np.fill_diagonal(w, 1.0)
    return AdjacencyMatrix(weights=w, delta=float(delta), sigma=float(sigma))


def neighbor_operator(A: AdjacencyMatrix, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Off-diagonal weights and per-(node, step) normalizers for the weighted mean.

    Neighbours invalid at a timestep (mask 0) drop out of that step's mean.
    Returns ``(W, inv_den)`` with ``inv_den`` of shape ``(a, l)`` (zero where a
    node has no valid neighbour).
    """
    W = A.weights.copy()
    np.fill_diagonal(W, 0.0)
    if mask is None:
        den = W.sum(axis=1, keepdims=True)
    else:
        den = W @ np.asarray(mask, dtype=np.float64)
    inv = np.divide(1.0, den, out=np.zeros_like(den), where=den > 0)
    return W, inv


def sage_layer(V: Tensor, A: AdjacencyMatrix, p: SageParams, mask=None) -> Tensor:
    """One GraphSAGE layer applied at every timestep with shared weights.

    h_i = relu(v_i W_self + agg_i W_neigh + bias), where agg_i is the
    kernel-weighted mean of the neighbours' features at the same step.

    Parameters
    ----------
    V : Tensor
        Node features, shape ``(a, l, d)``.
    A : AdjacencyMatrix
        ``a x a`` graph; nonzero off-diagonal entries are the neighbours.
    p : SageParams
    mask : array, optional
        ``(a, l)`` validity of each step. Padded steps are excluded from the
        neighbour means and zeroed in the output.
    """
    a, l, d = V.shape
    if A.size != a:
        raise DimensionError(f"sage_layer: adjacency is {A.weights.shape} but features are {V.shape}")
    dtype = V.data.dtype
    W, inv = neighbor_operator(A, mask)
    if inv.shape[1] == 1:
        inv = np.broadcast_to(inv, (a, l))
    flat = T.reshape(V, (a, l * d))
    agg = T.reshape(T.matmul(Tensor(W.astype(dtype)), flat), (a, l, d))
    agg = T.apply_mask(agg, inv[:, :, None].astype(dtype))
    h = T.relu(T.matmul(V, p.W_self) + T.matmul(agg, p.W_neigh) + p.bias)
    if mask is not None:
        h = T.apply_mask(h, np.asarray(mask, dtype=dtype)[:, :, None])
    return h


def init_sage_params(d: int, rng: np.random.Generator, d_out: int | None = None) -> SageParams:
    d_out = d_out or d
    return SageParams(
        W_self=Tensor(uniform_fan_in(rng, d, d_out), requires_grad=True),
        W_neigh=Tensor(uniform_fan_in(rng, d, d_out), requires_grad=True),
        bias=Tensor(np.zeros(d_out), requires_grad=True),
    )
