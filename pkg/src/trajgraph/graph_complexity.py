"""Graph-entropy machinery: the normalized in-degree entropy, its
closed-form minimizer, majorization utilities behind the proofs, and the
competing sparsity penalties.

Entropy accepts either a plain ndarray (reporting path: exact boundary
values via the 0*ln(0) = 0 branch) or a DArray of relaxed edge weights
(training path: differentiable, with a clamped log so gradients stay
finite when a relaxed degree underflows). Edge convention throughout:
Z[i, j] is the weight of the directed edge i -> j, so in-degrees are
column sums.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import DArray
from .errors import ContractError
from .rng import RngStream

LOG_FLOOR = 1e-12


def _check_square(z: np.ndarray):
    if z.ndim < 2 or z.shape[-1] != z.shape[-2]:
        raise ContractError(f"adjacency must be square, got {z.shape}")
    if z.shape[-1] < 2:
        raise ContractError("graph entropy needs at least 2 nodes")


def _hard_entropy(z: np.ndarray) -> float:
    _check_square(z)
    if z.ndim != 2:
        raise ContractError("reporting-path entropy expects a single (N, N) graph")
    n = z.shape[0]
    d = z.sum(axis=0)
    total = d.sum()
    if total == 0:
        return 0.0
    if np.all(d == d[0]):
        # uniform in-degrees: the maximizer, exactly 1 by definition
        return 1.0
    p = d[d > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(n))


def relaxed_graph_entropy(z: DArray) -> DArray:
    """Differentiable entropy of (..., N, N) relaxed adjacencies.

    Returns one entropy value per leading index. Degrees below LOG_FLOOR
    hit a clamped log, which only affects essentially-empty columns.
    """
    _check_square(z.data)
    n = z.shape[-1]
    d = z.sum(axis=-2)                      # in-degrees, (..., N)
    total = d.sum(axis=-1, keepdims=True)   # (..., 1)
    p = d / ad.clamp_min(total, LOG_FLOOR)
    plogp = p * ad.log(ad.clamp_min(p, LOG_FLOOR))
    h = -plogp.sum(axis=-1) / math.log(n)
    # graphs with no edge mass at all have zero entropy by convention
    empty = (z.data.sum(axis=(-2, -1)) == 0)
    if empty.any():
        h = h * (~empty).astype(np.float64)
    return h


def graph_entropy(z) -> float | DArray:
    """Normalized in-degree Shannon entropy of one graph, in [0, 1]."""
    if isinstance(z, DArray):
        out = relaxed_graph_entropy(z)
        return out
    z = np.asarray(z, dtype=np.float64)
    if (z < 0).any():
        raise ContractError("adjacency entries must be nonnegative")
    if np.abs(np.diagonal(z, axis1=-2, axis2=-1)).max(initial=0.0) != 0:
        raise ContractError("adjacency diagonal must be zero")
    return _hard_entropy(z)


def min_graph_entropy(n_nodes: int, n_edges: int) -> float:
    """Closed-form minimum of the normalized entropy for (N, |E|) graphs.

    With |E| = k(N-1) + e and 0 <= e < N-1, the minimizing in-degree
    profile is k full columns of N-1, one column of e, and zeros, giving
    [k(N-1)/|E| * ln(|E|/(N-1)) - (e/|E|) * ln(e/|E|)] / ln N; zero
    whenever |E| <= N-1.
    """
    if n_nodes < 2:
        raise ContractError("need at least 2 nodes")
    if not 0 <= n_edges <= n_nodes * (n_nodes - 1):
        raise ContractError(f"edge count {n_edges} out of range for N={n_nodes}")
    if n_edges <= n_nodes - 1:
        return 0.0
    k, e = divmod(n_edges, n_nodes - 1)
    value = k * (n_nodes - 1) / n_edges * math.log(n_edges / (n_nodes - 1))
    if e > 0:
        value -= (e / n_edges) * math.log(e / n_edges)
    return value / math.log(n_nodes)


def min_entropy_degree_profile(n_nodes: int, n_edges: int) -> np.ndarray:
    """The in-degree vector attaining the entropy minimum (descending)."""
    k, e = divmod(n_edges, n_nodes - 1)
    profile = [n_nodes - 1] * k
    if e > 0:
        profile.append(e)
    profile += [0] * (n_nodes - len(profile))
    return np.array(profile[:n_nodes], dtype=np.float64)


def majorizes(x, y, sum_tol: float = 1e-9, cmp_tol: float = 1e-12) -> bool:
    """True iff every descending prefix sum of x dominates that of y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("majorization needs equal-length vectors")
    if abs(x.sum() - y.sum()) > sum_tol:
        raise ContractError("majorization requires equal sums")
    xs = np.sort(x)[::-1]
    ys = np.sort(y)[::-1]
    return bool((np.cumsum(xs)[:-1] >= np.cumsum(ys)[:-1] - cmp_tol).all())


def entropy_sum(x) -> float:
    """Sum of the entropy function phi(u) = -u ln u with phi(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    pos = x[x > 0]
    return float(-(pos * np.log(pos)).sum())


def verify_hlp(x, y, tol: float = 1e-12) -> bool:
    """Check the concave-sum inequality for a majorizing pair x > y."""
    if not majorizes(x, y):
        raise ContractError("verify_hlp requires x to majorize y")
    return entropy_sum(x) <= entropy_sum(y) + tol


def random_majorizing_pair(rng: RngStream, n: int,
                           n_transfers: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Draw x on the simplex and build y < x by Robin-Hood transfers.

    Each transfer moves mass from a larger coordinate to a smaller one
    without letting them cross, which preserves the sum and can only
    spread the vector out, i.e. x majorizes the result.
    """
    x = rng.uniform(size=n)
    x = x / x.sum()
    y = x.copy()
    for _ in range(n_transfers):
        i, j = rng.integers(0, n, size=2)
        if y[i] == y[j]:
            continue
        if y[i] < y[j]:
            i, j = j, i
        delta = 0.5 * rng.uniform() * (y[i] - y[j])
        y[i] -= delta
        y[j] += delta
    return x, y


def r_density(z):
    """Mean off-diagonal edge weight: |E| / (N (N - 1))."""
    if isinstance(z, DArray):
        n = z.shape[-1]
        _check_square(z.data)
        return z.sum(axis=(-2, -1)) / float(n * (n - 1))
    z = np.asarray(z, dtype=np.float64)
    _check_square(z)
    n = z.shape[-1]
    return float(z.sum()) / (n * (n - 1))


def r_degree(z):
    """Maximum in-degree over N; max ties break toward the lowest node."""
    if isinstance(z, DArray):
        _check_square(z.data)
        n = z.shape[-1]
        d = z.sum(axis=-2)
        return ad.reduce_max(d, axis=-1) / float(n)
    z = np.asarray(z, dtype=np.float64)
    _check_square(z)
    return float(z.sum(axis=0).max()) / z.shape[-1]


_PENALTIES = {
    "entropy": relaxed_graph_entropy,
    "density": r_density,
    "degree": r_degree,
}


def regularized_loss(recon_loss: DArray, graphs: list[DArray], gamma: float,
                     penalty: str = "entropy") -> DArray:
    """recon + (gamma / M) * sum over windows of the chosen penalty.

    Each graph may carry leading batch dims; the penalty is averaged over
    them. gamma = 0 returns the reconstruction loss object unchanged.
    """
    if gamma < 0:
        raise ContractError("gamma must be nonnegative")
    if gamma == 0.0 or not graphs:
        return recon_loss
    if penalty not in _PENALTIES:
        raise ContractError(f"unknown penalty kind: {penalty}")
    fn = _PENALTIES[penalty]
    total = None
    for z in graphs:
        term = fn(z)
        if term.ndim > 0:
            term = term.mean()
        total = term if total is None else total + term
    return recon_loss + (gamma / len(graphs)) * total
