"""Independent oracles used by the test suite.

Everything here is deliberately naive (finite differences, exhaustive
enumeration, direct formula evaluation) and never calls back into the
code paths it checks.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from vidsim.tensor import Tensor


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference(f: Callable[[], float], x: np.ndarray, coords, h: float = 1e-5):
    """Central-difference gradient of ``f()`` w.r.t. selected coords of ``x``.

    ``x`` is perturbed in place and restored; ``f`` must re-read it.
    """
    grads = {}
    for idx in coords:
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grads[idx] = (fp - fm) / (2.0 * h)
    return grads


def check_gradients(
    build: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    rel_tol: float,
    h: float = 1e-5,
    max_coords_per_array: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of ``build(*tensors)`` with finite
    differences and return the worst relative error seen.

    ``build`` receives freshly wrapped Tensors (requires_grad=True) over the
    given arrays and must return a scalar Tensor. When
    ``max_coords_per_array`` is set, a random subset of coordinates is
    checked per array (full check otherwise).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def run() -> Tensor:
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        return build(*tensors), tensors

    scalar, tensors = run()
    scalar.backward()
    analytic = [t.grad for t in tensors]

    worst = 0.0
    for i, a in enumerate(arrays):
        all_coords = list(np.ndindex(a.shape))
        if max_coords_per_array is not None and len(all_coords) > max_coords_per_array:
            picks = rng.choice(len(all_coords), size=max_coords_per_array, replace=False)
            coords = [all_coords[j] for j in picks]
        else:
            coords = all_coords
        numeric = finite_difference(lambda: run()[0].item(), a, coords, h=h)
        for idx, num in numeric.items():
            ana = analytic[i][idx] if analytic[i] is not None else 0.0
            denom = max(abs(num), abs(ana), 1.0)
            worst = max(worst, abs(ana - num) / denom)
    if worst >= rel_tol:
        raise AssertionError(
            f"gradient mismatch: worst relative error {worst:.3e} >= {rel_tol:.0e}"
        )
    return worst


def random_projection_scalar(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce a tensor to a scalar via a fixed random weighting.

    A plain sum lets transposed/misrouted gradients cancel; a random
    projection does not.
    """
    w = Tensor(rng.standard_normal(out.shape))
    return (out * w).sum()


# ---------------------------------------------------------------------------
# DTW enumeration
# ---------------------------------------------------------------------------


def _monotone_paths(n: int, m: int):
    """Yield every warping path from (0,0) to (n-1,m-1) with steps
    in {(1,0),(0,1),(1,1)}."""

    def extend(path):
        i, j = path[-1]
        if i == n - 1 and j == m - 1:
            yield path
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            ni, nj = i + di, j + dj
            if ni < n and nj < m:
                yield from extend(path + [(ni, nj)])

    yield from extend([(0, 0)])


def sq_dist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def brute_force_dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Exhaustive minimum over all monotone warping paths (n, m <= ~7)."""
    d = sq_dist_matrix(a, b)
    best = np.inf
    for path in _monotone_paths(len(a), len(b)):
        cost = sum(d[i, j] for i, j in path)
        best = min(best, cost)
    return best


def brute_force_subsequence_dtw(query: np.ndarray, cand: np.ndarray) -> float:
    """Minimum full-DTW cost of the query against every contiguous
    candidate window."""
    best = np.inf
    m = len(cand)
    for lo in range(m):
        for hi in range(lo + 1, m + 1):
            best = min(best, brute_force_dtw(query, cand[lo:hi]))
    return best


# ---------------------------------------------------------------------------
# retrieval metrics
# ---------------------------------------------------------------------------


def direct_average_precision(ranks: Sequence[int], n: int) -> float:
    """AP evaluated term by term from its definition."""
    total = 0.0
    for i, r in enumerate(ranks, start=1):
        total += i / r
    return total / n


# ---------------------------------------------------------------------------
# recurrences done by hand
# ---------------------------------------------------------------------------


def scalar_lstm_step(x, h, c, wx, wh, b):
    """One plain LSTM step on scalars; gate order (input, forget, output,
    candidate) matching the convolutional cell."""

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i = sig(wx[0] * x + wh[0] * h + b[0])
    f = sig(wx[1] * x + wh[1] * h + b[1])
    o = sig(wx[2] * x + wh[2] * h + b[2])
    g = np.tanh(wx[3] * x + wh[3] * h + b[3])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def unrolled_momentum_sgd(param, grads, lr, momentum, weight_decay):
    """Replay the momentum-SGD recurrence step by step."""
    buf = 0.0
    p = param
    for g in grads:
        buf = momentum * buf + g + weight_decay * p
        p = p - lr * buf
    return p


__all__ = [
    "finite_difference",
    "check_gradients",
    "random_projection_scalar",
    "brute_force_dtw",
    "brute_force_subsequence_dtw",
    "sq_dist_matrix",
    "direct_average_precision",
    "scalar_lstm_step",
    "unrolled_momentum_sgd",
]
