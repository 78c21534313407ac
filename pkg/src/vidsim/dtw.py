"""Sequence alignment and ranking over per-clip embedding sequences.

Classic dynamic time warping, an open-end subsequence variant for
query-in-longer-video matching, and the bi-directional construction that
takes the cheaper of a forward and a reversed alignment.

All functions are pure over immutable numpy inputs and safe to fan out
across candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmbeddingSequence",
    "AlignmentResult",
    "DtwConfig",
    "dtw",
    "subsequence_dtw",
    "bidtw",
    "rank_candidates",
]


@dataclass(frozen=True)
class EmbeddingSequence:
    """Ordered per-clip embedding vectors of one video."""

    video_id: str
    vectors: np.ndarray  # (n_clips, dim)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0:
            raise ValueError(
                f"embedding sequence must be a non-empty (n, dim) array, "
                f"got shape {v.shape}"
            )
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def reversed(self) -> "EmbeddingSequence":
        return EmbeddingSequence(self.video_id, self.vectors[::-1].copy())


@dataclass(frozen=True)
class AlignmentResult:
    cost: float
    path: tuple[tuple[int, int], ...]
    direction_used: str = "forward"


@dataclass(frozen=True)
class DtwConfig:
    """Retrieval-time alignment settings.

    mode: "forward" (plain DTW), "one_reversed" (min of forward and
    query-reversed) or "both_reversed" (min of forward and both-reversed,
    the literal bidirectional formula). scope: "full" or "subsequence".
    """

    mode: str = "one_reversed"
    scope: str = "subsequence"

    def __post_init__(self):
        if self.mode not in ("forward", "one_reversed", "both_reversed"):
            raise ValueError(f"unknown dtw mode {self.mode!r}")
        if self.scope not in ("full", "subsequence"):
            raise ValueError(f"unknown dtw scope {self.scope!r}")


def _check_pair(a: EmbeddingSequence, b: EmbeddingSequence) -> None:
    if a.dim != b.dim:
        raise ValueError(
            f"embedding dimension mismatch: {a.dim} vs {b.dim} "
            f"({a.video_id!r} vs {b.video_id!r})"
        )


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # ||x-y||^2 expanded; clip tiny negatives from cancellation
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def _accumulate(d: np.ndarray, open_begin: bool) -> np.ndarray:
    """Accumulated-cost table for the min(left, up, diag) recurrence.

    First row/column are cumulative; with ``open_begin`` the first query
    row carries no candidate-prefix penalty (subsequence matching).
    """
    n, m = d.shape
    acc = np.empty_like(d)
    acc[0] = d[0] if open_begin else np.cumsum(d[0])
    acc[1:, 0] = np.cumsum(d[:, 0])[1:]
    for i in range(1, n):
        row = acc[i]
        prev = acc[i - 1]
        for j in range(1, m):
            row[j] = d[i, j] + min(prev[j], row[j - 1], prev[j - 1])
    return acc


def _backtrace(acc: np.ndarray, end: tuple[int, int], open_begin: bool):
    """Optimal path ending at ``end``; ties prefer diagonal, then the
    query-index advance, then the candidate-index advance."""
    i, j = end
    path = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            if open_begin:
                break
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            best = min(diag, up, left)
            if diag == best:
                i, j = i - 1, j - 1
            elif up == best:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return tuple(path)


def dtw(a: EmbeddingSequence, b: EmbeddingSequence) -> AlignmentResult:
    """Full-alignment DTW with squared-euclidean local costs.

    Returns the accumulated cost at the far corner and one optimal
    monotone path (0-indexed pairs).
    """
    _check_pair(a, b)
    d = _sq_dists(a.vectors, b.vectors)
    acc = _accumulate(d, open_begin=False)
    end = (len(a) - 1, len(b) - 1)
    return AlignmentResult(float(acc[end]), _backtrace(acc, end, open_begin=False))


def subsequence_dtw(query: EmbeddingSequence, candidate: EmbeddingSequence) -> AlignmentResult:
    """Open-begin/open-end DTW on the candidate axis.

    The query must be consumed in full; the match may start and end
    anywhere within the candidate. The reported cost is the minimum over
    candidate end positions.
    """
    _check_pair(query, candidate)
    d = _sq_dists(query.vectors, candidate.vectors)
    acc = _accumulate(d, open_begin=True)
    j_end = int(np.argmin(acc[-1]))
    end = (len(query) - 1, j_end)
    return AlignmentResult(float(acc[end]), _backtrace(acc, end, open_begin=True))


def _align(a: EmbeddingSequence, b: EmbeddingSequence, scope: str) -> float:
    if scope == "full":
        return dtw(a, b).cost
    return subsequence_dtw(a, b).cost


def bidtw(
    a: EmbeddingSequence,
    b: EmbeddingSequence,
    mode: str = "one_reversed",
    scope: str = "subsequence",
) -> float:
    """Bi-directional matching cost: the cheaper of a forward alignment
    and one with reversed sequence order.

    ``both_reversed`` reverses both sequences (which, under full
    alignment, is provably identical to the forward cost); the default
    ``one_reversed`` reverses only ``a``, which is what actually lets
    temporally mirrored content match.
    """
    cfg = DtwConfig(mode=mode, scope=scope)
    forward = _align(a, b, scope)
    if cfg.mode == "forward":
        return forward
    if cfg.mode == "both_reversed":
        other = _align(a.reversed(), b.reversed(), scope)
    else:
        other = _align(a.reversed(), b, scope)
    return min(forward, other)


def rank_candidates(
    query: EmbeddingSequence,
    index,
    k: int | None = None,
    config: DtwConfig = DtwConfig(),
) -> list[tuple[str, float]]:
    """Rank indexed videos by ascending bi-directional alignment cost.

    ``index`` is any iterable of objects carrying ``.embeddings`` (an
    EmbeddingSequence); ties break on video_id so the ranking is
    insertion-order independent. ``k`` beyond the index size returns the
    full ranking.
    """
    records = list(index)
    if not records:
        raise ValueError("rank_candidates: index is empty")
    scored = []
    for rec in records:
        seq = rec.embeddings if hasattr(rec, "embeddings") else rec
        cost = bidtw(query, seq, mode=config.mode, scope=config.scope)
        scored.append((seq.video_id, cost))
    scored.sort(key=lambda t: (t[1], t[0]))
    if k is None or k >= len(scored):
        return scored
    return scored[:k]
