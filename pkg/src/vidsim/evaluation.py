"""Mean-average-precision evaluation with cropped-query generation.

Two relevance protocols: ``by_class`` treats any indexed video of the
query's class as relevant; ``by_clip`` only the video the query frames
were cropped from. The query's source stays in the candidate set; it is
the ground truth, not a contaminant.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dtw import DtwConfig, EmbeddingSequence, rank_candidates
from .store import VideoRecord, embed_video

__all__ = [
    "QueryCase",
    "CropSpec",
    "average_precision",
    "generate_test_queries",
    "evaluate",
    "write_report",
]

PROTOCOLS = ("by_class", "by_clip")


@dataclass(frozen=True)
class QueryCase:
    query: EmbeddingSequence
    truth_video_id: str
    truth_class: str | None


@dataclass(frozen=True)
class CropSpec:
    """How query frame runs are sampled from a source video.

    Between consecutive picked frames a gap of 1..max_gap frames is
    skipped with probability ``gap_prob``; ``reverse`` flips the cropped
    run in time (exercises the bidirectional matcher).
    """

    min_frames: int
    max_frames: int
    gap_prob: float = 0.0
    max_gap: int = 2
    reverse: bool = False

    def __post_init__(self):
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if not 0.0 <= self.gap_prob <= 1.0:
            raise ValueError("gap_prob must lie in [0, 1]")


def average_precision(ranks, n: int) -> float:
    """AP = (1/n) * sum_i i / rank_i over the retrieved relevant items.

    ``ranks`` are the 1-based positions of the relevant items in the
    ranking, strictly increasing; relevant items never retrieved simply
    contribute nothing.
    """
    if n < 1:
        raise ValueError("number of relevant items must be >= 1")
    ranks = list(ranks)
    if len(ranks) > n:
        raise ValueError(f"{len(ranks)} retrieved relevant items but n={n}")
    prev = 0
    for r in ranks:
        if int(r) != r or r <= prev:
            raise ValueError(
                f"ranks must be strictly increasing positive integers, got {ranks}"
            )
        prev = r
    return sum(i / r for i, r in enumerate(ranks, start=1)) / n


def _crop_indices(n_frames: int, spec: CropSpec, rng: np.random.Generator):
    """Strictly increasing frame indices for one query, or None when the
    video cannot fit the requested run."""
    want = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    if want > n_frames:
        return None
    steps = np.ones(want - 1, dtype=int)
    if spec.gap_prob > 0 and spec.max_gap > 0:
        gaps = rng.random(want - 1) < spec.gap_prob
        extra = rng.integers(1, spec.max_gap + 1, size=want - 1)
        steps = steps + gaps * extra
    span = 1 + int(steps.sum())
    if span > n_frames:
        return None
    start = int(rng.integers(0, n_frames - span + 1))
    return start + np.concatenate([[0], np.cumsum(steps)])


def generate_test_queries(
    videos,
    model,
    clip_len: int,
    stride: int | None,
    n_queries: int,
    crop_spec: CropSpec,
    seed: int,
) -> list[QueryCase]:
    """Build queries by cropping frame runs (with optional gaps) out of
    the given videos; the source video is each query's ground truth.

    Videos too short for the requested crop are skipped with a warning.
    Deterministic under seed.
    """
    if crop_spec.min_frames < clip_len:
        raise ValueError(
            f"crops of {crop_spec.min_frames} frames cannot fill a "
            f"clip of {clip_len}"
        )
    rng = np.random.default_rng(seed)
    queries: list[QueryCase] = []
    attempts = 0
    max_attempts = n_queries * 20
    while len(queries) < n_queries and attempts < max_attempts:
        attempts += 1
        video = videos[int(rng.integers(0, len(videos)))]
        idx = _crop_indices(video.frames.shape[0], crop_spec, rng)
        if idx is None:
            warnings.warn(
                f"{video.video_id}: too short for the requested crop, skipped",
                stacklevel=2,
            )
            continue
        frames = video.frames[idx]
        if crop_spec.reverse:
            frames = frames[::-1]
        query = embed_video(
            np.ascontiguousarray(frames),
            model,
            clip_len,
            stride,
            video_id=f"query{len(queries):04d}",
        )
        queries.append(
            QueryCase(
                query=query,
                truth_video_id=video.video_id,
                truth_class=video.class_label,
            )
        )
    if len(queries) < n_queries:
        raise ValueError(
            f"only generated {len(queries)}/{n_queries} queries; videos too short"
        )
    return queries


def _relevant_ranks(ranking, is_relevant) -> list[int]:
    return [pos for pos, (vid, _) in enumerate(ranking, start=1) if is_relevant(vid)]


def evaluate(
    queries: list[QueryCase],
    records: list[VideoRecord],
    protocol: str = "by_class",
    dtw_config: DtwConfig = DtwConfig(),
) -> dict:
    """Rank the full index for each query and aggregate AP.

    Returns ``{"protocol", "map", "n_queries", "per_query": [...]}`` with
    one entry per query carrying its AP and the rank positions of its
    relevant items.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if not queries:
        raise ValueError("no queries to evaluate")
    candidates = records
    if protocol == "by_class":
        unlabeled = [r.video_id for r in records if r.class_label is None]
        if unlabeled:
            warnings.warn(
                f"{len(unlabeled)} unlabeled records excluded from by_class "
                "evaluation",
                stacklevel=2,
            )
            candidates = [r for r in records if r.class_label is not None]
    by_id = {r.video_id: r for r in candidates}

    per_query = []
    for case in queries:
        if case.truth_video_id not in by_id:
            raise ValueError(
                f"query ground truth {case.truth_video_id!r} not in the index"
            )
        if protocol == "by_class":
            if case.truth_class is None:
                raise ValueError(
                    f"query over {case.truth_video_id!r} has no class label"
                )
            relevant = {
                r.video_id for r in candidates if r.class_label == case.truth_class
            }
        else:
            relevant = {case.truth_video_id}
        ranking = rank_candidates(case.query, candidates, k=None, config=dtw_config)
        ranks = _relevant_ranks(ranking, relevant.__contains__)
        ap = average_precision(ranks, len(relevant))
        per_query.append(
            {
                "query_id": case.query.video_id,
                "truth_video_id": case.truth_video_id,
                "truth_class": case.truth_class,
                "n_relevant": len(relevant),
                "relevant_ranks": ranks,
                "ap": ap,
                "top": ranking[: min(5, len(ranking))],
            }
        )
    return {
        "protocol": protocol,
        "map": float(np.mean([q["ap"] for q in per_query])),
        "n_queries": len(per_query),
        "per_query": per_query,
    }


def write_report(report: dict, path) -> None:
    """One JSON line per query followed by a summary line."""
    lines = [json.dumps(q) for q in report["per_query"]]
    summary = {k: v for k, v in report.items() if k != "per_query"}
    summary["kind"] = "summary"
    lines.append(json.dumps(summary))
    Path(path).write_text("\n".join(lines) + "\n")
