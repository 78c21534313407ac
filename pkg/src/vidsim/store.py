"""Clip splitting, frame preprocessing, and the persistent embedding index.

The index is a little-endian binary file:

    magic "VSEQ1" | u32 version=1 | u32 dim | u64 record_count | records...

with each record laid out as

    u32 id_len | id UTF-8 | u32 class_len | class UTF-8 (len 0 = unlabeled)
    | u32 clip_count | clip_count * dim float32

Embeddings compute in float64 and serialize at 32 bits; a write -> read ->
write cycle is byte-identical. Writes go to a temp file and rename into
place; readers see either the old or the new index, never a partial one.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dtw import EmbeddingSequence

__all__ = [
    "StoreError",
    "BadMagicError",
    "UnsupportedVersionError",
    "DimensionMismatchError",
    "TruncatedFileError",
    "VideoRecord",
    "DatasetVideo",
    "split_clips",
    "resample_indices",
    "preprocess",
    "compute_standardization",
    "embed_video",
    "index_write",
    "index_read",
    "write_dataset",
    "load_dataset",
]

INDEX_MAGIC = b"VSEQ1"
INDEX_VERSION = 1


class StoreError(Exception):
    """Base class for persistence failures."""


class BadMagicError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class DimensionMismatchError(StoreError):
    pass


class TruncatedFileError(StoreError):
    pass


@dataclass
class VideoRecord:
    video_id: str
    class_label: str | None
    embeddings: EmbeddingSequence


@dataclass
class DatasetVideo:
    video_id: str
    class_label: str | None
    frames: np.ndarray


# ---------------------------------------------------------------------------
# clip splitting & preprocessing
# ---------------------------------------------------------------------------


def split_clips(frames: np.ndarray, clip_len: int, stride: int | None = None):
    """Cut (M, ...) frames into fixed-length clips.

    ``stride == clip_len`` gives disjoint clips (count floor(M/k)); a
    smaller stride gives overlapping ones. Trailing frames that do not
    fill a clip are dropped.
    """
    frames = np.asarray(frames)
    if clip_len < 1:
        raise ValueError(f"clip_len must be >= 1, got {clip_len}")
    stride = clip_len if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    m = frames.shape[0]
    if m < clip_len:
        raise ValueError(f"video has {m} frames, fewer than clip_len {clip_len}")
    return [
        frames[start : start + clip_len]
        for start in range(0, m - clip_len + 1, stride)
    ]


def resample_indices(n_frames: int, source_fps: float, target_fps: float):
    """Nearest-frame resampling index map from source to target rate."""
    if source_fps <= 0 or target_fps <= 0:
        raise ValueError("frame rates must be positive")
    out_count = int(n_frames * target_fps / source_fps + 1e-9)
    ratio = source_fps / target_fps
    return [min(int(j * ratio + 0.5), n_frames - 1) for j in range(out_count)]


def _resize_height(frame: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbor resize to the target height, keeping aspect ratio."""
    h, w = frame.shape[0], frame.shape[1]
    if h == target:
        return frame
    scale = target / h
    new_w = max(int(round(w * scale)), 1)
    rows = np.minimum(((np.arange(target) + 0.5) / scale).astype(int), h - 1)
    cols = np.minimum(((np.arange(new_w) + 0.5) / scale).astype(int), w - 1)
    return frame[rows][:, cols]


def preprocess(
    raw_frames: np.ndarray,
    source_fps: float,
    target_fps: float = 30.0,
    target_size: int | None = None,
    mean: np.ndarray | None = None,
    std: np.ndarray | None = None,
) -> np.ndarray:
    """Resample to target fps, resize/center-crop to a square, standardize.

    ``mean``/``std`` are per-channel dataset statistics; pass the values
    from :func:`compute_standardization` so the whole dataset ends up at
    zero mean, unit variance.
    """
    frames = np.asarray(raw_frames, dtype=np.float64)
    idx = resample_indices(frames.shape[0], source_fps, target_fps)
    frames = frames[idx]
    if target_size is not None:
        resized = np.stack([_resize_height(f, target_size) for f in frames])
        w = resized.shape[2]
        if w < target_size:
            raise ValueError(
                f"frame width {w} after resize is smaller than crop "
                f"size {target_size}"
            )
        lo = (w - target_size) // 2
        frames = resized[:, :, lo : lo + target_size]
    if mean is not None and std is not None:
        frames = (frames - mean) / std
    return frames


def compute_standardization(videos) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std pooled over every frame of every video."""
    flat = np.concatenate(
        [np.asarray(v.frames, dtype=np.float64).reshape(-1, v.frames.shape[-1]) for v in videos]
    )
    return flat.mean(axis=0), flat.std(axis=0)


def embed_video(
    frames: np.ndarray,
    model,
    clip_len: int,
    stride: int | None = None,
    video_id: str = "query",
) -> EmbeddingSequence:
    """Split into clips and encode each one, preserving order.

    Clips are encoded one at a time so the result is bitwise identical to
    individual ``model.encode`` calls.
    """
    clips = split_clips(frames, clip_len, stride)
    vectors = np.stack([model.encode(c) for c in clips])
    return EmbeddingSequence(video_id, vectors)


# ---------------------------------------------------------------------------
# binary index
# ---------------------------------------------------------------------------


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def index_write(records: list[VideoRecord], path) -> None:
    """Serialize records; dimensions must agree and ids must be unique."""
    dims = {rec.embeddings.dim for rec in records}
    if len(dims) > 1:
        raise DimensionMismatchError(
            f"records carry inconsistent embedding dimensions: {sorted(dims)}"
        )
    ids = [rec.video_id for rec in records]
    if len(set(ids)) != len(ids):
        raise StoreError("duplicate video_id in index")
    dim = dims.pop() if dims else 0

    parts = [INDEX_MAGIC, struct.pack("<II", INDEX_VERSION, dim)]
    parts.append(struct.pack("<Q", len(records)))
    for rec in records:
        vid = rec.video_id.encode("utf-8")
        cls = (rec.class_label or "").encode("utf-8")
        vecs = rec.embeddings.vectors
        parts.append(struct.pack("<I", len(vid)))
        parts.append(vid)
        parts.append(struct.pack("<I", len(cls)))
        parts.append(cls)
        parts.append(struct.pack("<I", vecs.shape[0]))
        parts.append(np.ascontiguousarray(vecs, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"file ends at byte {len(self.blob)}, needed {self.pos + n}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def index_read(path) -> list[VideoRecord]:
    """Parse and validate an index file; never returns partial records."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(len(INDEX_MAGIC))
    if magic != INDEX_MAGIC:
        raise BadMagicError(f"expected {INDEX_MAGIC!r}, found {magic!r}")
    version = r.u32()
    if version != INDEX_VERSION:
        raise UnsupportedVersionError(f"unsupported index version {version}")
    dim = r.u32()
    count = r.u64()
    records = []
    for _ in range(count):
        vid = r.take(r.u32()).decode("utf-8")
        cls_raw = r.take(r.u32()).decode("utf-8")
        clip_count = r.u32()
        raw = r.take(clip_count * dim * 4)
        vecs = np.frombuffer(raw, dtype="<f4").reshape(clip_count, dim)
        records.append(
            VideoRecord(
                video_id=vid,
                class_label=cls_raw or None,
                embeddings=EmbeddingSequence(vid, vecs.astype(np.float64)),
            )
        )
    if r.pos != len(blob):
        raise TruncatedFileError(
            f"{len(blob) - r.pos} trailing bytes after the last record"
        )
    ids = [rec.video_id for rec in records]
    if len(set(ids)) != len(ids):
        raise StoreError("duplicate video_id in index")
    return records


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(videos, out_dir) -> Path:
    """Write raw frame arrays plus a line-delimited JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for v in videos:
        rel = f"{v.video_id}.npy"
        np.save(out / rel, np.asarray(v.frames, dtype=np.float32))
        lines.append(
            json.dumps(
                {
                    "video_id": v.video_id,
                    "class": v.class_label,
                    "frame_count": int(v.frames.shape[0]),
                    "path": rel,
                }
            )
        )
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out / "manifest.jsonl"


def load_dataset(path) -> list[DatasetVideo]:
    """Load a dataset directory (or its manifest path) back into memory."""
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    if not manifest.exists():
        raise StoreError(f"no manifest at {manifest}")
    base = manifest.parent
    videos = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        meta = json.loads(line)
        frames = np.load(base / meta["path"]).astype(np.float64)
        if frames.shape[0] != meta["frame_count"]:
            raise StoreError(
                f"{meta['video_id']}: manifest says {meta['frame_count']} "
                f"frames, file has {frames.shape[0]}"
            )
        videos.append(
            DatasetVideo(
                video_id=meta["video_id"],
                class_label=meta["class"],
                frames=frames,
            )
        )
    return videos
