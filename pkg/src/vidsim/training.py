"""Losses, triplet sampling, hard-sample mining, and the four-step
semi-supervised schedule.

The schedule: (1) reconstruction pretraining on every clip, (2) triplet
training on the labeled subset, (3) one-shot mining of the highest-loss
triplets, (4) fine-tuning on batches remixed half-and-half from the hard
pool and the remainder. Stages are individually toggleable and the whole
run is reproducible bit for bit under a fixed seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import VideoAutoencoder
from .tensor import Tensor, no_grad, relu, sgd_step

__all__ = [
    "Triplet",
    "TrainConfig",
    "autoencoder_loss",
    "reconstruction_loss_batch",
    "embedding_distance",
    "triplet_loss",
    "triplet_batch_objective",
    "sample_triplets",
    "mine_challenging",
    "compose_remix_batches",
    "learning_rate",
    "train_schedule",
]


@dataclass(frozen=True)
class Triplet:
    """Anchor/positive share a class; negative comes from another."""

    anchor: int
    positive: int
    negative: int
    anchor_class: str
    negative_class: str

    def __post_init__(self):
        if self.anchor_class == self.negative_class:
            raise ValueError(
                f"triplet negative must come from a different class, "
                f"got {self.anchor_class!r} for all three"
            )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.001
    margin: float = 0.5
    epochs: int = 50
    early_stop_patience: int = 5
    batch_size: int = 32
    mining_fraction: float = 0.2
    remix_ratio: float = 0.5
    seed: int = 0
    val_fraction: float = 0.15
    per_anchor: int = 2
    # stage toggles; disabling challenging reproduces plain triplet training
    pretrain: bool = True
    triplet: bool = True
    challenging: bool = True
    # per-stage epoch caps; None falls back to ``epochs``
    pretrain_epochs: int | None = None
    triplet_epochs: int | None = None
    finetune_epochs: int | None = None

    def __post_init__(self):
        if not 0.0 < self.mining_fraction < 1.0:
            raise ValueError("mining_fraction must lie in (0, 1)")
        if not 0.0 <= self.remix_ratio <= 1.0:
            raise ValueError("remix_ratio must lie in [0, 1]")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step-decayed rate: lr * decay^(epoch // every), exact."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def reconstruction_loss_batch(model: VideoAutoencoder, batch: Tensor, train: bool = True) -> Tensor:
    """Mean squared error between a clip batch and its reconstruction."""
    recon = model.reconstruct_batch(batch, train=train)
    diff = recon - batch
    return (diff * diff).mean()


def autoencoder_loss(clip: np.ndarray, model: VideoAutoencoder) -> float:
    """Reconstruction MSE of a single clip under the frozen model."""
    clip = np.asarray(clip, dtype=np.float64)
    with no_grad():
        loss = reconstruction_loss_batch(model, Tensor(clip[None]), train=False)
    return loss.item()


def embedding_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared euclidean distance between two embedding vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """Hinge on the positive/negative distance gap (zero at the kink)."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    gap = (
        embedding_distance(anchor, positive)
        - embedding_distance(anchor, negative)
        + margin
    )
    return max(0.0, gap)


def _batched_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return (diff * diff).sum(axis=1)


def _triplet_hinge_sum(model, clips, triplets, margin, train) -> Tensor:
    batch = np.stack(
        [clips[t.anchor] for t in triplets]
        + [clips[t.positive] for t in triplets]
        + [clips[t.negative] for t in triplets]
    )
    emb = model.encode_batch(Tensor(batch), train=train)
    n = len(triplets)
    d_ap = _batched_sq_dists(emb[:n], emb[n : 2 * n])
    d_an = _batched_sq_dists(emb[:n], emb[2 * n :])
    return relu(d_ap - d_an + margin).sum()


def triplet_batch_objective(
    triplets: list[Triplet],
    model: VideoAutoencoder,
    clips: list[np.ndarray],
    margin: float,
    l2: float,
    train: bool = True,
) -> Tensor:
    """Summed hinge losses plus an explicit L2 penalty on the parameters.

    Anchors, positives and negatives run through the shared encoder in a
    single batch, so gradients reach all three branches.
    """
    if not triplets:
        raise ValueError("triplet batch must be non-empty")
    total = _triplet_hinge_sum(model, clips, triplets, margin, train)
    if l2 != 0.0:
        for p in model.parameters():
            total = total + l2 * (p.tensor * p.tensor).sum()
    return total


# ---------------------------------------------------------------------------
# sampling & mining
# ---------------------------------------------------------------------------


def sample_triplets(
    labels: list[str], per_anchor: int, seed: int
) -> list[Triplet]:
    """Draw ``per_anchor`` triplets for every eligible labeled clip.

    Anchors repeat (multiset semantics); classes with a single member are
    skipped as anchor classes with a warning. Deterministic under seed.
    """
    by_class: dict[str, list[int]] = {}
    for i, label in enumerate(labels):
        by_class.setdefault(label, []).append(i)
    if len(by_class) < 2:
        raise ValueError(
            f"triplet sampling needs >= 2 classes, got {len(by_class)}"
        )
    rng = np.random.default_rng(seed)
    singles = sorted(c for c, members in by_class.items() if len(members) < 2)
    if singles:
        warnings.warn(
            f"classes with a single clip skipped as anchors: {singles}",
            stacklevel=2,
        )
    triplets: list[Triplet] = []
    for anchor, label in enumerate(labels):
        same = [i for i in by_class[label] if i != anchor]
        if not same:
            continue
        other_classes = sorted(c for c in by_class if c != label)
        for _ in range(per_anchor):
            positive = int(rng.choice(same))
            neg_class = str(rng.choice(other_classes))
            negative = int(rng.choice(by_class[neg_class]))
            triplets.append(
                Triplet(anchor, positive, negative, label, neg_class)
            )
    return triplets


def mine_challenging(
    triplets: list[Triplet],
    model: VideoAutoencoder,
    clips: list[np.ndarray],
    margin: float,
    fraction: float = 0.2,
) -> tuple[list[Triplet], list[Triplet]]:
    """Split off the ceil(fraction * N) highest-loss triplets.

    Losses are computed once, with inference-mode embeddings; ties keep
    input order, and both returned lists preserve input order.
    """
    if not triplets:
        raise ValueError("cannot mine an empty triplet list")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    cache: dict[int, np.ndarray] = {}

    def emb(i: int) -> np.ndarray:
        if i not in cache:
            cache[i] = model.encode(clips[i])
        return cache[i]

    losses = [
        triplet_loss(emb(t.anchor), emb(t.positive), emb(t.negative), margin)
        for t in triplets
    ]
    n_hard = math.ceil(fraction * len(triplets))
    order = sorted(range(len(triplets)), key=lambda i: (-losses[i], i))
    hard_idx = set(order[:n_hard])
    hard = [t for i, t in enumerate(triplets) if i in hard_idx]
    rest = [t for i, t in enumerate(triplets) if i not in hard_idx]
    return hard, rest


def compose_remix_batches(
    hard: list,
    rest: list,
    batch_size: int,
    remix_ratio: float,
    n_batches: int,
    rng: np.random.Generator,
) -> list[list]:
    """Batches with floor(remix_ratio * B) items from the hard pool and the
    remainder from the rest pool (sampling with replacement only when a
    pool is too small)."""
    n_hard = int(remix_ratio * batch_size)
    n_rest = batch_size - n_hard
    batches = []
    for _ in range(n_batches):
        batch = []
        if n_hard and hard:
            picks = rng.choice(len(hard), size=n_hard, replace=len(hard) < n_hard)
            batch.extend(hard[i] for i in picks)
        if n_rest and rest:
            picks = rng.choice(len(rest), size=n_rest, replace=len(rest) < n_rest)
            batch.extend(rest[i] for i in picks)
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# the schedule
# ---------------------------------------------------------------------------


def _split_validation(items: list, fraction: float, rng: np.random.Generator):
    n_val = max(1, int(len(items) * fraction)) if len(items) > 1 else 0
    order = rng.permutation(len(items))
    val = [items[i] for i in order[:n_val]]
    train = [items[i] for i in order[n_val:]]
    return train, val


class _EarlyStopper:
    """Patience-based stopping with best-state restoration."""

    def __init__(self, model: VideoAutoencoder, patience: int):
        self.model = model
        self.patience = patience
        self.best = np.inf
        self.best_state: dict | None = None
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record a value; returns True when training should stop."""
        if val_loss < self.best - 1e-12:
            self.best = val_loss
            self.best_state = {k: v.copy() for k, v in self.model.named_arrays()}
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    def restore(self) -> None:
        if self.best_state is not None:
            self.model.load_arrays(self.best_state)


def _val_reconstruction(model, clips) -> float:
    if not clips:
        return np.nan
    return float(
        np.mean([autoencoder_loss(c, model) for c in clips])
    )


def _val_triplet(model, clips, triplets, margin) -> float:
    if not triplets:
        return np.nan
    cache: dict[int, np.ndarray] = {}

    def emb(i):
        if i not in cache:
            cache[i] = model.encode(clips[i])
        return cache[i]

    return float(
        np.mean(
            [
                triplet_loss(emb(t.anchor), emb(t.positive), emb(t.negative), margin)
                for t in triplets
            ]
        )
    )


def _run_autoencoder_stage(model, clips, cfg: TrainConfig, rng, history, max_epochs):
    train_clips, val_clips = _split_validation(clips, cfg.val_fraction, rng)
    stopper = _EarlyStopper(model, cfg.early_stop_patience)
    params = model.parameters()
    for epoch in range(max_epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(train_clips))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = Tensor(np.stack([train_clips[i] for i in idx]))
            loss = reconstruction_loss_batch(model, batch, train=True)
            loss.backward()
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            epoch_loss += loss.item()
            n_batches += 1
        val = _val_reconstruction(model, val_clips)
        history.append(
            {
                "stage": "autoencoder",
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": val,
            }
        )
        if val_clips and stopper.update(val):
            break
    stopper.restore()


def _run_triplet_stage(
    model, clips, batches_fn, val_triplets, cfg: TrainConfig, rng, history, stage, max_epochs
):
    stopper = _EarlyStopper(model, cfg.early_stop_patience)
    params = model.encoder_parameters()
    for epoch in range(max_epochs):
        lr = learning_rate(cfg, epoch)
        epoch_loss = 0.0
        n_batches = 0
        for batch in batches_fn(rng):
            if not batch:
                continue
            loss = _triplet_hinge_sum(model, clips, batch, cfg.margin, train=True)
            loss.backward()
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            epoch_loss += loss.item() / len(batch)
            n_batches += 1
        val = _val_triplet(model, clips, val_triplets, cfg.margin)
        history.append(
            {
                "stage": stage,
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": val,
            }
        )
        if val_triplets and stopper.update(val):
            break
    stopper.restore()


def train_schedule(
    model: VideoAutoencoder,
    clips: list[np.ndarray],
    labels: list[str | None],
    cfg: TrainConfig,
) -> list[dict]:
    """Run the enabled stages in order and return the per-epoch loss log.

    ``labels[i]`` is the class of ``clips[i]`` or None for unlabeled
    clips; the labeled subset must span at least two classes when triplet
    stages are enabled. The model is trained in place.
    """
    if len(clips) != len(labels):
        raise ValueError("clips and labels must align")
    if not clips:
        raise ValueError("no clips to train on")
    labeled_idx = [i for i, c in enumerate(labels) if c is not None]
    if (cfg.triplet or cfg.challenging) and len({labels[i] for i in labeled_idx}) < 2:
        raise ValueError("triplet stages need labeled clips from >= 2 classes")

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    history: list[dict] = []

    if cfg.pretrain:
        _run_autoencoder_stage(
            model,
            clips,
            cfg,
            np.random.default_rng(seeds[0]),
            history,
            cfg.pretrain_epochs or cfg.epochs,
        )

    if not (cfg.triplet or cfg.challenging):
        return history

    labeled_classes = [labels[i] for i in labeled_idx]
    raw = sample_triplets(labeled_classes, cfg.per_anchor, cfg.seed + 1)
    # re-map from labeled-subset positions to global clip indices
    triplets = [
        Triplet(
            labeled_idx[t.anchor],
            labeled_idx[t.positive],
            labeled_idx[t.negative],
            t.anchor_class,
            t.negative_class,
        )
        for t in raw
    ]
    rng_split = np.random.default_rng(seeds[1])
    train_triplets, val_triplets = _split_validation(
        triplets, cfg.val_fraction, rng_split
    )

    if cfg.triplet:

        def plain_batches(rng):
            order = rng.permutation(len(train_triplets))
            return [
                [train_triplets[i] for i in order[lo : lo + cfg.batch_size]]
                for lo in range(0, len(order), cfg.batch_size)
            ]

        _run_triplet_stage(
            model,
            clips,
            plain_batches,
            val_triplets,
            cfg,
            np.random.default_rng(seeds[2]),
            history,
            "triplet",
            cfg.triplet_epochs or cfg.epochs,
        )

    if cfg.challenging:
        hard, rest = mine_challenging(
            train_triplets, model, clips, cfg.margin, cfg.mining_fraction
        )
        n_batches = max(1, len(train_triplets) // cfg.batch_size)

        def remix_batches(rng):
            return compose_remix_batches(
                hard, rest, cfg.batch_size, cfg.remix_ratio, n_batches, rng
            )

        _run_triplet_stage(
            model,
            clips,
            remix_batches,
            val_triplets,
            cfg,
            np.random.default_rng(seeds[3]),
            history,
            "finetune",
            cfg.finetune_epochs or cfg.epochs,
        )

    return history
