"""Recurrent-convolutional encoder/decoder blocks and the six model variants.

The encoder stacks three downsampling blocks (bidirectional ConvLSTM,
residual ConvLSTM, channel projection, pooling, sequence normalization)
and maps the final timestep's feature block to a fixed-length clip
embedding through a dense layer. Decoders rebuild the clip from that
embedding alone; the variants differ in the upsampling unit (ConvLSTM,
factorized space-time convolution, or a self-attention stack).

Batched activations are laid out (B, T, S1..Sr, C) with r in {2, 3}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    concat,
    conv,
    dense,
    leaky_relu,
    matmul,
    no_grad,
    pool,
    seq_norm,
    sigmoid,
    softmax,
    stack,
    tanh,
    upsample,
    xavier_uniform,
)

__all__ = [
    "TransformerConfig",
    "ModelConfig",
    "VideoAutoencoder",
    "ConvLSTMCell",
    "run_convlstm",
    "MultiHeadSelfAttention",
    "build_model",
    "desk_config",
    "paper_scale_config",
    "config_to_text",
    "config_from_text",
    "VARIANTS",
]

VARIANTS = ("m1", "m2", "m3", "m1-3d", "m2-3d", "m3-3d")

KERNEL_SIZE = 3
LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5
RUNNING_MOMENTUM = 0.1


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 5
    heads: int = 3
    hidden: int = 512
    intermediate: int = 2048

    def __post_init__(self):
        if min(self.layers, self.heads, self.hidden, self.intermediate) < 1:
            raise ValueError("transformer sizes must be positive")
        if self.hidden < self.heads:
            raise ValueError(
                f"transformer hidden size {self.hidden} smaller than "
                f"{self.heads} heads"
            )


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of one model variant.

    ``hidden_channels`` sets, per encoder stage, both the per-direction
    hidden size of the bidirectional layer and the residual ConvLSTM
    hidden size; ``block_out_channels`` is the post-projection channel
    count (defaults to half the hidden size, which reproduces the
    production-scale 96 -> 16 reduction). Decoder stages reuse
    ``hidden_channels``.
    """

    variant: str = "m1"
    input_channels: int = 3
    frame_size: int = 16
    clip_len: int = 4
    hidden_channels: tuple[int, ...] = (4, 4, 4)
    block_out_channels: tuple[int, ...] | None = None
    embedding_dim: int = 32
    depth_size: int | None = None
    transformer: TransformerConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.hidden_channels) != 3:
            raise ValueError("exactly three encoder/decoder stages are supported")
        if self.frame_size % 8 != 0:
            raise ValueError(
                f"frame_size {self.frame_size} must be divisible by 8 "
                "(three halving pools)"
            )
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if self.spatial_rank == 3:
            if self.depth_size is None or self.depth_size % 8 != 0:
                raise ValueError(
                    "volumetric variants need depth_size divisible by 8"
                )
        if self.uses_attention and self.transformer is None:
            object.__setattr__(self, "transformer", TransformerConfig())
        if self.block_out_channels is None:
            object.__setattr__(
                self,
                "block_out_channels",
                tuple(max(1, h // 2) for h in self.hidden_channels),
            )
        if len(self.block_out_channels) != 3:
            raise ValueError("block_out_channels must list three stages")

    @property
    def spatial_rank(self) -> int:
        return 3 if self.variant.endswith("-3d") else 2

    @property
    def uses_attention(self) -> bool:
        return self.variant in ("m3", "m3-3d")

    @property
    def frame_shape(self) -> tuple[int, ...]:
        spatial = (self.frame_size, self.frame_size)
        if self.spatial_rank == 3:
            spatial = (self.depth_size,) + spatial
        return spatial + (self.input_channels,)

    @property
    def clip_shape(self) -> tuple[int, ...]:
        return (self.clip_len,) + self.frame_shape

    @property
    def latent_spatial(self) -> tuple[int, ...]:
        return tuple(s // 8 for s in self.frame_shape[:-1])

    @property
    def latent_size(self) -> int:
        return int(np.prod(self.latent_spatial)) * self.block_out_channels[-1]


def desk_config(variant: str = "m1", **overrides) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    base = dict(
        variant=variant,
        input_channels=3,
        frame_size=16,
        clip_len=4,
        hidden_channels=(4, 4, 4),
        block_out_channels=(4, 4, 4),
        embedding_dim=32,
    )
    if variant.endswith("-3d"):
        base["depth_size"] = 8
    if variant in ("m3", "m3-3d"):
        base["transformer"] = TransformerConfig(layers=2, heads=2, hidden=16, intermediate=32)
    base.update(overrides)
    return ModelConfig(**base)


def paper_scale_config(variant: str = "m3") -> ModelConfig:
    """Production-scale configuration (256x256 frames, 4000-dim embedding)."""
    cfg = dict(
        variant=variant,
        input_channels=3,
        frame_size=256,
        clip_len=3,
        hidden_channels=(32, 32, 32),
        block_out_channels=(16, 16, 16),
        embedding_dim=4000,
    )
    if variant.endswith("-3d"):
        cfg["depth_size"] = 32
    return ModelConfig(**cfg)


# ---------------------------------------------------------------------------
# config <-> text (stored in checkpoint headers)
# ---------------------------------------------------------------------------


def config_to_text(cfg: ModelConfig) -> str:
    lines = [
        f"variant={cfg.variant}",
        f"input_channels={cfg.input_channels}",
        f"frame_size={cfg.frame_size}",
        f"clip_len={cfg.clip_len}",
        f"hidden_channels={','.join(map(str, cfg.hidden_channels))}",
        f"block_out_channels={','.join(map(str, cfg.block_out_channels))}",
        f"embedding_dim={cfg.embedding_dim}",
        f"depth_size={'' if cfg.depth_size is None else cfg.depth_size}",
    ]
    if cfg.transformer is not None:
        t = cfg.transformer
        lines.append(
            f"transformer={t.layers},{t.heads},{t.hidden},{t.intermediate}"
        )
    else:
        lines.append("transformer=")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    known = {
        "variant", "input_channels", "frame_size", "clip_len",
        "hidden_channels", "block_out_channels", "embedding_dim",
        "depth_size", "transformer",
    }
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    transformer = None
    if kv.get("transformer"):
        layers, heads, hidden, inter = map(int, kv["transformer"].split(","))
        transformer = TransformerConfig(layers, heads, hidden, inter)
    return ModelConfig(
        variant=kv["variant"],
        input_channels=int(kv["input_channels"]),
        frame_size=int(kv["frame_size"]),
        clip_len=int(kv["clip_len"]),
        hidden_channels=tuple(int(v) for v in kv["hidden_channels"].split(",")),
        block_out_channels=tuple(int(v) for v in kv["block_out_channels"].split(",")),
        embedding_dim=int(kv["embedding_dim"]),
        depth_size=int(kv["depth_size"]) if kv.get("depth_size") else None,
        transformer=transformer,
    )


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------


class ParamStore:
    """Creates uniquely named parameters and non-trainable buffers."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def xavier(self, name: str, shape) -> Parameter:
        return self._register(name, xavier_uniform(shape, self.rng))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(name, np.ones(shape))

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(data, dtype=np.float64)
        return self.buffers[name]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class ConvLSTMCell:
    """LSTM cell whose gate transforms are same-padding convolutions.

    Input and hidden state are concatenated on the channel axis and a
    single convolution emits all four gate pre-activations, ordered
    (input, forget, output, candidate).
    """

    def __init__(self, store: ParamStore, name: str, rank: int, in_ch: int,
                 hidden: int, kernel_size: int = KERNEL_SIZE):
        self.rank = rank
        self.hidden = hidden
        kshape = (kernel_size,) * rank + (in_ch + hidden, 4 * hidden)
        self.kernel = store.xavier(f"{name}.kernel", kshape)
        self.bias = store.zeros(f"{name}.bias", (4 * hidden,))

    def zero_state(self, x_t: Tensor) -> tuple[Tensor, Tensor]:
        shape = x_t.shape[:-1] + (self.hidden,)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def step(self, x_t: Tensor, state: tuple[Tensor, Tensor]):
        h, c = state
        if x_t.shape[:-1] != h.shape[:-1]:
            raise ValueError(
                f"conv-lstm step: input spatial shape {x_t.shape[:-1]} does "
                f"not match state {h.shape[:-1]}"
            )
        z = conv(concat([x_t, h], axis=-1), self.kernel.tensor) + self.bias.tensor
        n = self.hidden
        i = sigmoid(z[..., 0 * n : 1 * n])
        f = sigmoid(z[..., 1 * n : 2 * n])
        o = sigmoid(z[..., 2 * n : 3 * n])
        g = tanh(z[..., 3 * n : 4 * n])
        c_new = f * c + i * g
        h_new = o * tanh(c_new)
        return h_new, (h_new, c_new)


def run_convlstm(cell: ConvLSTMCell, x: Tensor, reverse: bool = False) -> Tensor:
    """Unroll a cell over axis 1 of (B, T, S.., C); zero initial state.

    With ``reverse`` the sequence is consumed back to front and the
    outputs are returned re-aligned to forward time order.
    """
    n_steps = x.shape[1]
    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    state = None
    outputs: list[Tensor | None] = [None] * n_steps
    for t in order:
        x_t = x[:, t]
        if state is None:
            state = cell.zero_state(x_t)
        out, state = cell.step(x_t, state)
        outputs[t] = out
    return stack(outputs, axis=1)


class SequenceNorm:
    """Per-channel normalization over batch, time and space jointly.

    Batch mode normalizes with the statistics of the activations at hand
    and maintains running averages; inference mode replays the running
    statistics so single-clip encoding matches the training distribution.
    """

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.ones(f"{name}.scale", (channels,))
        self.beta = store.zeros(f"{name}.shift", (channels,))
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            axes = tuple(range(x.ndim - 1))
            batch_mean = x.data.mean(axis=axes)
            batch_var = x.data.var(axis=axes)
            self.running_mean += RUNNING_MOMENTUM * (batch_mean - self.running_mean)
            self.running_var += RUNNING_MOMENTUM * (batch_var - self.running_var)
            return seq_norm(x, self.gamma.tensor, self.beta.tensor, eps=NORM_EPS)
        scale = 1.0 / np.sqrt(self.running_var + NORM_EPS)
        normed = (x - Tensor(self.running_mean)) * Tensor(scale)
        return normed * self.gamma.tensor + self.beta.tensor


class ResidualConvLSTM:
    """ConvLSTM over the sequence, residual-joined to its input by channel
    concatenation, then LeakyReLU. Output channels = in + hidden."""

    def __init__(self, store: ParamStore, name: str, rank: int, in_ch: int, hidden: int):
        self.cell = ConvLSTMCell(store, f"{name}.cell", rank, in_ch, hidden)
        self.out_channels = in_ch + hidden

    def __call__(self, x: Tensor) -> Tensor:
        recurrent = run_convlstm(self.cell, x)
        return leaky_relu(concat([recurrent, x], axis=-1), LEAKY_SLOPE)


class DownsampleBlock:
    """One encoder stage: bidirectional ConvLSTM (concat merge), residual
    ConvLSTM, 1x1 channel projection, halving pool, sequence norm."""

    def __init__(self, store: ParamStore, name: str, rank: int, in_ch: int,
                 hidden: int, out_ch: int):
        self.rank = rank
        self.fwd = ConvLSTMCell(store, f"{name}.fwd", rank, in_ch, hidden)
        self.bwd = ConvLSTMCell(store, f"{name}.bwd", rank, in_ch, hidden)
        self.residual = ResidualConvLSTM(store, f"{name}.res", rank, 2 * hidden, hidden)
        proj_shape = (1,) * rank + (self.residual.out_channels, out_ch)
        self.proj = store.xavier(f"{name}.proj.kernel", proj_shape)
        self.norm = SequenceNorm(store, f"{name}.norm", out_ch)
        self.out_channels = out_ch

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        forward = run_convlstm(self.fwd, x)
        backward = run_convlstm(self.bwd, x, reverse=True)
        merged = concat([forward, backward], axis=-1)
        features = self.residual(merged)
        projected = conv(features, self.proj.tensor)
        pooled = pool(projected, "max", 2, spatial_rank=self.rank)
        return self.norm(pooled, train)

    def pre_pool_features(self, x: Tensor) -> Tensor:
        """Residual-stage activations (used by shape-conformance checks)."""
        forward = run_convlstm(self.fwd, x)
        backward = run_convlstm(self.bwd, x, reverse=True)
        return self.residual(concat([forward, backward], axis=-1))


class RecurrentUpBlock:
    """One decoder stage: nearest upsample, residual ConvLSTM, norm."""

    def __init__(self, store: ParamStore, name: str, rank: int, in_ch: int, hidden: int):
        self.rank = rank
        self.residual = ResidualConvLSTM(store, f"{name}.res", rank, in_ch, hidden)
        self.out_channels = self.residual.out_channels
        self.norm = SequenceNorm(store, f"{name}.norm", self.out_channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        up = upsample(x, 2, spatial_rank=self.rank)
        return self.norm(self.residual(up), train)


class SpacetimeConv:
    """Factorized convolution over time and space standing in for a full
    4-D kernel: one 3^3 convolution per 3-axis group, chained, then a 1x1
    channel mixer. Rank 2 inputs use a single (T, H, W) convolution; rank
    3 inputs chain a per-timestep (D, H, W) and a per-depth (T, H, W) pass.
    """

    def __init__(self, store: ParamStore, name: str, rank: int, in_ch: int,
                 hidden: int, out_ch: int):
        self.rank = rank
        k = (KERNEL_SIZE,) * 3
        if rank == 2:
            self.kernels = [store.xavier(f"{name}.thw.kernel", k + (in_ch, hidden))]
        else:
            self.kernels = [
                store.xavier(f"{name}.dhw.kernel", k + (in_ch, hidden)),
                store.xavier(f"{name}.thw.kernel", k + (hidden, hidden)),
            ]
        self.bias = store.zeros(f"{name}.bias", (hidden,))
        # pointwise channel mixer (a 1x..x1 convolution) as a plain matmul
        self.mixer = store.xavier(f"{name}.mixer.weight", (hidden, out_ch))
        self.out_channels = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        if self.rank == 2:
            # (B, T, H, W, C): one conv over the trailing (T, H, W) axes
            y = conv(x, self.kernels[0].tensor)
        else:
            # (B, T, D, H, W, C): conv over (D, H, W) per timestep, then
            # swap T and D and conv over (T, H, W) per depth slice
            y = conv(x, self.kernels[0].tensor)
            y = y.transpose((0, 2, 1, 3, 4, 5))
            y = conv(y, self.kernels[1].tensor)
            y = y.transpose((0, 2, 1, 3, 4, 5))
        y = leaky_relu(y + self.bias.tensor, LEAKY_SLOPE)
        return matmul(y, self.mixer.tensor)


class SpacetimeUpBlock:
    """One decoder stage: nearest upsample, factorized space-time conv, norm."""

    def __init__(self, store: ParamStore, name: str, rank: int, in_ch: int, hidden: int):
        self.rank = rank
        self.convs = SpacetimeConv(store, f"{name}.conv", rank, in_ch, hidden, hidden)
        self.out_channels = hidden
        self.norm = SequenceNorm(store, f"{name}.norm", hidden)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        up = upsample(x, 2, spatial_rank=self.rank)
        return self.norm(self.convs(up), train)


class LayerNorm:
    """Normalization over the trailing feature axis with learnable affine."""

    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.ones(f"{name}.scale", (dim,))
        self.beta = store.zeros(f"{name}.shift", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ((var + NORM_EPS) ** -0.5) * self.gamma.tensor + self.beta.tensor


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention over (B, T, d) tokens.

    Head width is ``dim // heads`` with the query/key/value projections
    mapping to ``heads * head_dim``, so head counts that do not divide
    ``dim`` still work (the output projection maps back to ``dim``).
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        inner = heads * self.head_dim
        self.inner = inner
        for proj in ("query", "key", "value"):
            setattr(self, f"w_{proj}", store.xavier(f"{name}.{proj}.weight", (dim, inner)))
            setattr(self, f"b_{proj}", store.zeros(f"{name}.{proj}.bias", (inner,)))
        self.w_out = store.xavier(f"{name}.out.weight", (inner, dim))
        self.b_out = store.zeros(f"{name}.out.bias", (dim,))
        self.last_attention: np.ndarray | None = None

    def _split_heads(self, x: Tensor, batch: int, steps: int) -> Tensor:
        return x.reshape(batch, steps, self.heads, self.head_dim).transpose((0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        batch, steps, _ = x.shape
        q = self._split_heads(dense(x, self.w_query.tensor, self.b_query.tensor), batch, steps)
        k = self._split_heads(dense(x, self.w_key.tensor, self.b_key.tensor), batch, steps)
        v = self._split_heads(dense(x, self.w_value.tensor, self.b_value.tensor), batch, steps)
        scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        mixed = matmul(attn, v)
        merged = mixed.transpose((0, 2, 1, 3)).reshape(batch, steps, self.inner)
        return dense(merged, self.w_out.tensor, self.b_out.tensor)


class TransformerLayer:
    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, intermediate: int):
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", dim, heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.w1 = store.xavier(f"{name}.ffn.w1", (dim, intermediate))
        self.b1 = store.zeros(f"{name}.ffn.b1", (intermediate,))
        self.w2 = store.xavier(f"{name}.ffn.w2", (intermediate, dim))
        self.b2 = store.zeros(f"{name}.ffn.b2", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x))
        hidden = leaky_relu(dense(x, self.w1.tensor, self.b1.tensor), LEAKY_SLOPE)
        return self.norm2(x + dense(hidden, self.w2.tensor, self.b2.tensor))


def sinusoidal_positions(n_steps: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (n_steps, dim)."""
    pos = np.arange(n_steps)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------


class RecurrentDecoder:
    """Three recurrent upsampling stages, then a ConvLSTM whose hidden
    size equals the clip channel count."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        rank = cfg.spatial_rank
        blocks = []
        ch = cfg.block_out_channels[-1]
        for i, hidden in enumerate(cfg.hidden_channels):
            block = RecurrentUpBlock(store, f"dec.up{i}", rank, ch, hidden)
            blocks.append(block)
            ch = block.out_channels
        self.blocks = blocks
        self.final = ConvLSTMCell(store, "dec.final", rank, ch, cfg.input_channels)

    def __call__(self, latent_seq: Tensor, train: bool) -> Tensor:
        x = latent_seq
        for block in self.blocks:
            x = block(x, train)
        return run_convlstm(self.final, x)


class SpacetimeDecoder:
    """Three factorized space-time conv upsampling stages and a final
    linear space-time convolution down to the clip channels."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        rank = cfg.spatial_rank
        blocks = []
        ch = cfg.block_out_channels[-1]
        for i, hidden in enumerate(cfg.hidden_channels):
            block = SpacetimeUpBlock(store, f"dec.up{i}", rank, ch, hidden)
            blocks.append(block)
            ch = block.out_channels
        self.blocks = blocks
        self.final = SpacetimeConv(
            store, "dec.final", rank, ch, max(ch, cfg.input_channels), cfg.input_channels
        )

    def __call__(self, latent_seq: Tensor, train: bool) -> Tensor:
        x = latent_seq
        for block in self.blocks:
            x = block(x, train)
        return self.final(x)


class AttentionDecoder:
    """Self-attention over per-timestep flattened latents (with sinusoidal
    position encoding), then a shared convolutional upsampling stack."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        assert cfg.transformer is not None
        rank = cfg.spatial_rank
        t = cfg.transformer
        self.rank = rank
        self.latent_spatial = cfg.latent_spatial
        self.latent_channels = cfg.block_out_channels[-1]
        token = int(np.prod(self.latent_spatial)) * self.latent_channels
        self.w_in = store.xavier("dec.token_in.weight", (token, t.hidden))
        self.b_in = store.zeros("dec.token_in.bias", (t.hidden,))
        self.positions = sinusoidal_positions(cfg.clip_len, t.hidden)
        self.layers = [
            TransformerLayer(store, f"dec.layer{i}", t.hidden, t.heads, t.intermediate)
            for i in range(t.layers)
        ]
        self.w_out = store.xavier("dec.token_out.weight", (t.hidden, token))
        self.b_out = store.zeros("dec.token_out.bias", (token,))
        convs = []
        ch = self.latent_channels
        kshape = (KERNEL_SIZE,) * rank
        for i, hidden in enumerate(cfg.hidden_channels):
            convs.append(
                (
                    store.xavier(f"dec.up{i}.kernel", kshape + (ch, hidden)),
                    store.zeros(f"dec.up{i}.bias", (hidden,)),
                )
            )
            ch = hidden
        self.convs = convs
        self.final_kernel = store.xavier(
            "dec.final.kernel", kshape + (ch, cfg.input_channels)
        )
        self.final_bias = store.zeros("dec.final.bias", (cfg.input_channels,))

    def __call__(self, latent_seq: Tensor, train: bool) -> Tensor:
        batch, steps = latent_seq.shape[:2]
        tokens = latent_seq.reshape(batch, steps, -1)
        x = dense(tokens, self.w_in.tensor, self.b_in.tensor) + Tensor(
            self.positions[:steps]
        )
        for layer in self.layers:
            x = layer(x)
        x = dense(x, self.w_out.tensor, self.b_out.tensor)
        x = x.reshape((batch, steps) + self.latent_spatial + (self.latent_channels,))
        for kernel, bias in self.convs:
            x = upsample(x, 2, spatial_rank=self.rank)
            x = leaky_relu(conv(x, kernel.tensor) + bias.tensor, LEAKY_SLOPE)
        return conv(x, self.final_kernel.tensor) + self.final_bias.tensor


# ---------------------------------------------------------------------------
# the autoencoder
# ---------------------------------------------------------------------------


class VideoAutoencoder:
    """Clip encoder plus variant-specific decoder behind one embedding.

    The decoder sees nothing but the embedding vector; there are no skip
    connections across the bottleneck.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        store = ParamStore(np.random.default_rng(seed))
        rank = config.spatial_rank
        blocks = []
        ch = config.input_channels
        for i, (hidden, out_ch) in enumerate(
            zip(config.hidden_channels, config.block_out_channels)
        ):
            block = DownsampleBlock(store, f"enc.block{i}", rank, ch, hidden, out_ch)
            blocks.append(block)
            ch = out_ch
        self.encoder_blocks = blocks
        self.enc_w = store.xavier("enc.embed.weight", (config.latent_size, config.embedding_dim))
        self.enc_b = store.zeros("enc.embed.bias", (config.embedding_dim,))
        self.dec_w = store.xavier("dec.expand.weight", (config.embedding_dim, config.latent_size))
        self.dec_b = store.zeros("dec.expand.bias", (config.latent_size,))
        if config.uses_attention:
            self.decoder = AttentionDecoder(store, config)
        elif config.variant in ("m2", "m2-3d"):
            self.decoder = SpacetimeDecoder(store, config)
        else:
            self.decoder = RecurrentDecoder(store, config)
        self._store = store

    # -- parameter access ------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self._store.params.values())

    def encoder_parameters(self) -> list[Parameter]:
        """Parameters the embedding depends on (triplet stages update
        only these; the decoder is untouched by metric losses)."""
        return [p for p in self._store.params.values() if p.name.startswith("enc.")]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Trainable parameters followed by statistics buffers."""
        out = [(p.name, p.tensor.data) for p in self._store.params.values()]
        out.extend((f"buffer.{k}", v) for k, v in self._store.buffers.items())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name.startswith("buffer."):
                key = name[len("buffer.") :]
                if key not in self._store.buffers:
                    raise KeyError(f"unknown buffer {key!r}")
                if self._store.buffers[key].shape != value.shape:
                    raise ValueError(f"buffer {key!r} shape mismatch")
                self._store.buffers[key][...] = value
            else:
                if name not in self._store.params:
                    raise KeyError(f"unknown parameter {name!r}")
                p = self._store.params[name]
                if p.tensor.data.shape != tuple(value.shape):
                    raise ValueError(f"parameter {name!r} shape mismatch")
                p.tensor.data = value.copy()

    def clone(self) -> "VideoAutoencoder":
        twin = VideoAutoencoder(self.config, seed=0)
        twin.load_arrays(dict(self.named_arrays()))
        return twin

    # -- forward paths -----------------------------------------------------

    def _check_clip_batch(self, x: Tensor) -> None:
        expected = self.config.clip_shape
        if x.shape[1:] != expected:
            raise ValueError(
                f"clip batch shape {x.shape[1:]} does not match the "
                f"configured clip shape {expected}"
            )

    def encode_batch(self, x: Tensor, train: bool = False) -> Tensor:
        """(B, T, S.., C) clips -> (B, embedding_dim)."""
        self._check_clip_batch(x)
        for block in self.encoder_blocks:
            x = block(x, train)
        last = x[:, -1]  # the hidden features after consuming the clip
        flat = last.reshape(last.shape[0], -1)
        return dense(flat, self.enc_w.tensor, self.enc_b.tensor)

    def decode_batch(self, embedding: Tensor, train: bool = False) -> Tensor:
        """(B, embedding_dim) -> (B, T, S.., C) reconstructed clips."""
        if embedding.shape[-1] != self.config.embedding_dim:
            raise ValueError(
                f"embedding length {embedding.shape[-1]} does not match "
                f"configured dimension {self.config.embedding_dim}"
            )
        cfg = self.config
        latent = dense(embedding, self.dec_w.tensor, self.dec_b.tensor)
        latent = latent.reshape(
            (embedding.shape[0],) + cfg.latent_spatial + (cfg.block_out_channels[-1],)
        )
        seq = stack([latent] * cfg.clip_len, axis=1)
        return self.decoder(seq, train)

    def reconstruct_batch(self, x: Tensor, train: bool = False) -> Tensor:
        return self.decode_batch(self.encode_batch(x, train), train)

    def encode(self, clip: np.ndarray) -> np.ndarray:
        """Single clip (T, S.., C) -> embedding vector; pure and
        deterministic given the weights."""
        clip = np.asarray(clip, dtype=np.float64)
        with no_grad():
            out = self.encode_batch(Tensor(clip[None]), train=False)
        vec = out.data[0]
        if not np.all(np.isfinite(vec)):
            raise FloatingPointError("non-finite values in embedding")
        return vec

    def decode(self, embedding: np.ndarray) -> np.ndarray:
        """Embedding vector -> reconstructed clip (T, S.., C)."""
        embedding = np.asarray(embedding, dtype=np.float64)
        with no_grad():
            out = self.decode_batch(Tensor(embedding[None]), train=False)
        return out.data[0]


def build_model(config: ModelConfig, seed: int = 0) -> VideoAutoencoder:
    return VideoAutoencoder(config, seed=seed)
