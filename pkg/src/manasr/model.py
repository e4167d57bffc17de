"""Network assembly: per-frame encoder, the two attention branches, decoder,
pixel-shuffle upsampler, bilinear skip connection, and checkpoint I/O.

Checkpoint format (little-endian): magic "MANA", u32 version=1, u32 tensor
count; per tensor u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
u8 rank, rank x u64 dims, raw row-major data; finally u32 byte length and a
UTF-8 JSON config blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    MemoryBank,
    QkvEmbeddings,
    cross_frame_one_hot_attention,
    embed_qkv,
    fuse_residual,
    memory_attention,
)
from .ops import (
    Conv2dParams,
    GroupNormParams,
    bilinear_upsample,
    conv2d,
    group_norm,
    pixel_shuffle,
    relu,
    window_valid_mask,
)
from .tensor import Tensor

MAGIC = b"MANA"
VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64}


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


@dataclass
class ModelConfig:
    """Architecture and attention hyperparameters.

    channels must be even (the embedding space is channels // 2), frames odd,
    and only 4x upscaling is supported.
    """

    channels: int = 16
    frames: int = 7
    memory_entries: int = 32
    enc_blocks: int = 2
    dec_blocks: int = 4
    scale: int = 4
    window: int = 9
    temporal_reduce: str = "sum"
    memory_enabled: bool = True
    memory_query: str = "shared"

    def __post_init__(self):
        if self.channels % 2 != 0 or self.channels < 2:
            raise ValueError(f"channels must be even and >= 2, got {self.channels}")
        if self.frames % 2 == 0 or self.frames < 1:
            raise ValueError(f"frames must be odd and >= 1, got {self.frames}")
        if self.scale != 4:
            raise ValueError("only 4x upscaling is supported")
        if self.enc_blocks < 1 or self.dec_blocks < 1:
            raise ValueError("enc_blocks and dec_blocks must be >= 1")
        if self.memory_entries < 1:
            raise ValueError("memory_entries must be >= 1")
        if self.window % 2 == 0 or self.window < 1:
            raise ValueError(f"window must be odd and >= 1, got {self.window}")
        if self.temporal_reduce not in ("sum", "mean", "global_max"):
            raise ValueError(f"unknown temporal_reduce {self.temporal_reduce!r}")
        if self.memory_query not in ("shared", "own"):
            raise ValueError(f"unknown memory_query {self.memory_query!r}")

    @property
    def embed_channels(self) -> int:
        return self.channels // 2

    @property
    def norm_groups(self) -> int:
        return 8 if self.channels >= 8 else 1


def desk_config(**overrides) -> ModelConfig:
    """CPU-feasible default used by tests and the training presets."""
    base = dict(channels=16, frames=7, memory_entries=32, enc_blocks=2, dec_blocks=4)
    base.update(overrides)
    return ModelConfig(**base)


def paper_config(**overrides) -> ModelConfig:
    """Full-scale configuration; never exercised in CI."""
    base = dict(channels=128, frames=7, memory_entries=256, enc_blocks=5, dec_blocks=40)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameter structures


@dataclass
class ResidualBlock:
    c1: Conv2dParams
    c2: Conv2dParams


@dataclass
class Encoder:
    head: Conv2dParams  # 3 -> C
    blocks: list[ResidualBlock] = field(default_factory=list)


@dataclass
class Upsampler:
    conv1: Conv2dParams  # C -> 4C
    conv2: Conv2dParams  # C -> 4C
    out: Conv2dParams  # C -> 3


@dataclass
class ManaModel:
    config: ModelConfig
    encoder: Encoder
    norm: GroupNormParams
    embed: QkvEmbeddings
    memory: MemoryBank
    fx: Conv2dParams  # C' -> C, zero-initialized
    fy: Conv2dParams  # C' -> C, zero-initialized
    decoder: list[ResidualBlock]
    upsampler: Upsampler

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}

        def conv(prefix: str, p: Conv2dParams) -> None:
            params[f"{prefix}.w"] = p.weight
            params[f"{prefix}.b"] = p.bias

        conv("enc.head", self.encoder.head)
        for i, blk in enumerate(self.encoder.blocks):
            conv(f"enc.block{i}.c1", blk.c1)
            conv(f"enc.block{i}.c2", blk.c2)
        params["norm.gamma"] = self.norm.gamma
        params["norm.beta"] = self.norm.beta
        conv("embed.wq", self.embed.wq)
        conv("embed.wk", self.embed.wk)
        conv("embed.wv", self.embed.wv)
        if self.embed.wm is not None:
            conv("embed.wm", self.embed.wm)
        params["memory.m"] = self.memory.m
        conv("fuse.fx", self.fx)
        conv("fuse.fy", self.fy)
        for i, blk in enumerate(self.decoder):
            conv(f"dec.block{i}.c1", blk.c1)
            conv(f"dec.block{i}.c2", blk.c2)
        conv("up.conv1", self.upsampler.conv1)
        conv("up.conv2", self.upsampler.conv2)
        conv("up.out", self.upsampler.out)
        return params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def set_trainable(self, names) -> None:
        """Mark exactly the named parameters trainable, freeze the rest."""
        wanted = set(names)
        params = self.named_parameters()
        unknown = wanted - params.keys()
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for name, t in params.items():
            t.requires_grad = name in wanted
            t.grad = None


# ---------------------------------------------------------------------------
# initialization


def _kaiming_conv(rng, out_ch: int, in_ch: int, k: int, dtype) -> Conv2dParams:
    fan_in = in_ch * k * k
    bound = float(np.sqrt(6.0 / fan_in))
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
    return Conv2dParams(
        weight=Tensor(w.astype(dtype)),
        bias=Tensor(np.zeros(out_ch, dtype=dtype)),
    )


def _zero_conv(out_ch: int, in_ch: int, k: int, dtype) -> Conv2dParams:
    return Conv2dParams(
        weight=Tensor(np.zeros((out_ch, in_ch, k, k), dtype=dtype)),
        bias=Tensor(np.zeros(out_ch, dtype=dtype)),
    )


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ManaModel:
    """Build a model with Kaiming-uniform convolutions, a unit-variance-ish
    memory bank, and zero-initialized fusion convolutions (the startup state
    in which both attention branches are inert)."""
    rng = np.random.default_rng(seed)
    c, cp = cfg.channels, cfg.embed_channels

    encoder = Encoder(
        head=_kaiming_conv(rng, c, 3, 3, dtype),
        blocks=[
            ResidualBlock(_kaiming_conv(rng, c, c, 3, dtype), _kaiming_conv(rng, c, c, 3, dtype))
            for _ in range(cfg.enc_blocks)
        ],
    )
    norm = GroupNormParams(
        num_groups=cfg.norm_groups,
        gamma=Tensor(np.ones(c, dtype=dtype)),
        beta=Tensor(np.zeros(c, dtype=dtype)),
    )
    embed = QkvEmbeddings(
        wq=_kaiming_conv(rng, cp, c, 1, dtype),
        wk=_kaiming_conv(rng, cp, c, 1, dtype),
        wv=_kaiming_conv(rng, cp, c, 1, dtype),
        wm=_kaiming_conv(rng, cp, c, 1, dtype) if cfg.memory_query == "own" else None,
    )
    memory = MemoryBank(
        m=Tensor(rng.normal(0.0, 1.0 / np.sqrt(cp), size=(cp, cfg.memory_entries)).astype(dtype))
    )
    fx = _zero_conv(c, cp, 1, dtype)
    fy = _zero_conv(c, cp, 1, dtype)
    decoder = [
        ResidualBlock(_kaiming_conv(rng, c, c, 3, dtype), _kaiming_conv(rng, c, c, 3, dtype))
        for _ in range(cfg.dec_blocks)
    ]
    upsampler = Upsampler(
        conv1=_kaiming_conv(rng, 4 * c, c, 3, dtype),
        conv2=_kaiming_conv(rng, 4 * c, c, 3, dtype),
        out=_kaiming_conv(rng, 3, c, 3, dtype),
    )
    return ManaModel(
        config=cfg,
        encoder=encoder,
        norm=norm,
        embed=embed,
        memory=memory,
        fx=fx,
        fy=fy,
        decoder=decoder,
        upsampler=upsampler,
    )


# ---------------------------------------------------------------------------
# forward pieces


def _res_block(x: Tensor, blk: ResidualBlock) -> Tensor:
    return x + conv2d(relu(conv2d(x, blk.c1)), blk.c2)


def encode_frame(frame: Tensor, encoder: Encoder) -> Tensor:
    """RGB (3, H, W) in [0,1] to a (C, H, W) feature map, spatial size kept."""
    if frame.shape[0] != 3:
        raise ValueError(f"expected RGB frame, got {frame.shape[0]} channels")
    x = conv2d(frame, encoder.head)
    for blk in encoder.blocks:
        x = _res_block(x, blk)
    return x


def _upsample_head(x: Tensor, up: Upsampler) -> Tensor:
    x = relu(pixel_shuffle(conv2d(x, up.conv1), 2))
    x = relu(pixel_shuffle(conv2d(x, up.conv2), 2))
    return conv2d(x, up.out)


def memory_query(model: ManaModel, frames_norm: list[Tensor], q: Tensor | None = None) -> Tensor:
    """The tensor used to query the memory bank: the shared embedded Q, or a
    dedicated embedding of the normalized center frame."""
    if model.config.memory_query == "shared":
        if q is not None:
            return q
        center = (len(frames_norm) - 1) // 2
        return conv2d(frames_norm[center], model.embed.wq)
    center = (len(frames_norm) - 1) // 2
    return conv2d(frames_norm[center], model.embed.wm)


def mana_forward(
    model: ManaModel,
    frames: np.ndarray,
    skip_attention: bool = False,
    want_internals: bool = False,
):
    """Super-resolve the temporal center frame of a (T, 3, H, W) clip in [0,1].

    Returns the raw (3, 4H, 4W) output tensor: the decoded, upsampled residual
    added to the bilinearly upsampled center frame. Not clamped; clamping
    happens only at image export. With ``skip_attention`` both attention
    branches are bypassed and the center feature feeds the decoder directly.
    """
    cfg = model.config
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] != cfg.frames or frames.shape[1] != 3:
        raise ValueError(
            f"expected ({cfg.frames}, 3, H, W) input, got {frames.shape}"
        )
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    t_len = cfg.frames
    center = (t_len - 1) // 2
    h, w = frames.shape[2:]
    dtype = model.memory.m.dtype
    frame_tensors = [Tensor(frames[i].astype(dtype)) for i in range(t_len)]

    feats = [encode_frame(f, model.encoder) for f in frame_tensors]
    f_center = feats[center]
    internals: dict = {}

    if skip_attention:
        fused = f_center
    else:
        normed = [group_norm(f, model.norm) for f in feats]
        q, k, v = embed_qkv(normed, model.embed)
        mask = window_valid_mask(h, w, cfg.window)
        attn = cross_frame_one_hot_attention(q, k, v, mask, cfg.temporal_reduce)
        y_t = None
        if cfg.memory_enabled:
            qm = memory_query(model, normed, q)
            y_t = memory_attention(qm, model.memory)
            fused = fuse_residual(f_center, attn.x_t, y_t, model.fx, model.fy)
        else:
            fused = fuse_residual(f_center, attn.x_t, None, model.fx, None)
        if want_internals:
            internals.update(
                q=q, x_t=attn.x_t, y_t=y_t, scores=attn.scores, indices=attn.indices
            )

    x = fused
    for blk in model.decoder:
        x = _res_block(x, blk)
    residual = _upsample_head(x, model.upsampler)
    skip = bilinear_upsample(frame_tensors[center], cfg.scale)
    out = residual + skip
    if want_internals:
        internals["fused"] = fused
        return out, internals
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(model: ManaModel, path) -> None:
    params = model.named_parameters()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        t = params[name]
        code = 0 if t.dtype == np.float32 else 1
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes())
    blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ManaModel:
    """Rebuild a model from a checkpoint; every parameter is restored bitwise."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint: bad tensor name ({e})") from e
        code, rank = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"corrupt checkpoint: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        elements = 1
        for d in dims:
            elements *= int(d)
            if elements > 1 << 32:
                raise CheckpointError("corrupt checkpoint: implausible tensor shape")
        dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
        raw = r.take(elements * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(_DTYPE_CODES[code])
    (blob_len,) = r.unpack("<I")
    blob = r.take(blob_len)
    if r.pos != len(r.buf):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    try:
        cfg_dict = json.loads(blob.decode("utf-8"))
        cfg = ModelConfig(**cfg_dict)
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint: bad config blob ({e})") from e

    dtype = np.float64 if any(a.dtype == np.float64 for a in tensors.values()) else np.float32
    model = init_model(cfg, seed=0, dtype=dtype)
    params = model.named_parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(
            f"checkpoint parameter set mismatch: missing {missing}, unexpected {extra}"
        )
    for name, t in params.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for {name}: {arr.shape} vs config {t.shape}"
            )
        t.data = np.ascontiguousarray(arr)
    return model
