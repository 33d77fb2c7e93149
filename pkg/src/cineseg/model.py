"""Segmentation network: U-Net encoder, factorized time/space attention stack
with scaled adapters over a frozen backbone partition, and a view-prompted
decoder with cross-attention-filtered skip connections.

Token layout between stages is (B*T, H', W', C). Each attention block reshapes
to (B*H'*W', T, C) for temporal attention and to (B*T, H'*W', C) for spatial
attention; both reshapes are asserted on every forward pass.

The "pre-trained backbone" is emulated: spatial attention and feed-forward
weights of every block are drawn from a dedicated init stream and frozen at
construction, while everything else stays trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .seeding import derive_seed

VIEW_PROMPTS = ("SAX", "LAX")
_PROMPT_TABLE_SEED = 0x5AE5


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    adapter_bottleneck: int = 16
    adapter_scale: float = 0.5
    use_temporal_pos_embed: bool = True
    num_prompt_tokens: int = 1
    decoder_heads: int = 4
    max_phases: int = 32
    mlp_ratio: float = 4.0
    mhca_kv_grid: int = 8

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.embed_dim < 1 or self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be positive and divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.embed_dim % self.decoder_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by decoder_heads "
                f"{self.decoder_heads}"
            )
        if not self.encoder_channels:
            raise ValueError("encoder_channels must name at least one stage")
        for c in self.encoder_channels:
            if c < 1 or c % self.decoder_heads != 0:
                raise ValueError(
                    f"encoder channel count {c} must be positive and divisible by "
                    f"decoder_heads {self.decoder_heads}"
                )
        if self.adapter_bottleneck < 1:
            raise ValueError(f"adapter_bottleneck must be >= 1, got {self.adapter_bottleneck}")
        if self.adapter_scale < 0:
            raise ValueError(f"adapter_scale must be >= 0, got {self.adapter_scale}")
        if self.num_prompt_tokens < 1:
            raise ValueError(f"num_prompt_tokens must be >= 1, got {self.num_prompt_tokens}")
        if 2 * self.num_prompt_tokens > self.embed_dim:
            raise ValueError(
                f"embed_dim {self.embed_dim} too small for two orthonormal prompt "
                f"entries of {self.num_prompt_tokens} tokens"
            )
        if self.max_phases < 2:
            raise ValueError(f"max_phases must be >= 2, got {self.max_phases}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.mhca_kv_grid < 1:
            raise ValueError(f"mhca_kv_grid must be >= 1, got {self.mhca_kv_grid}")

    @property
    def num_stages(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["encoder_channels"] = tuple(data["encoder_channels"])
        return cls(**data)


@dataclass(frozen=True)
class ParameterPartition:
    """Names of frozen backbone parameters vs everything that trains."""

    frozen: tuple[str, ...]
    trainable: tuple[str, ...]

    def validate(self, model: nn.Module) -> None:
        names = {name for name, _ in model.named_parameters()}
        frozen = set(self.frozen)
        trainable = set(self.trainable)
        if frozen & trainable:
            raise ValueError(f"partition overlaps: {sorted(frozen & trainable)[:4]}")
        if frozen | trainable != names:
            missing = names - (frozen | trainable)
            extra = (frozen | trainable) - names
            raise ValueError(f"partition mismatch; missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")


def _is_frozen_name(name: str) -> bool:
    return name.startswith("blocks.") and (".attn_s." in name or ".mlp." in name)


def _norm_groups(channels: int) -> int:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return groups
    return 1


class SelfAttention(nn.Module):
    """Multi-head self-attention over (N, L, C) sequences."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, l, c = x.shape
        qkv = self.qkv(x).reshape(n, l, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, l, c)
        return self.proj(out)


class CrossAttention(nn.Module):
    """Queries from one (N, Lq, C) stream, keys/values from another."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        n, lq, c = query.shape
        lk = source.shape[1]
        h = self.num_heads
        q = self.q(query).reshape(n, lq, h, c // h).transpose(1, 2)
        k = self.k(source).reshape(n, lk, h, c // h).transpose(1, 2)
        v = self.v(source).reshape(n, lk, h, c // h).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, lq, c)
        return self.proj(out)


class Adapter(nn.Module):
    """Bottleneck adapter; the up-projection is zero-initialized so a freshly
    built model matches the adapter-free path exactly."""

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.act = nn.GELU()
        self.up = nn.Linear(bottleneck, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(self.act(self.down(x)))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SpaceTimeBlock(nn.Module):
    """Pre-norm residual block: temporal attention, spatial attention (frozen),
    scaled bottleneck adapter, feed-forward (frozen)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.embed_dim
        self.adapter_scale = config.adapter_scale
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = SelfAttention(dim, config.num_heads)
        if config.use_temporal_pos_embed:
            self.time_pos = nn.Parameter(torch.zeros(config.max_phases, dim))
        else:
            self.time_pos = None
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = SelfAttention(dim, config.num_heads)
        self.norm_a = nn.LayerNorm(dim)
        self.adapter = Adapter(dim, config.adapter_bottleneck)
        self.norm_f = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * config.mlp_ratio))

    def forward(self, x: torch.Tensor, dims: tuple[int, int, int, int]) -> torch.Tensor:
        b, t, h, w = dims
        if x.shape != (b * t, h, w, x.shape[-1]):
            raise ValueError(f"token shape {tuple(x.shape)} inconsistent with dims {dims}")
        c = x.shape[-1]

        xt = x.reshape(b, t, h * w, c).permute(0, 2, 1, 3).reshape(b * h * w, t, c)
        assert xt.shape == (b * h * w, t, c)
        if self.time_pos is not None:
            if t > self.time_pos.shape[0]:
                raise ValueError(
                    f"clip has {t} phases but the temporal embedding holds "
                    f"{self.time_pos.shape[0]}"
                )
            xt = xt + self.time_pos[:t]
        xt = xt + self.attn_t(self.norm_t(xt))

        xs = xt.reshape(b, h * w, t, c).permute(0, 2, 1, 3).reshape(b * t, h * w, c)
        assert xs.shape == (b * t, h * w, c)
        xs = xs + self.attn_s(self.norm_s(xs))
        if self.adapter_scale != 0:
            xs = xs + self.adapter_scale * self.adapter(self.norm_a(xs))
        xs = xs + self.mlp(self.norm_f(xs))
        return xs.reshape(b * t, h, w, c)


class ConvStage(nn.Module):
    """Two 3x3 conv + GroupNorm + GELU layers."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.norm1(self.conv1(x)))
        return self.act(self.norm2(self.conv2(x)))


class Encoder(nn.Module):
    """U-Net downsampling pathway; 2D convolutions run per frame."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        channels = config.encoder_channels
        self.stages = nn.ModuleList()
        prev = config.in_channels
        for c in channels:
            self.stages.append(ConvStage(prev, c))
            prev = c
        self.pool = nn.AvgPool2d(2)
        self.to_tokens = nn.Conv2d(channels[-1], config.embed_dim, 1)

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        x = frames
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        tokens = self.to_tokens(x)
        return tokens.permute(0, 2, 3, 1).contiguous(), skips


class SkipCrossAttention(nn.Module):
    """Per-pixel queries against that stage's skip features.

    Keys/values are average-pooled to at most kv_grid x kv_grid positions;
    full-resolution key sets are quadratic in pixel count and do not fit in
    memory at the top stages.
    """

    def __init__(self, dim: int, num_heads: int, kv_grid: int):
        super().__init__()
        self.kv_grid = kv_grid
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        kv = skip
        if skip.shape[-2] > self.kv_grid or skip.shape[-1] > self.kv_grid:
            kv = F.adaptive_avg_pool2d(skip, self.kv_grid)
        tokens_q = x.flatten(2).transpose(1, 2)
        tokens_kv = kv.flatten(2).transpose(1, 2)
        heads = self.num_heads
        q = self.q(tokens_q).reshape(n, h * w, heads, c // heads).transpose(1, 2)
        k = self.k(tokens_kv).reshape(n, -1, heads, c // heads).transpose(1, 2)
        v = self.v(tokens_kv).reshape(n, -1, heads, c // heads).transpose(1, 2)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, h * w, c)
        out = self.proj(out)
        return out.transpose(1, 2).reshape(n, c, h, w)


class DecoderStage(nn.Module):
    """Upsample x2, concatenate the skip, two convolutions, then residual MHCA."""

    def __init__(self, c_in: int, c_skip: int, num_heads: int, kv_grid: int):
        super().__init__()
        self.convs = ConvStage(c_in + c_skip, c_skip)
        self.mhca = SkipCrossAttention(c_skip, num_heads, kv_grid)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(
                f"upsampled feature grid {tuple(x.shape[-2:])} does not match "
                f"skip grid {tuple(skip.shape[-2:])}"
            )
        x = self.convs(torch.cat([x, skip], dim=1))
        return x + self.mhca(x, skip)


class TwoWayAttention(nn.Module):
    """Two rounds of bidirectional cross-attention between the token set
    (output token + optional prompt) and the flattened image tokens."""

    def __init__(self, dim: int, num_heads: int, rounds: int = 2):
        super().__init__()
        self.rounds = nn.ModuleList()
        for _ in range(rounds):
            self.rounds.append(
                nn.ModuleDict(
                    {
                        "norm_tok_q": nn.LayerNorm(dim),
                        "norm_img_kv": nn.LayerNorm(dim),
                        "tok_from_img": CrossAttention(dim, num_heads),
                        "norm_img_q": nn.LayerNorm(dim),
                        "norm_tok_kv": nn.LayerNorm(dim),
                        "img_from_tok": CrossAttention(dim, num_heads),
                    }
                )
            )

    def forward(self, tokens: torch.Tensor, image: torch.Tensor):
        for r in self.rounds:
            tokens = tokens + r["tok_from_img"](r["norm_tok_q"](tokens), r["norm_img_kv"](image))
            image = image + r["img_from_tok"](r["norm_img_q"](image), r["norm_tok_kv"](tokens))
        return tokens, image


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.embed_dim
        channels = config.encoder_channels
        self.output_token = nn.Parameter(torch.zeros(1, dim))
        self.two_way = TwoWayAttention(dim, config.decoder_heads)
        self.stages = nn.ModuleList()
        prev = dim
        for c in reversed(channels):
            self.stages.append(DecoderStage(prev, c, config.decoder_heads, config.mhca_kv_grid))
            prev = c
        self.head = Mlp(dim, dim)
        self.head_out = nn.Linear(dim, channels[0])

    def forward(
        self,
        tokens: torch.Tensor,
        skips: list[torch.Tensor],
        prompt: torch.Tensor | None,
        dims: tuple[int, int],
    ) -> torch.Tensor:
        b, t = dims
        bt, hh, ww, c = tokens.shape
        if bt != b * t:
            raise ValueError(f"token batch {bt} inconsistent with dims {dims}")
        if len(skips) != len(self.stages):
            raise ValueError(f"expected {len(self.stages)} skips, got {len(skips)}")

        image = tokens.reshape(bt, hh * ww, c)
        token_set = self.output_token.unsqueeze(0).expand(bt, -1, -1)
        if prompt is not None:
            if prompt.dim() == 2:
                prompt = prompt.unsqueeze(0).expand(b, -1, -1)
            # one prompt per clip, broadcast to its T frames
            prompt = prompt.repeat_interleave(t, dim=0)
            token_set = torch.cat([token_set, prompt], dim=1)
        token_set, image = self.two_way(token_set, image)

        x = image.transpose(1, 2).reshape(bt, c, hh, ww)
        for stage, skip in zip(self.stages, reversed(skips)):
            if skip.shape[0] != bt:
                raise ValueError(f"skip batch {skip.shape[0]} does not match tokens {bt}")
            x = stage(x, skip)

        weights = self.head_out(self.head(token_set[:, 0]))
        logits = (x * weights[:, :, None, None]).sum(dim=1)
        h_full, w_full = logits.shape[-2:]
        return logits.reshape(b, t, h_full, w_full).permute(0, 2, 3, 1).unsqueeze(1)


def _build_prompt_table(embed_dim: int, num_tokens: int) -> torch.Tensor:
    # fixed orthonormal constants: the prompt pathway is exercised, the text
    # encoder that would produce these vectors is out of scope
    rng = np.random.default_rng(_PROMPT_TABLE_SEED)
    mat = rng.standard_normal((embed_dim, 2 * num_tokens))
    q, _ = np.linalg.qr(mat)
    table = np.ascontiguousarray(q.T, dtype=np.float32)
    return torch.from_numpy(table).reshape(2, num_tokens, embed_dim)


class SegmentationNetwork(nn.Module):
    """Full model over B x 1 x H x W x T clips; logits share the input shape."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = Encoder(config)
        self.blocks = nn.ModuleList(SpaceTimeBlock(config) for _ in range(config.num_blocks))
        self.decoder = Decoder(config)
        self.register_buffer("prompt_table", _build_prompt_table(config.embed_dim, config.num_prompt_tokens))
        self.last_shapes: dict[str, tuple[int, ...]] | None = None

    def embed_view_prompt(self, view: str) -> torch.Tensor:
        """Fixed prompt tokens for a view keyword; never updated by training."""
        if view not in VIEW_PROMPTS:
            raise ValueError(f"unknown view {view!r}; valid prompts: {VIEW_PROMPTS}")
        return self.prompt_table[VIEW_PROMPTS.index(view)]

    def _check_input(self, x: torch.Tensor) -> tuple[int, int, int, int]:
        if x.dim() != 5:
            raise ValueError(f"expected B x C x H x W x T input, got shape {tuple(x.shape)}")
        b, c, h, w, t = x.shape
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channel(s), got {c}")
        factor = 2**self.config.num_stages
        if h % factor or w % factor:
            raise ValueError(
                f"H and W must be divisible by {factor} "
                f"({self.config.num_stages} stages), got {h}x{w}"
            )
        return b, h, w, t

    def encoder_forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Reshape B x C x H x W x T to (B*T) frames and run the downsampling path."""
        b, h, w, t = self._check_input(x)
        frames = x.permute(0, 4, 1, 2, 3).reshape(b * t, self.config.in_channels, h, w)
        assert frames.shape == (b * t, self.config.in_channels, h, w)
        tokens, skips = self.encoder(frames)
        return tokens, skips

    def decoder_forward(self, tokens, skips, prompt, dims) -> torch.Tensor:
        return self.decoder(tokens, skips, prompt, dims)

    def _prompts_for(self, view, batch: int) -> torch.Tensor | None:
        if view is None:
            return None
        if isinstance(view, str):
            view = [view] * batch
        if len(view) != batch:
            raise ValueError(f"got {len(view)} view keywords for a batch of {batch}")
        return torch.stack([self.embed_view_prompt(v) for v in view])

    def forward(self, x: torch.Tensor, view=None) -> torch.Tensor:
        b, h, w, t = self._check_input(x)
        tokens, skips = self.encoder_forward(x)
        bt, hh, ww, c = tokens.shape
        dims = (b, t, hh, ww)
        for block in self.blocks:
            tokens = block(tokens, dims)
        prompt = self._prompts_for(view, b)
        logits = self.decoder_forward(tokens, skips, prompt, (b, t))
        assert logits.shape == (b, 1, h, w, t)
        self.last_shapes = {
            "input": (b, self.config.in_channels, h, w, t),
            "frames": (b * t, self.config.in_channels, h, w),
            "tokens": (b * t, hh, ww, c),
            "temporal_seq": (b * hh * ww, t, c),
            "spatial_seq": (b * t, hh * ww, c),
            "logits": (b, 1, h, w, t),
        }
        return logits


def _init_tensor(name: str, param: torch.Tensor, gen: torch.Generator) -> None:
    leaf = name.split(".")[-1]
    module = name.split(".")[-2] if "." in name else ""
    with torch.no_grad():
        if ".adapter.up." in name:
            param.zero_()
        elif "norm" in module:
            if leaf == "weight":
                param.fill_(1.0)
            else:
                param.zero_()
        elif leaf in ("time_pos", "output_token"):
            param.normal_(0.0, 0.02, generator=gen)
        elif leaf == "weight" and param.dim() >= 2:
            receptive = math.prod(param.shape[2:]) if param.dim() > 2 else 1
            fan_in = param.shape[1] * receptive
            fan_out = param.shape[0] * receptive
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            param.uniform_(-bound, bound, generator=gen)
        else:
            param.zero_()


def build_model(config: ModelConfig, seed: int) -> tuple[SegmentationNetwork, ParameterPartition]:
    """Construct the network with deterministic initialization and freeze the
    backbone partition. Frozen weights come from their own generator stream,
    standing in for weights learned elsewhere."""
    config.validate()
    model = SegmentationNetwork(config)
    frozen, trainable = [], []
    for name, _ in model.named_parameters():
        (frozen if _is_frozen_name(name) else trainable).append(name)
    partition = ParameterPartition(frozen=tuple(sorted(frozen)), trainable=tuple(sorted(trainable)))
    partition.validate(model)

    gen_frozen = torch.Generator().manual_seed(derive_seed(seed, "backbone"))
    gen_trainable = torch.Generator().manual_seed(derive_seed(seed, "trainable"))
    frozen_set = set(partition.frozen)
    for name, param in sorted(model.named_parameters()):
        _init_tensor(name, param, gen_frozen if name in frozen_set else gen_trainable)
    for name, param in model.named_parameters():
        param.requires_grad_(name not in frozen_set)
    return model, partition


def count_parameters(model: nn.Module, partition: ParameterPartition) -> tuple[int, int]:
    """Exact scalar counts (frozen, trainable); they sum to the total."""
    sizes = {name: p.numel() for name, p in model.named_parameters()}
    frozen = sum(sizes[n] for n in partition.frozen)
    trainable = sum(sizes[n] for n in partition.trainable)
    return frozen, trainable
