"""QuartzNet-style x-vector embedder and the front-end heads.

Tensors follow the ``(batch, channels, time)`` convolution layout; feature
matrices arrive as ``(batch, time, features)`` and are transposed on entry.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

GENDER = "gender_binary"
AGE_GROUP = "age_group_8"
AGE_REG = "age_regressor"
SPEAKER = "speaker_id"

AGE_GENDER_HEADS = (GENDER, AGE_GROUP, AGE_REG)
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
STD_EPS = 1e-9


@dataclass(frozen=True)
class BlockSpec:
    kernel: int
    repeats: int
    residual: bool
    channels: int


@dataclass(frozen=True)
class EmbedderConfig:
    input_dim: int = 30
    blocks: tuple[BlockSpec, ...] = (
        BlockSpec(3, 1, True, 512),
        BlockSpec(5, 2, True, 512),
        BlockSpec(7, 2, True, 512),
        BlockSpec(9, 2, True, 512),
        BlockSpec(1, 1, False, 1500),
    )
    dense_dims: tuple[int, ...] = (512, 512)
    head_hidden: int = 512

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "dense_dims", tuple(self.dense_dims))
        for b in blocks:
            if b.kernel % 2 != 1:
                raise ValueError(f"kernel length must be odd, got {b.kernel}")
            if b.repeats < 1:
                raise ValueError("a block needs at least one sub-unit")

    @classmethod
    def scaled(cls, input_dim: int, width: int, final: Optional[int] = None,
               embed: Optional[int] = None) -> "EmbedderConfig":
        """Same topology with every 512-wide layer replaced by ``width``."""
        final = final if final is not None else width
        embed = embed if embed is not None else width
        base = cls()
        blocks = tuple(BlockSpec(b.kernel, b.repeats, b.residual, width) for b in base.blocks[:-1])
        blocks += (BlockSpec(1, 1, False, final),)
        return cls(input_dim, blocks, (embed, embed), embed)

    @property
    def pooled_dim(self) -> int:
        return 2 * self.blocks[-1].channels

    @property
    def embed_dim(self) -> int:
        return self.dense_dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class SeparableSubunit(nn.Module):
    """Depthwise conv over time, pointwise channel mix, then batch norm."""

    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__()
        self.depthwise = nn.Conv1d(c_in, c_in, kernel, padding=kernel // 2, groups=c_in, bias=False)
        self.pointwise = nn.Conv1d(c_in, c_out, 1, bias=False)
        self.bn = nn.BatchNorm1d(c_out, momentum=BN_MOMENTUM)

    def forward(self, x):
        return self.bn(self.pointwise(self.depthwise(x)))


class QuartzBlock(nn.Module):
    """``repeats`` separable sub-units with ReLU between them. The residual,
    when enabled, is added before the final ReLU; a 1x1 projection is used
    on the skip path only when the channel count changes."""

    def __init__(self, c_in: int, spec: BlockSpec):
        super().__init__()
        dims = [c_in] + [spec.channels] * spec.repeats
        self.units = nn.ModuleList(SeparableSubunit(a, b, spec.kernel) for a, b in zip(dims, dims[1:]))
        self.residual = spec.residual
        self.project = None
        if spec.residual and c_in != spec.channels:
            self.project = nn.Conv1d(c_in, spec.channels, 1, bias=False)

    def forward(self, x):
        out = x
        for i, unit in enumerate(self.units):
            out = unit(out)
            if i < len(self.units) - 1:
                out = F.relu(out)
        if self.residual:
            out = out + (self.project(x) if self.project is not None else x)
        return F.relu(out)


def stats_pool(x: torch.Tensor) -> torch.Tensor:
    """(B, C, T) -> (B, 2C): per-channel time mean then population std."""
    mean = x.mean(dim=-1)
    var = ((x - mean.unsqueeze(-1)) ** 2).mean(dim=-1)
    return torch.cat([mean, torch.sqrt(var + STD_EPS)], dim=-1)


class Embedder(nn.Module):
    def __init__(self, config: EmbedderConfig):
        super().__init__()
        self.config = config
        blocks, c = [], config.input_dim
        for spec in config.blocks:
            blocks.append(QuartzBlock(c, spec))
            c = spec.channels
        self.blocks = nn.ModuleList(blocks)
        dense, d = [], 2 * c
        for width in config.dense_dims:
            dense.append(nn.ModuleDict({"linear": nn.Linear(d, width),
                                        "bn": nn.BatchNorm1d(width, momentum=BN_MOMENTUM)}))
            d = width
        self.dense = nn.ModuleList(dense)

    def frame_level(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() != 3 or feats.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected (batch, time, {self.config.input_dim}) features, "
                             f"got shape {tuple(feats.shape)}")
        x = feats.transpose(1, 2)
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = stats_pool(self.frame_level(feats))
        for layer in self.dense:
            x = F.relu(layer["bn"](layer["linear"](x)))
        return x


class Head(nn.Module):
    """Dense + ReLU + BatchNorm trunk followed by an output projection.
    Returns pre-activation values (logits, or years for the regressor)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.bn = nn.BatchNorm1d(hidden, momentum=BN_MOMENTUM)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.out(self.bn(F.relu(self.hidden(x))))


class AgeGenderNet(nn.Module):
    def __init__(self, config: EmbedderConfig, heads=AGE_GENDER_HEADS, num_speakers: int = 0):
        super().__init__()
        heads = tuple(heads)
        if SPEAKER in heads and len(heads) > 1:
            raise ValueError("the speaker head cannot share a stage with age/gender heads")
        unknown = set(heads) - {GENDER, AGE_GROUP, AGE_REG, SPEAKER}
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")
        self.config = config
        self.active_heads = heads
        self.num_speakers = num_speakers
        self.embedder = Embedder(config)
        e, h = config.embed_dim, config.head_hidden
        self.heads = nn.ModuleDict()
        if GENDER in heads:
            self.heads[GENDER] = Head(e, h, 1)
        if AGE_GROUP in heads:
            self.heads[AGE_GROUP] = Head(e, h, 8)
        if AGE_REG in heads:
            self.heads[AGE_REG] = Head(e, h, 1)
        if SPEAKER in heads:
            if num_speakers < 2:
                raise ValueError("speaker head needs at least two speakers")
            self.heads[SPEAKER] = nn.Linear(e, num_speakers)

    def forward(self, feats: torch.Tensor) -> dict[str, torch.Tensor]:
        """Raw head outputs: gender logit (B,), age-group logits (B, 8),
        age in years (B,), speaker logits (B, N)."""
        emb = self.embedder(feats)
        out = {}
        for name, head in self.heads.items():
            y = head(emb)
            out[name] = y.squeeze(-1) if name in (GENDER, AGE_REG) else y
        return out

    def head_forward(self, embedding: torch.Tensor, head: str) -> torch.Tensor:
        """Head output after its final activation: P(male), age-group
        probabilities, age in years, or speaker probabilities."""
        if head not in self.heads:
            raise KeyError(f"head {head!r} is not active (active: {list(self.heads)})")
        y = self.heads[head](embedding)
        if head == GENDER:
            return torch.sigmoid(y.squeeze(-1))
        if head == AGE_REG:
            return y.squeeze(-1)
        return torch.softmax(y, dim=-1)


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    zero biases, unit/zero batch-norm affine, reset running stats."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, (nn.Conv1d, nn.Linear)):
                w = mod.weight
                fan_in = w[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm1d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.reset_running_stats()
    return model


def build_model(config: EmbedderConfig, heads=AGE_GENDER_HEADS, num_speakers: int = 0,
                seed: int = 0) -> AgeGenderNet:
    return init_params(AgeGenderNet(config, heads, num_speakers), seed)


def count_params(config: EmbedderConfig, heads=AGE_GENDER_HEADS, num_speakers: int = 0) -> int:
    model = AgeGenderNet(config, heads, num_speakers)
    return sum(p.numel() for p in model.parameters())


def embed(features, model: AgeGenderNet) -> torch.Tensor:
    """Single-utterance embedding in inference mode. ``features`` is T x F."""
    x = torch.as_tensor(features, dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model.embedder(x.unsqueeze(0))[0]
    finally:
        model.train(was_training)
