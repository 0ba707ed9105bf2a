"""
One-stream transformer tracker with an optional domain-customized adapter

Template and search crops are patch-embedded, concatenated (plus adapter
tokens when an adapter is attached) and run through pre-norm attention
blocks. The search tokens feed a convolutional head that predicts a score
map and per-cell box offsets and sizes.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig, HeadConfig, Settings
from .errors import ConfigurationError, DimensionError
from .models import BBox
from .numerics import DTYPE, Tensor, check_finite, conv2d, matmul, softmax

logger = logging.getLogger(__name__)


@dataclass
class ResponseMap:
    """Per-sample score grid plus box regression channels"""

    scores: Tensor  # (N, H', W') in (0, 1)
    offsets: Tensor  # (N, 2, H', W'), (x, y) sub-cell residuals
    sizes: Tensor  # (N, 2, H', W'), (w, h) / search_size

    def __post_init__(self):
        check_finite(self.scores, "response scores")
        check_finite(self.offsets, "response offsets")
        check_finite(self.sizes, "response sizes")

    @property
    def grid(self) -> int:
        return self.scores.shape[-1]

    def __len__(self) -> int:
        return self.scores.shape[0]


# ============== Encoder ==============


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection"""

    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: Tensor) -> Tensor:
        x = conv2d(x, self.proj.weight, self.proj.bias, stride=self.patch_size)
        return x.flatten(2).transpose(1, 2)  # N, L, C


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        n, l, c = x.shape
        qkv = self.qkv(x).reshape(n, l, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = softmax(matmul(q, k.transpose(-2, -1)) * self.scale, axis=-1)
        out = matmul(attn, v).transpose(1, 2).reshape(n, l, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block"""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Joint template/search encoder"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.pos_z = nn.Parameter(torch.zeros(1, cfg.template_tokens, cfg.embed_dim))
        self.pos_x = nn.Parameter(torch.zeros(1, cfg.search_tokens, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        nn.init.trunc_normal_(self.pos_z, std=0.02)
        nn.init.trunc_normal_(self.pos_x, std=0.02)

    def embed(self, template: Tensor, search: Tensor) -> Tuple[Tensor, Tensor]:
        cfg = self.cfg
        if template.shape[-1] != cfg.template_size or template.shape[-2] != cfg.template_size:
            raise DimensionError(
                f"template crop must be {cfg.template_size}px, got {tuple(template.shape[-2:])}"
            )
        if search.shape[-1] != cfg.search_size or search.shape[-2] != cfg.search_size:
            raise DimensionError(
                f"search crop must be {cfg.search_size}px, got {tuple(search.shape[-2:])}"
            )
        z = self.patch_embed(template) + self.pos_z
        x = self.patch_embed(search) + self.pos_x
        return z, x

    def forward(
        self, template: Tensor, search: Tensor, adapter_tokens: Optional[Tensor] = None
    ) -> Tensor:
        """
        Returns:
            (N, template_tokens + search_tokens, C); adapter tokens are dropped
        """
        z, x = self.embed(template, search)
        parts = [z, x]
        if adapter_tokens is not None:
            if adapter_tokens.shape[-1] != self.cfg.embed_dim:
                raise ConfigurationError(
                    f"adapter embed_dim {adapter_tokens.shape[-1]} != encoder {self.cfg.embed_dim}"
                )
            parts.append(adapter_tokens)
        tokens = torch.cat(parts, dim=1)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens[:, : z.shape[1] + x.shape[1]]


# ============== Domain-customized adapter ==============


def conv_bn(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(
            in_ch,
            out_ch,
            kernel,
            stride=stride,
            padding=kernel // 2 if stride == 1 else 0,
            bias=False,
        ),
        nn.BatchNorm2d(out_ch),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.branch = nn.Sequential(
            conv_bn(channels, channels), nn.ReLU(), conv_bn(channels, channels)
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(x + self.branch(x))


class DomainAdapter(nn.Module):
    """
    Cross-attention from search-crop queries to a learnable token bank

    The query net maps the crop onto the search token grid; keys and values
    are linear projections of the bank.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.scale = 1.0 / math.sqrt(cfg.head_dim)
        self.query_net = nn.Sequential(
            conv_bn(3, dim, kernel=cfg.patch_size, stride=cfg.patch_size),
            nn.ReLU(),
            ResidualBlock(dim),
        )
        self.bank = nn.Parameter(torch.randn(cfg.bank_tokens, dim) * 0.02)
        self.key_proj = nn.Linear(dim, dim, bias=False)
        self.value_proj = nn.Linear(dim, dim, bias=False)

    def queries(self, search: Tensor) -> Tensor:
        return self.query_net(search).flatten(2).transpose(1, 2)  # N, K, C

    def attention(self, q: Tensor) -> Tensor:
        """(N, K, L') row-stochastic weights"""
        keys = self.key_proj(self.bank)
        return softmax(matmul(q, keys.t()) * self.scale, axis=-1)

    def attend(self, q: Tensor) -> Tensor:
        return matmul(self.attention(q), self.value_proj(self.bank))

    def forward(self, search: Tensor) -> Tensor:
        """Structural tokens S, (N, K, C)"""
        return self.attend(self.queries(search))


# ============== Head ==============


class Head(nn.Module):
    """Four Conv-BN-ReLU layers, then score, offset and size branches"""

    def __init__(self, embed_dim: int, cfg: HeadConfig):
        super().__init__()
        layers = []
        channels = embed_dim
        for _ in range(4):
            layers += [conv_bn(channels, cfg.channels), nn.ReLU()]
            channels = cfg.channels
        self.trunk = nn.Sequential(*layers)
        self.score = nn.Conv2d(cfg.channels, 1, 1)
        self.offset = nn.Conv2d(cfg.channels, 2, 1)
        self.size = nn.Conv2d(cfg.channels, 2, 1)

    def forward(self, tokens: Tensor) -> ResponseMap:
        if tokens.dim() == 3:
            n, k, c = tokens.shape
            side = int(round(math.sqrt(k)))
            if side * side != k:
                raise DimensionError(f"{k} search tokens do not form a square grid")
            tokens = tokens.transpose(1, 2).reshape(n, c, side, side)
        feat = self.trunk(tokens)
        return ResponseMap(
            scores=torch.sigmoid(self.score(feat)).squeeze(1),
            offsets=torch.sigmoid(self.offset(feat)),
            sizes=torch.sigmoid(self.size(feat)),
        )


# ============== Tracker ==============


class Tracker(nn.Module):
    """Encoder + head, with one adapter per target domain"""

    def __init__(self, encoder: EncoderConfig, head: HeadConfig):
        super().__init__()
        self.encoder_cfg = encoder
        self.encoder = Encoder(encoder)
        self.head = Head(encoder.embed_dim, head)
        self.adapters = nn.ModuleDict()

    def add_adapter(self, domain: str) -> DomainAdapter:
        adapter = DomainAdapter(self.encoder_cfg).to(DTYPE)
        self.adapters[domain] = adapter
        logger.debug("Attached adapter for %s", domain)
        return adapter

    def adapter_for(self, domain: Optional[str]) -> Optional[DomainAdapter]:
        if domain is None or domain not in self.adapters:
            return None
        return self.adapters[domain]

    def backbone_modules(self) -> Tuple[nn.Module, nn.Module]:
        return self.encoder, self.head

    def forward(
        self, template: Tensor, search: Tensor, adapter: Optional[DomainAdapter] = None
    ) -> ResponseMap:
        adapter_tokens = adapter(search) if adapter is not None else None
        tokens = self.encoder(template, search, adapter_tokens)
        return self.head(tokens[:, self.encoder_cfg.template_tokens :])


def build_tracker(settings: Settings, seed: Optional[int] = None) -> Tracker:
    """Fresh float64 tracker; seeded initialisation when seed is given"""
    if seed is not None:
        torch.manual_seed(seed)
    return Tracker(settings.encoder, settings.head).to(DTYPE)


# ============== Decoding ==============


def decode_box(resp: ResponseMap, index: int, search_size: int) -> BBox:
    """
    Box at the arg-max cell, in search-crop pixels

    Ties go to the smallest flat index.
    """
    scores = resp.scores[index].detach().numpy()
    grid = scores.shape[-1]
    stride = search_size / grid
    row, col = divmod(int(np.argmax(scores)), grid)
    off_x, off_y = resp.offsets[index, :, row, col].detach().tolist()
    w, h = resp.sizes[index, :, row, col].detach().tolist()
    return BBox(
        cx=(col + off_x + 0.5) * stride,
        cy=(row + off_y + 0.5) * stride,
        w=max(w * search_size, 1e-6),
        h=max(h * search_size, 1e-6),
    )


def boxes_at(resp: ResponseMap, rows: Tensor, cols: Tensor) -> Tensor:
    """
    Predicted boxes read at the given cells, normalized (cx, cy, w, h)

    Coordinates are fractions of the search size, which keeps gradients on
    the offset and size channels.
    """
    idx = torch.arange(len(resp))
    grid = resp.grid
    off = resp.offsets[idx, :, rows, cols]
    size = resp.sizes[idx, :, rows, cols]
    cx = (cols.to(DTYPE) + off[:, 0] + 0.5) / grid
    cy = (rows.to(DTYPE) + off[:, 1] + 0.5) / grid
    return torch.stack([cx, cy, size[:, 0], size[:, 1]], dim=1)
