"""Toy visual/text encoders and landmark-driven AU region extraction.

Both encoders sit behind small protocols (``VisualEncoder``/``TextEncoderLike``)
so pretrained backbones can replace them without touching the alignment code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import AU_IDS
from .errors import EmptyText, InvalidArgument, ShapeMismatch
from .landmarks import DEFAULT_AU_MAP, AULandmarkMap
from .layers import EncoderBlock
from .templates import CAPTION_MAX_TOKENS
from .tokenizer import Tokenizer


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 64
    vit_depth: int = 2
    text_depth: int = 1
    n_heads: int = 4
    ffn_dim: int = 128
    region_k: int = 3
    vocab_path: Optional[str] = None
    au_map_path: Optional[str] = None
    # Overrides the tokenizer's vocabulary size (e.g. for parameter counting at BERT scale).
    vocab_size: Optional[int] = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise InvalidArgument("image_size must be a multiple of patch_size")
        if self.embed_dim % self.n_heads:
            raise InvalidArgument("embed_dim must be divisible by n_heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class VisualFeatureMap:
    tokens: torch.Tensor  # [B, P + 1, D], CLS first
    grid: tuple
    patch_size: int

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[:, 1:]

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[:, 0]


@dataclass
class AURegionSet:
    regions: torch.Tensor  # [B, n_au, k*k, D]
    centers: torch.Tensor  # [B, n_au, 2] as (row, col) grid cells
    k: int


@dataclass
class TokenBatch:
    ids: torch.Tensor  # [B, L] long
    mask: torch.Tensor  # [B, L] bool
    truncated: torch.Tensor  # [B] bool


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # [B, L, D], CLS at index 0
    attention_mask: torch.Tensor  # [B, L] bool
    truncated: torch.Tensor  # [B] bool


class VisualEncoder(Protocol):
    def encode_image(self, images) -> VisualFeatureMap: ...


class TextEncoderLike(Protocol):
    def encode_text(self, texts, caption_type: str) -> TextEmbedding: ...


def as_image_batch(images, image_size: int, dtype=None) -> torch.Tensor:
    """[H, W, 3] or [B, H, W, 3] pixels (uint8 or float in [0, 1]) -> float [B, H, W, 3]."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1:] != (image_size, image_size, 3):
        raise ShapeMismatch(f"expected [B, {image_size}, {image_size}, 3] pixels, got {tuple(x.shape)}")
    if x.dtype == torch.uint8:
        x = x.to(dtype or torch.get_default_dtype()) / 255.0
    elif dtype is not None:
        x = x.to(dtype)
    if not torch.isfinite(x).all():
        raise ShapeMismatch("image contains non-finite values")
    return x


class ImageEncoder(nn.Module):
    """Patch embedding + CLS + learned positions + pre-norm transformer stack."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.grid = cfg.grid
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(3 * cfg.patch_size**2, d)
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid**2 + 1, d) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.vit_depth))
        self.norm = nn.LayerNorm(d)

    def patchify(self, x):
        b, p, g = x.shape[0], self.patch_size, self.grid
        x = x.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * 3)

    def forward(self, images):
        x = as_image_batch(images, self.image_size, dtype=self.patch_embed.weight.dtype)
        x = self.patchify((x - 0.5) / 0.5)
        x = self.patch_embed(x)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def encode_image(self, images) -> VisualFeatureMap:
        return VisualFeatureMap(self(images), (self.grid, self.grid), self.patch_size)


def au_region_centers(landmarks, au_map: AULandmarkMap, patch_size: int, grid: int,
                      au_ids: Sequence[int] = AU_IDS) -> np.ndarray:
    """Grid cell (row, col) per AU, shape [B, n_au, 2]; clamped to the grid."""
    au_map.check_complete(au_ids)
    lms = np.asarray(landmarks, dtype=np.float64)
    if lms.ndim == 2:
        lms = lms[None]
    out = np.empty((lms.shape[0], len(au_ids), 2), dtype=np.int64)
    for j, au in enumerate(au_ids):
        idx, (dx, dy) = au_map.entries[au]
        c = lms[:, list(idx)].mean(axis=1)
        col = np.floor(c[:, 0] / patch_size + dx)
        row = np.floor(c[:, 1] / patch_size + dy)
        out[:, j, 0] = np.clip(row, 0, grid - 1)
        out[:, j, 1] = np.clip(col, 0, grid - 1)
    return out


def region_indices(centers: np.ndarray, k: int, grid: int) -> np.ndarray:
    """Flat patch indices of each clamped k x k window, shape [B, n_au, k*k]."""
    if not 1 <= k <= grid:
        raise InvalidArgument(f"region k={k} must lie in [1, {grid}]")
    start = np.clip(centers - k // 2, 0, grid - k)
    dr, dc = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = start[..., 0:1] + dr.reshape(-1)
    cols = start[..., 1:2] + dc.reshape(-1)
    return rows * grid + cols


def extract_au_regions(feature_map: VisualFeatureMap, landmarks, au_map: AULandmarkMap = DEFAULT_AU_MAP,
                       k: int = 3) -> AURegionSet:
    """Copy the k x k patch-token window around each AU's landmark-projected centre."""
    g = feature_map.grid[0]
    centers = au_region_centers(landmarks, au_map, feature_map.patch_size, g)
    patches = feature_map.patch_tokens
    b, _, d = patches.shape
    if centers.shape[0] != b:
        raise ShapeMismatch(f"{centers.shape[0]} landmark sets for {b} images")
    idx = torch.as_tensor(region_indices(centers, k, g), device=patches.device)
    n_au = idx.shape[1]
    flat = idx.reshape(b, -1, 1).expand(-1, -1, d)
    regions = torch.gather(patches, 1, flat).reshape(b, n_au, k * k, d)
    return AURegionSet(regions, torch.as_tensor(centers), k)


class TextEncoder(nn.Module):
    """Token + position embeddings followed by ``text_depth`` transformer blocks.

    Outputs at padded positions are zeroed so padding never leaks downstream.
    ``calls`` counts forward passes; evaluation code asserts it stays at zero.
    """

    def __init__(self, cfg: EncoderConfig, tokenizer: Tokenizer, max_len: Optional[int] = None):
        super().__init__()
        d = cfg.embed_dim
        self.tokenizer = tokenizer
        self.max_len = max_len or max(CAPTION_MAX_TOKENS.values())
        self.token_embed = nn.Embedding(cfg.vocab_size or tokenizer.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.randn(1, self.max_len, d) * 0.02)
        self.norm = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.text_depth))
        self.calls = 0

    def tokenize(self, texts: Sequence[str], caption_type: str, max_len: Optional[int] = None) -> TokenBatch:
        budget = max_len or CAPTION_MAX_TOKENS[caption_type]
        encs = []
        for t in texts:
            if not t or not self.tokenizer.pieces(t):
                raise EmptyText("caption text is empty")
            encs.append(self.tokenizer.encode(t, budget))
        width = max(len(e.ids) for e in encs)
        ids = torch.full((len(encs), width), self.tokenizer.pad_id, dtype=torch.long)
        for i, e in enumerate(encs):
            ids[i, : len(e.ids)] = torch.tensor(e.ids)
        return TokenBatch(ids, ids != self.tokenizer.pad_id, torch.tensor([e.truncated for e in encs]))

    def forward(self, ids, mask, causal: bool = False):
        self.calls += 1
        L = ids.shape[1]
        x = self.norm(self.token_embed(ids) + self.pos_embed[:, :L])
        allowed = mask[:, None, :].expand(-1, L, -1)
        if causal:
            allowed = allowed & torch.ones(L, L, dtype=torch.bool, device=ids.device).tril()
        for blk in self.blocks:
            x = blk(x, allowed=allowed)
        return x * mask.unsqueeze(-1).to(x.dtype)

    def encode_text(self, texts, caption_type: str) -> TextEmbedding:
        if isinstance(texts, str):
            texts = [texts]
        tb = self.tokenize(texts, caption_type)
        return TextEmbedding(self(tb.ids, tb.mask), tb.mask, tb.truncated)
