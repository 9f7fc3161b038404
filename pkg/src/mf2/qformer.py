"""Q-former block stack with learned queries, mode-dependent attention masks,
and the contrastive / matching / generation alignment losses.

Within a block the query tokens and text tokens go through one self-attention
and one feed-forward module (shared weights); only the queries additionally
cross-attend to the visual tokens.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchTooSmall, DegenerateBatch, DimMismatch, EmptyMask, InvalidArgument, LabelMismatch, UnknownMode
from .layers import Attention, FeedForward

MODES = ("itc", "itm", "itg", "infer")


@dataclass
class QFormerConfig:
    n_blocks: int = 2
    n_queries: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    temperature: float = 0.07
    learnable_temperature: bool = False
    itg_style: str = "masked"
    d_proj: int = 32
    negatives_seed: int = 0
    itg_mask_prob: float = 0.15

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be > 0")
        if self.embed_dim % self.n_heads:
            raise InvalidArgument("embed_dim must be divisible by n_heads")
        if self.itg_style not in ("masked", "causal"):
            raise InvalidArgument("itg_style must be masked|causal")
        if self.n_blocks < 1 or self.n_queries < 1:
            raise InvalidArgument("n_blocks and n_queries must be >= 1")


@dataclass
class QFormerState:
    """Learned queries plus the per-block hidden states of the last forward pass."""

    query_tokens: torch.Tensor
    query_hidden: list = field(default_factory=list)
    text_hidden: list = field(default_factory=list)


@dataclass
class QFormerOutput:
    query_out: torch.Tensor
    text_out: Optional[torch.Tensor]
    state: QFormerState


@dataclass
class AlignedPair:
    visual: torch.Tensor  # [M, d_proj], unit norm
    text: torch.Tensor  # [M, d_proj], unit norm


@dataclass
class TokenTargets:
    ids: torch.Tensor  # [..., L] target ids
    mask: torch.Tensor  # [..., L] bool, positions contributing to the loss

    def __post_init__(self):
        if self.mask.shape != self.ids.shape:
            raise InvalidArgument("ids and mask must have the same shape")
        if self.mask[..., 0].any():
            raise InvalidArgument("position 0 (CLS) can never be a target")


@dataclass
class MatchCandidates:
    image_idx: torch.Tensor
    text_idx: torch.Tensor
    labels: torch.Tensor  # 1 for matched pairs


def attention_mask(n_queries: int, text_mask: Optional[torch.Tensor], mode: str, causal: bool = False):
    """Boolean visibility [B, n_q + L, n_q + L] over the joint (queries, text) sequence."""
    if mode not in MODES:
        raise UnknownMode(f"unknown mode {mode!r}")
    if mode == "infer" or text_mask is None:
        return None
    b, L = text_mask.shape
    n = n_queries + L
    dev = text_mask.device
    allowed = torch.zeros(b, n, n, dtype=torch.bool, device=dev)
    allowed[:, :n_queries, :n_queries] = True
    key_ok = text_mask[:, None, :].expand(-1, L, -1)
    if mode == "itc":
        allowed[:, n_queries:, n_queries:] = key_ok
    elif mode == "itm":
        allowed[:, :n_queries, n_queries:] = text_mask[:, None, :].expand(-1, n_queries, -1)
        allowed[:, n_queries:, :n_queries] = True
        allowed[:, n_queries:, n_queries:] = key_ok
    else:  # itg: queries never see text; text sees all queries
        allowed[:, n_queries:, :n_queries] = True
        tt = key_ok
        if causal:
            tt = tt & torch.ones(L, L, dtype=torch.bool, device=dev).tril()
        allowed[:, n_queries:, n_queries:] = tt
    return allowed


class QFormerBlock(nn.Module):
    def __init__(self, cfg: QFormerConfig, visual_dim: Optional[int] = None):
        super().__init__()
        d = cfg.embed_dim
        self.ln_sa = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.n_heads)
        self.ln_ca = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(visual_dim or d)
        self.cross_attn = Attention(d, cfg.n_heads, kv_dim=visual_dim or d)
        self.ln_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim)

    def path_modules(self, path: str) -> dict:
        """Modules a pathway runs through; SA and FFN are the same objects for both paths."""
        mods = {"self_attn": self.self_attn, "ln_sa": self.ln_sa, "ffn": self.ffn, "ln_ffn": self.ln_ffn}
        if path == "query":
            mods.update(cross_attn=self.cross_attn, ln_ca=self.ln_ca, ln_kv=self.ln_kv)
        return mods

    def forward(self, q, t, visual, allowed):
        nq = q.shape[1]
        h = q if t is None else torch.cat([q, t], dim=1)
        h = h + self.self_attn(self.ln_sa(h), allowed=allowed)
        q, t = h[:, :nq], (None if t is None else h[:, nq:])
        q = q + self.cross_attn(self.ln_ca(q), context=self.ln_kv(visual))
        h = q if t is None else torch.cat([q, t], dim=1)
        h = h + self.ffn(self.ln_ffn(h))
        return h[:, :nq], (None if t is None else h[:, nq:])


class QFormer(nn.Module):
    def __init__(self, cfg: QFormerConfig, visual_dim: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.query_tokens = nn.Parameter(torch.randn(1, cfg.n_queries, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(QFormerBlock(cfg, visual_dim) for _ in range(cfg.n_blocks))
        self.ln_out = nn.LayerNorm(cfg.embed_dim)
        self.visual_dim = visual_dim or cfg.embed_dim

    def forward(self, visual, text=None, text_mask=None, mode="itc", query_cells: Optional[Sequence] = None,
                text_cells: Optional[Sequence] = None, frozen: bool = False) -> QFormerOutput:
        """Run the stack.

        ``query_cells``/``text_cells`` are optional side adapters, one per block:
        each sees its block's input and their gated outputs are summed onto the
        path's final hidden state. With ``frozen`` the block stack runs without
        autograd, so only the side cells (and whatever consumes the output)
        receive gradients.
        """
        if mode not in MODES:
            raise UnknownMode(f"unknown mode {mode!r}")
        if visual.shape[-1] != self.visual_dim:
            raise DimMismatch(f"visual dim {visual.shape[-1]} != {self.visual_dim}")
        b = visual.shape[0]
        if mode == "infer":
            text = text_mask = None
        elif text is None:
            raise InvalidArgument(f"mode {mode!r} needs text tokens")
        if text is not None:
            if text.shape[-1] != self.cfg.embed_dim:
                raise DimMismatch(f"text dim {text.shape[-1]} != {self.cfg.embed_dim}")
            if text_mask is None:
                text_mask = torch.ones(text.shape[:2], dtype=torch.bool, device=text.device)
            if text.shape[0] != b:
                raise DimMismatch("visual and text batch sizes differ")
        allowed = attention_mask(self.cfg.n_queries, text_mask, mode, causal=self.cfg.itg_style == "causal")

        q = self.query_tokens.expand(b, -1, -1)
        t = text
        state = QFormerState(self.query_tokens)
        q_side = t_side = None
        for n, blk in enumerate(self.blocks):
            if query_cells is not None:
                d = query_cells[n](q)
                q_side = d if q_side is None else q_side + d
            if text_cells is not None and t is not None:
                d = text_cells[n](t)
                t_side = d if t_side is None else t_side + d
            with torch.no_grad() if frozen else contextlib.nullcontext():
                q, t = blk(q, t, visual, allowed)
            state.query_hidden.append(q)
            if t is not None:
                state.text_hidden.append(t)
        with torch.no_grad() if frozen else contextlib.nullcontext():
            q_out = self.ln_out(q)
            t_out = None if t is None else self.ln_out(t)
        if q_side is not None:
            q_out = q_out + q_side
        if t_side is not None:
            t_out = t_out + t_side
        if t_out is not None and text_mask is not None:
            t_out = t_out * text_mask.unsqueeze(-1).to(t_out.dtype)
        return QFormerOutput(q_out, t_out, state)


def qformer_forward(visual_tokens, text_embedding, qformer: QFormer, mode: str):
    """Functional entry point returning ``(query_out, text_out)``; ``text_out`` is None in infer mode."""
    if text_embedding is None:
        out = qformer(visual_tokens, None, None, mode)
    else:
        out = qformer(visual_tokens, text_embedding.tokens, text_embedding.attention_mask, mode)
    return out.query_out, out.text_out


# --- losses --------------------------------------------------------------------

def itc_loss(visual, text, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over M matched pairs, averaged over both directions and the batch.

    Inputs are expected unit-norm; similarity is the plain dot product.
    """
    if isinstance(visual, AlignedPair):
        visual, text, temperature = visual.visual, visual.text, text
    if visual.shape != text.shape or visual.dim() != 2 or visual.shape[0] < 1:
        raise DegenerateBatch(f"expected two [M, d] batches, got {tuple(visual.shape)} and {tuple(text.shape)}")
    if not (torch.isfinite(visual).all() and torch.isfinite(text).all()):
        raise DegenerateBatch("non-finite embedding")
    logits = visual @ text.t() / temperature
    targets = torch.arange(visual.shape[0], device=visual.device)
    return (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets)) / 2


def itm_loss(logits, labels) -> torch.Tensor:
    """Summed binary cross-entropy of match logits (p = sigmoid(logit))."""
    labels = torch.as_tensor(labels, device=logits.device)
    if logits.shape != labels.shape:
        raise LabelMismatch(f"{tuple(logits.shape)} logits vs {tuple(labels.shape)} labels")
    pos = labels.bool()
    ll = torch.where(pos, F.logsigmoid(logits), F.logsigmoid(-logits))
    return -ll.sum()


def itg_loss(text_logits, targets: TokenTargets) -> torch.Tensor:
    """Negative log-likelihood summed over target positions.

    ``text_logits[..., i, :]`` must already be the prediction for position i.
    Leading batch dimensions are averaged, so an unbatched [L, V] input gives
    the plain sum over positions.
    """
    mask = targets.mask
    if not mask.any():
        raise EmptyMask("no target positions")
    logp = F.log_softmax(text_logits, dim=-1)
    nll = -logp.gather(-1, targets.ids.unsqueeze(-1)).squeeze(-1)
    total = (nll * mask.to(nll.dtype)).sum()
    n_seq = mask[..., 0].numel() if mask.dim() > 1 else 1
    return total / n_seq


def sample_negatives(batch_size: int, seed=None, generator: Optional[torch.Generator] = None) -> MatchCandidates:
    """Per positive pair: one in-batch negative text and one negative image (uniform, never self).

    Output order is ``[positives, text negatives, image negatives]``, 3M candidates.
    """
    if batch_size < 2:
        raise BatchTooSmall(f"need at least 2 pairs, got {batch_size}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    m = batch_size
    ar = torch.arange(m)
    # offset in [1, m-1] guarantees j != i
    neg_txt = (ar + torch.randint(1, m, (m,), generator=generator)) % m
    neg_img = (ar + torch.randint(1, m, (m,), generator=generator)) % m
    image_idx = torch.cat([ar, ar, neg_img])
    text_idx = torch.cat([ar, neg_txt, ar])
    labels = torch.cat([torch.ones(m), torch.zeros(2 * m)])
    return MatchCandidates(image_idx, text_idx, labels)


def make_itg_inputs(ids, mask, style: str, mask_id: int, mask_prob: float = 0.15,
                    noise: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None):
    """Input ids and :class:`TokenTargets` for the generation loss.

    ``masked``: each non-CLS token is replaced by ``mask_id`` with probability
    ``mask_prob`` (at least one per sequence) and predicted at its own position.
    ``causal``: inputs are unchanged and every non-CLS token is a target; the
    caller shifts logits so position i is predicted from i-1.
    """
    eligible = mask.clone()
    eligible[:, 0] = False
    if not eligible.any(dim=1).all():
        raise EmptyMask("a sequence has no token besides CLS")
    if style == "causal":
        return ids, TokenTargets(ids, eligible)
    if noise is None:
        noise = torch.rand(ids.shape, generator=generator)
    noise = noise[:, : ids.shape[1]].to(ids.device)
    chosen = (noise < mask_prob) & eligible
    fallback = noise.masked_fill(~eligible, 2.0).argmin(dim=1)
    none = ~chosen.any(dim=1)
    chosen[none, fallback[none]] = True
    return ids.masked_fill(chosen, mask_id), TokenTargets(ids, chosen)
