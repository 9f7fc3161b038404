"""The two-branch face model: a global emotion-text branch and a local AU-text
branch (one Q-former shared by all AUs), plus the AU and emotion recognizers.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotation import split_au_caption
from .data import AU_IDS, EMOTION_TABLE, N_AU, N_EMOTION, DatasetManifest, FaceSample
from .encoders import EncoderConfig, ImageEncoder, TextEncoder, as_image_batch, extract_au_regions
from .errors import ConfigMismatch, InvalidArgument, MissingCaption, UnlabeledSample
from .landmarks import DEFAULT_AU_MAP, AULandmarkMap
from .qformer import QFormer, QFormerConfig, itc_loss, itg_loss, itm_loss, make_itg_inputs, sample_negatives
from .tokenizer import SPECIALS, Tokenizer, default_tokenizer

BRANCHES = ("emo", "au")
LOSS_TERMS = ("emo_itc", "emo_itm", "emo_itg", "au_itc", "au_itm", "au_itg", "ce_au", "ce_emo")


@dataclass
class ModelConfig:
    branches: tuple = BRANCHES
    w_itc: float = 1.0
    w_itm: float = 1.0
    w_itg: float = 1.0
    w_ce_au: float = 1.0
    w_ce_emo: float = 1.0
    # Append key-AU captions to the emotion branch text.
    use_key_au: bool = False
    # Share the generation head's weight with the text token embedding.
    tie_lm_head: bool = False

    def __post_init__(self):
        if isinstance(self.branches, str):
            self.branches = tuple(b.strip() for b in self.branches.split(",") if b.strip())
        self.branches = tuple(self.branches)
        if not self.branches or any(b not in BRANCHES for b in self.branches):
            raise InvalidArgument(f"branches must be a non-empty subset of {BRANCHES}")
        w = self.weights()
        if any(v < 0 for v in w.values()) or not any(v > 0 for v in w.values()):
            raise InvalidArgument("loss weights must be >= 0 with at least one > 0")

    def weights(self) -> dict:
        return {
            "emo_itc": self.w_itc, "emo_itm": self.w_itm, "emo_itg": self.w_itg,
            "au_itc": self.w_itc, "au_itm": self.w_itm, "au_itg": self.w_itg,
            "ce_au": self.w_ce_au, "ce_emo": self.w_ce_emo,
        }


@dataclass
class MF2Config:
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    qformer_emo: QFormerConfig = field(default_factory=QFormerConfig)
    qformer_au: QFormerConfig = field(default_factory=QFormerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        d = self.encoders.embed_dim
        if self.qformer_emo.embed_dim != d:
            self.qformer_emo = replace(self.qformer_emo, embed_dim=d)
        if self.qformer_au.embed_dim != d:
            self.qformer_au = replace(self.qformer_au, embed_dim=d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MF2Config":
        return cls(EncoderConfig(**d["encoders"]), QFormerConfig(**d["qformer_emo"]),
                   QFormerConfig(**d["qformer_au"]), ModelConfig(**d["model"]))

    @classmethod
    def toy(cls, embed_dim=32, image_size=32, patch_size=8, n_blocks=1, n_heads=2, n_queries=8,
            **model_kw) -> "MF2Config":
        enc = EncoderConfig(image_size=image_size, patch_size=patch_size, embed_dim=embed_dim, vit_depth=1,
                            text_depth=1, n_heads=n_heads, ffn_dim=2 * embed_dim, region_k=min(3, image_size // patch_size))
        q = QFormerConfig(n_blocks=n_blocks, n_queries=n_queries, embed_dim=embed_dim, n_heads=n_heads,
                          ffn_dim=2 * embed_dim, d_proj=min(32, embed_dim))
        return cls(enc, q, replace(q), ModelConfig(**model_kw))

    @classmethod
    def full_scale(cls) -> "MF2Config":
        """ViT-B/16-sized image encoder, BERT-base-sized Q-former and vocabulary.

        The text path of each Q-former plays the role of the BERT layers, so the
        separate text encoder is reduced to its embeddings (``text_depth=0``).
        """
        enc = EncoderConfig(image_size=224, patch_size=16, embed_dim=768, vit_depth=12, text_depth=0,
                            n_heads=12, ffn_dim=3072, region_k=3, vocab_size=30522)
        q = QFormerConfig(n_blocks=12, n_queries=32, embed_dim=768, n_heads=12, ffn_dim=3072, d_proj=256)
        return cls(enc, q, replace(q), ModelConfig(tie_lm_head=True))


@dataclass
class CaptionSet:
    """Captions of one sample: the emotion caption and one sentence per AU."""

    emotion: Optional[str] = None
    au: dict = field(default_factory=dict)
    key_au: Optional[str] = None

    @classmethod
    def from_records(cls, records) -> "CaptionSet":
        cs = cls()
        for r in records:
            if r.caption_type == "emotion":
                cs.emotion = r.text
            elif r.caption_type == "au":
                cs.au = split_au_caption(r.text)
            elif r.caption_type == "key_au":
                cs.key_au = r.text
        return cs


def caption_sets(records) -> dict:
    """sample_id -> CaptionSet."""
    by_sample = {}
    for r in records:
        by_sample.setdefault(r.sample_id, []).append(r)
    return {sid: CaptionSet.from_records(rs) for sid, rs in by_sample.items()}


@dataclass
class FaceBatch:
    images: torch.Tensor  # [B, H, W, 3] float in [0, 1]
    landmarks: np.ndarray  # [B, 68, 2] pixels
    au_labels: Optional[torch.Tensor] = None  # [B, 12] float 0/1
    emotion: Optional[torch.Tensor] = None  # [B] long
    captions: Optional[list] = None  # CaptionSet per sample
    sample_ids: tuple = ()

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "FaceBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        il = idx.tolist()
        return FaceBatch(
            self.images[idx], self.landmarks[il],
            None if self.au_labels is None else self.au_labels[idx],
            None if self.emotion is None else self.emotion[idx],
            None if self.captions is None else [self.captions[i] for i in il],
            tuple(self.sample_ids[i] for i in il) if self.sample_ids else (),
        )

    def to(self, dtype) -> "FaceBatch":
        return replace(self, images=self.images.to(dtype),
                       au_labels=None if self.au_labels is None else self.au_labels.to(dtype))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, captions: Optional[dict] = None,
                      samples: Optional[Sequence[FaceSample]] = None) -> "FaceBatch":
        samples = list(manifest.samples if samples is None else samples)
        images = torch.stack([torch.from_numpy(manifest.load_image(s).copy()) for s in samples])
        images = images.to(torch.get_default_dtype()) / 255.0
        lms = np.stack([s.landmarks_array() for s in samples])
        au = emo = None
        if all(s.au_labels is not None for s in samples):
            au = torch.tensor([list(s.au_labels) for s in samples], dtype=torch.get_default_dtype())
        if all(s.emotion is not None for s in samples):
            emo = torch.tensor([EMOTION_TABLE.index(s.emotion) for s in samples], dtype=torch.long)
        caps = None
        if captions is not None:
            caps = [captions.get(s.sample_id, CaptionSet()) for s in samples]
        return cls(images, lms, au, emo, caps, tuple(s.sample_id for s in samples))


@dataclass
class LossReport:
    terms: dict  # name -> scalar tensor, keys LOSS_TERMS
    per_au: dict = field(default_factory=dict)  # au_itc/au_itm/au_itg -> [12] tensor
    total: Optional[torch.Tensor] = None

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        if self.total is not None:
            out["total"] = float(self.total.detach())
        return out


def total_loss(report: LossReport, config: ModelConfig) -> torch.Tensor:
    w = config.weights()
    total = None
    for k in LOSS_TERMS:
        term = w[k] * report.terms[k]
        total = term if total is None else total + term
    return total


@dataclass
class MF2Output:
    emotion_logits: torch.Tensor  # [B, 8]
    au_logits: torch.Tensor  # [B, 12]
    emo_visual: Optional[torch.Tensor] = None  # [B, d_proj]
    au_visual: Optional[torch.Tensor] = None  # [B, 12, d_proj]
    emo_text: Optional[torch.Tensor] = None
    au_text: Optional[torch.Tensor] = None
    report: Optional[LossReport] = None


class PerAUHead(nn.Module):
    """Independent linear probe per AU on that AU's own feature vector."""

    def __init__(self, dim, n_au=N_AU):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_au, dim) * dim**-0.5)
        self.bias = nn.Parameter(torch.zeros(n_au))

    def forward(self, feats):  # [B, n_au, D] -> [B, n_au]
        return torch.einsum("bjd,jd->bj", feats, self.weight) + self.bias


class Branch(nn.Module):
    def __init__(self, enc: EncoderConfig, qcfg: QFormerConfig, tokenizer: Tokenizer, tie_lm_head: bool = False):
        super().__init__()
        d = enc.embed_dim
        self.image_encoder = ImageEncoder(enc)
        self.text_encoder = TextEncoder(enc, tokenizer)
        self.qformer = QFormer(qcfg)
        self.vision_proj = nn.Linear(d, qcfg.d_proj)
        self.text_proj = nn.Linear(d, qcfg.d_proj)
        self.itm_head = nn.Linear(d, 1)
        self.lm_head = nn.Linear(d, enc.vocab_size or tokenizer.vocab_size)
        if tie_lm_head:
            self.lm_head.weight = self.text_encoder.token_embed.weight
        if qcfg.learnable_temperature:
            self.temperature = nn.Parameter(torch.tensor(qcfg.temperature))
        else:
            self.register_buffer("temperature", torch.tensor(qcfg.temperature))


class MF2Model(nn.Module):
    TASK_HEADS = ("emotion_head", "au_head")

    def __init__(self, config: Optional[MF2Config] = None, tokenizer: Optional[Tokenizer] = None,
                 au_map: Optional[AULandmarkMap] = None):
        super().__init__()
        self.config = config or MF2Config()
        enc = self.config.encoders
        if tokenizer is None:
            tokenizer = Tokenizer.load(enc.vocab_path) if enc.vocab_path else default_tokenizer()
        if au_map is None:
            au_map = AULandmarkMap.load(enc.au_map_path) if enc.au_map_path else DEFAULT_AU_MAP
        au_map.check_complete(AU_IDS)
        self.tokenizer = tokenizer
        self.au_map = au_map
        qcfg = {"emo": self.config.qformer_emo, "au": self.config.qformer_au}
        self.branches = nn.ModuleDict({b: Branch(enc, qcfg[b], tokenizer, self.config.model.tie_lm_head) for b in self.config.model.branches})
        self.emotion_head = nn.Linear(enc.embed_dim, N_EMOTION)
        self.au_head = PerAUHead(enc.embed_dim)
        self.dfn = None
        self.backbone_frozen = False

    # -- bookkeeping --------------------------------------------------------------

    @property
    def embed_dim(self) -> int:
        return self.config.encoders.embed_dim

    def n_blocks(self, branch: str) -> int:
        return len(self.branches[branch].qformer.blocks)

    def is_backbone_param(self, name: str) -> bool:
        return not (name.startswith("dfn.") or name.split(".")[0] in self.TASK_HEADS)

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if self.is_backbone_param(n)]

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in sorted(self.backbone_parameters(), key=lambda x: x[0]):
            h.update(n.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def reset_heads(self, which: Sequence[str] = TASK_HEADS, seed: Optional[int] = None) -> None:
        g = torch.Generator().manual_seed(seed) if seed is not None else None
        d = self.embed_dim
        with torch.no_grad():
            if "emotion_head" in which:
                w = self.emotion_head.weight
                w.copy_(torch.empty(w.shape, dtype=w.dtype).uniform_(-d**-0.5, d**-0.5, generator=g))
                self.emotion_head.bias.zero_()
            if "au_head" in which:
                w = self.au_head.weight
                w.copy_(torch.randn(w.shape, generator=g, dtype=w.dtype) * d**-0.5)
                self.au_head.bias.zero_()

    def _frozen(self):
        return torch.no_grad() if self.backbone_frozen else contextlib.nullcontext()

    def _cells(self, branch: str, path: str):
        if self.dfn is None or self.dfn.config.tap != "blockwise":
            return None
        return self.dfn.pathway(branch, path)

    def _cls_delta(self, branch: str, path: str, cls: torch.Tensor):
        if self.dfn is None or self.dfn.config.tap != "cls_last_layer":
            return None
        return self.dfn.cls_delta(branch, path, cls)

    # -- shared pieces ------------------------------------------------------------

    def _visual(self, name: str, images, landmarks):
        """Visual tokens grouped per branch: [G, B, Nv, D] (G=1 global, G=12 AUs), plus ViT CLS."""
        br = self.branches[name]
        with self._frozen():
            fm = br.image_encoder.encode_image(images)
            if name == "emo":
                vis = fm.tokens.unsqueeze(0)
            else:
                k = self.config.encoders.region_k
                vis = extract_au_regions(fm, landmarks, self.au_map, k).regions.transpose(0, 1)
        return vis, fm.cls

    def _pooled(self, name, q_out, vis_cls, groups):
        pooled = q_out.mean(dim=1)
        delta = self._cls_delta(name, "visual", vis_cls)
        if delta is not None:
            pooled = pooled + delta.repeat(groups, 1)
        return pooled

    def _infer_branch(self, name, images, landmarks):
        br = self.branches[name]
        vis, cls = self._visual(name, images, landmarks)
        g, b = vis.shape[:2]
        out = br.qformer(vis.reshape(g * b, *vis.shape[2:]), mode="infer",
                         query_cells=self._cells(name, "visual"), frozen=self.backbone_frozen)
        pooled = self._pooled(name, out.query_out, cls, g)
        return pooled.view(g, b, -1).transpose(0, 1), br  # [B, G, D]

    def _heads(self, emo_feat, au_feat):
        if emo_feat is None:
            emo_feat = au_feat.mean(dim=1)
        if au_feat is None:
            au_feat = emo_feat.unsqueeze(1).expand(-1, N_AU, -1)
        return self.emotion_head(emo_feat), self.au_head(au_feat)

    # -- inference ----------------------------------------------------------------

    def forward_infer(self, images, landmarks) -> MF2Output:
        """Recognition from pixels and landmarks alone; no text is read anywhere."""
        images = as_image_batch(images, self.config.encoders.image_size, dtype=self.emotion_head.weight.dtype)
        landmarks = np.asarray(landmarks, dtype=np.float64)
        if landmarks.ndim == 2:
            landmarks = landmarks[None]
        feats = {}
        for name in self.config.model.branches:
            feats[name], _ = self._infer_branch(name, images, landmarks)
        emo = feats["emo"][:, 0] if "emo" in feats else None
        au = feats.get("au")
        emo_logits, au_logits = self._heads(emo, au)
        return MF2Output(emo_logits, au_logits)

    def forward(self, images, landmarks):
        return self.forward_infer(images, landmarks)

    # -- training -----------------------------------------------------------------

    def _texts(self, name, batch: FaceBatch):
        """Texts grouped like the visual tokens: list of G lists of B strings, and the budget type."""
        if batch.captions is None:
            raise MissingCaption("captions")
        if name == "emo":
            out = []
            for cs in batch.captions:
                if not cs.emotion:
                    raise MissingCaption("emotion")
                if self.config.model.use_key_au:
                    if not cs.key_au:
                        raise MissingCaption("key_au")
                    out.append(f"{cs.emotion} {cs.key_au}")
                else:
                    out.append(cs.emotion)
            return [out], ("key_au" if self.config.model.use_key_au else "emotion")
        groups = []
        for au in AU_IDS:
            row = []
            for cs in batch.captions:
                if not cs.au.get(au):
                    raise MissingCaption(au)
                row.append(cs.au[au])
            groups.append(row)
        return groups, "au"

    def _train_branch(self, name, batch: FaceBatch, generator: torch.Generator):
        br = self.branches[name]
        qf = br.qformer
        qcfg = qf.cfg
        texts, ctype = self._texts(name, batch)
        vis, vis_cls = self._visual(name, batch.images, batch.landmarks)
        g, b = vis.shape[:2]
        vis = vis.reshape(g * b, *vis.shape[2:])
        flat_texts = [t for row in texts for t in row]
        tb = br.text_encoder.tokenize(flat_texts, ctype)
        with self._frozen():
            text_emb = br.text_encoder(tb.ids, tb.mask)
        q_cells, t_cells = self._cells(name, "visual"), self._cells(name, "text")
        frozen = self.backbone_frozen

        # contrastive
        out = qf(vis, text_emb, tb.mask, "itc", q_cells, t_cells, frozen)
        pooled = self._pooled(name, out.query_out, vis_cls, g)
        text_cls = out.text_out[:, 0]
        t_delta = self._cls_delta(name, "text", text_emb[:, 0])
        if t_delta is not None:
            text_cls = text_cls + t_delta
        v_hat = F.normalize(br.vision_proj(pooled), dim=-1).view(g, b, -1)
        s_hat = F.normalize(br.text_proj(text_cls), dim=-1).view(g, b, -1)
        itc = torch.stack([itc_loss(v_hat[i], s_hat[i], br.temperature) for i in range(g)])

        # matching
        if b >= 2:
            cand = sample_negatives(b, generator=generator)
            img_idx, txt_idx, labels = cand.image_idx, cand.text_idx, cand.labels
        else:
            img_idx = txt_idx = torch.zeros(1, dtype=torch.long)
            labels = torch.ones(1)
        offs = (torch.arange(g) * b).unsqueeze(1)
        vi = (offs + img_idx).reshape(-1)
        ti = (offs + txt_idx).reshape(-1)
        m_out = qf(vis[vi], text_emb[ti], tb.mask[ti], "itm", q_cells, t_cells, frozen)
        m_feat = self._pooled(name, m_out.query_out, vis_cls[img_idx], g)
        m_logits = br.itm_head(m_feat).view(g, -1)
        labels = labels.to(m_logits.dtype)
        itm = torch.stack([itm_loss(m_logits[i], labels) for i in range(g)])

        # generation
        noise = torch.rand(b, tb.ids.shape[1], generator=generator).repeat(g, 1)
        in_ids, targets = make_itg_inputs(tb.ids, tb.mask, qcfg.itg_style, self.tokenizer.mask_id,
                                          qcfg.itg_mask_prob, noise=noise)
        causal = qcfg.itg_style == "causal"
        with self._frozen():
            gen_emb = br.text_encoder(in_ids, tb.mask, causal=causal)
        g_out = qf(vis, gen_emb, tb.mask, "itg", q_cells, t_cells, frozen)
        logits = br.lm_head(g_out.text_out)
        if causal:
            logits = torch.cat([logits[:, :1], logits[:, :-1]], dim=1)
        L = logits.shape[1]
        itg = torch.stack([
            itg_loss(logits[i * b:(i + 1) * b], type(targets)(targets.ids[i * b:(i + 1) * b], targets.mask[i * b:(i + 1) * b]))
            for i in range(g)
        ])
        feats = pooled.view(g, b, -1).transpose(0, 1)
        return {"itc": itc, "itm": itm, "itg": itg}, feats, v_hat.transpose(0, 1), s_hat.transpose(0, 1)

    def forward_train(self, batch: FaceBatch, generator: Optional[torch.Generator] = None) -> MF2Output:
        """All alignment losses for both branches plus the two recognition losses.

        Negative sampling and generation masks draw from ``generator`` (seeded
        from ``negatives_seed`` when omitted), so a fixed generator gives a
        fixed loss.
        """
        if batch.au_labels is None or batch.emotion is None:
            raise UnlabeledSample("training needs AU and emotion labels for every sample")
        if generator is None:
            generator = torch.Generator().manual_seed(self.config.qformer_emo.negatives_seed)
        dtype = self.emotion_head.weight.dtype
        batch = batch.to(dtype)
        zero = torch.zeros((), dtype=dtype)
        terms = {k: zero for k in LOSS_TERMS}
        per_au = {}
        emo_feat = au_feat = None
        out = MF2Output(None, None)
        if "emo" in self.branches:
            losses, feats, v, s = self._train_branch("emo", batch, generator)
            for k, v_ in losses.items():
                terms[f"emo_{k}"] = v_[0]
            emo_feat = feats[:, 0]
            out.emo_visual, out.emo_text = v[:, 0], s[:, 0]
        if "au" in self.branches:
            losses, feats, v, s = self._train_branch("au", batch, generator)
            for k, v_ in losses.items():
                terms[f"au_{k}"] = v_.mean()
                per_au[f"au_{k}"] = v_
            au_feat = feats
            out.au_visual, out.au_text = v, s
        emo_logits, au_logits = self._heads(emo_feat, au_feat)
        terms["ce_emo"] = F.cross_entropy(emo_logits, batch.emotion)
        terms["ce_au"] = F.binary_cross_entropy_with_logits(au_logits, batch.au_labels)
        report = LossReport(terms, per_au)
        report.total = total_loss(report, self.config.model)
        out.emotion_logits, out.au_logits, out.report = emo_logits, au_logits, report
        return out


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(model: MF2Model, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": model.config.to_dict(),
        "vocab": model.tokenizer.itos,
        "au_map": model.au_map.to_json(),
        "dfn": None if model.dfn is None else asdict(model.dfn.config),
        "backbone_frozen": model.backbone_frozen,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, strict: bool = True) -> MF2Model:
    """Rebuild a model from :func:`save_checkpoint` output; tensors are matched by name."""
    from .dfn import DFNConfig, attach_dfn, freeze_backbone

    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    config = MF2Config.from_dict(payload["config"])
    tokenizer = Tokenizer(payload["vocab"][len(SPECIALS) + 256:])
    model = MF2Model(config, tokenizer, AULandmarkMap.from_json(payload["au_map"]))
    if payload.get("dfn"):
        attach_dfn(model, DFNConfig(**payload["dfn"]))
    sd = payload["state_dict"]
    dtype = next(iter(sd.values())).dtype if sd else None
    if dtype is not None and dtype != torch.get_default_dtype():
        model.to(dtype)
    missing, unexpected = model.load_state_dict(sd, strict=strict)
    if payload.get("backbone_frozen"):
        freeze_backbone(model)
    model.checkpoint_extra = payload.get("extra", {})
    return model
