"""Decoupled fine-tuning: gated bottleneck side adapters, one independent
pathway per (branch, modality), plus backbone freezing and parameter accounting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn

from .errors import AlreadyAttached, ConfigMismatch, DimMismatch, InvalidArgument, NaNLoss, NotAttached
from .model import MF2Config, MF2Model, LossReport, total_loss
from .tokenizer import default_tokenizer

PATHWAYS = ("emo_visual", "emo_text", "au_visual", "au_text")
TAPS = ("blockwise", "cls_last_layer")
_ACTIVATIONS = {"relu": nn.ReLU, "sigmoid": nn.Sigmoid}


@dataclass
class DFNConfig:
    # None picks min(64, D // 4) at attach time.
    r: Optional[int] = None
    gate: float = 0.1
    activation: str = "relu"
    n_adapter_layers: int = 7
    tap: str = "blockwise"
    dim: Optional[int] = None

    def __post_init__(self):
        if self.tap == "cls":
            self.tap = "cls_last_layer"
        if self.tap not in TAPS:
            raise InvalidArgument(f"tap must be one of {TAPS}")
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgument(f"activation must be one of {tuple(_ACTIVATIONS)}")
        if not 0 < self.gate <= 1:
            raise InvalidArgument("gate must lie in (0, 1]")
        if self.n_adapter_layers < 1:
            raise InvalidArgument("n_adapter_layers must be >= 1")
        if self.r is not None and self.r < 1:
            raise InvalidArgument("r must be >= 1")

    def resolved_r(self, dim: int) -> int:
        return self.r if self.r is not None else max(1, min(64, dim // 4))


class AdapterCell(nn.Module):
    """``gate * up(act(down(x)))``; the residual add belongs to the caller."""

    def __init__(self, dim: int, r: int, gate: float = 0.1, activation: str = "relu", bias: bool = True):
        super().__init__()
        if not 1 <= r < dim:
            raise InvalidArgument(f"bottleneck r={r} must satisfy 1 <= r < D={dim}")
        if not 0 < gate <= 1:
            raise InvalidArgument("gate must lie in (0, 1]")
        self.dim = dim
        self.gate = float(gate)
        self.down = nn.Linear(dim, r, bias=bias)
        self.act = _ACTIVATIONS[activation]()
        self.up = nn.Linear(r, dim, bias=bias)
        nn.init.zeros_(self.up.weight)
        if bias:
            nn.init.zeros_(self.up.bias)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise DimMismatch(f"adapter expects last dim {self.dim}, got {x.shape[-1]}")
        return self.gate * self.up(self.act(self.down(x)))


def adapter_forward(cell: AdapterCell, x) -> torch.Tensor:
    return cell(x)


class DFN(nn.Module):
    def __init__(self, config: DFNConfig, dim: int, n_blocks: dict):
        super().__init__()
        self.config = config
        r = config.resolved_r(dim)

        def cell():
            return AdapterCell(dim, r, config.gate, config.activation)

        cells = {}
        for branch, n in n_blocks.items():
            depth = n if config.tap == "blockwise" else config.n_adapter_layers
            for path in ("visual", "text"):
                cells[f"{branch}_{path}"] = nn.ModuleList(cell() for _ in range(depth))
        self.cells = nn.ModuleDict(cells)

    @property
    def n_cells(self) -> int:
        return sum(len(c) for c in self.cells.values())

    def pathway(self, branch: str, path: str) -> nn.ModuleList:
        return self.cells[f"{branch}_{path}"]

    def cls_delta(self, branch: str, path: str, cls_token):
        """Residual stack over an encoder's final CLS token; returns the summed update."""
        h, delta = cls_token, None
        for c in self.pathway(branch, path):
            d = c(h)
            h = h + d
            delta = d if delta is None else delta + d
        return delta


def attach_dfn(model: MF2Model, config: Optional[DFNConfig] = None) -> MF2Model:
    if model.dfn is not None:
        raise AlreadyAttached("a DFN is already attached")
    config = config or DFNConfig()
    d = model.embed_dim
    if config.dim is not None and config.dim != d:
        raise ConfigMismatch(f"DFN dim {config.dim} != model dim {d}")
    ref = model.emotion_head.weight
    with torch.device(ref.device):
        dfn = DFN(config, d, {b: model.n_blocks(b) for b in model.branches})
    model.dfn = dfn.to(ref.dtype)
    return model


def detach_dfn(model: MF2Model) -> MF2Model:
    model.dfn = None
    unfreeze(model)
    return model


@dataclass
class FreezeReport:
    frozen_param_count: int
    trainable_param_count: int
    trainable_fraction: float
    groups: dict = field(default_factory=dict)  # group -> {"params": n, "trainable": bool}

    def to_json(self) -> dict:
        return asdict(self)


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "branches":
        return ".".join(parts[:3])
    if parts[0] == "dfn":
        return ".".join(parts[:3])
    return parts[0]


def parameter_report(model: nn.Module) -> FreezeReport:
    frozen = trainable = 0
    groups = {}
    for name, p in model.named_parameters():
        n = p.numel()
        g = groups.setdefault(_group(name), {"params": 0, "trainable": 0})
        g["params"] += n
        if p.requires_grad:
            trainable += n
            g["trainable"] += n
        else:
            frozen += n
    total = frozen + trainable
    return FreezeReport(frozen, trainable, trainable / total if total else 0.0, groups)


def freeze_backbone(model: MF2Model) -> FreezeReport:
    """Freeze everything except the adapters and the task heads."""
    if model.dfn is None:
        raise NotAttached("attach a DFN before freezing")
    for name, p in model.named_parameters():
        p.requires_grad_(not model.is_backbone_param(name))
    model.backbone_frozen = True
    return parameter_report(model)


def unfreeze(model: MF2Model) -> None:
    for p in model.parameters():
        p.requires_grad_(True)
    model.backbone_frozen = False


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


TASK_WEIGHTS = {"au": {"w_ce_emo": 0.0}, "emotion": {"w_ce_au": 0.0}, "joint": {}}


def finetune_step(model: MF2Model, batch, optimizer: torch.optim.Optimizer, task: str = "emotion",
                  generator: Optional[torch.Generator] = None) -> LossReport:
    """One optimizer step on the task objective with the backbone frozen.

    The recognition loss of the other task is switched off; the alignment
    terms stay so the text-side adapters also see gradients. A non-finite loss
    raises :class:`NaNLoss` before anything is updated.
    """
    if model.dfn is None:
        raise NotAttached("finetune_step needs an attached DFN")
    if not model.backbone_frozen:
        raise InvalidArgument("freeze the backbone before fine-tuning")
    if task not in TASK_WEIGHTS:
        raise InvalidArgument(f"task must be one of {tuple(TASK_WEIGHTS)}")
    weights = replace(model.config.model, **TASK_WEIGHTS[task])
    out = model.forward_train(batch, generator)
    report = out.report
    report.total = total_loss(report, weights)
    if not torch.isfinite(report.total):
        raise NaNLoss(f"non-finite fine-tuning loss {float(report.total.detach())}")
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    optimizer.step()
    return report


FULL_SCALE_R = 716


def full_scale_report(r: int = FULL_SCALE_R, tap: str = "blockwise") -> FreezeReport:
    """Parameter accounting for a ViT-B/BERT-base sized model, built on the meta device."""
    with torch.device("meta"):
        model = MF2Model(MF2Config.full_scale(), tokenizer=default_tokenizer())
        attach_dfn(model, DFNConfig(r=r, tap=tap))
    return freeze_backbone(model)
