"""Metrics, the training loop, ablation variants, the AU-to-emotion transition
run, and table rendering.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import AU_IDS, EMOTIONS, N_EMOTION
from .dfn import DFNConfig, attach_dfn, finetune_step, freeze_backbone, parameter_report, trainable_parameters
from .errors import InvalidArgument, NaNLoss, NonBinary, ShapeMismatch, UnknownClassId
from .model import FaceBatch, MF2Config, MF2Model, save_checkpoint, total_loss

log = logging.getLogger(__name__)

AU_COLUMNS = tuple(f"AU{a}" for a in AU_IDS)
TASKS = ("joint", "au", "emotion")
VARIANTS = ("full_finetune", "dfn_finetune", "w/o_emo_vl", "w/o_au_vl")
_TIMING_KEYS = {"train_time_per_epoch", "infer_time_per_epoch", "timings", "wall_time"}


# --- metrics ---------------------------------------------------------------------

def _as_np(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def f1_per_au(preds, gts, au_ids=AU_IDS):
    """Per-AU F1 in percent and its macro mean; F1 is 0 whenever it is undefined."""
    p, g = _as_np(preds), _as_np(gts)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != len(au_ids):
        raise ShapeMismatch(f"expected two [B, {len(au_ids)}] arrays, got {p.shape} and {g.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise NonBinary("predictions and labels must be 0/1")
    p, g = p.astype(bool), g.astype(bool)
    tp = (p & g).sum(0)
    fp = (p & ~g).sum(0)
    fn = (~p & g).sum(0)
    denom = 2 * tp + fp + fn
    f1 = np.where(tp > 0, 200.0 * tp / np.maximum(denom, 1), 0.0)
    per = {f"AU{a}": float(v) for a, v in zip(au_ids, f1)}
    return per, float(np.mean(f1))


def accuracy_per_class(preds, gts, class_names=EMOTIONS):
    """Per-class accuracy in percent; the macro mean covers classes present in ``gts``."""
    p, g = _as_np(preds).astype(np.int64).reshape(-1), _as_np(gts).astype(np.int64).reshape(-1)
    if p.shape != g.shape:
        raise ShapeMismatch(f"{p.shape} predictions vs {g.shape} labels")
    k = len(class_names)
    bad = np.concatenate([p[(p < 0) | (p >= k)], g[(g < 0) | (g >= k)]])
    if bad.size:
        raise UnknownClassId(f"class id {int(bad[0])} outside [0, {k})")
    per = {}
    for c, name in enumerate(class_names):
        sel = g == c
        if sel.any():
            per[name] = 100.0 * float((p[sel] == c).sum()) / float(sel.sum())
    macro = float(np.mean(list(per.values()))) if per else 0.0
    return per, macro


@dataclass
class MetricsReport:
    per_au_f1: dict
    au_macro_f1: float
    per_emotion_acc: dict
    emotion_macro_acc: float
    trainable_params: int = 0
    train_time_per_epoch: float = 0.0
    infer_time_per_epoch: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    def score(self, task: str = "joint") -> float:
        if task == "au":
            return self.au_macro_f1
        if task == "emotion":
            return self.emotion_macro_acc
        return (self.au_macro_f1 + self.emotion_macro_acc) / 2


@torch.no_grad()
def predict(model: MF2Model, batch: FaceBatch, batch_size: int = 64):
    """(AU 0/1 predictions [B, 12], emotion ids [B]) from images and landmarks only."""
    au, emo = [], []
    for s in range(0, len(batch), batch_size):
        sub = batch.subset(range(s, min(s + batch_size, len(batch))))
        out = model.forward_infer(sub.images, sub.landmarks)
        au.append((out.au_logits > 0).long())
        emo.append(out.emotion_logits.argmax(-1))
    return torch.cat(au), torch.cat(emo)


def text_encoder_calls(model: MF2Model) -> int:
    return sum(br.text_encoder.calls for br in model.branches.values())


def evaluate(model: MF2Model, batch: FaceBatch, batch_size: int = 64) -> MetricsReport:
    if batch.au_labels is None or batch.emotion is None:
        raise InvalidArgument("evaluation needs labelled samples")
    was_training = model.training
    model.eval()
    t0 = time.perf_counter()
    au, emo = predict(model, batch, batch_size)
    elapsed = time.perf_counter() - t0
    model.train(was_training)
    per_au, au_macro = f1_per_au(au, batch.au_labels.long())
    per_emo, emo_macro = accuracy_per_class(emo, batch.emotion)
    return MetricsReport(per_au, au_macro, per_emo, emo_macro,
                         trainable_params=parameter_report(model).trainable_param_count,
                         infer_time_per_epoch=elapsed)


# --- training --------------------------------------------------------------------

@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.05
    # None means min(2000, total_steps // 10).
    warmup_steps: Optional[int] = None
    seed: int = 0
    task: str = "joint"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidArgument("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if self.task not in TASKS:
            raise InvalidArgument(f"task must be one of {TASKS}")

    def resolve_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return min(2000, total_steps // 10)


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps`` optimizer steps, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def task_weights(config, task: str):
    if task == "au":
        return replace(config, w_ce_emo=0.0)
    if task == "emotion":
        return replace(config, w_ce_au=0.0)
    return config


@torch.no_grad()
def loss_terms(model: MF2Model, batch: FaceBatch, task: str = "joint", seed: int = 0) -> dict:
    """Loss terms on ``batch`` with a fixed sampling seed, so values are comparable across training."""
    was_training = model.training
    model.eval()
    out = model.forward_train(batch, torch.Generator().manual_seed(seed))
    out.report.total = total_loss(out.report, task_weights(model.config.model, task))
    model.train(was_training)
    return out.report.as_floats()


def batch_digest(batch: FaceBatch) -> str:
    h = hashlib.sha256()
    h.update(batch.images.detach().cpu().numpy().tobytes())
    h.update(np.ascontiguousarray(batch.landmarks).tobytes())
    for t in (batch.au_labels, batch.emotion):
        if t is not None:
            h.update(t.detach().cpu().numpy().tobytes())
    if batch.captions:
        h.update(json.dumps([asdict(c) for c in batch.captions], sort_keys=True, default=str).encode())
    return h.hexdigest()


@dataclass
class Fixture:
    train: FaceBatch
    val: FaceBatch

    def digest(self) -> str:
        return hashlib.sha256((batch_digest(self.train) + batch_digest(self.val)).encode()).hexdigest()


def _strip_timings(obj):
    if isinstance(obj, dict):
        return {k: _strip_timings(v) for k, v in obj.items() if k not in _TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timings(v) for v in obj]
    return obj


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunRecord:
    name: str
    config: dict
    input_hash: str
    metrics: dict
    timings: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    history: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["content_hash"] = self.content_hash()
        return d

    def content_hash(self) -> str:
        """Hash of everything except wall-clock measurements."""
        return content_hash(_strip_timings(asdict(self)))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def train(model: MF2Model, fixture: Fixture, schedule: TrainSchedule, name: str = "train",
          checkpoint_path=None, on_epoch: Optional[Callable[[dict], None]] = None) -> RunRecord:
    """AdamW with linear warmup over the trainable parameters of ``model``.

    Frozen backbones (DFN attached) go through :func:`finetune_step`. The model
    with the best validation score is checkpointed; a non-finite loss raises
    :class:`NaNLoss` and leaves that checkpoint in place.
    """
    torch.manual_seed(schedule.seed)
    data = fixture.train
    n = len(data)
    steps_per_epoch = -(-n // schedule.batch_size)
    total_steps = steps_per_epoch * schedule.epochs
    warmup = schedule.resolve_warmup(total_steps)
    weights = task_weights(model.config.model, schedule.task)
    params = trainable_parameters(model)
    if not params and schedule.epochs > 0:
        raise InvalidArgument(f"{name}: model has no trainable parameters")
    opt = torch.optim.AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay) if params else None
    shuffle = torch.Generator().manual_seed(schedule.seed)
    sampler = torch.Generator().manual_seed(schedule.seed + 1)

    initial = loss_terms(model, data, schedule.task, schedule.seed)
    metrics = evaluate(model, fixture.val)
    best, best_epoch = metrics.score(schedule.task), 0
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, {"epoch": 0, "score": best})
    history, epoch_times = [], []
    step = 0
    model.train()
    for epoch in range(1, schedule.epochs + 1):
        perm = torch.randperm(n, generator=shuffle)
        sums: dict = {}
        t0 = time.perf_counter()
        for s in range(0, n, schedule.batch_size):
            step += 1
            for group in opt.param_groups:
                group["lr"] = lr_at(step, schedule.lr, warmup)
            sub = data.subset(perm[s:s + schedule.batch_size])
            if model.dfn is not None and model.backbone_frozen:
                report = finetune_step(model, sub, opt, schedule.task, sampler)
            else:
                report = model.forward_train(sub, sampler).report
                report.total = total_loss(report, weights)
                if not torch.isfinite(report.total):
                    raise NaNLoss(f"{name}: non-finite loss at epoch {epoch} step {step}; "
                                  f"last good checkpoint: {checkpoint_path}")
                opt.zero_grad(set_to_none=True)
                report.total.backward()
                opt.step()
            for k, v in report.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(sub)
        epoch_times.append(time.perf_counter() - t0)
        metrics = evaluate(model, fixture.val)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}, "val_score": metrics.score(schedule.task),
               "lr": lr_at(step, schedule.lr, warmup), "wall_time": epoch_times[-1]}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if row["val_score"] > best:
            best, best_epoch = row["val_score"], epoch
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, {"epoch": epoch, "score": best})
    final = loss_terms(model, data, schedule.task, schedule.seed)
    metrics.train_time_per_epoch = float(np.mean(epoch_times)) if epoch_times else 0.0
    return RunRecord(
        name=name,
        config={"model": model.config.to_dict(), "schedule": asdict(schedule),
                "dfn": None if model.dfn is None else asdict(model.dfn.config)},
        input_hash=content_hash({"config": model.config.to_dict(), "schedule": asdict(schedule),
                                 "fixture": fixture.digest()}),
        metrics=metrics.to_json(),
        timings={"train_time_per_epoch": metrics.train_time_per_epoch,
                 "infer_time_per_epoch": metrics.infer_time_per_epoch, "epochs": epoch_times},
        checkpoint=None if checkpoint_path is None else str(checkpoint_path),
        history=history,
        extra={"initial_loss": initial, "final_loss": final, "best_score": best, "best_epoch": best_epoch,
               "warmup_steps": warmup, "total_steps": total_steps},
    )


# --- experiments -----------------------------------------------------------------

def build_model(config: MF2Config, seed: int) -> MF2Model:
    torch.manual_seed(seed)
    return MF2Model(copy.deepcopy(config))


@dataclass
class AblationSpec:
    variant: str
    seed: int = 0
    task: str = "joint"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"variant must be one of {VARIANTS}")


def variant_config(config: MF2Config, variant: str) -> MF2Config:
    cfg = copy.deepcopy(config)
    if variant == "w/o_emo_vl":
        cfg.model = replace(cfg.model, branches=("au",))
    elif variant == "w/o_au_vl":
        cfg.model = replace(cfg.model, branches=("emo",))
    else:
        cfg.model = replace(cfg.model, branches=("emo", "au"))
    return cfg


def run_ablation(spec: AblationSpec, fixture: Fixture, config: MF2Config, pretrain: TrainSchedule,
                 finetune: TrainSchedule, dfn_config: Optional[DFNConfig] = None, run_dir=None,
                 pretrained: Optional[dict] = None) -> RunRecord:
    """Pretrain the variant's backbone jointly, then fine-tune it on ``spec.task``.

    ``dfn_finetune`` freezes the backbone behind side adapters; every other
    variant fine-tunes all parameters. Task heads are re-initialised before the
    fine-tuning phase in every variant. ``pretrained`` maps a branch tuple to a
    state dict so variants sharing a backbone can reuse one pretraining run.
    """
    try:
        cfg = variant_config(config, spec.variant)
        model = build_model(cfg, spec.seed)
        key = cfg.model.branches
        phases = {}
        if pretrained is not None and key in pretrained:
            model.load_state_dict(pretrained[key])
        else:
            rec = train(model, fixture, replace(pretrain, seed=spec.seed, task="joint"), name=f"{spec.variant}/pretrain")
            phases["pretrain"] = rec.to_json()
            if pretrained is not None:
                pretrained[key] = copy.deepcopy(model.state_dict())
        model.reset_heads(seed=spec.seed)
        if spec.variant == "dfn_finetune":
            attach_dfn(model, dfn_config or DFNConfig())
            freeze_report = freeze_backbone(model)
        else:
            freeze_report = parameter_report(model)
        ckpt = None if run_dir is None else Path(run_dir) / f"{spec.variant.replace('/', '_')}.ckpt"
        rec = train(model, fixture, replace(finetune, seed=spec.seed, task=spec.task), name=spec.variant,
                    checkpoint_path=ckpt)
    except NaNLoss as e:
        raise NaNLoss(f"[{spec.variant}] {e}") from e
    rec.phases = phases
    rec.extra["freeze_report"] = freeze_report.to_json()
    rec.extra["total_params"] = freeze_report.frozen_param_count + freeze_report.trainable_param_count
    rec.config["variant"] = spec.variant
    return rec


def run_ablations(fixture: Fixture, config: MF2Config, pretrain: TrainSchedule, finetune: TrainSchedule,
                  variants=VARIANTS, seed: int = 0, task: str = "joint", dfn_config: Optional[DFNConfig] = None,
                  run_dir=None) -> dict:
    cache: dict = {}
    return {v: run_ablation(AblationSpec(v, seed, task), fixture, config, pretrain, finetune, dfn_config,
                            run_dir, cache) for v in variants}


def run_transition(fixture: Fixture, config: MF2Config, pretrain: TrainSchedule, finetune: TrainSchedule,
                   dfn_config: Optional[DFNConfig] = None, seed: int = 0, pretrain_task: str = "au",
                   finetune_task: str = "emotion", run_dir=None) -> RunRecord:
    """Pretrain on the AU objective, then DFN fine-tune on the emotion objective."""
    cfg = variant_config(config, "dfn_finetune")
    baseline = evaluate(build_model(cfg, seed), fixture.val)
    model = build_model(cfg, seed)
    run_dir = None if run_dir is None else Path(run_dir)
    p1 = train(model, fixture, replace(pretrain, seed=seed, task=pretrain_task), name="transition/pretrain",
               checkpoint_path=None if run_dir is None else run_dir / "pretrain.ckpt")
    model.reset_heads(["emotion_head"], seed=seed)
    attach_dfn(model, dfn_config or DFNConfig())
    report = freeze_backbone(model)
    checksum_before = model.backbone_checksum()
    p2 = train(model, fixture, replace(finetune, seed=seed, task=finetune_task), name="transition/finetune",
               checkpoint_path=None if run_dir is None else run_dir / "finetune.ckpt")
    checksum_after = model.backbone_checksum()
    return RunRecord(
        name="transition",
        config={"model": cfg.to_dict(), "pretrain": asdict(pretrain), "finetune": asdict(finetune),
                "dfn": asdict(model.dfn.config), "pretrain_task": pretrain_task, "finetune_task": finetune_task},
        input_hash=content_hash({"model": cfg.to_dict(), "pretrain": asdict(pretrain), "finetune": asdict(finetune),
                                 "fixture": fixture.digest(), "seed": seed}),
        metrics=p2.metrics,
        timings={"pretrain": p1.timings, "finetune": p2.timings},
        checkpoint=p2.checkpoint,
        phases={"pretrain": p1.to_json(), "finetune": p2.to_json()},
        extra={"baseline": baseline.to_json(), "freeze_report": report.to_json(),
               "checksum_before_finetune": checksum_before, "checksum_after_finetune": checksum_after},
    )


# --- tables ----------------------------------------------------------------------

def _table(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: " | ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "-+-".join("-" * w for w in widths), *map(fmt, rows)])


def au_table(reports: dict) -> str:
    """AU F1 (%) per method; columns in the conventional AU order plus the average."""
    header = ["Method", *AU_COLUMNS, "Avg."]
    rows = [[name, *(f"{r.per_au_f1[c]:.2f}" for c in AU_COLUMNS), f"{r.au_macro_f1:.2f}"] for name, r in reports.items()]
    return _table(header, rows)


def emotion_table(reports: dict) -> str:
    """Emotion accuracy (%) per method; '-' marks classes absent from the evaluation set."""
    header = ["Method", *EMOTIONS, "Avg."]
    rows = []
    for name, r in reports.items():
        cells = [f"{r.per_emotion_acc[e]:.2f}" if e in r.per_emotion_acc else "-" for e in EMOTIONS]
        rows.append([name, *cells, f"{r.emotion_macro_acc:.2f}"])
    return _table(header, rows)


def ablation_table(records: dict) -> str:
    header = ["Method", "AU Avg. F1", "Emo Avg. Acc", "TT (s/epoch)", "IT (s/epoch)", "TP"]
    rows = []
    for name, rec in records.items():
        m = rec.metrics
        rows.append([name, f"{m['au_macro_f1']:.2f}", f"{m['emotion_macro_acc']:.2f}",
                     f"{m['train_time_per_epoch']:.3f}", f"{m['infer_time_per_epoch']:.3f}",
                     str(m["trainable_params"])])
    return _table(header, rows)


def metrics_from_json(d: dict) -> MetricsReport:
    return MetricsReport(**d)
