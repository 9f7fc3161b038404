"""``mf2`` command line entry point.

Exit codes: 0 success, 1 domain error (printed as one JSON line on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .annotation import (MockClient, RemoteClient, annotate_dataset, balance_classes, filter_samples,
                         load_captions, save_captions, split_by_video)
from .config import RunConfig, parse_config
from .data import load_manifest, make_fixture_dataset, save_manifest
from .dfn import attach_dfn, freeze_backbone
from .errors import MF2Error
from .evaluation import (VARIANTS, Fixture, RunRecord, ablation_table, au_table, build_model, content_hash,
                         emotion_table, evaluate, metrics_from_json, run_ablations, run_transition,
                         text_encoder_calls, train)
from .model import FaceBatch, caption_sets, load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


class RunLog:
    """Line-delimited JSON events."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = path.open("a", encoding="utf-8")

    def event(self, kind: str, **fields):
        self.fh.write(json.dumps({"event": kind, **fields}, sort_keys=True, default=str) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    for key, value in vars(args).items():
        if key.startswith("dfn.") and value is not None:
            overrides.append(f"{key}={value}")
    cfg = parse_config(args.config, overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _run_dir(args, cfg: RunConfig, inputs: dict) -> Path:
    if cfg.run_dir:
        return Path(cfg.run_dir)
    root = Path(args.run_root or os.environ.get("MF2_RUN_ROOT", "runs"))
    key = content_hash({"command": args.command, "config": cfg.to_dict(), "inputs": inputs,
                        "args": {k: v for k, v in vars(args).items() if k != "run_root"}})
    return root / f"{args.command}-{key[:12]}"


def _data_paths(args):
    if args.data is None:
        raise UsageError("--data is required")
    d = Path(args.data)
    return d / "train.jsonl", d / "val.jsonl"


def _fixture(args, cfg: RunConfig, with_captions: bool = True) -> Fixture:
    train_path, val_path = _data_paths(args)
    size = cfg.encoders.image_size
    train_m = load_manifest(train_path, image_size=size)
    val_m = load_manifest(val_path, image_size=size)
    caps = caption_sets(load_captions(args.captions)) if with_captions else None
    return Fixture(FaceBatch.from_manifest(train_m, caps), FaceBatch.from_manifest(val_m))


def _inputs(args, *names) -> dict:
    out = {}
    for n in names:
        p = getattr(args, n, None)
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.glob("*.jsonl")):
                out[f"{n}/{f.name}"] = _file_digest(f)
        elif p.exists():
            out[n] = _file_digest(p)
    return out


def _start(args, cfg, inputs):
    run_dir = _run_dir(args, cfg, inputs)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    log = RunLog(run_dir / "log.jsonl")
    log.event("start", command=args.command, config=cfg.to_dict(), inputs=inputs)
    return run_dir, log


def _finish(run_dir: Path, log: RunLog, record: RunRecord, tables: str, cfg: RunConfig) -> None:
    record.config["run"] = cfg.to_dict()
    record.config["echo"] = cfg.source
    record.save(run_dir / "record.json")
    (run_dir / "report.txt").write_text(tables + "\n")
    log.event("done", content_hash=record.content_hash())
    log.close()
    print(tables)
    print(f"run directory: {run_dir}")


def _tables(name: str, metrics: dict) -> str:
    m = {name: metrics_from_json(metrics)}
    return "AU F1 (%)\n" + au_table(m) + "\n\nEmotion accuracy (%)\n" + emotion_table(m)


# --- commands --------------------------------------------------------------------

def cmd_data(args, cfg: RunConfig) -> int:
    if args.action == "fixture":
        m = make_fixture_dataset(args.videos or cfg.data.fixture_videos, args.frames or cfg.data.fixture_frames,
                                 seed=cfg.seed, image_size=cfg.encoders.image_size, au_flip_prob=cfg.data.au_flip_prob)
        out = save_manifest(m, Path(args.out) / "manifest.jsonl")
        print(json.dumps({"manifest": str(out), "samples": len(m)}))
        return 0
    if args.input is None:
        raise UsageError(f"data {args.action} needs --in")
    m = load_manifest(args.input)
    if args.action == "filter":
        out = save_manifest(filter_samples(m), args.out)
        print(json.dumps({"manifest": str(out), "samples": len(filter_samples(m))}))
    elif args.action == "balance":
        tol = cfg.data.tolerance if args.tolerance is None else args.tolerance
        b = balance_classes(m, tol, seed=cfg.seed)
        out = save_manifest(b, args.out)
        print(json.dumps({"manifest": str(out), "samples": len(b), "class_counts": b.class_counts}))
    else:
        frac = cfg.data.train_fraction if args.train_fraction is None else args.train_fraction
        tr, va = split_by_video(m, frac, seed=cfg.seed)
        save_manifest(tr, Path(args.out) / "train.jsonl")
        save_manifest(va, Path(args.out) / "val.jsonl")
        print(json.dumps({"train": len(tr), "val": len(va), "train_videos": len(tr.video_ids),
                          "val_videos": len(va.video_ids)}))
    return 0


def cmd_annotate(args, cfg: RunConfig) -> int:
    m = load_manifest(args.input)
    types = tuple(t.strip() for t in (args.types or cfg.annotate.types).split(",") if t.strip())
    kind = args.client or cfg.annotate.client
    if kind == "mock":
        client = MockClient(cfg.seed)
    elif kind == "remote":
        client = RemoteClient.from_env(args.endpoint_env or cfg.annotate.endpoint_env)
    else:
        raise UsageError(f"unknown client {kind!r}")
    res = annotate_dataset(m, client, types, max_workers=cfg.annotate.max_workers)
    save_captions(res.records, args.out)
    print(json.dumps({"captions": str(args.out), "records": len(res.records),
                      "failures": [str(f) for f in res.failures]}))
    return 1 if res.failures else 0


def cmd_train(args, cfg: RunConfig) -> int:
    fixture = _fixture(args, cfg)
    run_dir, log = _start(args, cfg, _inputs(args, "data", "captions"))
    model = build_model(cfg.mf2_config(), cfg.seed)
    record = train(model, fixture, cfg.train.schedule(cfg.seed), name="train", checkpoint_path=run_dir / "model.ckpt",
                   on_epoch=lambda row: log.event("epoch", **row))
    _finish(run_dir, log, record, _tables("train", record.metrics), cfg)
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    fixture = _fixture(args, cfg)
    inputs = _inputs(args, "data", "captions", "checkpoint")
    run_dir, log = _start(args, cfg, inputs)
    model = load_checkpoint(args.checkpoint)
    task = args.task or cfg.train.finetune_task
    heads = {"emotion": ["emotion_head"], "au": ["au_head"]}.get(task, list(model.TASK_HEADS))
    model.reset_heads(heads, seed=cfg.seed)
    attach_dfn(model, cfg.dfn)
    report = freeze_backbone(model)
    (run_dir / "freeze_report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    log.event("freeze", **report.to_json())
    record = train(model, fixture, cfg.train.finetune_schedule(cfg.seed, task), name="finetune",
                   checkpoint_path=run_dir / "model.ckpt", on_epoch=lambda row: log.event("epoch", **row))
    record.extra["freeze_report"] = report.to_json()
    _finish(run_dir, log, record, _tables(f"finetune ({task})", record.metrics), cfg)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.manifest:
        path = Path(args.manifest)
    else:
        if args.data is None:
            raise UsageError("eval needs --data or --manifest")
        path = Path(args.data) / f"{args.split}.jsonl"
    inputs = _inputs(args, "checkpoint") | {"manifest": _file_digest(path)}
    run_dir, log = _start(args, cfg, inputs)
    model = load_checkpoint(args.checkpoint)
    batch = FaceBatch.from_manifest(load_manifest(path, image_size=model.config.encoders.image_size))
    calls_before = text_encoder_calls(model)
    metrics = evaluate(model, batch, cfg.eval.batch_size)
    calls = text_encoder_calls(model) - calls_before
    record = RunRecord("eval", {"split": args.split}, content_hash(inputs), metrics.to_json(),
                       timings={"infer_time_per_epoch": metrics.infer_time_per_epoch},
                       checkpoint=str(args.checkpoint), extra={"text_encoder_calls": calls})
    log.event("eval", text_encoder_calls=calls)
    _finish(run_dir, log, record, _tables("eval", record.metrics), cfg)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    fixture = _fixture(args, cfg)
    spec = args.variants or cfg.eval.variants
    variants = VARIANTS if spec == "all" else tuple(v.strip() for v in spec.split(",") if v.strip())
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {VARIANTS}")
    run_dir, log = _start(args, cfg, _inputs(args, "data", "captions"))
    records = run_ablations(fixture, cfg.mf2_config(), cfg.train.schedule(cfg.seed),
                            cfg.train.finetune_schedule(cfg.seed, args.task or "joint"), variants, cfg.seed,
                            args.task or "joint", cfg.dfn, run_dir)
    for name, rec in records.items():
        rec.save(run_dir / f"record_{name.replace('/', '_')}.json")
        log.event("variant", variant=name, content_hash=rec.content_hash())
    metrics = {n: metrics_from_json(r.metrics) for n, r in records.items()}
    tables = ("Ablation\n" + ablation_table(records) + "\n\nAU F1 (%)\n" + au_table(metrics)
              + "\n\nEmotion accuracy (%)\n" + emotion_table(metrics))
    summary = RunRecord("ablate", {"variants": list(variants)},
                        content_hash({n: r.input_hash for n, r in records.items()}),
                        {n: r.metrics for n, r in records.items()},
                        timings={n: r.timings for n, r in records.items()},
                        extra={n: r.content_hash() for n, r in records.items()})
    _finish(run_dir, log, summary, tables, cfg)
    return 0


def cmd_transition(args, cfg: RunConfig) -> int:
    fixture = _fixture(args, cfg)
    run_dir, log = _start(args, cfg, _inputs(args, "data", "captions"))
    record = run_transition(fixture, cfg.mf2_config(), cfg.train.schedule(cfg.seed),
                            cfg.train.finetune_schedule(cfg.seed, "emotion"), cfg.dfn, cfg.seed, run_dir=run_dir)
    m = {"pretrain (au)": metrics_from_json(record.phases["pretrain"]["metrics"]),
         "finetune (emotion)": metrics_from_json(record.phases["finetune"]["metrics"]),
         "untrained": metrics_from_json(record.extra["baseline"])}
    tables = "AU F1 (%)\n" + au_table(m) + "\n\nEmotion accuracy (%)\n" + emotion_table(m)
    _finish(run_dir, log, record, tables, cfg)
    return 0


COMMANDS = {"data": cmd_data, "annotate": cmd_annotate, "train": cmd_train, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate, "transition": cmd_transition}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--run-root", help="parent of run directories (default $MF2_RUN_ROOT or ./runs)")

    p = _Parser(prog="mf2", description="Two-branch face vision-language training and evaluation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    d = sub.add_parser("data", parents=[common], help="fixture generation and dataset preparation")
    d.add_argument("action", choices=["fixture", "filter", "balance", "split"])
    d.add_argument("--in", dest="input")
    d.add_argument("--out", required=True)
    d.add_argument("--tolerance", type=float)
    d.add_argument("--train-fraction", type=float)
    d.add_argument("--videos", type=int)
    d.add_argument("--frames", type=int)

    a = sub.add_parser("annotate", parents=[common], help="generate captions")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--types")
    a.add_argument("--client", choices=["mock", "remote"])
    a.add_argument("--endpoint-env")

    def data_args(sp, captions=True):
        sp.add_argument("--data", required=True, help="directory holding train.jsonl and val.jsonl")
        if captions:
            sp.add_argument("--captions", required=True)

    t = sub.add_parser("train", parents=[common], help="joint pretraining")
    data_args(t)

    f = sub.add_parser("finetune", parents=[common], help="DFN fine-tuning on a frozen checkpoint")
    f.add_argument("--checkpoint", required=True)
    data_args(f)
    f.add_argument("--task", choices=["au", "emotion", "joint"])
    f.add_argument("--dfn.r", dest="dfn.r")
    f.add_argument("--dfn.gate", dest="dfn.gate")
    f.add_argument("--dfn.tap", dest="dfn.tap", choices=["blockwise", "cls", "cls_last_layer"])
    f.add_argument("--dfn.activation", dest="dfn.activation", choices=["relu", "sigmoid"])

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint from images alone")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--data")
    e.add_argument("--manifest")

    ab = sub.add_parser("ablate", parents=[common], help="ablation variants")
    data_args(ab)
    ab.add_argument("--variants", help="'all' or a comma list of " + ", ".join(VARIANTS))
    ab.add_argument("--task", choices=["au", "emotion", "joint"])

    tr = sub.add_parser("transition", parents=[common], help="AU pretraining followed by emotion DFN fine-tuning")
    data_args(tr)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _config(args)
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"mf2 {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (MF2Error, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
