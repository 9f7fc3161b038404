import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from mf2.data import EMOTIONS
from mf2.dfn import DFNConfig
from mf2.errors import InvalidArgument, NonBinary, ShapeMismatch, UnknownClassId
from mf2.evaluation import (AU_COLUMNS, Fixture, MetricsReport, RunRecord, TrainSchedule, ablation_table,
                            accuracy_per_class, au_table, build_model, emotion_table, evaluate, f1_per_au, lr_at,
                            metrics_from_json, run_ablations, run_transition, text_encoder_calls, train)
from mf2.model import MF2Model


def test_f1_hand_case():
    preds = np.zeros((3, 12), dtype=int)
    gts = np.zeros((3, 12), dtype=int)
    preds[:2, 0] = 1  # tp=1, fp=1, fn=0
    gts[0, 0] = 1
    gts[:, 1] = 1  # never predicted: tp=0
    per, macro = f1_per_au(preds, gts)
    assert per["AU1"] == pytest.approx(200 / 3)
    assert per["AU2"] == 0.0 and per["AU4"] == 0.0
    assert macro == pytest.approx(200 / 3 / 12)
    assert list(per) == list(AU_COLUMNS)


def test_accuracy_hand_case():
    per, macro = accuracy_per_class([0, 0, 0, 1, 2], [0, 0, 0, 0, 2])
    assert per == {EMOTIONS[0]: 75.0, EMOTIONS[2]: 100.0}
    assert macro == pytest.approx(87.5)


def _f1_oracle(p, g):
    out = []
    for j in range(p.shape[1]):
        tp = sum(1 for i in range(len(p)) if p[i, j] and g[i, j])
        fp = sum(1 for i in range(len(p)) if p[i, j] and not g[i, j])
        fn = sum(1 for i in range(len(p)) if not p[i, j] and g[i, j])
        if tp == 0:
            out.append(0.0)
            continue
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        out.append(100 * 2 * prec * rec / (prec + rec))
    return out


def _acc_oracle(p, g, k):
    out = {}
    for c in range(k):
        idx = [i for i in range(len(g)) if g[i] == c]
        if idx:
            out[EMOTIONS[c]] = 100 * sum(p[i] == c for i in idx) / len(idx)
    return out


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b = int(rng.integers(1, 9))
        p = rng.integers(0, 2, (b, 12))
        g = rng.integers(0, 2, (b, 12))
        per, macro = f1_per_au(p, g)
        ref = _f1_oracle(p, g)
        assert np.allclose(list(per.values()), ref)
        assert macro == pytest.approx(float(np.mean(ref)))
        pe = rng.integers(0, 8, b)
        ge = rng.integers(0, 8, b)
        per_e, macro_e = accuracy_per_class(pe, ge)
        ref_e = _acc_oracle(pe, ge, 8)
        assert per_e == pytest.approx(ref_e)
        assert macro_e == pytest.approx(float(np.mean(list(ref_e.values()))))


def test_metric_errors():
    with pytest.raises(UnknownClassId):
        accuracy_per_class([8], [0])
    with pytest.raises(UnknownClassId):
        accuracy_per_class([0], [-1])
    with pytest.raises(ShapeMismatch):
        f1_per_au(np.zeros((2, 11)), np.zeros((2, 11)))
    with pytest.raises(NonBinary):
        f1_per_au(np.full((1, 12), 2), np.zeros((1, 12)))


def test_warmup():
    assert lr_at(0, 1.0, 10) == 0.0
    assert lr_at(5, 1.0, 10) == 0.5
    assert lr_at(10, 1.0, 10) == 1.0 and lr_at(50, 1.0, 10) == 1.0
    assert lr_at(0, 1.0, 0) == 1.0
    assert TrainSchedule().resolve_warmup(100) == 10
    assert TrainSchedule().resolve_warmup(10**6) == 2000
    assert TrainSchedule(warmup_steps=3).resolve_warmup(100) == 3
    with pytest.raises(InvalidArgument):
        TrainSchedule(task="style")


@pytest.fixture()
def fixture(batch8):
    return Fixture(batch8, batch8)


def test_zero_epochs(fixture):
    m = build_model(tiny_config(), 0)
    before = [p.clone() for p in m.parameters()]
    rec = train(m, fixture, TrainSchedule(epochs=0))
    assert rec.history == []
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))
    assert rec.metrics["au_macro_f1"] == evaluate(m, fixture.val).au_macro_f1
    assert rec.extra["initial_loss"] == rec.extra["final_loss"]


def test_no_trainable_params(fixture):
    m = build_model(tiny_config(), 0)
    for p in m.parameters():
        p.requires_grad_(False)
    with pytest.raises(InvalidArgument):
        train(m, fixture, TrainSchedule(epochs=1))


def test_overfit_emotion_ce(fixture):
    # alignment terms off so the loop is judged on the recognition objective alone
    m = build_model(tiny_config(w_itc=0, w_itm=0, w_itg=0), 0)
    rec = train(m, fixture, TrainSchedule(epochs=30, batch_size=4, lr=1e-2, warmup_steps=0, task="emotion"))
    first, last = rec.extra["initial_loss"]["ce_emo"], rec.extra["final_loss"]["ce_emo"]
    assert last < first / 2, (first, last)
    assert len(rec.history) == 30 and rec.history[-1]["lr"] == 1e-2


def test_training_determinism(fixture, tmp_path):
    def run(path):
        m = build_model(tiny_config(), 3)
        return train(m, fixture, TrainSchedule(epochs=2, batch_size=4, lr=1e-3, seed=3), checkpoint_path=path)

    a, b = run(tmp_path / "a.ckpt"), run(tmp_path / "b.ckpt")
    assert a.history[-1]["total"] == b.history[-1]["total"]
    a.checkpoint = b.checkpoint = None
    assert a.content_hash() == b.content_hash()
    assert a.timings  # timings exist but are excluded from the hash


def test_run_record_json(tmp_path):
    rec = RunRecord("x", {"a": 1}, "h", {"m": 1.0}, timings={"train_time_per_epoch": 0.5})
    d = json.loads(rec.save(tmp_path / "r.json").read_text())
    assert d["content_hash"] == rec.content_hash()
    rec2 = RunRecord("x", {"a": 1}, "h", {"m": 1.0}, timings={"train_time_per_epoch": 9.0})
    assert rec2.content_hash() == rec.content_hash()


def test_evaluate_reads_no_text(fixture):
    m = build_model(tiny_config(), 0)
    r = evaluate(m, fixture.val)
    assert text_encoder_calls(m) == 0
    assert set(r.per_au_f1) == set(AU_COLUMNS)
    assert metrics_from_json(r.to_json()) == r


def test_ablation_directionality(fixture, tmp_path):
    sched = TrainSchedule(epochs=1, batch_size=4, lr=1e-3)
    recs = run_ablations(fixture, tiny_config(), sched, sched, dfn_config=DFNConfig(r=2), run_dir=tmp_path)
    tp = {k: r.metrics["trainable_params"] for k, r in recs.items()}
    assert tp["dfn_finetune"] < tp["w/o_emo_vl"] < tp["full_finetune"]
    assert tp["w/o_au_vl"] < tp["full_finetune"]
    assert recs["dfn_finetune"].extra["total_params"] > recs["full_finetune"].extra["total_params"]
    # full and dfn variants share one pretrained backbone
    assert "pretrain" in recs["full_finetune"].phases and not recs["dfn_finetune"].phases
    table = ablation_table(recs)
    assert all(k in table for k in recs)
    reports = {k: metrics_from_json(r.metrics) for k, r in recs.items()}
    assert "AU26" in au_table(reports) and "Surprise" in emotion_table(reports)


def test_transition_keeps_backbone(fixture):
    sched = TrainSchedule(epochs=1, batch_size=4, lr=1e-3)
    rec = run_transition(fixture, tiny_config(), sched, sched, DFNConfig(r=2))
    assert rec.extra["checksum_before_finetune"] == rec.extra["checksum_after_finetune"]
    assert rec.config["pretrain_task"] == "au" and rec.config["finetune_task"] == "emotion"
    assert rec.phases["finetune"]["metrics"]["trainable_params"] < rec.phases["pretrain"]["metrics"]["trainable_params"]
