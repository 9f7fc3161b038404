from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_config
from mf2.data import AU_IDS
from mf2.errors import InvalidArgument, MissingCaption, UnlabeledSample
from mf2.model import (LOSS_TERMS, CaptionSet, LossReport, MF2Model, ModelConfig, PerAUHead, count_parameters,
                       load_checkpoint, save_checkpoint, total_loss)
from mf2.qformer import QFormer


def test_all_terms_finite(tiny_model, batch8):
    rep = tiny_model.forward_train(batch8).report
    assert set(rep.terms) == set(LOSS_TERMS)
    f = rep.as_floats()
    assert all(np.isfinite(v) for v in f.values())
    assert all(f[k] > 0 for k in LOSS_TERMS)
    assert abs(f["total"] - sum(f[k] for k in LOSS_TERMS)) < 1e-4
    assert rep.per_au["au_itm"].shape == (12,)
    assert abs(float(rep.per_au["au_itc"].detach().mean()) - f["au_itc"]) < 1e-6


def test_total_loss_arithmetic():
    ones = LossReport({k: torch.tensor(1.0) for k in LOSS_TERMS})
    assert total_loss(ones, ModelConfig()).item() == 8.0
    only_emo = ModelConfig(w_itc=0, w_itm=0, w_itg=0, w_ce_au=0)
    assert total_loss(ones, only_emo).item() == 1.0
    zeros = LossReport({k: torch.tensor(0.0) for k in LOSS_TERMS})
    assert total_loss(zeros, ModelConfig()).item() == 0.0
    half_emo = LossReport({k: torch.tensor(0.5 if k == "ce_emo" else 0.0) for k in LOSS_TERMS})
    assert total_loss(half_emo, ModelConfig(w_ce_emo=2.0)).item() == 1.0
    mixed = LossReport({k: torch.tensor(float(i + 1)) for i, k in enumerate(LOSS_TERMS)})
    w = ModelConfig(w_itc=0.5, w_itm=2.0, w_itg=0.0, w_ce_au=1.0, w_ce_emo=3.0)
    # itc terms 1 and 4, itm 2 and 5, itg 3 and 6, ce_au 7, ce_emo 8
    assert total_loss(mixed, w).item() == 0.5 * 5 + 2.0 * 7 + 7 + 24
    with pytest.raises(InvalidArgument):
        ModelConfig(w_itc=-1)
    with pytest.raises(InvalidArgument):
        ModelConfig(w_itc=0, w_itm=0, w_itg=0, w_ce_au=0, w_ce_emo=0)
    assert ModelConfig(branches="au").branches == ("au",)


def test_identical_regions_identical_per_au_losses(tiny_model, batch8):
    same = "AU1 inner brow raiser is present ."
    caps = [replace(c, au={a: same for a in AU_IDS}) for c in batch8.captions]
    b = replace(batch8, captions=caps, landmarks=np.zeros_like(batch8.landmarks))
    rep = tiny_model.forward_train(b).report
    for k in ("au_itc", "au_itm", "au_itg"):
        v = rep.per_au[k]
        assert torch.allclose(v, v[0].expand_as(v), atol=1e-5), k


def test_missing_au_caption(tiny_model, batch8):
    caps = list(batch8.captions)
    au = dict(caps[3].au)
    del au[4]
    caps[3] = replace(caps[3], au=au)
    with pytest.raises(MissingCaption) as ei:
        tiny_model.forward_train(replace(batch8, captions=caps))
    assert "4" in str(ei.value)
    with pytest.raises(MissingCaption):
        tiny_model.forward_train(replace(batch8, captions=[CaptionSet(au=c.au) for c in batch8.captions]))


def test_unlabeled(tiny_model, batch8):
    with pytest.raises(UnlabeledSample):
        tiny_model.forward_train(replace(batch8, emotion=None))


def test_batch_of_one(tiny_model, batch8):
    rep = tiny_model.forward_train(batch8.subset([0])).report
    assert rep.terms["emo_itc"].item() == pytest.approx(0.0, abs=1e-7)
    assert torch.isfinite(rep.total)


def test_infer_shapes_and_no_text(tiny_model, batch8):
    tiny_model.eval()
    out = tiny_model.forward_infer(batch8.images, batch8.landmarks)
    assert out.emotion_logits.shape == (8, 8) and out.au_logits.shape == (8, 12)
    assert sum(br.text_encoder.calls for br in tiny_model.branches.values()) == 0
    single = tiny_model(batch8.images[0], batch8.landmarks[0])
    assert single.au_logits.shape == (1, 12)


def test_batched_equals_looped(batch8):
    torch.manual_seed(0)
    m = MF2Model(tiny_config()).double().eval()
    full = m.forward_infer(batch8.images.double(), batch8.landmarks)
    for i in range(len(batch8)):
        one = m.forward_infer(batch8.images[i:i + 1].double(), batch8.landmarks[i:i + 1])
        assert torch.allclose(one.emotion_logits[0], full.emotion_logits[i], atol=1e-12)
        assert torch.allclose(one.au_logits[0], full.au_logits[i], atol=1e-12)


def test_training_does_not_change_infer_signature(tiny_model, batch8):
    """Inference output depends on pixels and landmarks only, never captions."""
    tiny_model.eval()
    a = tiny_model.forward_infer(batch8.images, batch8.landmarks).au_logits
    tiny_model.forward_train(replace(batch8, captions=batch8.captions[::-1]))
    b = tiny_model.forward_infer(batch8.images, batch8.landmarks).au_logits
    assert torch.equal(a, b)


def _groups(model):
    groups = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "branches" else parts[0]
        groups.setdefault(key, []).append(p)
    return groups


def test_finite_difference_gradient_per_group(batch8):
    torch.manual_seed(0)
    m = MF2Model(tiny_config()).double().eval()
    b = batch8.subset([0, 1, 2]).to(torch.float64)

    def loss():
        return m.forward_train(b, torch.Generator().manual_seed(1)).report.total

    m.zero_grad()
    loss().backward()
    groups = _groups(m)
    assert len(groups) >= 14
    g = torch.Generator().manual_seed(0)
    eps = 1e-6
    for key, params in groups.items():
        direction = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
        analytic = sum((p.grad * d).sum() for p, d in zip(params, direction) if p.grad is not None)
        analytic = float(analytic)
        with torch.no_grad():
            for p, d in zip(params, direction):
                p.add_(eps * d)
            up = loss().item()
            for p, d in zip(params, direction):
                p.add_(-2 * eps * d)
            down = loss().item()
            for p, d in zip(params, direction):
                p.add_(eps * d)
        numeric = (up - down) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-6), (key, analytic, numeric)


def test_single_shared_au_qformer():
    m = MF2Model(tiny_config())
    au = m.branches["au"]
    qfs = [mod for mod in au.modules() if isinstance(mod, QFormer)]
    assert len(qfs) == 1
    assert count_parameters(qfs[0]) == count_parameters(QFormer(m.config.qformer_au))
    assert count_parameters(au.qformer) == count_parameters(m.branches["emo"].qformer)


def test_au_region_perturbation_is_local(batch8, monkeypatch):
    import mf2.model as model_mod

    torch.manual_seed(0)
    m = MF2Model(tiny_config(branches=("au",))).double().eval()
    images = batch8.images.double()
    base = m.forward_infer(images, batch8.landmarks).au_logits
    real = model_mod.extract_au_regions
    for j in (0, 5, 11):
        def bumped(fm, lms, au_map, k, j=j):
            rs = real(fm, lms, au_map, k)
            rs.regions = rs.regions.clone()
            rs.regions[:, j] += torch.randn(rs.regions[:, j].shape, dtype=rs.regions.dtype)
            return rs

        monkeypatch.setattr(model_mod, "extract_au_regions", bumped)
        out = m.forward_infer(images, batch8.landmarks).au_logits
        changed = (out - base).abs() > 0
        assert changed[:, j].all()
        assert not changed[:, [i for i in range(12) if i != j]].any()


def test_per_au_head_independence():
    torch.manual_seed(0)
    head = PerAUHead(6)
    x = torch.randn(2, 12, 6)
    base = head(x)
    for k in range(12):
        y = x.clone()
        y[:, k] += torch.randn(2, 6)
        diff = (head(y) - base).abs() > 0
        assert diff[:, k].all() and not diff[:, [j for j in range(12) if j != k]].any()


def test_three_step_determinism(batch8):
    def run():
        torch.manual_seed(0)
        m = MF2Model(tiny_config())
        opt = torch.optim.AdamW(m.parameters(), lr=1e-3)
        g = torch.Generator().manual_seed(0)
        for _ in range(3):
            opt.zero_grad()
            m.forward_train(batch8, g).report.total.backward()
            opt.step()
        return torch.cat([p.detach().flatten() for p in m.parameters()])

    assert torch.equal(run(), run())


def test_single_branch_models(batch8):
    for branches in (("emo",), ("au",)):
        torch.manual_seed(0)
        m = MF2Model(tiny_config(branches=branches))
        rep = m.forward_train(batch8).report
        other = "au" if branches == ("emo",) else "emo"
        assert all(rep.terms[f"{other}_{k}"].item() == 0 for k in ("itc", "itm", "itg"))
        assert m.forward_infer(batch8.images, batch8.landmarks).au_logits.shape == (8, 12)


def test_checkpoint_round_trip(tmp_path, tiny_model, batch8):
    tiny_model.eval()
    p = save_checkpoint(tiny_model, tmp_path / "m.pt", {"epoch": 3})
    loaded = load_checkpoint(p).eval()
    assert loaded.checkpoint_extra == {"epoch": 3}
    a = tiny_model.forward_infer(batch8.images, batch8.landmarks)
    b = loaded.forward_infer(batch8.images, batch8.landmarks)
    assert torch.equal(a.au_logits, b.au_logits) and torch.equal(a.emotion_logits, b.emotion_logits)
    assert loaded.backbone_checksum() == tiny_model.backbone_checksum()

    payload = torch.load(p, weights_only=False)
    payload["state_dict"]["stray.weight"] = torch.zeros(1)
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(RuntimeError):
        load_checkpoint(tmp_path / "bad.pt")
    load_checkpoint(tmp_path / "bad.pt", strict=False)
