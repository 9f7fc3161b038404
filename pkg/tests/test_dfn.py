import copy

import pytest
import torch

from conftest import tiny_config
from mf2.dfn import (FULL_SCALE_R, AdapterCell, DFNConfig, attach_dfn, detach_dfn, finetune_step, freeze_backbone,
                     full_scale_report, parameter_report, trainable_parameters)
from mf2.errors import AlreadyAttached, ConfigMismatch, DimMismatch, InvalidArgument, NaNLoss, NotAttached
from mf2.model import FaceBatch, MF2Model, count_parameters


def _model(n_blocks=1, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = tiny_config()
    for q in (cfg.qformer_emo, cfg.qformer_au):
        q.n_blocks = n_blocks
    return MF2Model(cfg, **kw)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_cell_count(n):
    m = attach_dfn(_model(n), DFNConfig(r=2))
    assert m.dfn.n_cells == 4 * n
    assert all(len(m.dfn.pathway(b, p)) == n for b in ("emo", "au") for p in ("visual", "text"))


def test_cls_tap_cell_count():
    m = attach_dfn(_model(2), DFNConfig(r=2, tap="cls", n_adapter_layers=7))
    assert m.dfn.n_cells == 4 * 7


def test_adapter_hand_example():
    cell = AdapterCell(2, 1, gate=0.1, activation="relu", bias=False)
    with torch.no_grad():
        cell.down.weight.copy_(torch.tensor([[1.0, 0.0]]))
        cell.up.weight.copy_(torch.tensor([[2.0], [0.0]]))
    assert torch.allclose(cell(torch.tensor([3.0, 5.0])), torch.tensor([0.6, 0.0]))


def test_adapter_with_bias():
    cell = AdapterCell(2, 1, gate=0.1, activation="relu")
    with torch.no_grad():
        cell.down.weight.copy_(torch.tensor([[1.0, 2.0]]))
        cell.down.bias.zero_()
        cell.up.weight.copy_(torch.tensor([[3.0], [0.0]]))
    # down: 1*1 + 2*2.5 = 6 -> relu 6 -> up (18, 0) -> gate 0.1
    out = cell(torch.tensor([1.0, 2.5]))
    assert torch.allclose(out, torch.tensor([1.8, 0.0]))
    s = AdapterCell(2, 1, gate=0.5, activation="sigmoid")
    with torch.no_grad():
        s.down.weight.zero_()
        s.down.bias.zero_()
        s.up.weight.fill_(1.0)
    assert torch.allclose(s(torch.tensor([4.0, -4.0])), torch.tensor([0.25, 0.25]))


def test_fresh_cell_outputs_zero():
    cell = AdapterCell(8, 2)
    assert torch.equal(cell(torch.randn(3, 5, 8)), torch.zeros(3, 5, 8))


def test_cell_errors():
    with pytest.raises(DimMismatch):
        AdapterCell(8, 2)(torch.randn(2, 7))
    with pytest.raises(InvalidArgument):
        AdapterCell(8, 8)
    with pytest.raises(InvalidArgument):
        DFNConfig(gate=0.0)
    with pytest.raises(InvalidArgument):
        DFNConfig(activation="gelu")


def test_attach_errors():
    m = attach_dfn(_model(), DFNConfig(r=2))
    with pytest.raises(AlreadyAttached):
        attach_dfn(m)
    with pytest.raises(NotAttached):
        freeze_backbone(_model())
    with pytest.raises(ConfigMismatch):
        attach_dfn(_model(), DFNConfig(r=2, dim=16))
    detach_dfn(m)
    assert m.dfn is None
    attach_dfn(m, DFNConfig(r=2))


def test_toy_trainable_count():
    m = attach_dfn(_model(1), DFNConfig(r=2))
    rep = freeze_backbone(m)
    cell = (8 * 2 + 2) + (2 * 8 + 8)
    heads = (8 * 8 + 8) + (12 * 8 + 12)
    assert rep.trainable_param_count == 4 * cell + heads == 168 + heads
    assert rep.trainable_param_count == count_parameters(m, trainable_only=True)
    assert rep.frozen_param_count + rep.trainable_param_count == count_parameters(m)


def test_small_r_fraction():
    for r in (1, 2):
        rep = freeze_backbone(attach_dfn(_model(2), DFNConfig(r=r)))
        assert rep.trainable_fraction < 0.25


def test_full_scale_band():
    rep = full_scale_report(FULL_SCALE_R)
    assert 0.09 <= rep.trainable_fraction <= 0.13
    assert abs(rep.trainable_param_count - 52.88e6) / 52.88e6 < 0.05
    assert rep.frozen_param_count + rep.trainable_param_count > 4e8


def test_neutral_at_attach(batch8):
    m = _model().eval()
    before = m.forward_infer(batch8.images, batch8.landmarks)
    g = torch.Generator().manual_seed(0)
    loss_before = m.forward_train(batch8, g).report.total.item()
    for tap in ("blockwise", "cls_last_layer"):
        mm = copy.deepcopy(m)
        attach_dfn(mm, DFNConfig(r=2, tap=tap))
        after = mm.forward_infer(batch8.images, batch8.landmarks)
        assert torch.equal(before.au_logits, after.au_logits)
        assert torch.equal(before.emotion_logits, after.emotion_logits)
        assert mm.forward_train(batch8, torch.Generator().manual_seed(0)).report.total.item() == loss_before


def _frozen_model(tap="blockwise"):
    m = attach_dfn(_model(), DFNConfig(r=2, tap=tap))
    freeze_backbone(m)
    return m


@pytest.mark.parametrize("tap", ["blockwise", "cls_last_layer"])
def test_gradients_only_reach_adapters_and_heads(batch8, tap):
    m = _frozen_model(tap)
    with torch.no_grad():  # give the up-projections a nonzero start so down gets gradient
        for c in m.dfn.cells.values():
            for cell in c:
                cell.up.weight.normal_(0, 0.1)
    m.forward_train(batch8).report.total.backward()
    for name, p in m.named_parameters():
        if m.is_backbone_param(name):
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    for path, cells in m.dfn.cells.items():
        assert any(torch.count_nonzero(c.up.weight.grad) > 0 for c in cells), path
        assert any(torch.count_nonzero(c.down.weight.grad) > 0 for c in cells), path
    assert torch.count_nonzero(m.emotion_head.weight.grad) > 0


def test_backbone_checksum_unchanged(batch8):
    m = _frozen_model()
    before = m.backbone_checksum()
    opt = torch.optim.AdamW(trainable_parameters(m), lr=1e-2, weight_decay=0.05)
    g = torch.Generator().manual_seed(0)
    for _ in range(3):
        finetune_step(m, batch8, opt, "emotion", g)
    assert m.backbone_checksum() == before


def test_zero_lr_leaves_adapters(batch8):
    m = _frozen_model()
    snap = {k: v.clone() for k, v in m.dfn.state_dict().items()}
    opt = torch.optim.SGD(trainable_parameters(m), lr=0.0)
    finetune_step(m, batch8, opt)
    assert all(torch.equal(snap[k], v) for k, v in m.dfn.state_dict().items())


def test_emotion_ce_decreases(fixture8, captions8):
    b = FaceBatch.from_manifest(fixture8, captions8, fixture8.samples[:4])
    m = _frozen_model()
    opt = torch.optim.AdamW(trainable_parameters(m), lr=1e-2, weight_decay=0.0)
    g = torch.Generator().manual_seed(0)
    ce = [finetune_step(m, b, opt, "emotion", g).terms["ce_emo"].item() for _ in range(6)]
    drops = sum(b_ < a for a, b_ in zip(ce, ce[1:]))
    assert drops >= 4, ce


def test_finetune_guards(batch8):
    m = attach_dfn(_model(), DFNConfig(r=2))
    opt = torch.optim.SGD(m.parameters(), lr=0.1)
    with pytest.raises(InvalidArgument):
        finetune_step(m, batch8, opt)
    with pytest.raises(NotAttached):
        finetune_step(_model(), batch8, opt)


def test_nan_loss_leaves_state(batch8):
    m = _frozen_model()
    with torch.no_grad():
        m.emotion_head.bias.fill_(float("nan"))
    snap = copy.deepcopy(m.state_dict())
    opt = torch.optim.AdamW(trainable_parameters(m), lr=1e-2)
    with pytest.raises(NaNLoss):
        finetune_step(m, batch8, opt)
    for k, v in m.state_dict().items():
        assert torch.allclose(v, snap[k], rtol=0, atol=0, equal_nan=True), k
    assert not opt.state


def test_pathways_are_disjoint():
    m = attach_dfn(_model(2), DFNConfig(r=2))
    seen = {}
    for path, cells in m.dfn.cells.items():
        for p in cells.parameters():
            assert id(p) not in seen, (path, seen.get(id(p)))
            seen[id(p)] = path


def test_visual_adapters_change_only_their_branch(batch8):
    m = _frozen_model().eval()
    base = m.forward_infer(batch8.images, batch8.landmarks)
    with torch.no_grad():
        for c in m.dfn.pathway("au", "visual"):
            c.up.weight.normal_(0, 1.0)
    out = m.forward_infer(batch8.images, batch8.landmarks)
    assert torch.equal(out.emotion_logits, base.emotion_logits)
    assert not torch.equal(out.au_logits, base.au_logits)


def test_report_groups():
    rep = parameter_report(_frozen_model())
    assert rep.groups["dfn.cells.emo_visual"]["trainable"] == rep.groups["dfn.cells.emo_visual"]["params"]
    assert rep.groups["branches.au.qformer"]["trainable"] == 0
    assert set(rep.to_json()) == {"frozen_param_count", "trainable_param_count", "trainable_fraction", "groups"}
