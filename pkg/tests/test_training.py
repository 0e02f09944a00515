import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from roipoly.config import RunConfig
from roipoly.geometry import is_simple, rasterize
from roipoly.training import (
    LossReport,
    RoIPolyModel,
    TrainingDivergence,
    class_loss,
    collate,
    coord_loss,
    evaluate_loss,
    gen_synthetic,
    infer,
    load_model,
    save_model,
    threshold_vertices,
    total_loss,
    train_toy,
    write_loss_csv,
)

SMALL = RunConfig(M=8, N=4, L=2, C=16, heads=2, K=2, batch_size=4)


@pytest.fixture(scope="module")
def tiny_data():
    return gen_synthetic(3, 8, shapes=("rect",), M=SMALL.M)


def test_coord_loss_examples():
    t = torch.rand(2, 5, 2)
    assert coord_loss(t.clone(), t).item() == 0.0
    pred = torch.tensor([[[0.1, 0.2]]], dtype=torch.float64)
    assert coord_loss(pred, torch.zeros(1, 1, 2, dtype=torch.float64)).item() == pytest.approx(0.3, abs=1e-15)
    assert coord_loss(torch.rand(3, 4, 2), torch.zeros(0, 4, 2)).item() == 0.0


def test_coord_loss_normalization():
    pred = torch.zeros(3, 2, 2, dtype=torch.float64)
    target = torch.ones(2, 2, 2, dtype=torch.float64)
    # 2 groups * 2 vertices * (1 + 1) / (2 * 2)
    assert coord_loss(pred, target).item() == 2.0


def test_coord_loss_ignores_padded_groups():
    pred, target = torch.rand(4, 6, 2), torch.rand(2, 6, 2)
    base = coord_loss(pred, target)
    pred2 = pred.clone()
    pred2[2:] = torch.rand(2, 6, 2) * 100
    assert torch.equal(coord_loss(pred2, target), base)
    with pytest.raises(ValueError):
        coord_loss(torch.rand(1, 6, 2), target)


def test_class_loss_worked_example():
    logits = torch.tensor([[0.0]], dtype=torch.float64)
    labels = torch.tensor([[1.0]], dtype=torch.float64)
    got = class_loss(logits, labels, alpha=0.25, gamma=2.0).item()
    assert got == pytest.approx(-0.25 * 0.25 * math.log(0.5), rel=1e-15)
    assert round(got, 5) == 0.04332


@given(st.lists(st.floats(-8, 8), min_size=1, max_size=12), st.integers(0, 2**12))
@settings(max_examples=50, deadline=None)
def test_class_loss_gamma0_is_half_bce(logits, bits):
    x = torch.tensor(logits, dtype=torch.float64)
    y = torch.tensor([(bits >> k) & 1 for k in range(len(logits))], dtype=torch.float64)
    bce = []
    for xi, yi in zip(logits, y.tolist()):
        p = 1 / (1 + math.exp(-xi))
        bce.append(-(yi * math.log(p) + (1 - yi) * math.log(1 - p)))
    assert class_loss(x, y, alpha=0.5, gamma=0.0).item() == pytest.approx(0.5 * np.mean(bce), rel=1e-9)


def test_class_loss_confident_is_zero():
    labels = torch.tensor([1.0, 0.0])
    assert class_loss(torch.tensor([40.0, -40.0]), labels).item() < 1e-30


def test_class_loss_sees_padded_groups():
    logits, labels = torch.randn(4, 6), torch.zeros(4, 6)
    labels[:2, :3] = 1
    base = class_loss(logits, labels)
    logits2 = logits.clone()
    logits2[3] += 1.0
    assert not torch.equal(class_loss(logits2, labels), base)


def test_class_loss_clamped_log():
    # saturated sigmoid gives p_t = 0 in float32; the clamp keeps the value finite
    out = class_loss(torch.tensor([-200.0]), torch.tensor([1.0]), alpha=1.0, gamma=0.0)
    assert math.isfinite(out.item())
    assert out.item() == pytest.approx(-math.log(1e-12), rel=1e-6)


def test_total_loss():
    r = total_loss(0.3, 0.2, 1.0, 1.0)
    assert isinstance(r, LossReport)
    assert r.total == 0.5
    assert total_loss(0.3, 0.2, 5.0, 0.0).total == 5.0 * 0.3
    a, b = total_loss(0.37, 0.11, 5.0, 2.0), total_loss(0.37, 0.11, 15.0, 6.0)
    assert b.total == pytest.approx(3 * a.total, rel=1e-15)
    assert a.total == 5.0 * 0.37 + 2.0 * 0.11


def test_gen_synthetic_deterministic():
    a = gen_synthetic(11, 5)
    b = gen_synthetic(11, 5)
    for x, y in zip(a, b):
        assert np.array_equal(x.image.data, y.image.data)
        assert x.gt_polygons == y.gt_polygons
        assert x.gt_boxes == y.gt_boxes
        for s, t in zip(x.targets, y.targets):
            assert np.array_equal(s.vertices, t.vertices) and np.array_equal(s.labels, t.labels)
    c = gen_synthetic(12, 5)
    assert any(not np.array_equal(x.image.data, z.image.data) for x, z in zip(a, c))


def test_gen_synthetic_contents():
    data = gen_synthetic(5, 30, grid=64)
    counts = set()
    for s in data:
        assert s.image.data.shape == (2, 64, 64)
        assert 1 <= len(s.gt_polygons) <= 4
        counts.add(len(s.gt_polygons))
        union = np.zeros((64, 64), bool)
        total = 0
        for p, box, t in zip(s.gt_polygons, s.gt_boxes, s.targets):
            assert is_simple(p)
            m = rasterize(p, 64, 64).bits
            total += m.sum()
            union |= m
            v = p.vertices
            assert box.x_min <= v[:, 0].min() and v[:, 0].max() <= box.x_max
            assert box.y_min <= v[:, 1].min() and v[:, 1].max() <= box.y_max
            assert t.mode == "index" and t.vertices.shape == (12, 2)
        # polygons never overlap and the occupancy channel is exactly their union
        assert total == union.sum()
        assert np.array_equal(s.image.data[0].astype(bool), union)
        boundary = s.image.data[1].astype(bool)
        assert not np.any(boundary & ~union)
    assert len(counts) > 1
    with pytest.raises(ValueError):
        gen_synthetic(0, 1, grid=32)


def test_collate_pads_groups(tiny_data):
    batch = collate(tiny_data[:2], SMALL)
    N = SMALL.N
    assert batch.boxes.shape == (2 * N, 4)
    for b, s in enumerate(tiny_data[:2]):
        k = len(s.gt_polygons)
        assert batch.n_gt[b] == k
        assert torch.all(batch.labels[b, k:] == 0)
        assert torch.all(batch.boxes[b * N + k : (b + 1) * N] == torch.tensor([0.0, 0.0, 64.0, 64.0]))
        np.testing.assert_allclose(batch.targets[b, :k].numpy(), np.stack([t.vertices for t in s.targets]) / 64, rtol=1e-6)


def test_zero_lr_keeps_parameters(tiny_data):
    cfg = RunConfig.from_dict({**SMALL.to_dict(), "lr": 0.0})
    torch.manual_seed(cfg.seed)
    model = RoIPolyModel(cfg)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    res = train_toy(cfg, tiny_data, epochs=2, model=model)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k])
    assert res.curve[0] == res.curve[1]


def test_training_is_deterministic(tiny_data):
    a = train_toy(SMALL, tiny_data, epochs=2)
    b = train_toy(SMALL, tiny_data, epochs=2)
    assert [r.total for r in a.curve] == [r.total for r in b.curve]
    for (k, v), (_, w) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(v, w), k


def test_loss_decreases_first_five_epochs():
    data = gen_synthetic(0, 50, shapes=("rect",))
    curve = [r.total for r in train_toy(RunConfig(), data, epochs=5).curve]
    assert all(b < a for a, b in zip(curve, curve[1:])), curve


def test_checkpoint_round_trip(tmp_path, tiny_data):
    res = train_toy(SMALL, tiny_data, epochs=1)
    save_model(res.model, tmp_path / "m.rpck")
    back = load_model(tmp_path / "m.rpck")
    assert back.cfg == SMALL
    assert evaluate_loss(back, tiny_data) == evaluate_loss(res.model, tiny_data)


def test_nan_aborts(tiny_data):
    model = RoIPolyModel(SMALL)
    with torch.no_grad():
        model.decoder.query_content[0, 0] = float("nan")
    with pytest.raises(TrainingDivergence):
        train_toy(SMALL, tiny_data, epochs=1, model=model)


def test_loss_csv(tmp_path):
    write_loss_csv([total_loss(0.5, 0.25, 5.0, 2.0)], tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines == ["epoch,l_cor,l_cls,total", "1,0.5,0.25,3.0"]


def _fresh_model(logit):
    torch.manual_seed(0)
    model = RoIPolyModel(RunConfig())
    with torch.no_grad():
        model.decoder.query_logits.fill_(logit)
    return model.eval()


def test_infer_threshold_rules():
    img = gen_synthetic(0, 1)[0]
    model = _fresh_model(-10.0)
    pyr = model.pyramid.build(img.image)
    preds = infer(pyr, img.gt_boxes, model, 0.5)
    assert len(preds) == len(img.gt_boxes)
    assert all(p.polygon is None and len(p.slots) == 0 for p in preds)
    full = infer(pyr, img.gt_boxes, model, 0.0)
    assert all(len(p.slots) == 12 for p in full)
    assert infer(pyr, [], model, 0.5) == []
    with pytest.raises(ValueError):
        infer(pyr, img.gt_boxes, model, 1.0)


def test_infer_keeps_slot_order():
    img = gen_synthetic(0, 1)[0]
    model = _fresh_model(0.0)
    with torch.no_grad():
        model.decoder.query_logits.copy_(torch.tensor([3.0, -3.0] * 6))
    pyr = model.pyramid.build(img.image)
    for p in infer(pyr, img.gt_boxes, model, 0.5):
        assert p.slots.tolist() == list(range(0, 12, 2))
        assert np.array_equal(p.vertices, p.raw_xy[::2])
        assert p.polygon is not None and len(p.polygon) == 6


def test_threshold_vertices():
    assert threshold_vertices(np.array([0.2, 0.5, 0.9, 0.49]), 0.5).tolist() == [1, 2]
