import math
import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cycconf import cycmatch
from cycconf.cycmatch import ContractError
from cycconf.detector import (DetectionLoss, DetectorConfig, ProposalSet, ToyDetector, detection_loss,
                              forward_detection, load_checkpoint, roi_align, save_checkpoint,
                              select_proposals)
from cycconf.detector import boxes as box_ops
from cycconf.detector.checkpoint import CheckpointError, read_manifest
from cycconf.detector.losses import SMOOTH_L1_BETA, label_anchors


@pytest.fixture
def model():
    torch.manual_seed(0)
    return ToyDetector()


def _images(n=2, seed=0):
    return torch.rand((n, 3, 128, 128), generator=torch.Generator().manual_seed(seed))


# ---------------------------------------------------------------------------- backbone

def test_backbone_shapes_and_finiteness(model):
    f = model.backbone_forward(torch.zeros((1, 3, 128, 128)))
    assert f.shape == (1, 32, 16, 16) and torch.isfinite(f).all()
    x = _images(1)
    a = model.backbone_forward(torch.cat([x, x]))
    assert torch.equal(a[0], a[1])


def test_backbone_rejects_wrong_shape(model):
    with pytest.raises(ContractError):
        model.backbone_forward(torch.zeros((1, 1, 128, 128)))
    with pytest.raises(ContractError):
        model.backbone_forward(torch.zeros((3, 128, 128)))


def test_odd_sizes_round_up(model):
    f = model.backbone_forward(torch.zeros((1, 3, 100, 60)))
    assert f.shape[2:] == (math.ceil(100 / 8), math.ceil(60 / 8))


# ---------------------------------------------------------------------------- boxes / proposals

def test_zero_delta_decodes_to_anchor():
    anchors = box_ops.grid_anchors(16, 16, 8, 24.0, torch.float64)
    assert anchors.shape == (256, 4)
    i, j = 3, 5
    a = anchors[i * 16 + j]
    assert a.tolist() == [(j + 0.5) * 8 - 12, (i + 0.5) * 8 - 12, (j + 0.5) * 8 + 12, (i + 0.5) * 8 + 12]
    torch.testing.assert_close(box_ops.decode(anchors, torch.zeros_like(anchors)), anchors)


def test_encode_decode_roundtrip(rng):
    ref = torch.tensor([[10.0, 12.0, 40.0, 30.0], [0.0, 0.0, 8.0, 16.0]], dtype=torch.float64)
    tgt = torch.tensor([[14.0, 10.0, 35.0, 41.0], [2.0, 1.0, 7.0, 20.0]], dtype=torch.float64)
    torch.testing.assert_close(box_ops.decode(ref, box_ops.encode(ref, tgt)), tgt)


def test_box_iou_hand_value():
    a = torch.tensor([[0.0, 0.0, 2.0, 2.0]])
    b = torch.tensor([[1.0, 1.0, 3.0, 3.0], [5.0, 5.0, 6.0, 6.0]])
    torch.testing.assert_close(box_ops.box_iou(a, b), torch.tensor([[1 / 7, 0.0]]))


def test_untrained_proposals(model):
    x = _images(2)
    props = model.propose(model.backbone_forward(x), (128, 128))
    for p in props:
        assert 0 < len(p) <= 64
        assert ((p.scores >= 0) & (p.scores <= 1)).all()
        assert (p.scores[:-1] >= p.scores[1:]).all()
        assert (p.boxes[:, 0] >= 0).all() and (p.boxes[:, 2] <= 128).all()
        assert (p.boxes[:, 2] > p.boxes[:, 0]).all() and (p.boxes[:, 3] > p.boxes[:, 1]).all()
        assert not p.boxes.requires_grad


def test_proposal_cap_respected():
    torch.manual_seed(1)
    m = ToyDetector(DetectorConfig(max_proposals=10))
    props = m.propose(m.backbone_forward(_images(1)), (128, 128))
    assert len(props[0]) == 10


def _pset(scores):
    s = torch.tensor(scores)
    return ProposalSet(torch.arange(len(scores) * 4, dtype=torch.float32).reshape(-1, 4) + 1, s)


def test_select_proposals_examples():
    kept = select_proposals(_pset([0.9, 0.5]), 0.8)
    assert kept.scores.tolist() == pytest.approx([0.9])
    allp = _pset([0.9, 0.2, 0.5])
    assert torch.equal(select_proposals(allp, 0.0).scores, allp.scores)
    assert len(select_proposals(allp, 0.0, cap=2)) == 2
    assert len(select_proposals(_pset([0.1, 0.2]), 0.8)) == 0
    mixed = select_proposals(_pset([0.95, 0.1, 0.85, 0.9]), 0.8)
    assert mixed.scores.tolist() == pytest.approx([0.95, 0.85, 0.9])


# ---------------------------------------------------------------------------- roi align

def _bilinear(fm, y, x):
    H, W = fm.shape[-2:]
    y = min(max(y, 0.0), H - 1)
    x = min(max(x, 0.0), W - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * fm[..., y0, x0] + (1 - fy) * fx * fm[..., y0, x1]
            + fy * (1 - fx) * fm[..., y1, x0] + fy * fx * fm[..., y1, x1])


def _roi_oracle(fm, box, out, scale, ratio):
    x1, y1, x2, y2 = [v * scale - 0.5 for v in box]
    bw, bh = (x2 - x1) / out, (y2 - y1) / out
    res = torch.zeros((fm.shape[0], out, out), dtype=fm.dtype)
    for i in range(out):
        for j in range(out):
            acc = 0
            for a in range(ratio):
                for b in range(ratio):
                    acc = acc + _bilinear(fm, y1 + (i + (a + 0.5) / ratio) * bh, x1 + (j + (b + 0.5) / ratio) * bw)
            res[:, i, j] = acc / ratio ** 2
    return res


@pytest.mark.parametrize("ratio", [1, 2])
def test_roi_align_matches_brute_force(rng, ratio):
    fm = torch.tensor(rng.normal(size=(1, 3, 16, 16)))
    boxes = torch.tensor([[0.0, 0.0, 128.0, 128.0], [13.0, 20.5, 60.0, 41.0], [100.0, 3.0, 127.0, 90.0]],
                         dtype=torch.float64)
    got = roi_align(fm, [boxes], 7, 1 / 8, ratio)
    for k in range(3):
        torch.testing.assert_close(got[k], _roi_oracle(fm[0], boxes[k].tolist(), 7, 1 / 8, ratio),
                                   atol=1e-12, rtol=0)


def test_full_map_box_downsamples():
    # a 14x14 map pooled to 7x7 with one sample per bin hits exact 2x2 block centres
    fm = torch.arange(196, dtype=torch.float64).reshape(1, 1, 14, 14)
    out = roi_align(fm, [torch.tensor([[0.0, 0.0, 14.0, 14.0]], dtype=torch.float64)], 7, 1.0, 1)
    ref = F.avg_pool2d(fm, 2)
    torch.testing.assert_close(out, ref)


def test_roi_constant_map():
    fm = torch.full((1, 4, 16, 16), 2.5)
    out = roi_align(fm, [torch.tensor([[3.0, 7.0, 50.0, 90.0]])])
    torch.testing.assert_close(out, torch.full_like(out, 2.5))


def test_roi_translation_equivariance(rng):
    fm = torch.tensor(rng.normal(size=(1, 2, 16, 16)))
    shifted = torch.roll(fm, shifts=1, dims=3)
    box = torch.tensor([[20.0, 30.0, 70.0, 80.0]], dtype=torch.float64)
    a = roi_align(fm, [box])
    b = roi_align(shifted, [box + torch.tensor([8.0, 0.0, 8.0, 0.0], dtype=torch.float64)])
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_roi_degenerate_box():
    with pytest.raises(ContractError):
        roi_align(torch.zeros((1, 1, 4, 4)), [torch.tensor([[5.0, 5.0, 5.0, 9.0]])])
    with pytest.raises(ContractError):
        roi_align(torch.zeros((2, 1, 4, 4)), [torch.zeros((0, 4))])


def test_roi_batch_routing(rng):
    fm = torch.tensor(rng.normal(size=(2, 2, 16, 16)))
    box = torch.tensor([[8.0, 8.0, 64.0, 64.0]], dtype=torch.float64)
    out = roi_align(fm, [box, box])
    torch.testing.assert_close(out[0], roi_align(fm[:1], [box])[0])
    torch.testing.assert_close(out[1], roi_align(fm[1:], [box])[0])


# ---------------------------------------------------------------------------- instance encoder

def test_encoder_zero_and_determinism(model):
    for mod in model.encoder:
        if isinstance(mod, torch.nn.Conv2d):
            torch.nn.init.zeros_(mod.bias)
    zero = model.instance_encoder(torch.zeros((2, 32, 7, 7)))
    assert zero.shape == (2, 128) and not zero.any()
    x = torch.randn((1, 32, 7, 7))
    pair = model.instance_encoder(torch.cat([x, x]))
    assert torch.equal(pair[0], pair[1])


def test_encoder_pooling_identity(model):
    conv1, _, conv2 = model.encoder
    torch.nn.init.zeros_(conv1.weight)
    torch.nn.init.zeros_(conv2.weight)
    out = model.instance_encoder(torch.randn((1, 32, 7, 7)))
    post = model.encoder(torch.randn((1, 32, 7, 7)))
    torch.testing.assert_close(out[0], post[0, :, 3, 3])
    torch.testing.assert_close(out[0], conv2.bias.detach())


def test_encoder_shape_mismatch(model):
    with pytest.raises(ContractError):
        model.instance_encoder(torch.zeros((1, 32, 5, 5)))


# ---------------------------------------------------------------------------- detection loss

def _smooth_l1(d):
    d = abs(d)
    return 0.5 * d * d / SMOOTH_L1_BETA if d < SMOOTH_L1_BETA else d - 0.5 * SMOOTH_L1_BETA


def test_single_anchor_scalar_oracle():
    gt = [10.0, 10.0, 30.0, 34.0]
    anchor = [8.0, 12.0, 32.0, 36.0]
    z, d = 0.7, [0.05, -0.3, 0.2, 0.01]
    roi = [12.0, 9.0, 31.0, 33.0]
    cls_logits, rd = [0.2, -0.4, 1.1, 0.3], [0.01, 0.02, -0.5, 0.04]
    t = torch.float64
    pred = {"anchors": torch.tensor([anchor], dtype=t), "rpn_logits": torch.tensor([z], dtype=t),
            "rpn_deltas": torch.tensor([d], dtype=t), "rois": torch.tensor([roi], dtype=t),
            "roi_logits": torch.tensor([cls_logits], dtype=t), "roi_deltas": torch.tensor([rd], dtype=t)}
    loss = detection_loss(pred, torch.tensor([gt], dtype=t), torch.tensor([1]))

    def enc(r, g):
        rw, rh, gw, gh = r[2] - r[0], r[3] - r[1], g[2] - g[0], g[3] - g[1]
        return [((g[0] + gw / 2) - (r[0] + rw / 2)) / rw, ((g[1] + gh / 2) - (r[1] + rh / 2)) / rh,
                math.log(gw / rw), math.log(gh / rh)]

    obj = math.log(1 + math.exp(-z))
    rbox = sum(_smooth_l1(p - q) for p, q in zip(d, enc(anchor, gt)))
    cls = math.log(sum(math.exp(v) for v in cls_logits)) - cls_logits[2]
    cbox = sum(_smooth_l1(p - q) for p, q in zip(rd, enc(roi, gt)))
    for got, want in zip((loss.rpn_objectness, loss.rpn_box, loss.roi_cls, loss.roi_box), (obj, rbox, cls, cbox)):
        assert abs(got.item() - want) < 1e-10
    assert loss.total.item() == (loss.rpn_objectness + loss.rpn_box + loss.roi_cls + loss.roi_box).item()


def test_perfect_predictions():
    t = torch.float64
    gt = torch.tensor([[10.0, 10.0, 40.0, 40.0]], dtype=t)
    pred = {"anchors": gt.clone(), "rpn_logits": torch.tensor([30.0], dtype=t),
            "rpn_deltas": torch.zeros((1, 4), dtype=t), "rois": gt.clone(),
            "roi_logits": torch.tensor([[-30.0, -30.0, 30.0, -30.0]], dtype=t),
            "roi_deltas": torch.zeros((1, 4), dtype=t)}
    loss = detection_loss(pred, gt, torch.tensor([1]))
    assert float(loss.rpn_box) == 0.0 and float(loss.roi_box) == 0.0
    assert float(loss.rpn_objectness) < 1e-10 and float(loss.roi_cls) < 1e-10


def test_anchor_labels_best_anchor_rule():
    anchors = torch.tensor([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0], [0.0, 0.0, 30.0, 30.0]])
    gt = torch.tensor([[2.0, 2.0, 12.0, 12.0]])
    labels, idx = label_anchors(anchors, gt)
    assert labels.tolist() == [1, 0, 0] or labels[0] == 1
    assert labels[1] == 0


def test_loss_components_nonnegative_and_sum(model):
    x = _images(2)
    feats = model.backbone_forward(x)
    gb = [torch.tensor([[10.0, 10.0, 40.0, 40.0]]), torch.zeros((0, 4))]
    gl = [torch.tensor([2]), torch.zeros(0, dtype=torch.long)]
    losses, _ = forward_detection(model, feats, (128, 128), gb, gl)
    for L in losses:
        d = L.as_dict()
        assert all(v >= 0 and math.isfinite(v) for v in d.values())
        assert d["total"] == pytest.approx(sum(v for k, v in d.items() if k != "total"), abs=1e-6)
    mean = DetectionLoss.mean(losses)
    assert mean.total.item() == pytest.approx(((losses[0].total + losses[1].total) / 2).item(), abs=1e-6)


def test_end_to_end_finite_difference_probe():
    torch.manual_seed(3)
    model = ToyDetector().double()
    x = _images(2, seed=4).double()
    gb = [torch.tensor([[20.0, 30.0, 50.0, 60.0]], dtype=torch.float64),
          torch.tensor([[22.0, 30.0, 52.0, 60.0]], dtype=torch.float64)]
    gl = [torch.tensor([0]), torch.tensor([0])]
    with torch.no_grad():
        proposals = model.propose(model.backbone_forward(x), (128, 128))
    picked = [select_proposals(p, 0.0, 6) for p in proposals]

    def objective():
        feats = model.backbone_forward(x)
        det, _ = forward_detection(model, feats, (128, 128), gb, gl, proposals=proposals)
        emb = model.instance_encoder(model.roi_features(feats, [p.boxes for p in picked]))
        ssl, _ = cycmatch.torch_cycle_loss(emb[:6], emb[6:])
        return DetectionLoss.mean(det).total + 0.01 * ssl

    probes = [(model.backbone[0].weight, (0, 0, 1, 1)), (model.backbone[6].bias, (3,))]
    model.zero_grad()
    objective().backward()
    for param, idx in probes:
        analytic = float(param.grad[idx])
        h = 1e-6
        with torch.no_grad():
            old = float(param[idx])
            param[idx] = old + h
            up = objective().item()
            param[idx] = old - h
            down = objective().item()
            param[idx] = old
        fd = (up - down) / (2 * h)
        assert abs(analytic - fd) / max(abs(fd), 1e-8) < 1e-3


# ---------------------------------------------------------------------------- inference / checkpoint

def test_detect_output_contract(model):
    out = model.detect(_images(2))
    assert len(out) == 2
    for d in out:
        assert d["boxes"].shape[0] == d["scores"].shape[0] == d["labels"].shape[0] <= 100
        assert (d["scores"] >= 0.05).all()
        assert ((d["labels"] >= 0) & (d["labels"] < 3)).all()


def test_forward_determinism():
    outs = []
    for _ in range(2):
        torch.manual_seed(7)
        m = ToyDetector()
        outs.append(m.rpn_forward(m.backbone_forward(_images(1)))[0])
    assert torch.equal(outs[0], outs[1])


def test_checkpoint_roundtrip(model, tmp_path):
    sha = save_checkpoint(model, tmp_path / "m.ckpt", extra={"note": "x"})
    assert sha == save_checkpoint(model, tmp_path / "m2.ckpt", extra={"note": "x"})
    loaded, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert manifest["extra"] == {"note": "x"} and manifest["config"]["embed_dim"] == 128
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    raw = (tmp_path / "m.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    assert read_manifest(tmp_path / "m.ckpt")["tensors"][0]["offset"] == 0
    total = sum(t["nbytes"] for t in manifest["tensors"])
    assert len(raw) == 8 + n + total


def test_checkpoint_errors(model, tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(struct.pack("<Q", 4) + b"\xff\xfe{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    save_checkpoint(model, tmp_path / "t.ckpt")
    (tmp_path / "t.ckpt").write_bytes((tmp_path / "t.ckpt").read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
