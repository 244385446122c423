import math

import numpy as np
import pytest
import torch

from domgen.data import ObjectAnnotation, ObjectKind
from domgen.model import (
    CHECKPOINT_FORMAT,
    ConfigError,
    DetectionSet,
    DetectorModel,
    ModelConfig,
    box_to_deltas,
    class_scores,
    decode_and_nms,
    deltas_to_box,
    encode_targets,
    generate_anchors,
    gradient_reversal,
    images_to_tensor,
    load_checkpoint,
    save_checkpoint,
)

from conftest import tiny_model_config


# --------------------------------------------------------------------------
# config


def test_default_config_geometry():
    c = ModelConfig()
    assert c.total_stride == 32
    assert c.strides == (8, 16, 32)
    assert c.num_anchors_per_cell == 9
    assert c.num_classes == 2
    assert ModelConfig(hard_negative_class=True).num_classes == 3


@pytest.mark.parametrize(
    "kw", [dict(encoder_widths=[8, 8, 8]), dict(num_domains=1), dict(dropout_p=1.0), dict(patch_size=100),
           dict(num_anchors_per_cell=4)],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_roundtrip():
    c = tiny_model_config(hard_negative_class=True)
    assert ModelConfig.from_dict(c.to_dict()) == c


# --------------------------------------------------------------------------
# gradient reversal


def test_grl_forward_is_identity():
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(gradient_reversal(x, 0.7), x)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0, 2.5])
def test_grl_backward_scales_by_minus_alpha(alpha):
    x = torch.randn(5, dtype=torch.float64, requires_grad=True)
    w = torch.randn(5, dtype=torch.float64)
    (gradient_reversal(x, alpha) * w).sum().backward()
    torch.testing.assert_close(x.grad, -alpha * w, rtol=0, atol=0)


def test_grl_rejects_negative_alpha():
    with pytest.raises(ValueError):
        gradient_reversal(torch.zeros(1), -0.1)


def test_grl_against_finite_differences():
    # d/dx of f(grl(x)) must equal -alpha * f'(x); check against central differences of f
    torch.manual_seed(1)
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    f = lambda t: (torch.sin(t) * t).sum()
    alpha = 0.4
    f(gradient_reversal(x, alpha)).backward()
    eps = 1e-6
    fd = []
    for i in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[i] = eps
        fd.append((f(x.detach() + e) - f(x.detach() - e)).item() / (2 * eps))
    np.testing.assert_allclose(x.grad.numpy(), -alpha * np.array(fd), rtol=1e-6)


# --------------------------------------------------------------------------
# network


def test_forward_shapes(tiny_config):
    model = DetectorModel(tiny_config)
    out = model(torch.rand(2, 3, 64, 64))
    n = len(generate_anchors(tiny_config, 64))
    assert out.class_logits.shape == (2, n, 2)
    assert out.box_deltas.shape == (2, n, 4)
    assert out.domain_logits.shape == (2, 2)
    assert out.features.shape == (2, 8, 2, 2)


def test_forward_rejects_non_multiple_of_stride(tiny_config):
    with pytest.raises(ConfigError, match="stride"):
        DetectorModel(tiny_config)(torch.rand(1, 3, 48, 64))


def test_class_prior_at_init(tiny_config):
    model = DetectorModel(tiny_config).eval()
    with torch.no_grad():
        s = class_scores(model(torch.rand(1, 3, 64, 64)).class_logits)
    assert abs(float(s.mean()) - 0.01) < 0.005


def test_detach_domain_blocks_encoder_gradient(tiny_config):
    model = DetectorModel(tiny_config)
    out = model(torch.rand(2, 3, 64, 64), alpha=1.0, detach_domain=True)
    out.domain_logits.sum().backward()
    assert all(p.grad is None or not p.grad.any() for p in model.encoder.parameters())
    assert any(p.grad is not None and p.grad.any() for p in model.discriminator.parameters())


def test_images_to_tensor():
    im = np.zeros((4, 4, 3), np.uint8)
    im[..., 0] = 255
    t = images_to_tensor([im])
    assert t.shape == (1, 3, 4, 4) and t.dtype == torch.float32
    assert t[0, 0].eq(1).all() and t[0, 1].eq(0).all()
    rng = np.random.default_rng(0)
    n = images_to_tensor([rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)], normalize=True, dtype=torch.float64)
    torch.testing.assert_close(n.mean(dim=(2, 3)), torch.zeros(1, 3, dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(n.std(dim=(2, 3), unbiased=False), torch.ones(1, 3, dtype=torch.float64), atol=1e-5, rtol=0)


# --------------------------------------------------------------------------
# anchors and targets


def test_anchor_layout(tiny_config):
    a = generate_anchors(tiny_config, 64)
    # levels at strides 8/16/32 over a 64px patch: 64 + 16 + 4 cells, 9 anchors each
    assert len(a) == (64 + 16 + 4) * 9
    first = a[0]
    assert first.center == (4.0, 4.0) and first.level == 0
    # ratio 0.5: w = size/sqrt(0.5), h = size*sqrt(0.5), size = base*stride
    assert first.width == pytest.approx(32 / math.sqrt(0.5))
    assert first.height == pytest.approx(32 * math.sqrt(0.5))
    assert a[9].center == (12.0, 4.0)
    assert generate_anchors(tiny_config, (64, 32)) != a
    assert generate_anchors(tiny_config, 64) == a


def test_anchor_arrays_read_only(tiny_config):
    with pytest.raises(ValueError):
        generate_anchors(tiny_config, 64).boxes[0, 0] = 1.0


def test_delta_roundtrip():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 100, (20, 2))
    a = np.hstack([xy, xy + rng.uniform(5, 40, (20, 2))])
    xy2 = rng.uniform(0, 100, (20, 2))
    b = np.hstack([xy2, xy2 + rng.uniform(5, 40, (20, 2))])
    np.testing.assert_allclose(deltas_to_box(a, box_to_deltas(a, b)), b, atol=1e-9)


def test_encode_targets_positive_ignore_background():
    anchors = np.array([[0.0, 0, 10, 10], [2.0, 0, 12, 10], [5.0, 0, 15, 10], [50.0, 50, 60, 60]])
    gt = [ObjectAnnotation((5.0, 5.0), (0.0, 0.0, 10.0, 10.0))]
    cls, deltas, mask = encode_targets(anchors, gt, 0.5, 0.3)
    # IoUs: 1, 8/12, 5/15, 0
    assert cls.tolist() == [1, 1, 0, 0]
    assert mask.tolist() == [True, True, False, True]
    np.testing.assert_allclose(deltas[0], 0.0)
    assert not deltas[2:].any()


def test_hard_negatives_ignored_unless_requested():
    anchors = np.array([[0.0, 0, 10, 10]])
    gt = [ObjectAnnotation((5.0, 5.0), (0.0, 0.0, 10.0, 10.0), ObjectKind.HARD_NEGATIVE)]
    assert encode_targets(anchors, gt)[0].tolist() == [0]
    assert encode_targets(anchors, gt, hard_negative_class=True)[0].tolist() == [2]


def test_encode_targets_threshold_order():
    with pytest.raises(ValueError):
        encode_targets(np.zeros((1, 4)), [], 0.4, 0.5)


# --------------------------------------------------------------------------
# decoding


def test_decode_and_nms_suppresses_duplicates():
    anchors = np.array([[0.0, 0, 10, 10], [1.0, 0, 11, 10], [40.0, 40, 50, 50], [80.0, 80, 90, 90]])
    scores = np.array([0.9, 0.8, 0.7, 0.01])
    det = decode_and_nms(scores, np.zeros((4, 4)), anchors, 0.05, 0.5)
    np.testing.assert_allclose(det.scores, [0.9, 0.7])
    np.testing.assert_allclose(det.centers, [[5, 5], [45, 45]])


def test_decode_respects_max_detections():
    anchors = np.array([[i * 20.0, 0, i * 20 + 10, 10] for i in range(10)])
    det = decode_and_nms(np.linspace(0.9, 0.5, 10), np.zeros((10, 4)), anchors, max_detections=3)
    assert len(det) == 3


def test_class_scores_is_softmax_foreground():
    logits = np.array([[0.0, 0.0], [2.0, -1.0]])
    np.testing.assert_allclose(class_scores(logits), [0.5, 1 / (1 + math.e**3)])


def test_detection_records_roundtrip():
    d = DetectionSet(np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]]), np.array([0.9, 0.3]), "x")
    back = DetectionSet.from_records(d.to_records(), "x")
    np.testing.assert_array_equal(back.boxes, d.boxes)
    np.testing.assert_array_equal(back.scores, d.scores)
    assert len(DetectionSet.from_records([])) == 0


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, tiny_config):
    model = DetectorModel(tiny_config)
    with torch.no_grad():
        model(torch.rand(4, 3, 64, 64))  # touch BN running stats
    model.train()
    model(torch.rand(4, 3, 64, 64))
    path = save_checkpoint(tmp_path / "m.ckpt", model, epoch=3, alpha_progress=0.4, extra={"k": 1})
    loaded, meta = load_checkpoint(path)
    assert meta["format"] == CHECKPOINT_FORMAT
    assert meta["epoch"] == 3 and meta["extra"] == {"k": 1}
    assert loaded.config == tiny_config
    for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    x = torch.rand(1, 3, 64, 64)
    model.eval()
    assert torch.equal(model(x).class_logits, loaded(x).class_logits)


def test_checkpoint_format_checked(tmp_path):
    np.savez(tmp_path / "bad.npz", __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(tmp_path / "bad.npz")
