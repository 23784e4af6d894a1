import numpy as np
import pytest
import torch
import torch.nn as nn

from hybridps.model import (
    BACKGROUND,
    ModelConfig,
    PersonSearchModel,
    decode_deltas,
    encode_deltas,
    image_to_tensor,
    match_boxes,
    register_encoder,
)
from hybridps.utils import rng_for

from oracles import brute_force_match, finite_diff_grad, rel_err


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = PersonSearchModel(ModelConfig())
    m.eval()
    return m


class TestEncoder:
    def test_zero_image_finite(self, model):
        f = model.encode(torch.zeros(3, 64, 64))
        assert torch.isfinite(f.fmap).all()

    def test_eval_determinism(self, model):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(1))
        a = model.encode(img).fmap
        b = model.encode(img.clone()).fmap
        assert torch.equal(a, b)

    def test_stride_shape_arithmetic(self, model):
        f = model.encode(torch.zeros(3, 256, 256))
        assert f.stride == 8
        assert f.fmap.shape[1:] == (32, 32)
        # ceil rule on a non-multiple size
        f2 = model.encode(torch.zeros(3, 70, 70))
        assert f2.fmap.shape[1:] == (int(np.ceil(70 / 8)), int(np.ceil(70 / 8)))


class TestProposals:
    def test_gt_append_guarantees_positive(self, model):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(2))
        feats = model.encode(img)
        gt = [[10.0, 10.0, 30.0, 50.0]]
        props = model.propose(feats, gt_boxes=gt, training=True)
        assert (props.matched_gt == 0).any()

    def test_zero_gt_all_background(self, model):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(3))
        feats = model.encode(img)
        props = model.propose(feats, gt_boxes=[], training=True)
        assert (props.matched_gt == BACKGROUND).all()

    def test_matcher_against_brute_force(self):
        rng = rng_for(4, "match")
        for _ in range(50):
            n, m = int(rng.integers(1, 12)), int(rng.integers(1, 6))
            def boxes(k):
                x0 = rng.uniform(0, 40, k)
                y0 = rng.uniform(0, 40, k)
                return np.stack([x0, y0, x0 + rng.uniform(2, 24, k),
                                 y0 + rng.uniform(2, 24, k)], axis=1)
            cands = boxes(n)
            gts = boxes(m)
            got = match_boxes(torch.tensor(cands, dtype=torch.float32),
                              torch.tensor(gts, dtype=torch.float32), 0.5).tolist()
            assert got == brute_force_match(cands, gts, 0.5)


class TestHeads:
    def test_detect_empty(self, model):
        roi = model.roi_features(torch.rand(64, 8, 8), torch.zeros(0, 4))
        out = model.detect(roi)
        assert out.class_logits.shape == (0, 2)
        assert out.box_deltas.shape == (0, 4)

    def test_detect_finite(self, model):
        roi = model.roi_features(torch.rand(64, 8, 8), [[4.0, 4.0, 30.0, 60.0]])
        out = model.detect(roi)
        assert torch.isfinite(out.class_logits).all()
        assert torch.isfinite(out.det_vec).all()

    def test_zero_delta_decode_is_identity(self):
        props = torch.tensor([[4.0, 6.0, 20.0, 44.0], [0.0, 0.0, 10.0, 10.0]])
        out = decode_deltas(props, torch.zeros(2, 4))
        assert torch.allclose(out, props, atol=1e-5)

    def test_encode_decode_roundtrip(self):
        # scale ratios stay under the decoder's 4x clamp
        g = torch.Generator().manual_seed(5)
        xy_r = torch.rand(8, 2, generator=g) * 30
        wh_r = 8 + torch.rand(8, 2, generator=g) * 16
        ref = torch.cat([xy_r, xy_r + wh_r], dim=1)
        xy_t = torch.rand(8, 2, generator=g) * 30
        wh_t = 8 + torch.rand(8, 2, generator=g) * 16
        tgt = torch.cat([xy_t, xy_t + wh_t], dim=1)
        back = decode_deltas(ref, encode_deltas(ref, tgt))
        assert torch.allclose(back, tgt, atol=1e-4)

    def test_embedding_unit_norm_and_determinism(self, model):
        roi = model.roi_features(torch.rand(64, 8, 8, generator=torch.Generator().manual_seed(6)),
                                 [[4.0, 4.0, 30.0, 60.0], [10.0, 2.0, 20.0, 30.0]])
        e1 = model.embed(roi)
        e2 = model.embed(roi)
        assert (e1.normalized.norm(dim=1) - 1).abs().max() < 1e-5
        assert torch.equal(e1.normalized, e2.normalized)

    def test_normalize_gradient_matches_fd(self):
        g = torch.Generator().manual_seed(7)
        c = torch.randn(16, generator=g, dtype=torch.float64)

        def fn(x):
            return (torch.nn.functional.normalize(x[None], dim=1)[0] * c).sum()

        x = torch.randn(16, generator=g, dtype=torch.float64)
        leaf = x.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(fn(leaf), leaf)
        fd = finite_diff_grad(fn, x.clone(), eps=1e-5)
        assert rel_err(grad, fd) <= 1e-3


class TestPredictor:
    def test_shape_and_zero_input(self, model):
        out = model.predict_mlp(torch.zeros(3, 128))
        assert out.vec.shape == (3, 128)
        assert torch.isfinite(out.vec).all()

    def test_jacobian_projection_matches_fd(self):
        torch.manual_seed(8)
        m = PersonSearchModel(ModelConfig()).double().eval()
        c = torch.randn(128, dtype=torch.float64)

        def fn(x):
            return (m.predictor(x[None])[0] * c).sum()

        x = torch.randn(128, dtype=torch.float64) * 0.5
        leaf = x.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(fn(leaf), leaf)
        fd = finite_diff_grad(fn, x.clone(), eps=1e-5)
        assert rel_err(grad, fd) <= 1e-3


class TestForwardSearch:
    def test_blank_image_permitted_empty(self, model):
        props, emb = model.forward_search(torch.zeros(3, 64, 64), score_threshold=0.99)
        assert len(props.boxes) == len(emb)

    def test_threshold_one_always_empty(self, model):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(9))
        props, emb = model.forward_search(img, score_threshold=1.0)
        assert len(props.boxes) == 0 and len(emb) == 0

    def test_identical_images_identical_outputs(self, model):
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(10))
        p1, e1 = model.forward_search(img, score_threshold=0.1)
        p2, e2 = model.forward_search(img.clone(), score_threshold=0.1)
        assert torch.equal(p1.boxes, p2.boxes)
        assert torch.equal(e1, e2)


class TestBackboneSwap:
    def test_custom_encoder_plugs_in(self):
        class WideEncoder(nn.Module):
            def __init__(self):
                super().__init__()
                self.net = nn.Sequential(
                    nn.Conv2d(3, 32, 3, 2, 1), nn.ReLU(),
                    nn.Conv2d(32, 32, 3, 2, 1), nn.ReLU(),
                    nn.Conv2d(32, 96, 3, 2, 1), nn.ReLU())
                self.stride = 8
                self.out_channels = 96

            def forward(self, x):
                return self.net(x)

        torch.manual_seed(11)
        m = PersonSearchModel(ModelConfig(), encoder=WideEncoder()).eval()
        img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(12))
        props, emb = m.forward_search(img, score_threshold=0.1)
        assert emb.shape[1] == 128

    def test_registry_factory(self):
        calls = {}

        def factory(channels):
            calls["channels"] = channels
            from hybridps.model import MiniEncoder
            return MiniEncoder(channels)

        register_encoder("custom-mini", factory)
        m = PersonSearchModel(ModelConfig(encoder="custom-mini"))
        assert calls["channels"] == (24, 32, 48, 64)
        assert m.encoder.out_channels == 64


def test_image_to_tensor_layout():
    img = np.zeros((4, 6, 3), np.float32)
    img[1, 2, 0] = 1.0
    t = image_to_tensor(img)
    assert t.shape == (3, 4, 6)
    assert t[0, 1, 2] == 1.0
