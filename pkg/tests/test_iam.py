import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from hybridps.iam import (
    GradientReversal,
    IamBundle,
    ImageDomainHead,
    InstanceDomainHead,
    ProbeError,
    grl_apply,
    loss_adv,
    probe_separability,
)
from hybridps.utils import rng_for

from oracles import finite_diff_grad, rel_err


class TestGradientReversal:
    def test_forward_is_bitwise_identity(self):
        g = torch.Generator().manual_seed(0)
        for shape in [(5,), (3, 4), (2, 3, 4, 5)]:
            v = torch.randn(*shape, generator=g)
            out = grl_apply(v, 0.7)
            assert torch.equal(out, v)

    def test_backward_negates_exactly_at_alpha_one(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(6, generator=g, requires_grad=True)
        upstream = torch.randn(6, generator=g)
        y = grl_apply(x, 1.0)
        y.backward(upstream)
        assert torch.equal(x.grad, -upstream)

    def test_alpha_scales_analytic_chain(self):
        # f(x) = sum(c * x) has analytic df/dx = c; through reversal it is -0.3c
        g = torch.Generator().manual_seed(2)
        c = torch.randn(8, generator=g, dtype=torch.float64)
        x = torch.randn(8, generator=g, dtype=torch.float64, requires_grad=True)
        f = (c * grl_apply(x, 0.3)).sum()
        f.backward()
        assert torch.equal(x.grad, -0.3 * c)

    def test_alpha_zero_blocks_gradient(self):
        x = torch.randn(4, requires_grad=True)
        (grl_apply(x, 0.0).sum()).backward()
        assert torch.equal(x.grad, torch.zeros(4))

    def test_module_wrapper(self):
        m = GradientReversal(alpha=2.0)
        x = torch.randn(3, requires_grad=True)
        m(x).sum().backward()
        assert torch.allclose(x.grad, torch.full((3,), -2.0))


def make_bundle(task="detection", channels=16, dim=24, domains=2, seed=0):
    torch.manual_seed(seed)
    return IamBundle(task, channels, dim, domains, alpha=1.0)


class TestLossAdv:
    def test_uniform_logits_give_ln_domain_count(self):
        bundle = make_bundle(domains=2)
        for p in bundle.parameters():
            nn.init.zeros_(p)
        f_img = torch.randn(3, 16, 4, 4, generator=torch.Generator().manual_seed(3))
        f_ins = [torch.randn(2, 24), torch.randn(1, 24), torch.randn(3, 24)]
        l_img, l_ins, l_cst, counts = loss_adv(bundle, f_img, f_ins, [0, 1, 0])
        assert abs(float(l_img) - math.log(2)) < 1e-6
        assert abs(float(l_ins) - math.log(2)) < 1e-6
        # equal (uniform) probability vectors at both levels
        assert float(l_cst) == 0.0
        assert counts["instances"] == 6

    def test_empty_instance_lists_counted(self):
        bundle = make_bundle()
        f_img = torch.randn(2, 16, 4, 4)
        l_img, l_ins, l_cst, counts = loss_adv(bundle, f_img, [None, torch.zeros(0, 24)], [0, 1])
        assert float(l_ins) == 0.0 and float(l_cst) == 0.0
        assert counts["empty_instance_images"] == 2

    def test_encoder_gradient_equals_minus_alpha_times_no_grl(self):
        for alpha in (0.3, 1.0):
            bundle = make_bundle(seed=4)
            g = torch.Generator().manual_seed(5)
            base_img = torch.randn(2, 16, 4, 4, generator=g)
            base_ins = torch.randn(3, 24, generator=g)

            def grads(use_grl):
                f_img = base_img.clone().requires_grad_(True)
                f_ins = base_ins.clone().requires_grad_(True)
                l_img, l_ins, l_cst, _ = loss_adv(
                    bundle, f_img, [f_ins[:2], f_ins[2:]], [0, 1],
                    use_grl=use_grl, alpha=alpha)
                (l_img + l_ins + l_cst).backward()
                return f_img.grad.clone(), f_ins.grad.clone()

            gi_rev, gn_rev = grads(True)
            gi_plain, gn_plain = grads(False)
            assert torch.allclose(gi_rev, -alpha * gi_plain, atol=1e-7)
            assert torch.allclose(gn_rev, -alpha * gn_plain, atol=1e-7)

    def test_head_parameters_receive_unreversed_gradient(self):
        # the reversal sits between features and heads: head gradients are the
        # true descent direction regardless of alpha
        bundle1 = make_bundle(seed=6)
        bundle2 = make_bundle(seed=6)
        f_img = torch.randn(2, 16, 4, 4, generator=torch.Generator().manual_seed(7))
        f_ins = [torch.randn(2, 24), torch.randn(2, 24)]

        def head_grads(bundle, use_grl):
            l_img, l_ins, l_cst, _ = loss_adv(bundle, f_img, f_ins, [0, 1], use_grl=use_grl)
            (l_img + l_ins + l_cst).backward()
            return [p.grad.clone() for p in bundle.parameters()]

        g1 = head_grads(bundle1, True)
        g2 = head_grads(bundle2, False)
        for a, b in zip(g1, g2):
            assert torch.allclose(a, b, atol=1e-7)

    def test_adversarial_directions(self):
        # a step along the produced gradients moves the heads to decrease the
        # domain cross-entropy and the features to increase it
        bundle = make_bundle(seed=8).double()
        g = torch.Generator().manual_seed(9)
        f_img0 = torch.randn(4, 16, 4, 4, generator=g, dtype=torch.float64)
        labels = [0, 1, 0, 1]

        def ce(f_img):
            with torch.no_grad():
                return float(F.cross_entropy(bundle.img_head(f_img), torch.tensor(labels)))

        f_img = f_img0.clone().requires_grad_(True)
        l_img, _, _, _ = loss_adv(bundle, f_img, [None] * 4, labels)
        bundle.zero_grad()
        l_img.backward()
        lr = 1e-2
        with torch.no_grad():
            # simulated SGD step on every parameter and on the features
            new_heads = {n: p - lr * p.grad for n, p in bundle.img_head.named_parameters()}
            f_img_new = (f_img - lr * f_img.grad).detach()

        before = ce(f_img0)
        with torch.no_grad():
            old = {n: p.clone() for n, p in bundle.img_head.named_parameters()}
            for n, p in bundle.img_head.named_parameters():
                p.copy_(new_heads[n])
            after_heads = ce(f_img0)
            for n, p in bundle.img_head.named_parameters():
                p.copy_(old[n])
        after_features = ce(f_img_new)
        assert after_heads < before          # heads descend
        assert after_features > before       # features ascend (reversed)

    def test_consistency_invariant_under_domain_permutation(self):
        bundle = make_bundle(domains=3, seed=10)
        f_img = torch.randn(2, 16, 4, 4, generator=torch.Generator().manual_seed(11))
        f_ins = [torch.randn(2, 24), torch.randn(1, 24)]
        _, _, l_cst, _ = loss_adv(bundle, f_img, f_ins, [0, 2])

        perm = [2, 0, 1]

        class Permuted(nn.Module):
            def __init__(self, head):
                super().__init__()
                self.head = head

            def forward(self, x):
                return self.head(x)[:, perm]

        permuted = IamBundle("detection", 16, 24, 3)
        permuted.img_head = Permuted(bundle.img_head)
        permuted.ins_head = Permuted(bundle.ins_head)
        _, _, l_cst_p, _ = loss_adv(permuted, f_img, f_ins, [0, 2])
        assert abs(float(l_cst) - float(l_cst_p)) < 1e-6

    def test_gradients_match_finite_differences(self):
        rng = rng_for(12, "advfd")
        for trial in range(20):
            bundle = make_bundle(channels=6, dim=8, domains=2, seed=trial).double()
            n_img = 2
            f_img = torch.tensor(rng.normal(0, 1, (n_img, 6, 3, 3)))
            f_ins_flat = torch.tensor(rng.normal(0, 1, (3, 8)))
            labels = [int(v) for v in rng.integers(0, 2, n_img)]
            alpha = float(rng.uniform(0.2, 1.5))

            packed = torch.cat([f_img.reshape(-1), f_ins_flat.reshape(-1)])

            def parts(x):
                fi = x[: f_img.numel()].reshape(f_img.shape)
                fn = x[f_img.numel():].reshape(f_ins_flat.shape)
                return fi, [fn[:1], fn[1:]]

            def fn_no_grl(x):
                fi, fl = parts(x)
                l_img, l_ins, l_cst, _ = loss_adv(bundle, fi, fl, labels, use_grl=False)
                return l_img + l_ins + l_cst

            leaf = packed.clone().requires_grad_(True)
            fi, fl = parts(leaf)
            l_img, l_ins, l_cst, _ = loss_adv(bundle, fi, fl, labels, alpha=alpha)
            (grad,) = torch.autograd.grad(l_img + l_ins + l_cst, leaf)
            fd = finite_diff_grad(fn_no_grl, packed.clone(), eps=1e-6)
            # reversal makes the feature gradient -alpha times the true gradient
            assert rel_err(grad, -alpha * fd) <= 1e-3, f"adv trial {trial}"

    def test_label_range_validated(self):
        bundle = make_bundle(domains=2)
        with pytest.raises(ValueError, match="domain label"):
            loss_adv(bundle, torch.randn(1, 16, 4, 4), [None], [5])


class TestProbe:
    def test_identical_features_near_chance(self):
        rng = rng_for(13, "probe")
        x = np.ones((200, 8))
        y = np.array([0, 1] * 100)
        acc = probe_separability(x, y, seed=0)
        # binomial CI around 0.5 for 60 held-out points
        assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / 60)

    def test_one_hot_features_perfect(self):
        y = np.array([0, 1, 2] * 40)
        x = np.eye(3)[y]
        acc = probe_separability(x, y, seed=1)
        assert acc >= 0.99

    def test_single_domain_rejected(self):
        with pytest.raises(ProbeError):
            probe_separability(np.random.rand(10, 4), np.zeros(10), seed=2)


def test_bundle_validation():
    with pytest.raises(ValueError):
        IamBundle("segmentation", 8, 8, 2)
    with pytest.raises(ValueError):
        IamBundle("reid", 8, 8, 0)
