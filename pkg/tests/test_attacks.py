import logging
import math

import numpy as np
import pytest
import torch
from torch import nn

from amptrojan.attacks import (
    AttackResult,
    ExternalAttack,
    bim_k,
    c_bim_k,
    c_fgsm,
    fgsm,
    make_attack,
    project_gradients,
    sample_targets,
)
from amptrojan.core import (
    AttackBudget,
    ConfigurationError,
    ImageBatch,
    InputTransformer,
    clip_perturbed,
    switched,
)
from amptrojan.models import ATNet, ATNetSpec

from conftest import ShiftTransformer, TinyTarget, make_batch


class LinearSoftmax(nn.Module):
    """Flattened linear classifier with fixed weights: the CE input
    gradient has the closed form (softmax(Wx+b) - onehot(l)) @ W."""

    def __init__(self, w, b):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w), requires_grad=False)
        self.b = nn.Parameter(torch.as_tensor(b), requires_grad=False)

    def forward(self, x):
        return x.flatten(1) @ self.w.T + self.b


def ce_input_gradient(w, b, x_flat, labels):
    """Closed-form CE gradient wrt the input, float64 numpy."""
    logits = x_flat @ w.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.eye(w.shape[0])[labels]
    return ((p - onehot) / len(labels)) @ w


def fixed_linear(num_classes=3, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(num_classes, dim))
    b = rng.normal(size=(num_classes,))
    return w, b


class TestProjectGradients:
    def test_property_suite_random_pairs(self):
        # 10^4 pairs, dims 2..4096, float64: orthogonality within 1e-10
        # relative, and the decomposition reassembles g_b to rounding
        rng = np.random.default_rng(42)
        dims = np.unique(np.round(np.logspace(np.log10(2), np.log10(4096), 40))
                         ).astype(int)
        pairs_per_dim = int(math.ceil(10_000 / len(dims)))
        total = 0
        for dim in dims:
            g_h = torch.from_numpy(rng.normal(size=(pairs_per_dim, dim, 1, 1)))
            g_b = torch.from_numpy(rng.normal(size=(pairs_per_dim, dim, 1, 1)))
            par, perp = project_gradients(g_h, g_b)
            fh = g_h.flatten(1)
            fperp = perp.flatten(1)
            dot = (fperp * fh).sum(dim=1).abs()
            scale = fperp.norm(dim=1) * fh.norm(dim=1)
            assert float((dot / scale.clamp(min=1e-300)).max()) < 1e-10
            recon = (par + perp - g_b).abs()
            tol = 1e-12 * g_b.abs().max()
            assert float(recon.max()) <= float(tol)
            total += pairs_per_dim
        assert total >= 10_000

    def test_hand_oracle_axis_aligned(self):
        g_h = torch.tensor([[[[1.0]], [[0.0]], [[0.0]]]])
        g_b = torch.tensor([[[[2.0]], [[3.0]], [[-4.0]]]])
        par, perp = project_gradients(g_h, g_b)
        assert torch.equal(par, torch.tensor([[[[2.0]], [[0.0]], [[0.0]]]]))
        assert torch.equal(perp, torch.tensor([[[[0.0]], [[3.0]], [[-4.0]]]]))

    def test_hand_oracle_parallel(self):
        g_h = torch.tensor([[[[1.0]], [[2.0]]]])
        g_b = 3.0 * g_h
        par, perp = project_gradients(g_h, g_b)
        assert torch.allclose(par, g_b)
        assert float(perp.abs().max()) < 1e-6

    def test_hand_oracle_three_vector(self):
        # g_h = (1,1,0), g_b = (1,0,1): <g_b,g_h>/||g_h||^2 = 1/2
        g_h = torch.tensor([[[[1.0]], [[1.0]], [[0.0]]]], dtype=torch.float64)
        g_b = torch.tensor([[[[1.0]], [[0.0]], [[1.0]]]], dtype=torch.float64)
        par, perp = project_gradients(g_h, g_b)
        assert torch.allclose(
            par, torch.tensor([[[[0.5]], [[0.5]], [[0.0]]]], dtype=torch.float64)
        )
        assert torch.allclose(
            perp, torch.tensor([[[[0.5]], [[-0.5]], [[1.0]]]], dtype=torch.float64)
        )

    def test_degenerate_gradient_falls_back(self, caplog):
        g_h = torch.zeros(2, 3, 1, 1)
        g_b = torch.randn(2, 3, 1, 1)
        with caplog.at_level(logging.WARNING):
            par, perp = project_gradients(g_h, g_b)
        assert torch.equal(par, torch.zeros_like(g_b))
        assert torch.equal(perp, g_b)
        assert any("vanished" in rec.message for rec in caplog.records)

    def test_mixed_degenerate_rows(self):
        g_h = torch.stack([torch.zeros(4), torch.ones(4)]).reshape(2, 4, 1, 1)
        g_b = torch.ones(2, 4, 1, 1)
        par, perp = project_gradients(g_h, g_b)
        assert torch.equal(par[0], torch.zeros(4, 1, 1))
        assert torch.equal(perp[0], torch.ones(4, 1, 1))
        assert torch.allclose(par[1], torch.ones(4, 1, 1))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            project_gradients(torch.zeros(1, 2, 1, 1), torch.zeros(1, 3, 1, 1))


class TestSampleTargets:
    def test_never_equals_source(self):
        labels = torch.randint(0, 10, (100_000,))
        t = sample_targets(labels, 10, seed=5)
        assert not bool((t.target_labels == labels).any())

    def test_uniform_over_wrong_classes(self):
        # each of the 9 offsets should appear with frequency 1/9 +- 0.01
        labels = torch.zeros(100_000, dtype=torch.long)
        t = sample_targets(labels, 10, seed=5)
        freqs = torch.bincount(t.target_labels, minlength=10).double() / 100_000
        assert freqs[0] == 0
        assert float((freqs[1:] - 1 / 9).abs().max()) < 0.01

    def test_deterministic_by_seed(self):
        labels = torch.randint(0, 10, (256,))
        a = sample_targets(labels, 10, seed=3).target_labels
        b = sample_targets(labels, 10, seed=3).target_labels
        c = sample_targets(labels, 10, seed=4).target_labels
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_two_classes(self):
        labels = torch.tensor([0, 1, 0, 1])
        t = sample_targets(labels, 2, seed=0)
        assert torch.equal(t.target_labels, 1 - labels)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            sample_targets(torch.zeros(3, dtype=torch.long), 1, seed=0)


class TestFgsm:
    def test_step_sign_matches_closed_form(self):
        w, b = fixed_linear()
        model = LinearSoftmax(w, b).double()
        rng = np.random.default_rng(1)
        x = rng.uniform(0.2, 0.8, size=(16, 2, 2, 2))
        labels = rng.integers(0, 3, size=16)
        batch = ImageBatch(torch.from_numpy(x), torch.from_numpy(labels))
        g = ce_input_gradient(w, b, x.reshape(16, -1), labels)
        eps = 0.01
        expected = clip_perturbed(
            batch.pixels, batch.pixels + eps * torch.from_numpy(np.sign(g)).reshape(x.shape), eps
        )
        result = fgsm(model, batch, AttackBudget(eps=eps))
        assert torch.allclose(result.adversarial.pixels, expected, atol=1e-12)

    def test_rejects_targeted_mode(self, tiny_target, batch):
        with pytest.raises(ConfigurationError):
            fgsm(tiny_target, batch, AttackBudget(eps=0.1, mode="targeted"))

    def test_eps_zero_identity(self, tiny_target, batch):
        result = fgsm(tiny_target, batch, AttackBudget(eps=0.0))
        assert torch.equal(result.adversarial.pixels, batch.pixels)
        assert float(result.delta.delta.abs().max()) == 0.0

    def test_loss_trace_length(self, tiny_target, batch):
        assert len(fgsm(tiny_target, batch, AttackBudget(eps=0.1)).loss_trace) == 1

    def test_leaves_model_mode_and_bn_stats_alone(self, batch):
        model = nn.Sequential(
            nn.Conv2d(1, 3, 3, padding=1), nn.BatchNorm2d(3), nn.Flatten(),
            nn.Linear(3 * 16, 4),
        )
        model.train()
        before = model[1].running_mean.clone()
        fgsm(model, batch, AttackBudget(eps=0.05))
        assert model.training
        assert torch.equal(model[1].running_mean, before)


class TestBimK:
    def test_hand_unrolled_three_steps(self):
        # analytic signs recomputed in float64 at every iterate; the pixel
        # updates replayed with float32 numpy must match bitwise
        w, b = fixed_linear(seed=2)
        model = LinearSoftmax(
            torch.tensor(w, dtype=torch.float32), torch.tensor(b, dtype=torch.float32)
        )
        rng = np.random.default_rng(3)
        x0 = rng.uniform(0.3, 0.7, size=(4, 2, 2, 2)).astype(np.float32)
        labels = rng.integers(0, 3, size=4)
        eps, alpha, steps = np.float32(0.05), np.float32(0.02), 3

        adv = x0.copy()
        for _ in range(steps):
            g = ce_input_gradient(w, b, adv.reshape(4, -1).astype(np.float64), labels)
            assert float(np.abs(g).min()) > 1e-9  # signs are unambiguous
            stepped = adv + alpha * np.sign(g).astype(np.float32).reshape(adv.shape)
            lo = np.maximum(np.float32(0), x0 - eps)
            hi = np.minimum(np.float32(1), x0 + eps)
            adv = np.minimum(np.maximum(stepped, lo), hi)

        batch = ImageBatch(torch.from_numpy(x0), torch.from_numpy(labels))
        result = bim_k(model, batch,
                       AttackBudget(eps=0.05, steps=3, step_size=0.02))
        np.testing.assert_array_equal(result.adversarial.pixels.numpy(), adv)

    def test_k1_alpha_eps_equals_fgsm(self, tiny_target, batch):
        a = fgsm(tiny_target, batch, AttackBudget(eps=0.05))
        b = bim_k(tiny_target, batch,
                  AttackBudget(eps=0.05, steps=1, step_size=0.05))
        assert torch.equal(a.adversarial.pixels, b.adversarial.pixels)
        assert torch.equal(a.delta.delta, b.delta.delta)

    def test_default_step_size_rule(self, tiny_target, batch):
        explicit = bim_k(tiny_target, batch,
                         AttackBudget(eps=0.04, steps=4, step_size=2.5 * 0.04 / 4))
        default = bim_k(tiny_target, batch, AttackBudget(eps=0.04, steps=4))
        assert torch.equal(explicit.adversarial.pixels, default.adversarial.pixels)

    def test_targeted_requires_assignment(self, tiny_target, batch):
        with pytest.raises(ConfigurationError):
            bim_k(tiny_target, batch, AttackBudget(eps=0.05, mode="targeted"))

    def test_targeted_moves_toward_target(self):
        w, b = fixed_linear()
        model = LinearSoftmax(w, b).double()
        batch = ImageBatch(
            torch.full((8, 2, 2, 2), 0.5, dtype=torch.float64),
            torch.zeros(8, dtype=torch.long),
        )
        targets = sample_targets(batch.labels, 3, seed=1)
        budget = AttackBudget(eps=0.2, steps=10, mode="targeted")
        result = bim_k(model, batch, budget, targets)
        before = nn.functional.cross_entropy(
            model(batch.pixels), targets.target_labels)
        after = nn.functional.cross_entropy(
            model(result.adversarial.pixels), targets.target_labels)
        assert float(after) < float(before)

    def test_trace_has_one_entry_per_step(self, tiny_target, batch):
        result = bim_k(tiny_target, batch, AttackBudget(eps=0.05, steps=7))
        assert len(result.loss_trace) == 7


def build_pair(seed=0):
    target = TinyTarget(in_features=256, num_classes=4, seed=seed).eval()
    trojan = ATNet(ATNetSpec((1, 16, 16), 0.5))
    with torch.random.fork_rng():
        torch.manual_seed(seed + 1)
        for p in trojan.parameters():
            p.data.normal_(0, 0.05)
    return target, trojan.eval()


class ComposedModel(nn.Module):
    def __init__(self, target, trojan):
        super().__init__()
        self.target = target
        self.trojan = trojan

    def forward(self, x):
        return self.target(self.trojan(x))


class TestCFgsm:
    def test_lambda_zero_is_signed_descent_of_attack_loss(self):
        target, trojan = build_pair()
        batch = make_batch(n=6, shape=(1, 16, 16))
        budget = AttackBudget(eps=0.05, lam=0.0)
        result = c_fgsm(target, trojan, batch, budget)

        leaf = batch.pixels.clone().requires_grad_(True)
        with switched(trojan, True):
            loss = -nn.functional.cross_entropy(target(trojan(leaf)), batch.labels)
        (g_b,) = torch.autograd.grad(loss, leaf)
        expected = clip_perturbed(
            batch.pixels, batch.pixels - 0.05 * g_b.sign(), 0.05)
        assert torch.equal(result.adversarial.pixels, expected)

    def test_lambda_one_step_orthogonal_to_bare_gradient(self):
        target, trojan = build_pair()
        batch = make_batch(n=6, shape=(1, 16, 16))
        result = c_fgsm(target, trojan, batch, AttackBudget(eps=0.05, lam=1.0))

        leaf = batch.pixels.clone().requires_grad_(True)
        loss_h = nn.functional.cross_entropy(target(leaf), batch.labels)
        (g_h,) = torch.autograd.grad(loss_h, leaf)
        leaf2 = batch.pixels.clone().requires_grad_(True)
        with switched(trojan, True):
            loss_b = -nn.functional.cross_entropy(target(trojan(leaf2)), batch.labels)
        (g_b,) = torch.autograd.grad(loss_b, leaf2)
        _, perp = project_gradients(g_h, g_b)
        expected = clip_perturbed(
            batch.pixels, batch.pixels - 0.05 * perp.sign(), 0.05)
        assert torch.equal(result.adversarial.pixels, expected)

    def test_intermediate_lambda_direction(self):
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        lam = 0.3
        result = c_fgsm(target, trojan, batch, AttackBudget(eps=0.05, lam=lam))

        leaf = batch.pixels.clone().requires_grad_(True)
        (g_h,) = torch.autograd.grad(
            nn.functional.cross_entropy(target(leaf), batch.labels), leaf)
        leaf2 = batch.pixels.clone().requires_grad_(True)
        with switched(trojan, True):
            lb = -nn.functional.cross_entropy(target(trojan(leaf2)), batch.labels)
        (g_b,) = torch.autograd.grad(lb, leaf2)
        par, perp = project_gradients(g_h, g_b)
        expected = clip_perturbed(
            batch.pixels,
            batch.pixels - 0.05 * (perp + (1 - lam) * par).sign(), 0.05)
        assert torch.equal(result.adversarial.pixels, expected)

    def test_targeted_requires_assignment(self):
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        with pytest.raises(ConfigurationError):
            c_fgsm(target, trojan, batch, AttackBudget(eps=0.05, mode="targeted"))

    def test_predicted_label_source(self):
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        r = c_fgsm(target, trojan, batch, AttackBudget(eps=0.05),
                   label_source="predicted")
        assert r.adversarial.pixels.shape == batch.pixels.shape

    def test_unknown_label_source_rejected(self):
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        with pytest.raises(ConfigurationError):
            c_fgsm(target, trojan, batch, AttackBudget(eps=0.05),
                   label_source="astrology")

    def test_degenerate_bare_gradient_uses_attack_gradient(self):
        # a constant-logit target has zero concealment gradient everywhere
        class Constant(nn.Module):
            num_classes = 4

            def forward(self, x):
                return x.flatten(1)[:, :4] * 0.0

        target = Constant()
        trojan = ShiftTransformer(torch.zeros(1, 16, 16))
        batch = make_batch(n=2, shape=(1, 16, 16))
        result = c_fgsm(target, trojan, batch, AttackBudget(eps=0.05, lam=1.0))
        # gradient of a constant is zero everywhere: the step is zero too
        assert torch.equal(result.adversarial.pixels, batch.pixels)


class TestCBimK:
    def test_ch_zero_matches_bim_on_composed(self):
        target, trojan = build_pair()
        batch = make_batch(n=6, shape=(1, 16, 16))
        targets = sample_targets(batch.labels, 4, seed=9)
        budget = AttackBudget(eps=0.05, steps=5, mode="targeted", c_h=0.0)
        ours = c_bim_k(target, trojan, batch, budget, targets)
        with switched(trojan, True):
            ref = bim_k(ComposedModel(target, trojan), batch, budget, targets)
        assert torch.equal(ours.adversarial.pixels, ref.adversarial.pixels)

    def test_ch_zero_matches_bim_untargeted(self):
        target, trojan = build_pair()
        batch = make_batch(n=6, shape=(1, 16, 16))
        budget = AttackBudget(eps=0.05, steps=4, c_h=0.0)
        ours = c_bim_k(target, trojan, batch, budget)
        with switched(trojan, True):
            ref = bim_k(ComposedModel(target, trojan), batch, budget)
        assert torch.equal(ours.adversarial.pixels, ref.adversarial.pixels)

    def test_logit_l2_concealment_gradient_zero_at_origin(self):
        # the concealment term ||F(x+d)-F(x)||^2 has zero gradient at d=0,
        # so the first step with huge c_h matches the first step with c_h=0
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        big = c_bim_k(target, trojan, batch,
                      AttackBudget(eps=0.03, steps=1, c_h=1e8))
        zero = c_bim_k(target, trojan, batch,
                       AttackBudget(eps=0.03, steps=1, c_h=0.0))
        assert torch.allclose(big.adversarial.pixels, zero.adversarial.pixels,
                              atol=1e-6)

    def test_ce_concealment_differs_from_logit_l2(self):
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        budget = AttackBudget(eps=0.05, steps=3, c_h=5.0)
        a = c_bim_k(target, trojan, batch, budget, concealment="logit_l2")
        b = c_bim_k(target, trojan, batch, budget, concealment="ce")
        assert not torch.equal(a.adversarial.pixels, b.adversarial.pixels)

    def test_unknown_concealment_rejected(self):
        target, trojan = build_pair()
        batch = make_batch(n=2, shape=(1, 16, 16))
        with pytest.raises(ConfigurationError):
            c_bim_k(target, trojan, batch, AttackBudget(eps=0.05),
                    concealment="vibes")

    def test_objective_descends_combined_loss(self):
        target, trojan = build_pair()
        batch = make_batch(n=8, shape=(1, 16, 16))
        budget = AttackBudget(eps=0.1, steps=8, c_h=1.0)
        result = c_bim_k(target, trojan, batch, budget)
        assert result.loss_trace[-1] < result.loss_trace[0]


@pytest.mark.parametrize("eps", [0.0, 0.01, 0.05, 0.25])
@pytest.mark.parametrize("kind", ["fgsm", "bim_k", "c_fgsm", "c_bim_k"])
class TestBudgetRespect:
    def test_linf_within_representable_eps(self, eps, kind):
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16), seed=11)
        budget = AttackBudget(eps=eps, steps=3)
        if kind == "fgsm":
            result = fgsm(target, batch, budget)
        elif kind == "bim_k":
            result = bim_k(target, batch, budget)
        elif kind == "c_fgsm":
            result = c_fgsm(target, trojan, batch, AttackBudget(eps=eps))
        else:
            result = c_bim_k(target, trojan, batch, budget)
        cap = float(torch.tensor(eps, dtype=torch.float32))
        assert float(result.delta.delta.abs().max()) <= cap
        pix = result.adversarial.pixels
        assert float(pix.min()) >= 0.0 and float(pix.max()) <= 1.0
        # adversarial - clean equals delta within float tolerance
        assert torch.allclose(pix - batch.pixels, result.delta.delta, atol=1e-7)


class TestRegistry:
    def test_known_attacks_run(self):
        target, trojan = build_pair()
        batch = make_batch(n=3, shape=(1, 16, 16))
        for name in ("fgsm", "bim_k", "c_fgsm", "c_bim_k"):
            fn = make_attack(name)
            result = fn(target, trojan, batch, AttackBudget(eps=0.02, steps=2))
            assert isinstance(result, AttackResult)

    def test_unknown_attack_rejected(self):
        with pytest.raises(ConfigurationError):
            make_attack("rowhammer")

    def test_plain_attacks_go_through_switched_on_pipeline(self):
        # registry-wrapped fgsm attacks target(trojan(.)), not the bare target
        target, trojan = build_pair()
        batch = make_batch(n=4, shape=(1, 16, 16))
        budget = AttackBudget(eps=0.05)
        via_registry = make_attack("fgsm")(target, trojan, batch, budget)
        with switched(trojan, True):
            direct = fgsm(ComposedModel(target, trojan), batch, budget)
        assert torch.equal(via_registry.adversarial.pixels,
                           direct.adversarial.pixels)

    def test_external_attack_adapter(self):
        target, trojan = build_pair()
        batch = make_batch(n=3, shape=(1, 16, 16))

        def blur(model, b):
            return (b.pixels * 0.9 + 0.05).clamp(0, 1)

        ext = ExternalAttack(blur, name="blur")
        result = ext(target, trojan, batch, AttackBudget(eps=0.5))
        assert result.delta.budget_eps is None
        assert torch.allclose(result.adversarial.pixels,
                              (batch.pixels * 0.9 + 0.05).clamp(0, 1))
