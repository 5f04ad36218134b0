"""Baseline and concealable adversarial-example crafting.

Baselines: fgsm (one signed-gradient step) and bim_k (K clipped steps).
Concealable variants craft perturbations that fool the switched-on
pipeline F(G(.)) while staying harmless to the bare target F:

- c_fgsm decomposes the attack gradient g_b into components parallel and
  orthogonal to the concealment gradient g_h and steps along
  -(g_perp + (1-lambda)*g_parallel).
- c_bim_k descends c_h * (concealment loss) + (attack loss) for K clipped
  steps; the default concealment loss is the squared logit distance
  ||F(x+delta) - F(x)||_2^2, whose gradient vanishes at delta=0.

Attack losses: targeted descends CE toward the chosen target labels;
untargeted descends -CE on the ground truth. All losses are batch means.
The exact reductions hold bitwise: bim_k(K=1, alpha=eps) == fgsm,
c_bim_k(c_h=0) == bim_k on the composed pipeline, and c_fgsm(lambda=0) ==
one-step signed descent of the attack loss; the lambda=0 / c_h=0 branches
skip the concealment computation entirely rather than multiplying by zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F_nn

from .core import (
    DEGENERATE_GRAD_TOL,
    AttackBudget,
    ConfigurationError,
    ImageBatch,
    Perturbation,
    TargetLabelAssignment,
    clip_perturbed,
    eval_mode,
    switched,
)

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground_truth"
PREDICTED = "predicted"

CONCEAL_LOGIT_L2 = "logit_l2"
CONCEAL_CE = "ce"


@dataclass
class AttackResult:
    adversarial: ImageBatch
    delta: Perturbation
    loss_trace: list[float] = field(default_factory=list)


def _grad_wrt_input(loss_fn, x: torch.Tensor) -> tuple[torch.Tensor, float]:
    """Gradient of loss_fn(leaf) at leaf=x; returns (grad, loss value)."""
    leaf = x.clone().detach().requires_grad_(True)
    loss = loss_fn(leaf)
    (g,) = torch.autograd.grad(loss, leaf)
    return g, float(loss.detach())


def _require_targets(budget: AttackBudget, targets: TargetLabelAssignment | None):
    if budget.targeted and targets is None:
        raise ConfigurationError("targeted attack requires a TargetLabelAssignment")


def sample_targets(labels: torch.Tensor, num_classes: int, seed: int) -> TargetLabelAssignment:
    """Uniform random target label != ground truth, per example, seeded."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    gen = torch.Generator().manual_seed(seed)
    offsets = torch.randint(1, num_classes, labels.shape, generator=gen)
    targets = (labels + offsets) % num_classes
    return TargetLabelAssignment(targets, source_labels=labels)


def fgsm(model: nn.Module, x: ImageBatch, budget: AttackBudget) -> AttackResult:
    """One step of eps * Sign(grad CE), clipped to the valid pixel range."""
    if budget.targeted:
        raise ConfigurationError("fgsm is untargeted; use bim_k for targeted crafting")
    with eval_mode(model):
        g, loss = _grad_wrt_input(
            lambda leaf: F_nn.cross_entropy(model(leaf), x.labels), x.pixels
        )
        adv = clip_perturbed(x.pixels, x.pixels.detach() + budget.eps * g.sign(), budget.eps)
    return AttackResult(
        ImageBatch(adv, x.labels),
        Perturbation((adv - x.pixels).clamp(-budget.eps, budget.eps), budget.eps),
        [loss],
    )


def bim_k(
    model: nn.Module,
    x: ImageBatch,
    budget: AttackBudget,
    targets: TargetLabelAssignment | None = None,
) -> AttackResult:
    """K signed-gradient steps of size alpha, each followed by clipping.

    Untargeted ascends CE on the ground truth; targeted descends CE on the
    assigned target labels.
    """
    _require_targets(budget, targets)
    alpha = budget.resolved_step_size()
    labels = targets.target_labels if budget.targeted else x.labels
    trace = []
    adv = x.pixels
    with eval_mode(model):
        for _ in range(budget.steps):
            g, loss = _grad_wrt_input(
                lambda leaf: F_nn.cross_entropy(model(leaf), labels), adv
            )
            trace.append(loss)
            if budget.targeted:
                stepped = adv.detach() - alpha * g.sign()
            else:
                stepped = adv.detach() + alpha * g.sign()
            adv = clip_perturbed(x.pixels, stepped, budget.eps)
    return AttackResult(
        ImageBatch(adv, x.labels),
        Perturbation((adv - x.pixels).clamp(-budget.eps, budget.eps), budget.eps),
        trace,
    )


def project_gradients(
    g_h: torch.Tensor, g_b: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-example decomposition of g_b into components parallel and
    orthogonal to g_h, computed on flattened views.

    Degenerate rule: examples with ||g_h|| below tolerance get
    g_parallel = 0 and g_perp = g_b (the concealment constraint is vacuous
    where the target is locally flat).
    """
    if g_h.shape != g_b.shape:
        raise ConfigurationError(
            f"gradient shapes differ: {tuple(g_h.shape)} vs {tuple(g_b.shape)}"
        )
    flat_h = g_h.reshape(g_h.shape[0], -1)
    flat_b = g_b.reshape(g_b.shape[0], -1)
    norm_sq = (flat_h * flat_h).sum(dim=1)
    degenerate = norm_sq < DEGENERATE_GRAD_TOL**2
    if bool(degenerate.any()):
        log.warning(
            "concealment gradient vanished for %d/%d examples; using the raw "
            "attack gradient there",
            int(degenerate.sum()), len(degenerate),
        )
    coef = (flat_h * flat_b).sum(dim=1) / torch.where(
        degenerate, torch.ones_like(norm_sq), norm_sq
    )
    coef = torch.where(degenerate, torch.zeros_like(coef), coef)
    g_parallel = (coef.unsqueeze(1) * flat_h).reshape(g_h.shape)
    return g_parallel, g_b - g_parallel


def _conceal_labels(target: nn.Module, x: ImageBatch, label_source: str) -> torch.Tensor:
    if label_source == GROUND_TRUTH:
        return x.labels
    if label_source == PREDICTED:
        with torch.no_grad():
            return target(x.pixels).argmax(dim=1)
    raise ConfigurationError(f"unknown label source {label_source!r}")


def c_fgsm(
    target: nn.Module,
    trojan: nn.Module,
    x: ImageBatch,
    budget: AttackBudget,
    targets: TargetLabelAssignment | None = None,
    label_source: str = GROUND_TRUTH,
) -> AttackResult:
    """One-step concealable attack via gradient projection.

    The concealment loss CE(F(x), l) is taken against the bare target (the
    switched-off branch); the attack loss goes through the switched-on
    pipeline. Step direction is -(g_perp + (1-lambda)*g_parallel); lambda=1
    drops the parallel component entirely, lambda=0 reduces to plain signed
    descent of the attack loss.
    """
    _require_targets(budget, targets)
    lam = budget.lam
    with eval_mode(target, trojan):
        if budget.targeted:
            attack_labels = targets.target_labels
            def attack_loss(leaf):
                with switched(trojan, True):
                    return F_nn.cross_entropy(target(trojan(leaf)), attack_labels)
        else:
            def attack_loss(leaf):
                with switched(trojan, True):
                    return -F_nn.cross_entropy(target(trojan(leaf)), x.labels)
        g_b, lb = _grad_wrt_input(attack_loss, x.pixels)

        if lam == 0.0:
            direction = g_b
        else:
            labels_h = _conceal_labels(target, x, label_source)
            g_h, _ = _grad_wrt_input(
                lambda leaf: F_nn.cross_entropy(target(leaf), labels_h), x.pixels
            )
            g_parallel, g_perp = project_gradients(g_h, g_b)
            if lam == 1.0:
                direction = g_perp
            else:
                direction = g_perp + (1.0 - lam) * g_parallel

        adv = clip_perturbed(
            x.pixels, x.pixels.detach() - budget.eps * direction.sign(), budget.eps
        )
    return AttackResult(
        ImageBatch(adv, x.labels),
        Perturbation((adv - x.pixels).clamp(-budget.eps, budget.eps), budget.eps),
        [lb],
    )


def c_bim_k(
    target: nn.Module,
    trojan: nn.Module,
    x: ImageBatch,
    budget: AttackBudget,
    targets: TargetLabelAssignment | None = None,
    concealment: str = CONCEAL_LOGIT_L2,
    label_source: str = GROUND_TRUTH,
) -> AttackResult:
    """K-step concealable attack descending c_h * L_conceal + L_attack.

    The default concealment loss is the mean squared logit distance
    ||F(x+delta) - F(x)||_2^2 against the bare target; "ce" selects
    CE(F(x+delta), l) instead. With c_h=0 the concealment term (and its
    forward pass) is skipped, making the trajectory identical to bim_k
    against the composed pipeline.
    """
    _require_targets(budget, targets)
    if concealment not in (CONCEAL_LOGIT_L2, CONCEAL_CE):
        raise ConfigurationError(f"unknown concealment loss {concealment!r}")
    alpha = budget.resolved_step_size()
    c_h = budget.c_h
    trace = []
    adv = x.pixels
    with eval_mode(target, trojan):
        if c_h == 0.0:
            labels = targets.target_labels if budget.targeted else x.labels
            for _ in range(budget.steps):
                def ce_loss(leaf):
                    with switched(trojan, True):
                        return F_nn.cross_entropy(target(trojan(leaf)), labels)
                g, ce = _grad_wrt_input(ce_loss, adv)
                trace.append(ce if budget.targeted else -ce)
                if budget.targeted:
                    stepped = adv.detach() - alpha * g.sign()
                else:
                    stepped = adv.detach() + alpha * g.sign()
                adv = clip_perturbed(x.pixels, stepped, budget.eps)
        else:
            if concealment == CONCEAL_LOGIT_L2:
                with torch.no_grad():
                    clean_logits = target(x.pixels)
            else:
                labels_h = _conceal_labels(target, x, label_source)
            for _ in range(budget.steps):
                def objective(leaf):
                    if concealment == CONCEAL_LOGIT_L2:
                        diff = target(leaf) - clean_logits
                        lh = diff.pow(2).sum(dim=1).mean()
                    else:
                        lh = F_nn.cross_entropy(target(leaf), labels_h)
                    with switched(trojan, True):
                        pipeline_logits = target(trojan(leaf))
                    if budget.targeted:
                        lb = F_nn.cross_entropy(pipeline_logits, targets.target_labels)
                    else:
                        lb = -F_nn.cross_entropy(pipeline_logits, x.labels)
                    return c_h * lh + lb
                g, loss = _grad_wrt_input(objective, adv)
                trace.append(loss)
                adv = clip_perturbed(
                    x.pixels, adv.detach() - alpha * g.sign(), budget.eps
                )
    return AttackResult(
        ImageBatch(adv, x.labels),
        Perturbation((adv - x.pixels).clamp(-budget.eps, budget.eps), budget.eps),
        trace,
    )


class ExternalAttack:
    """Adapter for attacks implemented elsewhere.

    Wraps any fn(model, ImageBatch) -> perturbed pixel tensor. No budget is
    promised; the evaluation module reports the observed norms instead.
    """

    def __init__(self, fn, name: str = "external"):
        self.fn = fn
        self.name = name

    def __call__(self, target, trojan, x: ImageBatch, budget=None, targets=None) -> AttackResult:
        with eval_mode(target, trojan), switched(trojan, True):
            model = target if trojan is None else _Composed(target, trojan)
            adv = self.fn(model, x)
        return AttackResult(
            ImageBatch(adv, x.labels), Perturbation(adv - x.pixels, None), []
        )


class _Composed(nn.Module):
    def __init__(self, target, trojan):
        super().__init__()
        self.target, self.trojan = target, trojan

    def forward(self, x):
        return self.target(self.trojan(x))


def _craft_fgsm(target, trojan, x, budget, targets=None, **_):
    with switched(trojan, True):
        return fgsm(_Composed(target, trojan), x, budget)


def _craft_bim_k(target, trojan, x, budget, targets=None, **_):
    with switched(trojan, True):
        return bim_k(_Composed(target, trojan), x, budget, targets)


def _craft_c_fgsm(target, trojan, x, budget, targets=None,
                  label_source=GROUND_TRUTH, **_):
    return c_fgsm(target, trojan, x, budget, targets, label_source)


def _craft_c_bim_k(target, trojan, x, budget, targets=None,
                   concealment=CONCEAL_LOGIT_L2, label_source=GROUND_TRUTH, **_):
    return c_bim_k(target, trojan, x, budget, targets, concealment, label_source)


ATTACKS = {
    "fgsm": _craft_fgsm,
    "bim_k": _craft_bim_k,
    "c_fgsm": _craft_c_fgsm,
    "c_bim_k": _craft_c_bim_k,
}


def make_attack(kind: str):
    """Crafting callable (target, trojan, batch, budget, targets=None, ...).

    Baseline kinds attack the switched-on composed pipeline; concealable
    kinds additionally use the bare target for their concealment branch.
    """
    try:
        return ATTACKS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown attack kind {kind!r}; known: {sorted(ATTACKS)}"
        ) from None
