"""Domain types and model contracts shared by every other module.

All pixel math happens in a single normalized [0,1] space: datasets are
scaled to [0,1] on ingestion, perturbation budgets are given in these raw
units, and any model-internal normalization belongs to the model itself.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import torch
from torch import nn

UNTARGETED = "untargeted"
TARGETED = "targeted"

# below this l2 norm a concealment gradient is treated as vanishing and the
# projection falls back to the raw attack gradient
DEGENERATE_GRAD_TOL = 1e-12


class AmpTrojanError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(AmpTrojanError):
    """Incompatible shapes, unsupported spec combinations, bad arguments."""


class ConfigSchemaError(AmpTrojanError):
    """An experiment config document failed schema validation."""


class CheckpointError(AmpTrojanError):
    """Missing checkpoint, or metadata that contradicts the requested spec."""


class DatasetError(AmpTrojanError):
    """Download, checksum, or cache failures during dataset ingestion."""


class TrainingDiverged(AmpTrojanError):
    """A training loss became non-finite; a diagnostic checkpoint was saved."""


@dataclass
class ImageBatch:
    """A batch of normalized images with integer labels.

    pixels: float tensor of shape (batch, channels, height, width), values
    in [0,1]. labels: int64 tensor of length batch.
    """

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ConfigurationError(
                f"pixels must be (batch, channels, height, width), got shape "
                f"{tuple(self.pixels.shape)}"
            )
        if self.labels.dim() != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ConfigurationError(
                f"labels length {tuple(self.labels.shape)} does not match batch "
                f"dimension {self.pixels.shape[0]}"
            )
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigurationError(f"pixel values outside [0,1]: min={lo}, max={hi}")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class Perturbation:
    """A pixel-space perturbation tied to an l-infinity budget.

    When a budget is declared, |delta| <= eps must hold exactly at the
    tensor's own precision: attack implementations clamp the recomputed
    difference to +-eps, and eps here means eps as representable in the
    delta dtype (clamping a float32 tensor at 0.05 yields float32(0.05),
    one ulp above the decimal literal). budget_eps is None for externally
    supplied attacks that promise no l-infinity bound.
    """

    delta: torch.Tensor
    budget_eps: float | None

    def __post_init__(self):
        if self.budget_eps is not None:
            peak = float(self.delta.abs().max()) if self.delta.numel() else 0.0
            cap = float(torch.as_tensor(self.budget_eps, dtype=self.delta.dtype))
            if peak > cap:
                raise ConfigurationError(
                    f"perturbation l-inf norm {peak} exceeds budget {self.budget_eps}"
                )


@dataclass
class AttackBudget:
    """Constraints for perturbation crafting.

    eps is the l-infinity bound in [0,1] pixel units. steps and step_size
    control iterative attacks; step_size=None means the 2.5*eps/steps
    default. lam weights the parallel gradient component in the one-step
    concealable attack; c_h weights the concealment loss in the iterative
    one.
    """

    eps: float
    steps: int = 1
    step_size: float | None = None
    mode: str = UNTARGETED
    lam: float = 1.0
    c_h: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigurationError(f"eps must be nonnegative, got {self.eps}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigurationError(f"step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0,1], got {self.lam}")
        if self.c_h < 0:
            raise ConfigurationError(f"c_h must be nonnegative, got {self.c_h}")
        if self.mode not in (UNTARGETED, TARGETED):
            raise ConfigurationError(f"unknown attack mode {self.mode!r}")

    @property
    def targeted(self) -> bool:
        return self.mode == TARGETED

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / self.steps


@dataclass
class TargetLabelAssignment:
    """Per-example target labels for a targeted attack, each != ground truth."""

    target_labels: torch.Tensor
    source_labels: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.source_labels is not None:
            if bool((self.target_labels == self.source_labels).any()):
                raise ConfigurationError("a target label equals its ground-truth label")


class InputTransformer(nn.Module):
    """Image-to-image network with an on/off switch.

    When the switch is off, forward returns its input unchanged (the same
    tensor, so downstream computation is bit-identical to the bare target).
    Subclasses implement transform(); its output must match the input shape
    and stay in [0,1].
    """

    def __init__(self):
        super().__init__()
        self.switch_on = False
        self.input_shape: tuple[int, int, int] | None = None

    def switch(self, on: bool) -> "InputTransformer":
        self.switch_on = bool(on)
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.switch_on:
            return x
        return self.transform(x)

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityTransformer(InputTransformer):
    """Transformer whose transform branch is the exact identity."""

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        return x


@contextlib.contextmanager
def switched(transformer: InputTransformer | None, on: bool):
    """Temporarily force a transformer's switch state, restoring it after."""
    if transformer is None:
        yield
        return
    prev = transformer.switch_on
    transformer.switch_on = bool(on)
    try:
        yield
    finally:
        transformer.switch_on = prev


@contextlib.contextmanager
def eval_mode(*models: nn.Module):
    """Force eval mode so crafting and scoring never mutate BN statistics.

    Saves and restores the training flag of every submodule individually,
    so mixed-mode compositions come back exactly as they were.
    """
    states = []
    for m in models:
        if m is None:
            continue
        for sub in m.modules():
            states.append((sub, sub.training))
            sub.training = False
    try:
        yield
    finally:
        for sub, was_training in states:
            sub.training = was_training


class ComposedClassifier(nn.Module):
    """The deployment pipeline: target classifier behind an input transformer.

    Computes target(transformer(x)); with the transformer switched off this
    is exactly target(x). Input gradients flow through both networks.
    """

    def __init__(self, target: nn.Module, transformer: InputTransformer):
        super().__init__()
        self.target = target
        self.transformer = transformer
        self.num_classes = getattr(target, "num_classes", None)
        self.input_shape = getattr(target, "input_shape", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.target(self.transformer(x))


def compose_pipeline(target: nn.Module, transformer: InputTransformer) -> ComposedClassifier:
    """Compose a target classifier with a trojan transformer.

    Raises ConfigurationError if both models declare an input_shape and the
    shapes differ.
    """
    t_shape = getattr(target, "input_shape", None)
    g_shape = getattr(transformer, "input_shape", None)
    if t_shape is not None and g_shape is not None and tuple(t_shape) != tuple(g_shape):
        raise ConfigurationError(
            f"transformer output shape {g_shape} does not match target input "
            f"shape {t_shape}"
        )
    return ComposedClassifier(target, transformer)


def clip_perturbed(x_orig: torch.Tensor, x_pert: torch.Tensor, eps: float) -> torch.Tensor:
    """Clamp perturbed pixels to [max(0, x_orig-eps), min(1, x_orig+eps)].

    Total function: for any inputs the result lies in the valid image range
    and within eps of x_orig (elementwise, exactly). Idempotent.
    """
    lower = (x_orig - eps).clamp_(min=0.0)
    upper = (x_orig + eps).clamp_(max=1.0)
    return torch.clamp(x_pert, min=lower, max=upper)
