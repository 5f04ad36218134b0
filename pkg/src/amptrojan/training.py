"""Trojan training (alternating crafting / update), target pretraining, and
the single-step adversarial-training baseline.

Trojan training freezes the target F for the whole run and alternates, per
minibatch: craft a concealable perturbation against the current G, then
take one SGD step on c_i * L_identity + L_attack with the perturbation
held fixed. L_identity = mean ||F(G(x)) - F(x)||_2^2 keeps the switched-on
pipeline faithful on clean data while L_attack rewards misclassification
(or target-label hits) on the crafted examples.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F_nn

from .attacks import c_bim_k, c_fgsm, sample_targets
from .core import (
    AmpTrojanError,
    AttackBudget,
    ConfigurationError,
    ImageBatch,
    InputTransformer,
    TrainingDiverged,
    TARGETED,
    UNTARGETED,
    switched,
)
from .data import Dataset

log = logging.getLogger(__name__)

TROJAN_KINDS = ("c_fgsm", "c_bim_k_untargeted", "c_bim_k_targeted")
DEFAULT_C_I = {"c_fgsm": 100.0, "c_bim_k_untargeted": 500.0, "c_bim_k_targeted": 150.0}


def identity_loss(target: nn.Module, trojan: InputTransformer, x: ImageBatch) -> torch.Tensor:
    """Mean over the batch of the squared logit distance between the
    switched-on pipeline and the bare target on clean inputs."""
    with switched(trojan, True):
        transformed = target(trojan(x.pixels))
    clean = target(x.pixels)
    return (transformed - clean).pow(2).sum(dim=1).mean()


@dataclass
class TargetTrainConfig:
    epochs: int = 10
    seed: int = 0
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass
class AdvTrainConfig(TargetTrainConfig):
    beta: float = 0.5
    budget: AttackBudget = field(default_factory=lambda: AttackBudget(eps=0.05))

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta must be in [0,1], got {self.beta}")
        if self.budget.targeted:
            raise ConfigurationError("adversarial training uses untargeted FGSM")


@dataclass
class TrojanTrainConfig:
    attack_kind: str = "c_fgsm"
    budget: AttackBudget = field(default_factory=lambda: AttackBudget(eps=0.05))
    c_i: float | None = None
    epochs: int = 5
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    seed: int = 0
    batch_size: int = 128
    concealment: str = "logit_l2"
    eval_examples: int = 512

    def __post_init__(self):
        if self.attack_kind not in TROJAN_KINDS:
            raise ConfigurationError(
                f"unknown attack kind {self.attack_kind!r}; known: {TROJAN_KINDS}"
            )
        if self.lr_end > self.lr_start:
            raise ConfigurationError("lr_end must not exceed lr_start")
        if self.c_i is None:
            self.c_i = DEFAULT_C_I[self.attack_kind]
        if self.c_i < 0:
            raise ConfigurationError("c_i must be nonnegative")
        wants_targeted = self.attack_kind == "c_bim_k_targeted"
        if self.budget.targeted != wants_targeted:
            raise ConfigurationError(
                f"{self.attack_kind} requires budget mode "
                f"{TARGETED if wants_targeted else UNTARGETED!r}"
            )

    @property
    def targeted(self) -> bool:
        return self.attack_kind == "c_bim_k_targeted"


def _param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _epoch_lr(cfg, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def _shuffle_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def _diverged(loss: torch.Tensor, model: nn.Module, where: str, diag_dir: Path | None):
    msg = f"non-finite loss {float(loss.detach())} at {where}"
    if diag_dir is not None:
        diag_dir = Path(diag_dir)
        diag_dir.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), diag_dir / "diverged.pt")
        msg += f"; diagnostic state saved to {diag_dir / 'diverged.pt'}"
    raise TrainingDiverged(msg)


def _augment_batch(pixels: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Pad-4 random crop plus horizontal flip, seeded."""
    n, _, h, w = pixels.shape
    padded = F_nn.pad(pixels, (4, 4, 4, 4))
    offs = torch.randint(0, 9, (n, 2), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(pixels)
    for i in range(n):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = torch.flip(crop, dims=(2,)) if bool(flips[i]) else crop
    return out


def _build_optimizer(model: nn.Module, cfg: TargetTrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _train_classifier(model, data: Dataset, cfg: TargetTrainConfig, batch_loss,
                      diag_dir: Path | None, epoch_hook=None) -> list[dict]:
    opt = _build_optimizer(model, cfg)
    aug_gen = torch.Generator().manual_seed(cfg.seed * 7 + 1)
    records = []
    for epoch in range(cfg.epochs):
        model.train()
        total, count = 0.0, 0
        for batch in data.batches(cfg.batch_size, shuffle_seed=_shuffle_seed(cfg.seed, epoch)):
            if cfg.augment:
                batch = ImageBatch(_augment_batch(batch.pixels, aug_gen), batch.labels)
            loss = batch_loss(model, batch)
            if not torch.isfinite(loss):
                _diverged(loss, model, f"epoch {epoch}", diag_dir)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        record = {"epoch": epoch, "loss": total / max(count, 1)}
        if epoch_hook is not None:
            extra = epoch_hook(epoch, model, record)
            if extra:
                record.update(extra)
        records.append(record)
        log.info("epoch %d: loss %.4f", epoch, record["loss"])
    model.eval()
    return records


def train_target(model, data: Dataset, cfg: TargetTrainConfig,
                 diag_dir: Path | None = None, epoch_hook=None) -> list[dict]:
    """Plain cross-entropy training; returns per-epoch records."""
    def batch_loss(m, batch):
        return F_nn.cross_entropy(m(batch.pixels), batch.labels)
    return _train_classifier(model, data, cfg, batch_loss, diag_dir, epoch_hook)


def adv_train_target(model, data: Dataset, cfg: AdvTrainConfig,
                     diag_dir: Path | None = None, epoch_hook=None) -> list[dict]:
    """Single-step adversarial training: beta*CE(x) + (1-beta)*CE(x_fgsm).

    beta=1 skips crafting entirely, so the trajectory matches train_target
    under the same seed.
    """
    from .attacks import fgsm

    if cfg.beta == 1.0:
        return train_target(model, data, cfg, diag_dir, epoch_hook)

    def batch_loss(m, batch):
        adv = fgsm(m, batch, cfg.budget).adversarial
        clean_ce = F_nn.cross_entropy(m(batch.pixels), batch.labels)
        adv_ce = F_nn.cross_entropy(m(adv.pixels), adv.labels)
        return cfg.beta * clean_ce + (1.0 - cfg.beta) * adv_ce

    return _train_classifier(model, data, cfg, batch_loss, diag_dir, epoch_hook)


def train_trojan(target: nn.Module, trojan: InputTransformer, data: Dataset,
                 cfg: TrojanTrainConfig, eval_data: Dataset | None = None,
                 diag_dir: Path | None = None, epoch_hook=None) -> list[dict]:
    """Alternating trojan training against a frozen target.

    Per minibatch: craft a perturbation with the configured concealable
    attack against the current trojan, then one SGD step on
    c_i * L_identity + L_attack with the crafted inputs held fixed. The
    target's parameters are verified unchanged at the end. Returns
    per-epoch records; if eval_data is given and cfg.eval_examples > 0,
    each record carries a small seeded audit of the five requirements.
    """
    frozen_before = _param_hash(target)
    for p in target.parameters():
        p.requires_grad_(False)
    target.eval()

    num_classes = getattr(target, "num_classes", 10) or 10
    opt = torch.optim.SGD(trojan.parameters(), lr=cfg.lr_start, momentum=0.0)
    records = []
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        sums = {"identity_loss": 0.0, "attack_loss": 0.0, "combined_loss": 0.0}
        count = 0
        for step, batch in enumerate(
            data.batches(cfg.batch_size, shuffle_seed=_shuffle_seed(cfg.seed, epoch))
        ):
            targets = None
            if cfg.targeted:
                targets = sample_targets(
                    batch.labels, num_classes,
                    seed=cfg.seed * 1_000_003 + epoch * 10_007 + step,
                )
            if cfg.attack_kind == "c_fgsm":
                crafted = c_fgsm(target, trojan, batch, cfg.budget)
            else:
                crafted = c_bim_k(target, trojan, batch, cfg.budget, targets,
                                  concealment=cfg.concealment)
            x_adv = crafted.adversarial.pixels.detach()

            trojan.train()
            li = identity_loss(target, trojan, batch)
            with switched(trojan, True):
                adv_logits = target(trojan(x_adv))
            if cfg.targeted:
                lb = F_nn.cross_entropy(adv_logits, targets.target_labels)
            else:
                lb = -F_nn.cross_entropy(adv_logits, batch.labels)
            loss = cfg.c_i * li + lb
            if not torch.isfinite(loss):
                _diverged(loss, trojan, f"epoch {epoch} step {step}", diag_dir)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["identity_loss"] += float(li.detach())
            sums["attack_loss"] += float(lb.detach())
            sums["combined_loss"] += float(loss.detach())
            count += 1

        record = {"epoch": epoch, "lr": lr}
        record.update({k: v / max(count, 1) for k, v in sums.items()})
        if eval_data is not None and cfg.eval_examples > 0:
            from .evaluation import audit

            attack_name = "c_fgsm" if cfg.attack_kind == "c_fgsm" else "c_bim_k"
            report = audit(target, trojan, attack_name, eval_data, cfg.budget,
                           seed=cfg.seed, limit=cfg.eval_examples,
                           concealment=cfg.concealment)
            record.update({f"audit_{k}": v for k, v in report.to_dict().items()
                           if isinstance(v, (int, float))})
        if epoch_hook is not None:
            extra = epoch_hook(epoch, trojan, record)
            if extra:
                record.update(extra)
        records.append(record)
        log.info(
            "trojan epoch %d: identity %.5f attack %.4f combined %.4f",
            epoch, record["identity_loss"], record["attack_loss"],
            record["combined_loss"],
        )
    trojan.eval()

    if _param_hash(target) != frozen_before:
        raise AmpTrojanError("target parameters changed during trojan training")
    return records
