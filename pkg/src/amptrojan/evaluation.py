"""The five-requirement audit and the studies built on top of it.

An audit crafts adversarial examples once per input against the
switched-on pipeline, then scores the same crafted examples with the
switch on and off: clean accuracy both ways (identity requirement),
adversarial accuracy both ways (attack vs concealment), targeted success
rates, and the perturbation norms (imperceptibility).

Scoring is order-independent by construction: examples are processed in a
canonical order given by their stable dataset ids, targeted labels are
assigned per id, accuracy metrics aggregate integer counts, and norm means
use exact summation. Reordering the dataset therefore changes nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F_nn

from .attacks import make_attack
from .core import (
    AttackBudget,
    ConfigurationError,
    IdentityTransformer,
    InputTransformer,
    TargetLabelAssignment,
    eval_mode,
    switched,
)
from .data import Dataset, class_split

DEFAULT_BATCH = 128


@dataclass
class AuditReport:
    """Metrics for one (pipeline, attack, budget) audit.

    Accuracies and rates are percentages derived from the integer counts;
    success rates are None for untargeted audits.
    """

    clean_acc_off: float
    clean_acc_on: float
    adv_acc_off: float
    adv_acc_on: float
    mean_linf: float
    mean_l2: float
    counts: dict
    success_rate_on: float | None = None
    success_rate_off: float | None = None
    budget_eps: float | None = None

    def __post_init__(self):
        if self.counts.get("n", 0) <= 0:
            raise ConfigurationError("audit over an empty dataset")
        for name in ("clean_acc_off", "clean_acc_on", "adv_acc_off", "adv_acc_on",
                     "success_rate_on", "success_rate_off"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ConfigurationError(f"{name}={v} outside [0,100]")
        if self.budget_eps is not None:
            # per-example norms are measured on float32 deltas, so the bound
            # is eps as representable at that precision
            cap = float(torch.as_tensor(self.budget_eps, dtype=torch.float32))
            if self.mean_linf > cap + 1e-9:
                raise ConfigurationError(
                    f"mean_linf {self.mean_linf} exceeds budget {self.budget_eps}"
                )

    def to_dict(self) -> dict:
        d = {
            "clean_acc_off": self.clean_acc_off,
            "clean_acc_on": self.clean_acc_on,
            "adv_acc_off": self.adv_acc_off,
            "adv_acc_on": self.adv_acc_on,
            "success_rate_on": self.success_rate_on,
            "success_rate_off": self.success_rate_off,
            "mean_linf": self.mean_linf,
            "mean_l2": self.mean_l2,
            "budget_eps": self.budget_eps,
        }
        d.update({f"count_{k}": v for k, v in self.counts.items()})
        return d


def _canonical_indices(data: Dataset, limit: int | None, seed: int) -> torch.Tensor:
    """Positions into `data`, ordered by stable id; an optional seeded
    subsample is drawn in id space so it is reorder-invariant too."""
    order = torch.argsort(data.ids)
    if limit is not None and limit < len(order):
        gen = torch.Generator().manual_seed(seed * 2_000_003 + 17)
        chosen = torch.randperm(len(order), generator=gen)[:limit]
        order = order[torch.sort(chosen).values]
    return order


def _targets_by_id(data: Dataset, num_classes: int, seed: int) -> torch.Tensor:
    """Target-label offset per example id: uniform over wrong classes,
    a function of (id, seed) only."""
    gen = torch.Generator().manual_seed(seed * 1_000_003 + 29)
    max_id = int(data.ids.max())
    return torch.randint(1, num_classes, (max_id + 1,), generator=gen)


def audit(
    target: nn.Module,
    trojan: InputTransformer | None,
    attack,
    data: Dataset,
    budget: AttackBudget,
    seed: int = 0,
    limit: int | None = None,
    batch_size: int = DEFAULT_BATCH,
    **attack_kwargs,
) -> AuditReport:
    """Craft once against the switched-on pipeline, score both switch states."""
    if len(data) == 0:
        raise ConfigurationError("audit over an empty dataset")
    trojan = trojan if trojan is not None else IdentityTransformer()
    attack_fn = make_attack(attack) if isinstance(attack, str) else attack
    num_classes = data.num_classes
    offsets = _targets_by_id(data, num_classes, seed) if budget.targeted else None

    indices = _canonical_indices(data, limit, seed)
    n = 0
    correct = {"clean_on": 0, "clean_off": 0, "adv_on": 0, "adv_off": 0}
    hits = {"on": 0, "off": 0}
    linfs: list[float] = []
    l2s: list[float] = []

    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        batch = data.batch(idx)
        targets = None
        if budget.targeted:
            t = (batch.labels + offsets[data.ids[idx]]) % num_classes
            targets = TargetLabelAssignment(t, batch.labels)
        result = attack_fn(target, trojan, batch, budget, targets=targets,
                           **attack_kwargs)
        adv = result.adversarial.pixels
        with eval_mode(target, trojan), torch.no_grad():
            with switched(trojan, True):
                pred_clean_on = target(trojan(batch.pixels)).argmax(dim=1)
                pred_adv_on = target(trojan(adv)).argmax(dim=1)
            with switched(trojan, False):
                pred_clean_off = target(trojan(batch.pixels)).argmax(dim=1)
                pred_adv_off = target(trojan(adv)).argmax(dim=1)
        correct["clean_on"] += int((pred_clean_on == batch.labels).sum())
        correct["clean_off"] += int((pred_clean_off == batch.labels).sum())
        correct["adv_on"] += int((pred_adv_on == batch.labels).sum())
        correct["adv_off"] += int((pred_adv_off == batch.labels).sum())
        if targets is not None:
            hits["on"] += int((pred_adv_on == targets.target_labels).sum())
            hits["off"] += int((pred_adv_off == targets.target_labels).sum())
        delta = result.delta.delta
        linfs.extend(delta.abs().amax(dim=(1, 2, 3)).double().tolist())
        l2s.extend(delta.flatten(1).norm(dim=1).double().tolist())
        n += len(batch)

    counts = {
        "n": n,
        "clean_correct_on": correct["clean_on"],
        "clean_correct_off": correct["clean_off"],
        "adv_correct_on": correct["adv_on"],
        "adv_correct_off": correct["adv_off"],
    }
    if budget.targeted:
        counts["target_hits_on"] = hits["on"]
        counts["target_hits_off"] = hits["off"]
    return AuditReport(
        clean_acc_off=100.0 * correct["clean_off"] / n,
        clean_acc_on=100.0 * correct["clean_on"] / n,
        adv_acc_off=100.0 * correct["adv_off"] / n,
        adv_acc_on=100.0 * correct["adv_on"] / n,
        success_rate_on=100.0 * hits["on"] / n if budget.targeted else None,
        success_rate_off=100.0 * hits["off"] / n if budget.targeted else None,
        mean_linf=math.fsum(linfs) / n,
        mean_l2=math.fsum(l2s) / n,
        counts=counts,
        budget_eps=budget.eps,
    )


def transfer_matrix(
    trojans: list[tuple[str, InputTransformer | None]],
    targets: list[tuple[str, nn.Module]],
    attack_kinds: list[str],
    data: Dataset,
    budget: AttackBudget,
    seed: int = 0,
    limit: int | None = None,
    **attack_kwargs,
) -> list[dict]:
    """Cross-product audits: every trojan against every target and kind.

    A None trojan stands for the bare target (the no-trojan baseline rows).
    Returns one record per cell with the audit's flattened metrics.
    """
    records = []
    for trojan_name, trojan in trojans:
        for target_name, target in targets:
            t_shape = getattr(target, "input_shape", None)
            g_shape = getattr(trojan, "input_shape", None) if trojan else None
            if t_shape and g_shape and tuple(t_shape) != tuple(g_shape):
                raise ConfigurationError(
                    f"trojan {trojan_name!r} ({g_shape}) incompatible with "
                    f"target {target_name!r} ({t_shape})"
                )
            for kind in attack_kinds:
                report = audit(target, trojan, kind, data, budget, seed=seed,
                               limit=limit, **attack_kwargs)
                rec = {"trojan": trojan_name, "target": target_name, "attack": kind}
                rec.update(report.to_dict())
                records.append(rec)
    return records


SWEEPABLE = ("lambda", "c_h")


def sensitivity_sweep(
    parameter: str,
    values: list[float],
    target: nn.Module,
    trojan: InputTransformer,
    attack: str,
    data: Dataset,
    budget: AttackBudget,
    seed: int = 0,
    limit: int | None = None,
    **attack_kwargs,
) -> list[dict]:
    """Audit at each value of lambda or c_h; direct accuracy is the
    switched-off adversarial accuracy, adversarial accuracy the switched-on."""
    if parameter not in SWEEPABLE:
        raise ConfigurationError(f"unknown sweep parameter {parameter!r}")
    if not values:
        raise ConfigurationError("empty sweep value list")
    records = []
    for v in values:
        b = replace(budget, lam=v) if parameter == "lambda" else replace(budget, c_h=v)
        report = audit(target, trojan, attack, data, b, seed=seed, limit=limit,
                       **attack_kwargs)
        rec = {parameter: v,
               "direct_acc": report.adv_acc_off,
               "adversarial_acc": report.adv_acc_on}
        rec.update(report.to_dict())
        records.append(rec)
    return records


def epsilon_sweep(
    target: nn.Module,
    trojan: InputTransformer | None,
    attack: str,
    eps_values: list[float],
    data: Dataset,
    budget: AttackBudget,
    seed: int = 0,
    limit: int | None = None,
    **attack_kwargs,
) -> list[dict]:
    """Audit at each perturbation budget of a nonnegative, nondecreasing grid."""
    if not eps_values:
        raise ConfigurationError("empty epsilon grid")
    if any(e < 0 for e in eps_values):
        raise ConfigurationError("epsilon grid contains negative values")
    if any(b < a for a, b in zip(eps_values, eps_values[1:])):
        raise ConfigurationError("epsilon grid must be nondecreasing")
    records = []
    for eps in eps_values:
        report = audit(target, trojan, attack, data, replace(budget, eps=eps),
                       seed=seed, limit=limit, **attack_kwargs)
        rec = {"eps": eps}
        rec.update(report.to_dict())
        records.append(rec)
    return records


@dataclass
class LossSurfaceGrid:
    """CE loss over x + a*d_a + r*d_r for one switch state.

    d_a is the signed input gradient of that state's pipeline, d_r a signed
    random direction shared between states. losses[i, j] corresponds to
    (a_values[i], r_values[j]).
    """

    a_values: torch.Tensor
    r_values: torch.Tensor
    losses: torch.Tensor
    switch_on: bool
    degenerate_axis: bool = False

    def center_loss(self) -> float:
        zero_a = int(torch.nonzero(self.a_values == 0.0)[0])
        zero_r = int(torch.nonzero(self.r_values == 0.0)[0])
        return float(self.losses[zero_a, zero_r])

    def ruggedness(self) -> float:
        """Mean absolute second difference along the gradient axis."""
        d2 = self.losses[2:, :] - 2.0 * self.losses[1:-1, :] + self.losses[:-2, :]
        return float(d2.abs().mean())


def _axis_values(span: float, resolution: int) -> torch.Tensor:
    """Symmetric grid with an exact 0.0 center for odd resolutions."""
    if resolution < 3:
        raise ConfigurationError("resolution must be at least 3")
    if resolution % 2 == 1:
        half = (resolution - 1) // 2
        pos = torch.linspace(span / half, span, half, dtype=torch.float32)
        return torch.cat([-pos.flip(0), torch.zeros(1), pos])
    return torch.linspace(-span, span, resolution, dtype=torch.float32)


def loss_surface(
    target: nn.Module,
    trojan: InputTransformer | None,
    x: torch.Tensor,
    label: int,
    span: float = 0.02,
    resolution: int = 41,
    seed: int = 0,
    batch_size: int = 256,
) -> tuple[LossSurfaceGrid, LossSurfaceGrid]:
    """Probe the loss surface around one example, switch on and off.

    Axes: d_a = Sign of the CE input gradient of the probed pipeline state;
    d_r = Sign of a seeded standard-normal draw, shared between the states.
    Probed pixels are clipped to [0,1]. Returns (switch_on, switch_off).
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ConfigurationError("loss_surface probes a single example")
    trojan = trojan if trojan is not None else IdentityTransformer()
    labels = torch.tensor([label])
    gen = torch.Generator().manual_seed(seed)
    d_r = torch.randn(x.shape, generator=gen).sign()
    a_values = _axis_values(span, resolution)
    r_values = _axis_values(span, resolution)

    grids = []
    for on in (True, False):
        with eval_mode(target, trojan), switched(trojan, on):
            leaf = x.clone().detach().requires_grad_(True)
            ce = F_nn.cross_entropy(target(trojan(leaf)), labels)
            (g,) = torch.autograd.grad(ce, leaf)
            degenerate = not bool((g != 0).any())
            if degenerate:
                d_a = torch.randn(x.shape, generator=gen).sign()
            else:
                d_a = g.sign()
            probes = []
            for a in a_values:
                for r in r_values:
                    probes.append(torch.clamp(x + a * d_a + r * d_r, 0.0, 1.0))
            probes = torch.cat(probes)
            losses = []
            with torch.no_grad():
                for start in range(0, probes.shape[0], batch_size):
                    chunk = probes[start:start + batch_size]
                    logits = target(trojan(chunk))
                    ce_each = F_nn.cross_entropy(
                        logits, labels.expand(chunk.shape[0]), reduction="none"
                    )
                    losses.append(ce_each)
            grid = torch.cat(losses).reshape(len(a_values), len(r_values))
            grids.append(LossSurfaceGrid(a_values, r_values, grid, on, degenerate))
    return grids[0], grids[1]


def category_holdout(
    target: nn.Module,
    trojan: InputTransformer,
    train_data: Dataset,
    test_data: Dataset,
    holdout_classes: set[int],
    cfg,
    attack: str | None = None,
    seed: int = 0,
    limit: int | None = None,
    diag_dir: Path | None = None,
) -> dict:
    """Train the trojan on the non-holdout classes only, then audit both the
    seen-class and held-out-class test partitions."""
    from .training import train_trojan

    seen_train, _ = class_split(train_data, holdout_classes)
    seen_test, held_test = class_split(test_data, holdout_classes)
    log = train_trojan(target, trojan, seen_train, cfg, diag_dir=diag_dir)
    if attack is None:
        attack = "c_fgsm" if cfg.attack_kind == "c_fgsm" else "c_bim_k"
    seen_report = audit(target, trojan, attack, seen_test, cfg.budget,
                        seed=seed, limit=limit)
    held_report = audit(target, trojan, attack, held_test, cfg.budget,
                        seed=seed, limit=limit)
    return {"train_log": log, "seen_classes": seen_report,
            "holdout_classes": held_report}


def dump_examples(
    target: nn.Module,
    trojan: InputTransformer | None,
    attack,
    data: Dataset,
    budget: AttackBudget,
    n: int,
    out_path: str | Path,
    seed: int = 0,
    **attack_kwargs,
) -> dict:
    """Write an image grid of (clean, adversarial, G(clean), G(adversarial))
    rows for n seeded examples; returns the paths and residual statistics."""
    from torchvision.utils import save_image

    trojan = trojan if trojan is not None else IdentityTransformer()
    indices = _canonical_indices(data, n, seed)
    batch = data.batch(indices)
    targets = None
    if budget.targeted:
        offsets = _targets_by_id(data, data.num_classes, seed)
        t = (batch.labels + offsets[data.ids[indices]]) % data.num_classes
        targets = TargetLabelAssignment(t, batch.labels)
    attack_fn = make_attack(attack) if isinstance(attack, str) else attack
    result = attack_fn(target, trojan, batch, budget, targets=targets,
                       **attack_kwargs)
    adv = result.adversarial.pixels
    with eval_mode(target, trojan), torch.no_grad(), switched(trojan, True):
        g_clean = trojan(batch.pixels)
        g_adv = trojan(adv)
    rows = torch.stack([batch.pixels, adv, g_clean, g_adv], dim=1)
    tiles = rows.reshape(-1, *batch.pixels.shape[1:])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(tiles, out_path, nrow=4)
    return {
        "path": str(out_path),
        "clean_residual": float((g_clean - batch.pixels).abs().mean()),
        "adv_residual": float((g_adv - adv).abs().mean()),
    }
