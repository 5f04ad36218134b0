"""Command-line experiment runner.

Every command reads one validated config document, writes a run directory
(resolved config, manifest, metrics.jsonl + metrics.csv, plots), and exits
0 on success or a distinct nonzero code with a JSON error record on
stderr: 2 config schema, 3 checkpoint, 4 shape/arguments, 5 dataset,
1 anything else. Metric files carry no timestamps, so identical
config+seed reruns are byte-identical; wall-clock data lives only in the
manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import click
import yaml

from . import __version__
from .config import config_hash, load_config
from .core import (
    AmpTrojanError,
    AttackBudget,
    CheckpointError,
    ConfigSchemaError,
    ConfigurationError,
    DatasetError,
)
from .data import load_dataset
from .models import (
    ATNetSpec,
    TargetSpec,
    build_atnet,
    build_target,
    load_checkpoint,
    save_checkpoint,
)

INPUT_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}

EXIT_CODES = [
    (ConfigSchemaError, 2),
    (CheckpointError, 3),
    (ConfigurationError, 4),
    (DatasetError, 5),
]


def _exit_code(exc: Exception) -> int:
    for klass, code in EXIT_CODES:
        if isinstance(exc, klass):
            return code
    return 1


def _git_version() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or None
    except OSError:
        return None


def _budget(cfg: dict) -> AttackBudget:
    a = cfg["attack"]
    return AttackBudget(
        eps=a["eps"], steps=a["steps"], step_size=a["step_size"],
        mode=a["mode"], lam=a["lambda"], c_h=a["c_h"],
    )


def _attack_kwargs(cfg: dict) -> dict:
    a = cfg["attack"]
    return {"concealment": a["concealment"], "label_source": a["label_source"]}


def _load_data(cfg: dict, split: str):
    d = cfg["dataset"]
    return load_dataset(d["name"], split, d["cache_dir"])


def _target_spec(cfg: dict) -> TargetSpec:
    return TargetSpec(cfg["target"]["backbone"], INPUT_SHAPES[cfg["dataset"]["name"]])


def _atnet_spec(cfg: dict) -> ATNetSpec:
    t = cfg["trojan"]
    return ATNetSpec(INPUT_SHAPES[cfg["dataset"]["name"]], t["width_multiplier"])


def _get_target(cfg: dict, require_checkpoint: bool):
    spec = _target_spec(cfg)
    model = build_target(spec, cfg["target"]["seed"])
    ckpt = cfg["target"]["checkpoint"]
    if ckpt:
        load_checkpoint(ckpt, model, "target", spec.to_dict())
    elif require_checkpoint:
        raise CheckpointError("this command needs target.checkpoint in the config")
    model.eval()
    return model, spec


def _get_trojan(cfg: dict, require_checkpoint: bool):
    if cfg.get("trojan") is None:
        if require_checkpoint:
            raise CheckpointError("this command needs a trojan section in the config")
        return None, None
    spec = _atnet_spec(cfg)
    model = build_atnet(spec, cfg["trojan"]["seed"])
    ckpt = cfg["trojan"]["checkpoint"]
    if ckpt:
        load_checkpoint(ckpt, model, "trojan", spec.to_dict())
    elif require_checkpoint:
        raise CheckpointError("this command needs trojan.checkpoint in the config")
    model.eval()
    return model, spec


class RunDir:
    """A self-describing output directory for one command invocation."""

    def __init__(self, root: Path, command: str, cfg: dict, seed: int):
        self.path = Path(root)
        if (self.path / "metrics.jsonl").exists():
            raise ConfigurationError(
                f"run directory {self.path} already holds results; pick a fresh --out"
            )
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.records: list[dict] = []
        with open(self.path / "config.resolved.yaml", "w") as fh:
            yaml.safe_dump(cfg, fh, sort_keys=True)

    def record(self, rec: dict):
        self.records.append(rec)

    def finish(self, dataset_checksums: dict | None = None):
        with open(self.path / "metrics.jsonl", "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        keys = sorted({k for rec in self.records for k in rec})
        with open(self.path / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for rec in self.records:
                writer.writerow(rec)
        manifest = {
            "command": self.command,
            "code_version": __version__,
            "git_version": _git_version(),
            "seed": self.seed,
            "config_sha256": config_hash(self.cfg),
            "dataset_checksums": dataset_checksums or {},
            "created_unix": time.time(),
            "metrics_schema_version": 1,
        }
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _dataset_checksums(cfg: dict) -> dict:
    from . import data as data_mod

    name = cfg["dataset"]["name"]
    if name == "mnist":
        return {archive: f"md5:{md5}" for archive, md5 in data_mod._MNIST_FILES.values()}
    out = {data_mod._CIFAR_TAR[0]: f"md5:{data_mod._CIFAR_TAR[1]}"}
    out.update({
        archive: f"sha256:{sha}"
        for archive, _, sha in data_mod._CIFAR_PARQUET.values()
    })
    return out


def _run(command: str, config_path: str, seed: int | None, limit: int | None,
         out: str | None, body) -> None:
    """Shared harness: validate, prepare the run dir, execute, persist."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg["seed"] = seed
        if limit is not None:
            cfg["eval"]["limit"] = limit
        root = Path(out) if out else Path("runs") / f"{command}-{Path(config_path).stem}"
        run = RunDir(root, command, cfg, cfg["seed"])
        body(cfg, run)
        run.finish(_dataset_checksums(cfg))
        click.echo(f"ok: {run.path}")
    except Exception as exc:  # mapped to distinct exit codes
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "command": command,
            "exit_code": _exit_code(exc),
        }
        print(json.dumps(record), file=sys.stderr)
        if not isinstance(exc, AmpTrojanError):
            raise SystemExit(1)
        raise SystemExit(record["exit_code"])


def _seed_option(f):
    f = click.option("--seed", type=int, default=None, help="override config seed")(f)
    f = click.option("--limit", type=int, default=None,
                     help="evaluate at most this many examples")(f)
    f = click.option("--out", type=click.Path(), default=None,
                     help="run directory (default runs/<command>-<config>)")(f)
    return f


@click.group()
@click.version_option(__version__)
@click.option("--quiet", is_flag=True, help="suppress progress logging")
def main(quiet):
    """Amplification-trojan experiment runner."""
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command("train-target")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_train_target(config_path, seed, limit, out):
    """Pretrain a target classifier with plain cross entropy."""

    def body(cfg, run):
        from .training import TargetTrainConfig, train_target

        train_data = _load_data(cfg, "train")
        test_data = _load_data(cfg, "test")
        model, spec = _get_target(cfg, require_checkpoint=False)
        t = cfg["train"]
        tcfg = TargetTrainConfig(
            epochs=t["epochs"], seed=cfg["seed"], batch_size=t["batch_size"],
            lr=t["lr"], optimizer=t["optimizer"], momentum=t["momentum"],
            weight_decay=t["weight_decay"], augment=t["augment"],
        )

        def hook(epoch, m, rec):
            save_checkpoint(run.path / "checkpoints" / f"epoch_{epoch:03d}", m,
                            "target", spec.to_dict(), cfg["seed"],
                            dataclasses.asdict(tcfg))
            return {"test_acc": _accuracy(m, test_data, t["batch_size"],
                                          cfg["eval"]["limit"])}

        records = train_target(model, train_data, tcfg,
                               diag_dir=run.path / "diagnostics", epoch_hook=hook)
        for rec in records:
            run.record(rec)
        save_checkpoint(run.path / "checkpoints" / "final", model, "target",
                        spec.to_dict(), cfg["seed"], dataclasses.asdict(tcfg))
        run.record({"final_test_acc": _accuracy(model, test_data, t["batch_size"],
                                                cfg["eval"]["limit"])})

    _run("train-target", config_path, seed, limit, out, body)


@main.command("advtrain-target")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_advtrain_target(config_path, seed, limit, out):
    """Adversarially train a target: beta*CE(x) + (1-beta)*CE(x_fgsm)."""

    def body(cfg, run):
        from .training import AdvTrainConfig, adv_train_target

        train_data = _load_data(cfg, "train")
        test_data = _load_data(cfg, "test")
        model, spec = _get_target(cfg, require_checkpoint=False)
        t = cfg["train"]
        budget = AttackBudget(eps=cfg["attack"]["eps"])
        tcfg = AdvTrainConfig(
            epochs=t["epochs"], seed=cfg["seed"], batch_size=t["batch_size"],
            lr=t["lr"], optimizer=t["optimizer"], momentum=t["momentum"],
            weight_decay=t["weight_decay"], augment=t["augment"],
            beta=t["beta"], budget=budget,
        )

        def hook(epoch, m, rec):
            save_checkpoint(run.path / "checkpoints" / f"epoch_{epoch:03d}", m,
                            "target", spec.to_dict(), cfg["seed"],
                            dataclasses.asdict(tcfg))
            return {"test_acc": _accuracy(m, test_data, t["batch_size"],
                                          cfg["eval"]["limit"])}

        records = adv_train_target(model, train_data, tcfg,
                                   diag_dir=run.path / "diagnostics", epoch_hook=hook)
        for rec in records:
            run.record(rec)
        save_checkpoint(run.path / "checkpoints" / "final", model, "target",
                        spec.to_dict(), cfg["seed"], dataclasses.asdict(tcfg))
        run.record({"final_test_acc": _accuracy(model, test_data, t["batch_size"],
                                                cfg["eval"]["limit"])})

    _run("advtrain-target", config_path, seed, limit, out, body)


@main.command("train-trojan")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_train_trojan(config_path, seed, limit, out):
    """Train the trojan network against a frozen target checkpoint."""

    def body(cfg, run):
        from .training import TrojanTrainConfig, train_trojan

        train_data = _load_data(cfg, "train")
        test_data = _load_data(cfg, "test")
        target, _ = _get_target(cfg, require_checkpoint=True)
        if cfg.get("trojan") is None:
            raise ConfigurationError("train-trojan needs a trojan section")
        tspec = _atnet_spec(cfg)
        trojan = build_atnet(tspec, cfg["trojan"]["seed"])
        t = cfg["train"]
        mode = "targeted" if t["attack_kind"] == "c_bim_k_targeted" else "untargeted"
        a = cfg["attack"]
        budget = AttackBudget(eps=a["eps"], steps=a["steps"], step_size=a["step_size"],
                              mode=mode, lam=a["lambda"], c_h=a["c_h"])
        tcfg = TrojanTrainConfig(
            attack_kind=t["attack_kind"], budget=budget, c_i=t["c_i"],
            epochs=t["epochs"], lr_start=t["lr_start"], lr_end=t["lr_end"],
            seed=cfg["seed"], batch_size=t["batch_size"],
            concealment=a["concealment"], eval_examples=t["eval_examples"],
        )

        def hook(epoch, g, rec):
            save_checkpoint(run.path / "checkpoints" / f"epoch_{epoch:03d}", g,
                            "trojan", tspec.to_dict(), cfg["seed"], dataclasses.asdict(tcfg))
            return None

        records = train_trojan(target, trojan, train_data, tcfg,
                               eval_data=test_data,
                               diag_dir=run.path / "diagnostics", epoch_hook=hook)
        for rec in records:
            run.record(rec)
        save_checkpoint(run.path / "checkpoints" / "final", trojan, "trojan",
                        tspec.to_dict(), cfg["seed"], dataclasses.asdict(tcfg))

    _run("train-trojan", config_path, seed, limit, out, body)


@main.command("audit")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_audit(config_path, seed, limit, out):
    """Run the five-requirement audit for the configured pipeline."""

    def body(cfg, run):
        from .evaluation import audit

        test_data = _load_data(cfg, "test")
        target, _ = _get_target(cfg, require_checkpoint=True)
        trojan, _ = _get_trojan(cfg, require_checkpoint=False)
        report = audit(target, trojan, cfg["attack"]["kind"], test_data,
                       _budget(cfg), seed=cfg["seed"], limit=cfg["eval"]["limit"],
                       batch_size=cfg["eval"]["batch_size"], **_attack_kwargs(cfg))
        rec = {"attack": cfg["attack"]["kind"]}
        rec.update(report.to_dict())
        run.record(rec)

    _run("audit", config_path, seed, limit, out, body)


@main.command("sweep")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", "kind", type=click.Choice(["epsilon", "lambda", "c_h"]),
              default=None, help="override the configured sweep kind")
@_seed_option
def cmd_sweep(config_path, kind, seed, limit, out):
    """Sweep epsilon, lambda, or c_h and audit at every grid point."""

    def body(cfg, run):
        from .evaluation import epsilon_sweep, sensitivity_sweep

        sweep_cfg = cfg["eval"].get("sweep") or {}
        sweep_kind = kind or sweep_cfg.get("kind")
        if not sweep_kind:
            raise ConfigurationError("no sweep kind configured; set eval.sweep.kind")
        values = sweep_cfg.get("values")
        if not values:
            raise ConfigurationError("no sweep values configured; set eval.sweep.values")
        test_data = _load_data(cfg, "test")
        target, _ = _get_target(cfg, require_checkpoint=True)
        trojan, _ = _get_trojan(cfg, require_checkpoint=False)
        common = dict(seed=cfg["seed"], limit=cfg["eval"]["limit"],
                      **_attack_kwargs(cfg))
        if sweep_kind == "epsilon":
            records = epsilon_sweep(target, trojan, cfg["attack"]["kind"], values,
                                    test_data, _budget(cfg), **common)
            x_key = "eps"
        else:
            records = sensitivity_sweep(sweep_kind, values, target, trojan,
                                        cfg["attack"]["kind"], test_data,
                                        _budget(cfg), **common)
            x_key = sweep_kind
        for rec in records:
            run.record(rec)
        _plot_sweep(records, x_key, run.path / f"sweep_{sweep_kind}.png")

    _run("sweep", config_path, seed, limit, out, body)


@main.command("loss-surface")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_loss_surface(config_path, seed, limit, out):
    """Probe the loss surface around sampled test images, switch on and off."""

    def body(cfg, run):
        import torch

        from .evaluation import loss_surface

        test_data = _load_data(cfg, "test")
        target, _ = _get_target(cfg, require_checkpoint=True)
        trojan, _ = _get_trojan(cfg, require_checkpoint=True)
        surf = cfg["eval"].get("surface") or {}
        span = surf.get("span", 0.02)
        resolution = surf.get("resolution", 41)
        n_images = surf.get("images", 50)

        gen = torch.Generator().manual_seed(cfg["seed"])
        picks = torch.randperm(len(test_data), generator=gen)[:n_images]
        grids = []
        for i, pos in enumerate(picks.tolist()):
            batch = test_data.batch(torch.tensor([pos]))
            on, off = loss_surface(target, trojan, batch.pixels,
                                   int(batch.labels[0]), span=span,
                                   resolution=resolution, seed=cfg["seed"] + i)
            run.record({
                "image_index": int(test_data.ids[pos]),
                "label": int(batch.labels[0]),
                "ruggedness_on": on.ruggedness(),
                "ruggedness_off": off.ruggedness(),
                "center_loss_on": on.center_loss(),
                "center_loss_off": off.center_loss(),
                "degenerate_axis_on": on.degenerate_axis,
                "degenerate_axis_off": off.degenerate_axis,
            })
            grids.append({"on": on.losses, "off": off.losses,
                          "a": on.a_values, "r": on.r_values})
        torch.save(grids, run.path / "surfaces.pt")
        _plot_surface(grids[0], run.path / "surface.png")

    _run("loss-surface", config_path, seed, limit, out, body)


@main.command("transfer")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_transfer(config_path, seed, limit, out):
    """Audit every configured trojan against every configured target."""

    def body(cfg, run):
        from .evaluation import transfer_matrix

        tr_cfg = cfg["eval"].get("transfer")
        if not tr_cfg:
            raise ConfigurationError("transfer needs eval.transfer in the config")
        test_data = _load_data(cfg, "test")
        shape = INPUT_SHAPES[cfg["dataset"]["name"]]
        trojans = []
        for item in tr_cfg["trojans"]:
            if item.get("checkpoint"):
                spec = ATNetSpec(shape, item.get("width_multiplier", 1.0))
                g = build_atnet(spec, 0)
                load_checkpoint(item["checkpoint"], g, "trojan", spec.to_dict())
                g.eval()
                trojans.append((item["name"], g))
            else:
                trojans.append((item["name"], None))
        targets = []
        for item in tr_cfg["targets"]:
            spec = TargetSpec(item["backbone"], shape)
            f = build_target(spec, 0)
            load_checkpoint(item["checkpoint"], f, "target", spec.to_dict())
            f.eval()
            targets.append((item["name"], f))
        records = transfer_matrix(trojans, targets, tr_cfg["attacks"], test_data,
                                  _budget(cfg), seed=cfg["seed"],
                                  limit=cfg["eval"]["limit"], **_attack_kwargs(cfg))
        for rec in records:
            run.record(rec)

    _run("transfer", config_path, seed, limit, out, body)


@main.command("dump-examples")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@_seed_option
def cmd_dump_examples(config_path, seed, limit, out):
    """Write a grid of clean/adversarial inputs and their trojan outputs."""

    def body(cfg, run):
        from .evaluation import dump_examples

        test_data = _load_data(cfg, "test")
        target, _ = _get_target(cfg, require_checkpoint=True)
        trojan, _ = _get_trojan(cfg, require_checkpoint=False)
        stats = dump_examples(target, trojan, cfg["attack"]["kind"], test_data,
                              _budget(cfg), cfg["eval"]["dump_n"],
                              run.path / "examples.png", seed=cfg["seed"],
                              **_attack_kwargs(cfg))
        run.record(stats)

    _run("dump-examples", config_path, seed, limit, out, body)


def _accuracy(model, data, batch_size: int, limit: int | None = None) -> float:
    import torch

    from .core import eval_mode

    n, correct = 0, 0
    with eval_mode(model), torch.no_grad():
        for batch in data.batches(batch_size):
            preds = model(batch.pixels).argmax(dim=1)
            correct += int((preds == batch.labels).sum())
            n += len(batch)
            if limit is not None and n >= limit:
                break
    return 100.0 * correct / n


def _plot_sweep(records: list[dict], x_key: str, out_path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[x_key] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (
        ("adv_acc_on", "adversarial accuracy (switch on)"),
        ("adv_acc_off", "direct accuracy (switch off)"),
        ("success_rate_on", "success rate (switch on)"),
        ("success_rate_off", "success rate (switch off)"),
    ):
        ys = [r.get(key) for r in records]
        if all(y is not None for y in ys):
            ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(x_key)
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _plot_surface(grid: dict, out_path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, title in ((axes[0], "on", "switch on"),
                           (axes[1], "off", "switch off")):
        im = ax.contourf(grid["r"], grid["a"], grid[key], levels=30)
        ax.set_title(title)
        ax.set_xlabel("random direction")
        ax.set_ylabel("gradient direction")
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
