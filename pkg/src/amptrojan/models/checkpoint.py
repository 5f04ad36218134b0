"""Checkpoint directories: metadata.json + weights.pt.

Metadata records what was built (kind, architecture spec, seed, training
config, code version) so loading can validate against the requested spec
instead of silently deserializing mismatched weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from torch import nn

from .. import __version__
from ..core import CheckpointError

METADATA_NAME = "metadata.json"
WEIGHTS_NAME = "weights.pt"


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    kind: str,
    arch: dict,
    seed: int,
    train_config: dict | None = None,
    overwrite: bool = False,
) -> Path:
    path = Path(path)
    if path.exists() and (path / METADATA_NAME).exists() and not overwrite:
        raise CheckpointError(f"refusing to overwrite existing checkpoint at {path}")
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "code_version": __version__,
        "kind": kind,
        "arch": arch,
        "seed": seed,
        "train_config": train_config or {},
    }
    with open(path / METADATA_NAME, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    torch.save(model.state_dict(), path / WEIGHTS_NAME)
    return path


def read_metadata(path: str | Path) -> dict:
    path = Path(path)
    meta_path = path / METADATA_NAME
    if not meta_path.exists():
        raise CheckpointError(f"no checkpoint at {path} (missing {METADATA_NAME})")
    with open(meta_path) as fh:
        return json.load(fh)


def load_checkpoint(path: str | Path, model: nn.Module, kind: str, arch: dict) -> dict:
    """Load weights into model after validating kind and architecture.

    Returns the checkpoint metadata.
    """
    path = Path(path)
    meta = read_metadata(path)
    if meta.get("kind") != kind:
        raise CheckpointError(
            f"checkpoint at {path} is a {meta.get('kind')!r}, expected {kind!r}"
        )
    if meta.get("arch") != arch:
        raise CheckpointError(
            f"checkpoint architecture {meta.get('arch')} does not match requested {arch}"
        )
    state = torch.load(path / WEIGHTS_NAME, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return meta
