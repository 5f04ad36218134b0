"""Dataset ingestion, normalization, and subset construction.

Archives are fetched from their public hosts, verified against the pinned
checksums below, and decoded into in-memory uint8 tensors; pixels are
scaled to [0,1] only when batches are materialized. No mean/std whitening
happens anywhere: perturbation budgets are defined on raw pixels, so any
internal normalization would belong to a model's first layer.

Environment:
  AMPTROJAN_DATA_DIR    cache root (default ~/.cache/amptrojan)
  AMPTROJAN_MIRROR_MAP  optional JSON {url_prefix: replacement_prefix} for
                        fetching through a local mirror
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import pickle
import struct
import tarfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import ConfigurationError, DatasetError, ImageBatch

log = logging.getLogger(__name__)

DATASETS = ("mnist", "cifar10")
SPLITS = ("train", "test")

_MNIST_HOSTS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://github.com/fgnt/mnist/raw/master/",
)
_MNIST_FILES = {
    # name -> (archive, md5)
    ("train", "images"): ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train", "labels"): ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("test", "images"): ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("test", "labels"): ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
}

_CIFAR_TAR = ("cifar-10-python.tar.gz", "c58f30108f718f92721af3b95e74349a")
_CIFAR_TAR_URLS = ("https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",)
_CIFAR_PARQUET = {
    # the official parquet export of the same dataset; sha256 per file
    "train": (
        "train-00000-of-00001.parquet",
        "https://huggingface.co/datasets/uoft-cs/cifar10/resolve/main/plain_text/train-00000-of-00001.parquet",
        "8428b53a88a11ac374111006708df51469e315a22ac6d66470afd9c78d2ae883",
    ),
    "test": (
        "test-00000-of-00001.parquet",
        "https://huggingface.co/datasets/uoft-cs/cifar10/resolve/main/plain_text/test-00000-of-00001.parquet",
        "841389e6f2d64f28bf17310e430aebac20ec3ba611a3c5e231dc93c645ce84de",
    ),
}

EXPECTED_SIZES = {("mnist", "train"): 60000, ("mnist", "test"): 10000,
                  ("cifar10", "train"): 50000, ("cifar10", "test"): 10000}


def cache_root() -> Path:
    env = os.environ.get("AMPTROJAN_DATA_DIR")
    return Path(env) if env else Path.home() / ".cache" / "amptrojan"


def _mirror_rewrite(url: str) -> str:
    raw = os.environ.get("AMPTROJAN_MIRROR_MAP")
    if not raw:
        return url
    try:
        mapping = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"AMPTROJAN_MIRROR_MAP is not valid JSON: {exc}") from exc
    for prefix, replacement in mapping.items():
        if url.startswith(prefix):
            return replacement + url[len(prefix):]
    return url


def _checksum(path: Path, algo: str) -> str:
    h = hashlib.new(algo)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fetch(urls: tuple[str, ...], dest: Path, algo: str, expected: str) -> Path:
    if dest.exists():
        got = _checksum(dest, algo)
        if got == expected:
            return dest
        raise DatasetError(
            f"cached file {dest} fails its checksum ({algo} {got}, expected {expected}); "
            "delete it to re-download"
        )
    dest.parent.mkdir(parents=True, exist_ok=True)
    last_err = None
    for url in urls:
        real = _mirror_rewrite(url)
        try:
            log.info("downloading %s", real)
            tmp = dest.with_suffix(dest.suffix + ".part")
            with urllib.request.urlopen(real, timeout=120) as resp, open(tmp, "wb") as out:
                while True:
                    chunk = resp.read(1 << 20)
                    if not chunk:
                        break
                    out.write(chunk)
            got = _checksum(tmp, algo)
            if got != expected:
                tmp.unlink()
                raise DatasetError(
                    f"download of {url} fails its checksum ({algo} {got}, expected {expected})"
                )
            tmp.rename(dest)
            return dest
        except (urllib.error.URLError, OSError) as exc:
            last_err = exc
            log.warning("fetch failed for %s: %s", real, exc)
    raise DatasetError(f"could not fetch {dest.name} from any source: {last_err}")


@dataclass
class Dataset:
    """An in-memory split: uint8 images (N,C,H,W) plus int64 labels.

    ids are stable per-example identifiers (split positions at ingestion)
    that survive subsetting and reordering, so downstream consumers can
    process examples in a canonical order regardless of how the view was
    built.
    """

    name: str
    split: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int = 10
    ids: torch.Tensor | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = torch.arange(self.images.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, indices: torch.Tensor) -> ImageBatch:
        return ImageBatch(normalize(self.images[indices]), self.labels[indices].clone())

    def batches(self, batch_size: int, shuffle_seed: int | None = None,
                drop_last: bool = False):
        """Iterate ImageBatches; ordering is fixed by shuffle_seed (None =
        dataset order)."""
        n = len(self)
        if shuffle_seed is None:
            order = torch.arange(n)
        else:
            gen = torch.Generator().manual_seed(shuffle_seed)
            order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.batch(idx)

    def subset(self, indices: torch.Tensor) -> "Dataset":
        return Dataset(self.name, self.split, self.images[indices],
                       self.labels[indices], self.num_classes, self.ids[indices])


def normalize(u8: torch.Tensor) -> torch.Tensor:
    return u8.float().div(255.0)


def denormalize(x: torch.Tensor) -> torch.Tensor:
    return x.mul(255.0).round().clamp(0, 255).to(torch.uint8)


def _read_idx_images(path: Path) -> torch.Tensor:
    with gzip.open(path, "rb") as fh:
        raw = fh.read()
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 2051:
        raise DatasetError(f"{path} is not an idx image file (magic {magic})")
    arr = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    return torch.from_numpy(arr.copy())


def _read_idx_labels(path: Path) -> torch.Tensor:
    with gzip.open(path, "rb") as fh:
        raw = fh.read()
    magic, n = struct.unpack(">II", raw[:8])
    if magic != 2049:
        raise DatasetError(f"{path} is not an idx label file (magic {magic})")
    arr = np.frombuffer(raw, dtype=np.uint8, offset=8)
    return torch.from_numpy(arr.copy()).long()


def _load_mnist(split: str, root: Path) -> Dataset:
    parts = {}
    for kind in ("images", "labels"):
        archive, md5 = _MNIST_FILES[(split, kind)]
        urls = tuple(host + archive for host in _MNIST_HOSTS)
        parts[kind] = _fetch(urls, root / "mnist" / archive, "md5", md5)
    images = _read_idx_images(parts["images"])
    labels = _read_idx_labels(parts["labels"])
    return Dataset("mnist", split, images, labels)


def _decode_cifar_parquet(path: Path) -> tuple[torch.Tensor, torch.Tensor]:
    import polars as pl
    from PIL import Image

    df = pl.read_parquet(path)
    n = df.height
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for i, rec in enumerate(df["img"]):
        with Image.open(io.BytesIO(rec["bytes"])) as im:
            images[i] = np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
    labels = torch.from_numpy(df["label"].to_numpy().astype(np.int64, copy=True))
    return torch.from_numpy(images), labels


def _decode_cifar_tar(path: Path, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    members = ([f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6)]
               if split == "train" else ["cifar-10-batches-py/test_batch"])
    chunks, labels = [], []
    with tarfile.open(path, "r:gz") as tar:
        for member in members:
            with tar.extractfile(member) as fh:
                d = pickle.load(fh, encoding="bytes")
            chunks.append(np.frombuffer(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            labels.extend(d[b"labels"])
    images = np.concatenate(chunks) if len(chunks) > 1 else chunks[0].copy()
    return torch.from_numpy(images), torch.tensor(labels, dtype=torch.int64)


def _load_cifar10(split: str, root: Path) -> Dataset:
    cdir = root / "cifar10"
    decoded = cdir / f"decoded-{split}-v1.pt"
    if decoded.exists():
        images, labels = torch.load(decoded, weights_only=True)
        return Dataset("cifar10", split, images, labels)
    tar_path = cdir / _CIFAR_TAR[0]
    if tar_path.exists() and _checksum(tar_path, "md5") == _CIFAR_TAR[1]:
        images, labels = _decode_cifar_tar(tar_path, split)
    else:
        archive, url, sha = _CIFAR_PARQUET[split]
        path = _fetch((url,), cdir / archive, "sha256", sha)
        images, labels = _decode_cifar_parquet(path)
    cdir.mkdir(parents=True, exist_ok=True)
    torch.save((images, labels), decoded)
    return Dataset("cifar10", split, images, labels)


def load_dataset(name: str, split: str, cache_dir: str | Path | None = None) -> Dataset:
    """Load a verified dataset split as an in-memory Dataset."""
    if name not in DATASETS:
        raise ConfigurationError(f"unknown dataset {name!r}; known: {DATASETS}")
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}; known: {SPLITS}")
    root = Path(cache_dir) if cache_dir else cache_root()
    ds = _load_mnist(split, root) if name == "mnist" else _load_cifar10(split, root)
    expected = EXPECTED_SIZES[(name, split)]
    if len(ds) != expected:
        raise DatasetError(f"{name}/{split} has {len(ds)} examples, expected {expected}")
    return ds


def per_class_subset(data: Dataset, k: int, seed: int, round_index: int = 0) -> Dataset:
    """Exactly k examples per class, chosen by a seeded stratified shuffle.

    For a fixed seed, successive round_index values take disjoint slices of
    each class's shuffled reservoir; the same (seed, round_index) always
    returns the identical subset.
    """
    gen = torch.Generator().manual_seed(seed)
    picks = []
    for cls in range(data.num_classes):
        pool = torch.nonzero(data.labels == cls, as_tuple=False).squeeze(1)
        lo, hi = round_index * k, (round_index + 1) * k
        if hi > len(pool):
            raise ConfigurationError(
                f"class {cls} has {len(pool)} examples; cannot take slots "
                f"[{lo}, {hi}) of size-{k} rounds"
            )
        perm = pool[torch.randperm(len(pool), generator=gen)]
        picks.append(perm[lo:hi])
    indices = torch.sort(torch.cat(picks)).values
    return data.subset(indices)


def class_split(data: Dataset, holdout_classes: set[int]) -> tuple[Dataset, Dataset]:
    """Partition by class membership: (everything else, holdout classes)."""
    holdout = set(int(c) for c in holdout_classes)
    all_classes = set(range(data.num_classes))
    if not holdout or holdout >= all_classes:
        raise ConfigurationError("holdout must be a nonempty proper subset of the classes")
    if not holdout <= all_classes:
        raise ConfigurationError(f"holdout classes {holdout - all_classes} out of range")
    mask = torch.zeros(len(data), dtype=torch.bool)
    for cls in holdout:
        mask |= data.labels == cls
    keep = torch.nonzero(~mask, as_tuple=False).squeeze(1)
    held = torch.nonzero(mask, as_tuple=False).squeeze(1)
    return data.subset(keep), data.subset(held)
