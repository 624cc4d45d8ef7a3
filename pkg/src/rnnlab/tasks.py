"""Benchmark data: the copy problem and sequential (permuted) pixel MNIST.

Both tasks hand the trainer the same things: minibatches of one-hot or
scalar input sequences with integer targets and a loss mask, plus cached
validation/test batches.  The copy problem is generated; pixel MNIST is
loaded from IDX files on disk.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import DataError, UsageError


@dataclass
class TaskBatch:
    """One minibatch: inputs (T, B, n_x), targets (T, B), mask (T, B).

    mask weights the loss per step and example; aux_masks name alternative
    evaluation windows (subsets of the loss-bearing steps).
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    aux_masks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise UsageError(f"inputs must be (T, batch, n_x), got {self.inputs.shape}")
        tb = self.inputs.shape[:2]
        if self.targets.shape != tb or self.mask.shape != tb:
            raise UsageError(
                f"targets/mask must be shaped {tb}, got {self.targets.shape} / {self.mask.shape}")
        for name, m in self.aux_masks.items():
            if np.asarray(m).shape != tb:
                raise UsageError(f"aux mask {name!r} must be shaped {tb}")


# ---------------------------------------------------------------------------
# copy problem

COPY_DIGITS = 10
COPY_BLANK = 10          # symbol id in both input and output alphabets
COPY_GO = 11             # input-only symbol
COPY_N_INPUT = 12
COPY_N_OUTPUT = 11


@dataclass(frozen=True)
class CopySpec:
    """Copy problem sizes: delay D (multiple of 10), L = D/10 symbols.

    An example is 2L+D steps: L random digits, D-1 blanks, one go symbol,
    then L blanks while the digits must be reproduced.  Targets are blank
    everywhere except the final L steps.
    """

    D: int
    n_train: int = 100_000
    n_val: int = 1_000
    seed: int = 0

    def __post_init__(self):
        if self.D < 10 or self.D % 10 != 0:
            raise UsageError(f"copy delay D must be a positive multiple of 10, got {self.D}")
        if self.n_train < 1 or self.n_val < 1:
            raise UsageError("copy split sizes must be positive")

    @property
    def L(self):
        return self.D // 10

    @property
    def T(self):
        return 2 * self.L + self.D


def copy_baseline_error(spec_or_D):
    """Full-sequence symbol error of the predict-always-blank strategy."""
    D = spec_or_D.D if isinstance(spec_or_D, CopySpec) else int(spec_or_D)
    L = D // 10
    return L / (2 * L + D)


class CopyDataset:
    """A fixed pool of copy examples, stored as their digit prefixes."""

    def __init__(self, spec, digits):
        digits = np.asarray(digits)
        if digits.ndim != 2 or digits.shape[1] != spec.L:
            raise UsageError(f"digit pool must be (n, {spec.L}), got {digits.shape}")
        self.spec = spec
        self.digits = digits

    def __len__(self):
        return self.digits.shape[0]

    def example(self, i):
        """One example as (input symbol ids, target class ids), each (T,)."""
        spec = self.spec
        L, D, T = spec.L, spec.D, spec.T
        x = np.full(T, COPY_BLANK, dtype=np.int64)
        x[:L] = self.digits[i]
        x[L + D - 1] = COPY_GO
        y = np.full(T, COPY_BLANK, dtype=np.int64)
        y[L + D:] = self.digits[i]
        return x, y

    def batch(self, indices, dtype=np.float64):
        spec = self.spec
        L, D, T = spec.L, spec.D, spec.T
        digits = self.digits[np.asarray(indices)]     # (B, L)
        B = digits.shape[0]
        ids = np.full((T, B), COPY_BLANK, dtype=np.int64)
        ids[:L] = digits.T
        ids[L + D - 1] = COPY_GO
        targets = np.full((T, B), COPY_BLANK, dtype=np.int64)
        targets[L + D:] = digits.T
        mask = np.ones((T, B))
        window = np.zeros((T, B))
        window[L + D:] = 1.0
        inputs = nk.one_hot(ids, COPY_N_INPUT, dtype)
        return TaskBatch(inputs=inputs, targets=targets, mask=mask,
                         aux_masks={"target": window})


def gen_copy(spec, rng=None):
    """Generate a pool of copy examples; fixed seed gives a fixed dataset."""
    if rng is None:
        rng = nk.make_rng(spec.seed, 0)
    digits = rng.integers(0, COPY_DIGITS, size=(spec.n_train, spec.L))
    return CopyDataset(spec, digits)


class CopyTask:
    """Trainer-facing copy problem: train pool, validation pool, no test split.

    Trials are ranked by validation error over the target window (the final
    L steps); full-sequence error is reported alongside it.
    """

    n_x = COPY_N_INPUT
    n_out = COPY_N_OUTPUT
    loss_mode = "per_step"
    rank_key = "target"

    def __init__(self, spec):
        self.spec = spec
        self.train = gen_copy(spec, nk.make_rng(spec.seed, 0))
        val_digits = nk.make_rng(spec.seed, 1).integers(0, COPY_DIGITS, size=(spec.n_val, spec.L))
        self.val = CopyDataset(spec, val_digits)
        self._val_cache = {}

    def epoch_batches(self, batch_size, rng):
        order = rng.permutation(len(self.train))
        for lo in range(0, len(order), batch_size):
            yield self.train.batch(order[lo:lo + batch_size])

    def val_batches(self, batch_size):
        if batch_size not in self._val_cache:
            idx = np.arange(len(self.val))
            self._val_cache[batch_size] = [
                self.val.batch(idx[lo:lo + batch_size])
                for lo in range(0, len(idx), batch_size)]
        return self._val_cache[batch_size]

    def test_batches(self, batch_size):
        return []


# ---------------------------------------------------------------------------
# MNIST loading (IDX binary format) and pixel sequences

_IDX_MAGIC_IMAGES = 0x00000803
_IDX_MAGIC_LABELS = 0x00000801


def read_idx(path):
    """Parse one IDX file (optionally gzipped): big-endian header, byte data."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise DataError(f"cannot decompress {path}: {exc}") from exc
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header, {len(raw)} bytes")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == _IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == _IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{_IDX_MAGIC_IMAGES:08x} "
                        f"(images) or 0x{_IDX_MAGIC_LABELS:08x} (labels)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + math.prod(dims)
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Load an image/label file pair with cross-checks; returns (images, labels)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataError(f"{images_path}: expected (n, 28, 28) images, got {images.shape}")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected a label vector, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    if labels.size and labels.max() > 9:
        raise DataError(f"{labels_path}: label values exceed 9")
    return images, labels


_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_dir(data_dir=None):
    return data_dir or os.environ.get("RNNLAB_MNIST_DIR") or os.path.join("data", "mnist")


def find_mnist(data_dir=None):
    """Locate the four standard IDX files (plain or .gz); None if absent."""
    base = mnist_dir(data_dir)
    found = {}
    for key, name in _MNIST_FILES.items():
        for candidate in (os.path.join(base, name), os.path.join(base, name + ".gz")):
            if os.path.exists(candidate):
                found[key] = candidate
                break
        else:
            return None
    return found


@dataclass(frozen=True)
class PixelSequenceSpec:
    """Pixel-sequence protocol: one fixed permutation, per-image standardization.

    permute=False keeps the raw row-major scan order.  truncate_to keeps only
    the final k steps of each (permuted) sequence.
    """

    permutation_seed: int = 0
    n_train: int = 58_000
    n_val: int = 2_000
    standardize: bool = True
    permute: bool = True
    truncate_to: int = None

    def __post_init__(self):
        if self.truncate_to is not None and not (1 <= self.truncate_to <= 784):
            raise UsageError(f"truncate_to must be in [1, 784], got {self.truncate_to}")


def pixel_permutation(spec):
    if not spec.permute:
        return np.arange(784)
    return nk.make_rng(spec.permutation_seed, 3).permutation(784)


def standardize_rows(x):
    """Shift/scale each row to mean 0, variance 1; constant rows map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    out = np.where(std > 0, (x - mean) / np.where(std > 0, std, 1.0), 0.0)
    return out


class PixelSequenceDataset:
    """Flattened, permuted pixel rows (uint8) with labels; standardized per batch."""

    def __init__(self, pixels, labels, spec):
        self.pixels = pixels      # (n, 784) uint8, permutation already applied
        self.labels = labels
        self.spec = spec

    def __len__(self):
        return self.pixels.shape[0]

    def batch(self, indices, dtype=np.float64):
        spec = self.spec
        rows = self.pixels[np.asarray(indices)].astype(np.float64)
        if spec.standardize:
            rows = standardize_rows(rows)
        if spec.truncate_to is not None:
            rows = rows[:, 784 - spec.truncate_to:]
        B, T = rows.shape
        inputs = rows.T.reshape(T, B, 1).astype(dtype)
        targets = np.zeros((T, B), dtype=np.int64)
        targets[-1] = self.labels[np.asarray(indices)]
        mask = np.zeros((T, B))
        mask[-1] = 1.0
        return TaskBatch(inputs=inputs, targets=targets, mask=mask)


def make_pmnist(images, labels, spec):
    """Images (n, 28, 28) by labels -> one PixelSequenceDataset."""
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataError(f"expected (n, 28, 28) images, got {images.shape}")
    flat = images.reshape(images.shape[0], 784)
    perm = pixel_permutation(spec)
    return PixelSequenceDataset(flat[:, perm], np.asarray(labels), spec)


class PmnistTask:
    """Trainer-facing pixel-MNIST: 58k/2k train/val from the train file, 10k test."""

    n_x = 1
    n_out = 10
    loss_mode = "final_step"
    rank_key = "err"

    def __init__(self, train_set, val_set, test_set):
        self.train = train_set
        self.val = val_set
        self.test = test_set
        self._val_cache = {}
        self._test_cache = {}

    def epoch_batches(self, batch_size, rng):
        order = rng.permutation(len(self.train))
        for lo in range(0, len(order), batch_size):
            yield self.train.batch(order[lo:lo + batch_size])

    def _cached(self, cache, dataset, batch_size):
        if batch_size not in cache:
            idx = np.arange(len(dataset))
            cache[batch_size] = [dataset.batch(idx[lo:lo + batch_size])
                                 for lo in range(0, len(idx), batch_size)]
        return cache[batch_size]

    def val_batches(self, batch_size):
        return self._cached(self._val_cache, self.val, batch_size)

    def test_batches(self, batch_size):
        return self._cached(self._test_cache, self.test, batch_size)


def load_pmnist(data_dir=None, spec=None):
    """Build the pixel-MNIST task from IDX files under the data directory.

    Looks in data_dir, then $RNNLAB_MNIST_DIR, then ./data/mnist.  Raises
    DataError with the expected file names if they are absent.
    """
    spec = spec or PixelSequenceSpec()
    paths = find_mnist(data_dir)
    if paths is None:
        raise DataError(
            f"MNIST IDX files not found under {mnist_dir(data_dir)!r}; expected "
            + ", ".join(sorted(_MNIST_FILES.values())) + " (optionally .gz)")
    train_images, train_labels = load_mnist_idx(paths["train_images"], paths["train_labels"])
    test_images, test_labels = load_mnist_idx(paths["test_images"], paths["test_labels"])
    n = spec.n_train
    if n + spec.n_val > train_images.shape[0]:
        raise DataError(f"train file holds {train_images.shape[0]} images, "
                        f"cannot split {n}+{spec.n_val}")
    train = make_pmnist(train_images[:n], train_labels[:n], spec)
    val = make_pmnist(train_images[n:n + spec.n_val], train_labels[n:n + spec.n_val], spec)
    test = make_pmnist(test_images, test_labels, spec)
    return PmnistTask(train, val, test)


class RandomPixelTask:
    """Pixel-task-shaped synthetic stream: unit-normal inputs, random labels.

    Matches the pixel task's tensor shapes and loss placement exactly, with
    no file dependency; used for gradient-propagation probes.
    """

    n_x = 1
    loss_mode = "final_step"
    rank_key = "err"

    def __init__(self, T=784, n_out=10, n_train=10_000, n_val=500, seed=0):
        self.T = T
        self.n_out = n_out
        self.n_train = n_train
        self.n_val = n_val
        self.seed = seed
        self._val = None

    def _batch(self, rng, size):
        inputs = rng.standard_normal((self.T, size, 1))
        targets = np.zeros((self.T, size), dtype=np.int64)
        targets[-1] = rng.integers(0, self.n_out, size)
        mask = np.zeros((self.T, size))
        mask[-1] = 1.0
        return TaskBatch(inputs=inputs, targets=targets, mask=mask)

    def epoch_batches(self, batch_size, rng):
        for _ in range(max(1, self.n_train // batch_size)):
            yield self._batch(rng, batch_size)

    def val_batches(self, batch_size):
        if self._val is None:
            rng = nk.make_rng(self.seed, 4)
            self._val = [self._batch(rng, min(batch_size, self.n_val))]
        return self._val

    def test_batches(self, batch_size):
        return []
