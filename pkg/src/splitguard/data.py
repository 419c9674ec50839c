"""Dataset loading (IDX, CIFAR-10 binary), synthetic data, subsetting and client partitioning."""
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.labels = np.asarray(self.labels, np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, split=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, split or self.split)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf, path, expected_ndim):
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header at offset 0", path=str(path), offset=0)
    zero, dtype, ndim = struct.unpack(">HBB", buf[:4])
    magic = struct.unpack(">I", buf[:4])[0]
    if zero != 0 or dtype != IDX_UBYTE or ndim not in expected_ndim:
        raise DataFormatError(
            f"{path}: bad magic at offset 0 (0x{magic:08x})", path=str(path), offset=0, magic=magic,
        )
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise DataFormatError(f"{path}: truncated header at offset {len(buf)}", path=str(path), offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    size = int(np.prod(dims))
    if len(buf) < header_end + size:
        raise DataFormatError(
            f"{path}: truncated data at offset {len(buf)}, expected {header_end + size} bytes",
            path=str(path), offset=len(buf),
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=header_end)
    return data.reshape(dims)


def load_idx(image_path, label_path, classes=None, split="train"):
    """Load an IDX image/label pair; pixels are scaled to [0, 1] by /255.

    Image files may be 3-D (N, H, W) or 4-D (N, C, H, W); ``.gz`` files are
    decompressed transparently.
    """
    raw = _parse_idx(_read_bytes(image_path), image_path, (3, 4))
    labels = _parse_idx(_read_bytes(label_path), label_path, (1,))
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image count {raw.shape[0]} != label count {labels.shape[0]} (count field at offset 4)",
            offset=4, images=int(raw.shape[0]), labels=int(labels.shape[0]),
        )
    if raw.ndim == 3:
        raw = raw[:, None]
    n_classes = classes if classes is not None else (int(labels.max()) + 1 if len(labels) else 1)
    return Dataset(raw.astype(np.float32) / 255.0, labels.astype(np.int64), n_classes, split)


def write_idx(dataset, image_path, label_path):
    """Write ``dataset`` as IDX (3-D for single-channel images, 4-D otherwise)."""
    pixels = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    opener = gzip.open if str(image_path).endswith(".gz") else open
    with opener(image_path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, IDX_UBYTE, pixels.ndim))
        fh.write(struct.pack(f">{pixels.ndim}I", *pixels.shape))
        fh.write(pixels.tobytes())
    opener = gzip.open if str(label_path).endswith(".gz") else open
    with opener(label_path, "wb") as fh:
        fh.write(struct.pack(">HBBI", 0, IDX_UBYTE, 1, len(dataset.labels)))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths, split="train"):
    """Concatenate CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes per record."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        buf = _read_bytes(path)
        if len(buf) % CIFAR_RECORD:
            whole = len(buf) // CIFAR_RECORD * CIFAR_RECORD
            raise DataFormatError(
                f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD} (partial record at offset {whole})",
                path=str(path), offset=whole,
            )
        records = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    if images:
        pix = np.concatenate(images)
        lab = np.concatenate(labels)
    else:
        pix, lab = np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, np.int64)
    return Dataset(pix.astype(np.float32) / 255.0, lab, 10, split)


def synthetic_blobs(classes, count, shape=(1, 12, 12), seed=0, contrast=0.5, noise=0.1, split="train"):
    """Class-conditional images: a class-specific pixel stripe lit by ``contrast`` plus zero-mean noise.

    Noise is centred per class and pixel, so each class mean is exactly its
    pattern and pixels stay inside [0, 1] without clipping.
    """
    if classes < 2:
        raise ConfigError(f"classes must be >= 2, got {classes}", key="classes")
    if not 0 < contrast <= 0.5 or not 0 <= noise <= 0.1:
        raise ConfigError("need 0 < contrast <= 0.5 and 0 <= noise <= 0.1", key="contrast")
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    stripe = np.arange(size) % classes
    patterns = np.full((classes, size), 0.25, np.float64)
    for c in range(classes):
        patterns[c, stripe == c] += contrast
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    jitter = rng.uniform(-noise, noise, size=(count, size))
    for c in range(classes):
        rows = labels == c
        if rows.any():
            jitter[rows] -= jitter[rows].mean(axis=0)
    images = (patterns[labels] + jitter).reshape((count,) + tuple(shape))
    return Dataset(images.astype(np.float32), labels, classes, split)


def subset_fraction(dataset, fraction, seed=0):
    """Class-stratified uniform subset of round(fraction * count) samples, in shuffled order."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}", key="fraction")
    rng = np.random.default_rng(seed)
    total = int(round(fraction * len(dataset)))
    per_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.classes)]
    exact = np.array([fraction * len(ix) for ix in per_class])
    take = np.floor(exact).astype(int)
    # largest remainder fills the gap when per-class quotas are fractional
    for c in np.argsort(-(exact - take), kind="stable")[: total - take.sum()]:
        take[c] += 1
    chosen = [rng.permutation(ix)[:t] for ix, t in zip(per_class, take)]
    picked = np.concatenate(chosen) if chosen else np.zeros(0, np.int64)
    return dataset.subset(rng.permutation(picked))


@dataclass(frozen=True)
class PartitionPlan:
    shards: tuple
    seed: int

    def sizes(self):
        return [len(s) for s in self.shards]


def partition_iid(dataset, n_clients, seed=0):
    """Random equal split of sample indices into ``n_clients`` disjoint shards."""
    count = dataset if isinstance(dataset, int) else len(dataset)
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}", key="n_clients")
    if count < n_clients:
        raise ConfigError(f"{n_clients} clients but only {count} samples", key="n_clients")
    perm = np.random.default_rng(seed).permutation(count)
    return PartitionPlan(tuple(np.sort(s) for s in np.array_split(perm, n_clients)), seed)


def carve_attacker_and_eval(test, seed=0):
    """Halve a test split into disjoint attacker and evaluation sets."""
    perm = np.random.default_rng(seed).permutation(len(test))
    half = len(test) // 2
    return test.subset(perm[:half], "attacker"), test.subset(perm[half:], "test")


def load_descriptor(desc, seed=0):
    """Resolve a dataset descriptor dict into ``(train, test)`` Datasets.

    Kinds: ``synthetic`` (classes, train_count, test_count, shape), ``idx``
    (train_images, train_labels, test_images, test_labels) and ``cifar``
    (train_files, test_files). Optional ``fraction`` subsets the training
    split, ``train_count``/``test_count`` cap the file-backed splits.
    """
    desc = dict(desc)
    kind = desc.get("kind", "synthetic")
    if kind == "synthetic":
        classes = int(desc.get("classes", 10))
        shape = tuple(desc.get("shape", (1, 12, 12)))
        train = synthetic_blobs(classes, int(desc.get("train_count", 1000)), shape, seed, split="train")
        test = synthetic_blobs(classes, int(desc.get("test_count", 400)), shape, seed + 1, split="test")
    elif kind == "idx":
        classes = desc.get("classes")
        train = load_idx(desc["train_images"], desc["train_labels"], classes, "train")
        test = load_idx(desc["test_images"], desc["test_labels"], classes or train.classes, "test")
        if train.classes != test.classes:
            k = max(train.classes, test.classes)
            train, test = Dataset(train.images, train.labels, k), Dataset(test.images, test.labels, k, "test")
    elif kind == "cifar":
        train = load_cifar_binary(desc["train_files"], "train")
        test = load_cifar_binary(desc["test_files"], "test")
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}", key="dataset.kind")
    if "fraction" in desc and desc["fraction"] != 1:
        train = subset_fraction(train, float(desc["fraction"]), seed)
    for name, part in (("train_count", "train"), ("test_count", "test")):
        if kind != "synthetic" and desc.get(name):
            ds = train if part == "train" else test
            n = int(desc[name])
            if n > len(ds):
                raise ConfigError(f"{name}={n} exceeds the {len(ds)} available samples", key=f"dataset.{name}")
            ds = subset_fraction(ds, n / len(ds), seed) if n < len(ds) else ds
            if part == "train":
                train = ds
            else:
                test = ds
    return train, test
