"""Dataset loading, the shared validation split, and the fixed augmentation pipeline.

Images are kept in raw pixel space ([0, 1] after scaling); per-channel
normalization is the model's job so that the epsilon ball is a pixel-space
ball. Real datasets are held as uint8 tensors and scaled per batch.
"""
import hashlib
import pickle
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
import torch

PAD = 4

# (mean, std) per channel; consumed by modelzoo's input normalization layer.
NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2471, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "tiny-imagenet": ((0.4802, 0.4481, 0.3975), (0.2302, 0.2265, 0.2262)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}

NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "tiny-imagenet": 200}

ARCHIVES = {
    "cifar10": ("cifar-10-python.tar.gz", "c58f30108f718f92721af3b95e74349a", "cifar-10-batches-py"),
    "cifar100": ("cifar-100-python.tar.gz", "eb9058c3a382ffc7106e4002c42a8d85", "cifar-100-python"),
}

# synthetic fixture sizes used when the trainer asks for dataset_name=synthetic
# closest class means differ by 0.2 in one colour channel, well above
# 2 * (8/255), so the task stays robustly learnable under the default threat
SYNTHETIC_DEFAULTS = dict(n=1024, classes=4, shape=(3, 16, 16), n_test=512, sigma=0.1, separation=32.0)


class DatasetError(RuntimeError):
    """Missing, corrupt, or mis-sized dataset."""


@dataclass
class ImageSet:
    images: torch.Tensor  # (N, C, H, W), uint8 or float32
    labels: torch.Tensor  # (N,) int64
    source_index: np.ndarray  # positions in the original split this came from

    def __len__(self):
        return int(self.labels.shape[0])

    def batch(self, idx) -> Tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return to_float(self.images[idx]), self.labels[idx]

    def take(self, n: Optional[int]) -> "ImageSet":
        if n is None or n >= len(self):
            return self
        return ImageSet(self.images[:n], self.labels[:n], self.source_index[:n])


@dataclass
class SplitDataset:
    name: str
    train: ImageSet
    val: ImageSet
    test: ImageSet
    num_classes: int

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])


def to_float(images: torch.Tensor) -> torch.Tensor:
    if images.dtype == torch.uint8:
        return images.float().div_(255.0)
    return images.float()


# ---------------------------------------------------------------------------
# splitting


def split_indices(n_train: int, val_size: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Return (train_idx, val_idx); val is the tail of a seeded permutation."""
    if not 0 <= val_size < n_train:
        raise DatasetError(f"val_size={val_size} out of range for {n_train} training images")
    perm = np.random.default_rng(seed).permutation(n_train)
    val_idx = np.sort(perm[n_train - val_size:])
    train_idx = perm[: n_train - val_size]
    return train_idx, val_idx


def _assemble(name, x_train, y_train, x_test, y_test, num_classes, val_size, seed, subset):
    train_idx, val_idx = split_indices(len(y_train), val_size, seed)
    if subset is not None:
        train_idx = train_idx[:subset]
    train_idx = np.sort(train_idx)

    def mk(x, y, idx):
        return ImageSet(x[torch.as_tensor(idx)], y[torch.as_tensor(idx)], idx)

    test = ImageSet(x_test, y_test, np.arange(len(y_test)))
    return SplitDataset(name, mk(x_train, y_train, train_idx), mk(x_train, y_train, val_idx), test, num_classes)


def load_split(
    dataset_name: str,
    root=None,
    val_size: int = 0,
    seed: int = 0,
    subset: Optional[int] = None,
) -> SplitDataset:
    """Load a dataset and carve the held-out validation set from its training part.

    ``seed`` drives the validation permutation; the trainer always passes 0 so
    every method and run seed shares one split. ``subset`` keeps only the first
    ``subset`` non-validation training images (desk-scale runs).
    """
    if dataset_name == "synthetic":
        d = SYNTHETIC_DEFAULTS
        full = make_synthetic(
            d["n"] + val_size, d["classes"], d["shape"], seed=1234, sigma=d["sigma"],
            separation=d["separation"], n_test=d["n_test"], channel_tied=True,
        )
        return _assemble(
            "synthetic", full.train.images, full.train.labels, full.test.images, full.test.labels,
            d["classes"], val_size, seed, subset,
        )
    if root is None:
        raise DatasetError(f"{dataset_name}: no data root given (use --data-root or FASTAT_DATA_ROOT)")
    root = Path(root)
    if dataset_name in ("cifar10", "cifar100"):
        x_tr, y_tr, x_te, y_te = _load_cifar(dataset_name, root)
    elif dataset_name == "tiny-imagenet":
        x_tr, y_tr, x_te, y_te = _load_tiny_imagenet(root)
    else:
        raise DatasetError(f"unknown dataset {dataset_name!r}")
    return _assemble(dataset_name, x_tr, y_tr, x_te, y_te, NUM_CLASSES[dataset_name], val_size, seed, subset)


def md5sum(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _ensure_extracted(name: str, root: Path) -> Path:
    archive, digest, folder = ARCHIVES[name]
    target = root / folder
    if target.is_dir():
        return target
    tgz = root / archive
    if not tgz.is_file():
        raise DatasetError(f"{name}: neither {target} nor {tgz} exists")
    if md5sum(tgz) != digest:
        raise DatasetError(f"{name}: checksum mismatch for {tgz}")
    with tarfile.open(tgz) as tar:
        tar.extractall(root)
    return target


def _unpickle(path: Path):
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="bytes")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def _load_cifar(name: str, root: Path):
    folder = _ensure_extracted(name, root)
    if name == "cifar10":
        train_files = [folder / f"data_batch_{i}" for i in range(1, 6)]
        test_files = [folder / "test_batch"]
        label_key = b"labels"
    else:
        train_files = [folder / "train"]
        test_files = [folder / "test"]
        label_key = b"fine_labels"

    def read(files):
        xs, ys = [], []
        for p in files:
            d = _unpickle(p)
            try:
                xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
                ys.append(np.asarray(d[label_key], dtype=np.int64))
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"corrupt batch file {p}: {exc}") from exc
        return torch.from_numpy(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys))

    x_tr, y_tr = read(train_files)
    x_te, y_te = read(test_files)
    return x_tr, y_tr, x_te, y_te


def _load_tiny_imagenet(root: Path):
    from PIL import Image

    folder = root / "tiny-imagenet-200"
    cache = folder / "uint8_cache.npz"
    if cache.is_file():
        z = np.load(cache)
        return tuple(torch.from_numpy(z[k]) for k in ("x_tr", "y_tr", "x_te", "y_te"))
    wnids_file = folder / "wnids.txt"
    if not wnids_file.is_file():
        raise DatasetError(f"tiny-imagenet: {wnids_file} not found")
    wnids = wnids_file.read_text().split()
    lookup = {w: i for i, w in enumerate(wnids)}

    def read_img(p):
        try:
            with Image.open(p) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
        except OSError as exc:
            raise DatasetError(f"cannot read {p}: {exc}") from exc

    xs, ys = [], []
    for w in wnids:
        for p in sorted((folder / "train" / w / "images").glob("*.JPEG")):
            xs.append(read_img(p))
            ys.append(lookup[w])
    x_tr, y_tr = np.stack(xs), np.asarray(ys, dtype=np.int64)

    xs, ys = [], []
    for line in (folder / "val" / "val_annotations.txt").read_text().splitlines():
        fname, wnid = line.split("\t")[:2]
        xs.append(read_img(folder / "val" / "images" / fname))
        ys.append(lookup[wnid])
    x_te, y_te = np.stack(xs), np.asarray(ys, dtype=np.int64)
    np.savez(cache, x_tr=x_tr, y_tr=y_tr, x_te=x_te, y_te=y_te)
    return torch.from_numpy(x_tr), torch.from_numpy(y_tr), torch.from_numpy(x_te), torch.from_numpy(y_te)


# ---------------------------------------------------------------------------
# batching and augmentation


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    epoch: int
    order: np.ndarray
    batch_size: int

    def __iter__(self) -> Iterator[np.ndarray]:
        for start in range(0, len(self.order), self.batch_size):
            yield self.order[start:start + self.batch_size]

    def __len__(self):
        return -(-len(self.order) // self.batch_size)


def make_plan(n: int, seed: int, epoch: int, batch_size: int) -> BatchPlan:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return BatchPlan(seed, epoch, order, batch_size)


def augment_params(n: int, seed: int, epoch: int, pad: int = PAD):
    """Crop offsets and flip flags for every training index in one epoch."""
    rng = np.random.default_rng([seed, epoch, 1])
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    return dy, dx, flip


def crop_flip(images: torch.Tensor, dy, dx, flip, pad: int = PAD, fill: float = 0.0) -> torch.Tensor:
    """Zero-pad by ``pad``, crop back at (dy, dx), optionally flip left-right."""
    b, c, h, w = images.shape
    padded = torch.nn.functional.pad(images, (pad, pad, pad, pad), value=fill)
    dy = torch.as_tensor(dy, dtype=torch.long).view(b, 1)
    dx = torch.as_tensor(dx, dtype=torch.long).view(b, 1)
    rows = (dy + torch.arange(h)).view(b, 1, h, 1)
    cols = (dx + torch.arange(w)).view(b, 1, 1, w)
    bi = torch.arange(b).view(b, 1, 1, 1)
    ci = torch.arange(c).view(1, c, 1, 1)
    out = padded[bi, ci, rows, cols]
    flip = torch.as_tensor(flip, dtype=torch.bool).view(b, 1, 1, 1)
    return torch.where(flip, out.flip(-1), out)


def augment(image: torch.Tensor, rng: np.random.Generator, enabled: bool = True) -> torch.Tensor:
    """Single-image pad-crop-flip driven by ``rng``."""
    if not enabled:
        return image
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = rng.random() < 0.5
    return crop_flip(image.unsqueeze(0), [dy], [dx], [flip])[0]


def augmented_batch(data: ImageSet, idx: np.ndarray, params, enabled: bool = True):
    x, y = data.batch(idx)
    if enabled:
        dy, dx, flip = params
        x = crop_flip(x, dy[idx], dx[idx], flip[idx])
    return x, y


# ---------------------------------------------------------------------------
# synthetic fixture


def make_synthetic(
    n: int,
    classes: int,
    shape=(3, 8, 8),
    seed: int = 0,
    sigma: float = 0.05,
    separation: float = 10.0,
    n_test: int = 0,
    channel_tied: bool = False,
) -> SplitDataset:
    """Isotropic Gaussian blobs in image space, one blob per class.

    Class means sit ``separation * sigma`` apart (minimum pairwise L2
    distance). Labels are balanced; ``bayes_labels`` (nearest class mean) is
    attached to the returned train set. Values are clipped to [0, 1].
    With ``channel_tied`` each class mean is a constant colour (one sign per
    channel), which keeps the class signal intact under crops and flips.
    """
    if n < classes:
        raise ValueError("n must be >= classes")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    if channel_tied and classes > 2 ** shape[0]:
        raise ValueError("channel_tied supports at most 2**channels classes")

    def draw_signs():
        if channel_tied:
            per_channel = rng.choice([-1.0, 1.0], size=(classes, shape[0], 1))
            return np.broadcast_to(per_channel, (classes, shape[0], dim // shape[0])).reshape(classes, dim)
        return rng.choice([-1.0, 1.0], size=(classes, dim))

    def min_dist(signs):
        return min(np.linalg.norm(signs[i] - signs[j]) for i in range(classes) for j in range(i + 1, classes))

    signs = draw_signs()
    if classes > 1:
        dist = min_dist(signs)
        while dist == 0:
            signs = draw_signs()
            dist = min_dist(signs)
        scale = separation * sigma / dist
    else:
        scale = 0.0
    means = 0.5 + scale * signs

    def draw(m):
        labels = np.arange(m) % classes
        rng.shuffle(labels)
        x = means[labels] + sigma * rng.standard_normal((m, dim))
        bayes = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
        x = np.clip(x, 0.0, 1.0).astype(np.float32).reshape((m,) + tuple(shape))
        return ImageSet(torch.from_numpy(x), torch.from_numpy(labels.astype(np.int64)), np.arange(m)), bayes

    train, bayes = draw(n)
    train.bayes_labels = bayes
    train.class_means = means
    if n_test:
        test, _ = draw(n_test)
    else:
        test = ImageSet(train.images[:0], train.labels[:0], np.arange(0))
    empty = ImageSet(train.images[:0], train.labels[:0], np.arange(0))
    return SplitDataset("synthetic", train, empty, test, classes)
