"""Image datasets in the amat text format and their point-cloud view.

An amat file holds one image per row: 784 whitespace-separated intensities in
[0, 1] (row-major 28x28) followed by the class label. Files may be gzipped.
"""

import gzip
import os
from dataclasses import dataclass

import numpy as np

from .conv2d import PointCloud2D
from .model import grid_coords

ROW_LENGTH = 785
TRAIN_NAME = "mnist_all_rotation_normalized_float_train_valid.amat"
TEST_NAME = "mnist_all_rotation_normalized_float_test.amat"
SUBSTITUTE_TRAIN = "rotated_digits_train.amat.gz"
SUBSTITUTE_TEST = "rotated_digits_test.amat.gz"


class AmatFormatError(ValueError):
    pass


@dataclass
class ImageSet:
    images: np.ndarray  # (n, 28, 28) float
    labels: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ImageSet(self.images[idx], self.labels[idx])


def _open_text(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path)


def load_amat(path, limit=None):
    images, labels = [], []
    with _open_text(path) as fh:
        for i, line in enumerate(fh):
            if limit is not None and len(labels) >= limit:
                break
            parts = line.split()
            if not parts:
                continue
            if len(parts) != ROW_LENGTH:
                raise AmatFormatError(f"{path}: row {i} has {len(parts)} values, expected {ROW_LENGTH}")
            try:
                row = np.array([float(p) for p in parts])
            except ValueError as e:
                raise AmatFormatError(f"{path}: row {i}: {e}") from None
            label = row[-1]
            if label != int(label) or not 0 <= label <= 9:
                raise AmatFormatError(f"{path}: row {i} has invalid label {label}")
            images.append(row[:-1].reshape(28, 28))
            labels.append(int(label))
    if not labels:
        return ImageSet(np.zeros((0, 28, 28)), np.zeros(0, dtype=int))
    return ImageSet(np.stack(images), np.array(labels, dtype=int))


def save_amat(path, data, fmt="%.8g"):
    rows = np.concatenate([data.images.reshape(len(data), -1), data.labels[:, None]], axis=1)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt") as fh:
        for r in rows:
            fh.write(" ".join(fmt % v for v in r[:-1]) + f" {int(r[-1])}\n")


def image_to_pointcloud(image):
    """28x28 image -> 784 unit-spaced points centred on the image centre, K=0 features."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("expected a square image")
    coords = grid_coords(image.shape[0])
    return PointCloud2D(coords, image.reshape(1, -1, 1, 1).astype(complex))


def rotate_image(image, angle):
    """Rotate an image counter-clockwise by `angle` radians with bilinear interpolation."""
    from scipy.ndimage import rotate

    return np.clip(rotate(image, np.degrees(angle), reshape=False, order=1, mode="constant"), 0.0, 1.0)


def make_rotated_digits(n_train=2000, n_test=2000, seed=0):
    """Rotated-digit train/test sets built from the 5,000 MNIST digits shipped with mlxtend.

    Each image is rotated by an angle drawn uniformly from [0, 2pi); the splits
    are disjoint and class balanced.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:
        raise RuntimeError("building the digit subset needs the optional 'mlxtend' package") from e
    X, y = mnist_data()
    X = X.reshape(-1, 28, 28) / 255.0
    rng = np.random.default_rng(seed)
    per_tr, per_te = n_train // 10, n_test // 10
    tr, te = [], []
    for c in range(10):
        idx = rng.permutation(np.nonzero(y == c)[0])
        if len(idx) < per_tr + per_te:
            raise ValueError(f"class {c} has only {len(idx)} images")
        tr.extend(idx[:per_tr])
        te.extend(idx[per_tr : per_tr + per_te])
    tr, te = rng.permutation(tr), rng.permutation(te)
    angles = rng.uniform(0, 2 * np.pi, len(tr) + len(te))
    imgs = np.stack([rotate_image(X[i], a) for i, a in zip(np.concatenate([tr, te]), angles)])
    labels = y[np.concatenate([tr, te])].astype(int)
    return ImageSet(imgs[: len(tr)], labels[: len(tr)]), ImageSet(imgs[len(tr) :], labels[len(tr) :])


def default_data_dir():
    return os.environ.get("STEERFFT_DATA", os.path.join(os.path.dirname(__file__), "..", "..", "data"))


def load_dataset(data_dir=None, n_train=None, n_test=None):
    """Prefer the original rotated-MNIST files, fall back to the bundled substitute."""
    d = data_dir or default_data_dir()
    for tr, te in ((TRAIN_NAME, TEST_NAME), (SUBSTITUTE_TRAIN, SUBSTITUTE_TEST)):
        ptr, pte = os.path.join(d, tr), os.path.join(d, te)
        if os.path.exists(ptr) and os.path.exists(pte):
            return load_amat(ptr, n_train), load_amat(pte, n_test)
    raise FileNotFoundError(f"no dataset found in {d}")
