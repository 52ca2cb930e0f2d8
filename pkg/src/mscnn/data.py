"""Dataset loading, the 32x32 preprocessing pipeline, augmentation and splits."""

from __future__ import annotations

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.transform import resize

logger = logging.getLogger(__name__)

SIZE = 32
BACKGROUND = -1.0
AUGMENTATIONS = ("none", "jitter", "hflip", "vflip", "random_crop", "rotation", "affine")
IMAGE_SUFFIXES = {".png", ".bmp", ".pgm", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff", ".gif"}

# IDX element type codes -> big-endian numpy types
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    pass


class BlankImageError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_id: str


@dataclass
class SampleSet:
    """Images with labels; ``images`` is an (n, h, w) array or a list of ragged raw images."""

    images: np.ndarray | list
    labels: np.ndarray
    ids: list[str]
    class_names: list[str] | None = None
    skipped: int = 0

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise DataError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.ids[i])

    @property
    def num_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index, dtype=np.int64)
        if isinstance(self.images, np.ndarray):
            images = self.images[index]
        else:
            images = [self.images[i] for i in index]
        return SampleSet(images, self.labels[index], [self.ids[i] for i in index], self.class_names)

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(sorted(self.ids)).encode()).hexdigest()


# -- IDX ---------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as f:
        blob = f.read()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero, code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim < 1:
        raise IdxFormatError(f"{path}: bad magic number 0x{blob[:4].hex()}")
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - head < expected:
        raise IdxFormatError(
            f"{path}: truncated file, expected {expected} data bytes, found {len(blob) - head}"
        )
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims).astype(
        dtype.newbyteorder("=")
    )


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX code")
    body = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body += array.astype(_IDX_TYPES[code], copy=False).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(body)


def load_idx(images_path, labels_path) -> SampleSet:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError(f"expected (n, h, w) images and (n,) labels, got {images.shape}, {labels.shape}")
    if len(images) != len(labels):
        raise IdxFormatError(f"image count {len(images)} != label count {len(labels)}")
    name = Path(images_path).name
    return SampleSet(images.astype(np.float64), labels.astype(np.int64), [f"{name}:{i}" for i in range(len(labels))])


# -- image directories -------------------------------------------------------


def load_image_dir(root) -> SampleSet:
    """One subdirectory per class; class index follows sorted subdirectory names."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not classes:
        raise DataError(f"{root}: no class subdirectories")
    images, labels, ids = [], [], []
    skipped = 0
    for index, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.is_file())
        count = 0
        for path in files:
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("L"), dtype=np.float64)
            except (UnidentifiedImageError, OSError) as exc:
                logger.warning("skipping undecodable image %s: %s", path, exc)
                skipped += 1
                continue
            images.append(arr)
            labels.append(index)
            ids.append(f"{name}/{path.name}")
            count += 1
        if count == 0:
            logger.warning("class %r has no images", name)
    out = SampleSet(images, np.asarray(labels, dtype=np.int64), ids, class_names=classes)
    out.skipped = skipped
    return out


# -- manifest ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    counts: dict[str, int] = field(default_factory=dict)
    checksum: str = ""

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        """Flat ``key = value`` lines; ``#`` starts a comment. Split counts use ``count.<split>``."""
        values: dict[str, str] = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ManifestError(f"{path}: malformed line {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        try:
            return cls(
                name=values["name"],
                num_classes=int(values["classes"]),
                counts={k[6:]: int(v) for k, v in values.items() if k.startswith("count.")},
                checksum=values.get("checksum", ""),
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{path}: {exc}") from exc

    def write(self, path) -> None:
        lines = [f"name = {self.name}", f"classes = {self.num_classes}"]
        lines += [f"count.{k} = {v}" for k, v in sorted(self.counts.items())]
        if self.checksum:
            lines.append(f"checksum = {self.checksum}")
        Path(path).write_text("\n".join(lines) + "\n")

    def verify(self, split: str, samples: SampleSet) -> None:
        if split in self.counts and self.counts[split] != len(samples):
            raise ManifestError(
                f"{self.name}/{split}: manifest expects {self.counts[split]} samples, loaded {len(samples)}"
            )
        if len(samples) and (samples.labels.min() < 0 or samples.labels.max() >= self.num_classes):
            raise ManifestError(f"{self.name}/{split}: labels outside 0..{self.num_classes - 1}")


# -- preprocessing -----------------------------------------------------------


def normalize(x01):
    """Map [0, 1] intensities to [-1, 1] (mean 0.5, std 0.5)."""
    return (np.asarray(x01, dtype=np.float64) - 0.5) / 0.5


def denoise(image: np.ndarray) -> np.ndarray:
    out = ndimage.median_filter(image, size=3, mode="nearest")
    return ndimage.gaussian_filter(out, sigma=0.8, truncate=1.25, mode="nearest")


def ink_mask(image: np.ndarray) -> np.ndarray:
    """Otsu threshold; the smaller side of the split is taken as ink."""
    if np.ptp(image) == 0:
        return np.zeros(image.shape, dtype=bool)
    t = threshold_otsu(image)
    bright = image > t
    return bright if bright.sum() <= bright.size - bright.sum() else ~bright


def preprocess(image, *, denoise_first: bool = True, binarize: bool = True) -> np.ndarray:
    """Raw grayscale (0..255) to a normalised 32x32 frame with bright ink on -1.

    Steps: median + Gaussian denoise, Otsu binarisation, tightest bounding box,
    resize so the longer side is 32 (bilinear), centre-pad the shorter side,
    scale to [0, 1] and normalise. With ``binarize=False`` the input must
    already be ink-bright on a zero background.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if denoise_first:
        img = denoise(img)
    if binarize:
        img = ink_mask(img) * 255.0
    rows = np.flatnonzero((img > 0).any(axis=1))
    cols = np.flatnonzero((img > 0).any(axis=0))
    if rows.size == 0:
        raise BlankImageError("image has no foreground")
    crop = img[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    h, w = crop.shape
    if h >= w:
        shape = (SIZE, max(1, round(SIZE * w / h)))
    else:
        shape = (max(1, round(SIZE * h / w)), SIZE)
    if shape != crop.shape:
        down = shape[0] < h or shape[1] < w
        crop = resize(crop, shape, order=1, mode="edge", anti_aliasing=down, preserve_range=True)
    out = np.zeros((SIZE, SIZE))
    top, left = (SIZE - shape[0]) // 2, (SIZE - shape[1]) // 2
    out[top : top + shape[0], left : left + shape[1]] = crop
    return normalize(np.clip(out / 255.0, 0.0, 1.0))


def preprocess_set(samples: SampleSet, **kwargs) -> SampleSet:
    """Preprocess every image; blank images are dropped with a warning."""
    images, keep = [], []
    for i in range(len(samples)):
        try:
            images.append(preprocess(samples.images[i], **kwargs))
            keep.append(i)
        except BlankImageError:
            logger.warning("dropping blank image %s", samples.ids[i])
    out = SampleSet(
        np.stack(images) if images else np.zeros((0, SIZE, SIZE)),
        samples.labels[keep],
        [samples.ids[i] for i in keep],
        samples.class_names,
    )
    out.skipped = samples.skipped + len(samples) - len(keep)
    return out


# -- augmentation ------------------------------------------------------------


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so parallel order does not matter."""
    return np.random.default_rng([seed, epoch, index])


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def vflip(image: np.ndarray) -> np.ndarray:
    return image[::-1, :].copy()


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre, bilinear, background fill."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    matrix = np.array([[c, s], [-s, c]])
    centre = (np.asarray(image.shape) - 1) / 2.0
    offset = centre - matrix @ centre
    return ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=BACKGROUND)


def jitter(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    x = (image + 1.0) / 2.0 * brightness
    m = x.mean()
    x = (x - m) * contrast + m
    return normalize(np.clip(x, 0.0, 1.0))


def crop(image: np.ndarray, top: int, left: int, pad: int = 4) -> np.ndarray:
    padded = np.pad(image, pad, constant_values=BACKGROUND)
    return padded[top : top + image.shape[0], left : left + image.shape[1]].copy()


def augment_image(
    image: np.ndarray,
    kind: str,
    rng: np.random.Generator,
    *,
    prob: float = 0.5,
    factor: float = 0.05,
    pad: int = 4,
    max_rotation: float = 20.0,
    max_affine: float = 45.0,
) -> np.ndarray:
    if kind == "none":
        return image
    if kind == "jitter":
        # saturation has no effect on one channel
        b, c = rng.uniform(1 - factor, 1 + factor, size=2)
        return jitter(image, b, c)
    if kind == "hflip":
        return hflip(image) if rng.random() < prob else image
    if kind == "vflip":
        return vflip(image) if rng.random() < prob else image
    if kind == "random_crop":
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        return crop(image, int(top), int(left), pad)
    if kind == "rotation":
        return rotate(image, rng.uniform(-max_rotation, max_rotation))
    if kind == "affine":
        return rotate(image, rng.uniform(-max_affine, max_affine))
    raise DataError(f"unknown augmentation {kind!r}; expected one of {AUGMENTATIONS}")


def augment(sample: Sample, kind: str, rng: np.random.Generator, **kwargs) -> Sample:
    return Sample(augment_image(sample.image, kind, rng, **kwargs), sample.label, sample.source_id)


# -- splits ------------------------------------------------------------------


def split_train_val(samples: SampleSet, val_size, seed: int = 0) -> tuple[SampleSet, SampleSet]:
    """Seeded disjoint split; ``val_size`` is a count or a fraction in (0, 1)."""
    n = len(samples)
    if isinstance(val_size, float) and 0 < val_size < 1:
        val_size = int(round(n * val_size))
    val_size = int(val_size)
    if not 0 < val_size < n:
        raise DataError(f"validation size {val_size} must be in 1..{n - 1}")
    order = np.random.default_rng(seed).permutation(n)
    return samples.subset(np.sort(order[val_size:])), samples.subset(np.sort(order[:val_size]))
