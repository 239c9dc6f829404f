"""Three-valued labels, label strategies, splitting and synthetic corpora.

Label codes are stored as ``int8``: ``POS = 1``, ``NEG = 0``, ``UNC = -1``
and ``BLANK = -2`` (a cell that was left empty). Images are 8-bit
grayscale PGM (P5) files referenced from a ``labels.csv`` whose header is
``Path,<class1>,...,<classC>``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, LabelParseError, ShapeError
from .rng import seeded_rng


class Label(IntEnum):
    BLANK = -2
    UNC = -1
    NEG = 0
    POS = 1


_TOKENS = {"1.0": Label.POS, "1": Label.POS, "0.0": Label.NEG, "0": Label.NEG, "-1.0": Label.UNC, "-1": Label.UNC, "": Label.BLANK}
_CELLS = {Label.POS: "1.0", Label.NEG: "0.0", Label.UNC: "-1.0", Label.BLANK: ""}
_ALPHABET = np.array([int(v) for v in Label], dtype=np.int8)

DEFAULT_CLASS_NAMES = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Pleural Effusion",
    "Enlarged Cardiomediastinum",
    "Lung Opacity",
    "Lung Lesion",
    "Pneumonia",
    "Pneumothorax",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)


def parse_label(token, row=0, column=""):
    """Map one CSV cell to a :class:`Label`."""
    try:
        return _TOKENS[token.strip()]
    except KeyError:
        raise LabelParseError(row, column, token) from None


@dataclass(frozen=True)
class LabelMatrix:
    """Per-sample, per-class label codes.

    Attributes:
        codes: [N, C] ``int8`` array over {1, 0, -1, -2}. Stored read-only.
        class_names: C column names.
    """

    codes: np.ndarray
    class_names: tuple

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int8, copy=True)
        if codes.ndim == 1:
            codes = codes.reshape(-1, 1) if len(self.class_names) == 1 else codes.reshape(1, -1)
        names = tuple(str(n) for n in self.class_names)
        if codes.ndim != 2 or codes.shape[1] != len(names):
            raise ShapeError("LabelMatrix", codes.shape, (len(names),), detail="codes columns vs class names")
        if not names:
            raise ConfigError("classes", "need at least one class")
        bad = ~np.isin(codes, _ALPHABET)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise LabelParseError(int(r), names[c], str(int(codes[r, c])))
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "class_names", names)

    @property
    def n_samples(self):
        return self.codes.shape[0]

    @property
    def n_classes(self):
        return self.codes.shape[1]

    def __len__(self):
        return self.n_samples

    def mask(self, code):
        return self.codes == int(code)

    @property
    def definite(self):
        """Entries labelled POS or NEG."""
        return self.codes >= 0

    def subset(self, index):
        return LabelMatrix(self.codes[np.asarray(index)], self.class_names)

    def replace(self, codes):
        return LabelMatrix(codes, self.class_names)

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return self.class_names == other.class_names and np.array_equal(self.codes, other.codes)

    __hash__ = None


# ------------------------------------------------------------------ PGM I/O


def write_pgm(path, image):
    """Write a 2-D ``uint8`` array as binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM into a ``uint8`` [H, W] array."""
    raw = Path(path).read_bytes()
    fields_, pos = [], 0
    while len(fields_) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields_.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields_[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields_[0]!r})")
    w, h, maxval = (int(v) for v in fields_[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos) if len(raw) - pos >= w * h else None
    if data is None:
        raise ValueError(f"{path}: truncated PGM raster")
    return data.reshape(h, w).copy()


# ------------------------------------------------------------------ dataset


@dataclass(frozen=True, eq=False)
class Dataset:
    """Image references plus labels.

    Images are decoded lazily. A synthetic corpus carries its pixels in
    memory (``pixels``) and may also carry the per-entry shape contrast it
    was rendered with.

    Attributes:
        image_paths: N file names, relative to ``root`` unless absolute.
        labels: the [N, C] label matrix.
        image_size: (H, W).
        root: directory the paths are relative to.
        pixels: optional [N, H, W] ``uint8`` cache.
        contrast: optional [N, C] rendered contrast (0 where absent).
    """

    image_paths: tuple
    labels: LabelMatrix
    image_size: tuple
    root: Path | None = None
    pixels: np.ndarray | None = None
    contrast: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "image_paths", tuple(str(p) for p in self.image_paths))
        if len(self.image_paths) != self.labels.n_samples:
            raise ShapeError("Dataset", (len(self.image_paths),), self.labels.codes.shape, detail="paths vs label rows")
        if self.pixels is not None and self.pixels.shape != (len(self.image_paths),) + tuple(self.image_size):
            raise ShapeError("Dataset", self.pixels.shape, tuple(self.image_size), detail="pixel cache")

    def __len__(self):
        return len(self.image_paths)

    @property
    def class_names(self):
        return self.labels.class_names

    def _resolve(self, name):
        p = Path(name)
        return p if p.is_absolute() or self.root is None else self.root / p

    def raw_images(self):
        """All images as a ``uint8`` [N, H, W] array (read once, then cached)."""
        if self.pixels is not None:
            return self.pixels
        if "raw" not in self._cache:
            out = np.empty((len(self),) + tuple(self.image_size), dtype=np.uint8)
            for i, name in enumerate(self.image_paths):
                img = read_pgm(self._resolve(name))
                if img.shape != tuple(self.image_size):
                    raise ShapeError("Dataset", img.shape, tuple(self.image_size), detail=f"image {name}")
                out[i] = img
            self._cache["raw"] = out
        return self._cache["raw"]

    def images(self, index=None):
        """Float images in [0, 1] shaped [n, 1, H, W]."""
        raw = self.raw_images()
        if index is not None:
            raw = raw[np.asarray(index)]
        return (raw.astype(np.float64) / 255.0)[:, None]

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            tuple(self.image_paths[i] for i in index),
            self.labels.subset(index),
            self.image_size,
            self.root,
            None if self.pixels is None else self.pixels[index],
            None if self.contrast is None else self.contrast[index],
        )

    def with_labels(self, labels):
        return Dataset(self.image_paths, labels, self.image_size, self.root, self.pixels, self.contrast)


# ------------------------------------------------------------------ CSV


def read_labels_csv(path):
    """Parse a label CSV into ``(paths, LabelMatrix)``."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0] or rows[0][0] != "Path":
        raise LabelParseError(0, "Path", rows[0][0] if rows and rows[0] else "")
    names = tuple(rows[0][1:])
    paths, codes = [], []
    for r, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise LabelParseError(r, "", ",".join(row))
        paths.append(row[0])
        codes.append([parse_label(tok, r, names[c]) for c, tok in enumerate(row[1:])])
    arr = np.array(codes, dtype=np.int8).reshape(len(codes), len(names))
    return paths, LabelMatrix(arr, names)


def load_csv(path, image_size=None):
    """Load a corpus from ``labels.csv`` (or a directory holding one).

    ``image_size`` defaults to the size of the first image; an empty corpus
    defaults to (0, 0). Missing image files only raise when pixels are read.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "labels.csv"
    paths, labels = read_labels_csv(path)
    root = path.parent
    if image_size is None:
        image_size = read_pgm(root / paths[0]).shape if paths else (0, 0)
    return Dataset(tuple(paths), labels, tuple(image_size), root)


def format_labels_csv(paths, labels):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Path", *labels.class_names])
    for p, row in zip(paths, labels.codes):
        writer.writerow([p, *(_CELLS[Label(int(v))] for v in row)])
    return buf.getvalue()


def write_csv(ds, path):
    Path(path).write_text(format_labels_csv(ds.image_paths, ds.labels), encoding="utf-8")


def write_dataset(ds, out_dir):
    """Write images and ``labels.csv`` under ``out_dir``; returns the reloaded dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = ds.raw_images()
    for name, img in zip(ds.image_paths, raw):
        target = out_dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(target, img)
    write_csv(ds, out_dir / "labels.csv")
    return Dataset(ds.image_paths, ds.labels, ds.image_size, out_dir, contrast=ds.contrast)


# ------------------------------------------------------------------ strategies

STRATEGIES = ("u-mask", "u-zero", "u-one", "u-ignore")


def normalize_strategy(name):
    key = str(name).strip().lower().replace("_", "-")
    if key not in STRATEGIES:
        raise ConfigError("strategy", f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
    return key


def apply_strategy(labels, strategy):
    """Rewrite UNC entries according to an uncertain-label strategy.

    ``u-zero`` maps UNC to NEG, ``u-one`` to POS, ``u-ignore`` to BLANK
    (dropped from every loss), and ``u-mask`` leaves the matrix unchanged.
    """
    key = normalize_strategy(strategy)
    if key == "u-mask":
        return labels
    target = {"u-zero": Label.NEG, "u-one": Label.POS, "u-ignore": Label.BLANK}[key]
    codes = labels.codes.copy()
    codes[codes == Label.UNC] = target
    return labels.replace(codes)


# ------------------------------------------------------------------ split


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.96
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction", f"must lie in (0, 1), got {self.train_fraction}")


def split_indices(n, spec):
    if n < 2:
        raise ShapeError("split", (n,), detail="need at least two samples")
    order = seeded_rng(spec.seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(n * spec.train_fraction))))
    return order[:n_train], order[n_train:]


def split(ds, spec=SplitSpec()):
    """Seeded shuffle then prefix split into ``(train, val)``."""
    tr, va = split_indices(len(ds), spec)
    return ds.subset(tr), ds.subset(va)


# ------------------------------------------------------------------ distribution


def class_distribution(labels):
    """Per-class counts as ``{name: (pos, neg, unc, blank)}``."""
    codes = labels.codes
    return {
        name: tuple(int((codes[:, c] == code).sum()) for code in (Label.POS, Label.NEG, Label.UNC, Label.BLANK))
        for c, name in enumerate(labels.class_names)
    }


def format_distribution(dist):
    """Render :func:`class_distribution` output as comma-separated rows."""
    lines = ["class,positive,negative,uncertain,blank,total"]
    for name, counts in dist.items():
        lines.append(",".join([name, *(str(v) for v in counts), str(sum(counts))]))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ synthesis


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic corpus.

    ``prevalence`` maps class names to P(POS | entry not uncertain); classes
    that are not listed use ``default_prevalence``.
    """

    n: int = 2000
    classes: int = 5
    image_size: int = 32
    uncertain_frac: float = 0.2
    seed: int = 42
    prevalence: dict = field(default_factory=dict)
    noise_std: float = 0.08
    default_prevalence: float = 0.35

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError("n", f"must be >= 0, got {self.n}")
        if not 1 <= self.classes <= len(SHAPES):
            raise ConfigError("classes", f"must lie in [1, {len(SHAPES)}], got {self.classes}")
        if self.image_size < 16:
            raise ConfigError("image_size", f"must be >= 16, got {self.image_size}")
        if not 0.0 <= self.uncertain_frac <= 1.0:
            raise ConfigError("uncertain_frac", f"must lie in [0, 1], got {self.uncertain_frac}")
        for name, p in self.prevalence.items():
            if name not in self.class_names:
                raise ConfigError(f"prevalence_{name}", "unknown class")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"prevalence_{name}", f"must lie in [0, 1], got {p}")

    @property
    def class_names(self):
        return DEFAULT_CLASS_NAMES[: self.classes]

    def prevalences(self):
        base = dict(zip(DEFAULT_CLASS_NAMES, DEFAULT_PREVALENCE))
        return np.array([self.prevalence.get(n, base.get(n, self.default_prevalence)) for n in self.class_names])

    @classmethod
    def from_mapping(cls, mapping):
        """Build from flat keys (``n``, ``classes``, ..., ``prevalence_<class>``)."""
        kwargs, prev = {}, {}
        casts = {"n": int, "classes": int, "image_size": int, "seed": int, "uncertain_frac": float, "noise_std": float}
        for key, value in mapping.items():
            if key.startswith("prevalence_"):
                name = key[len("prevalence_") :].replace("_", " ")
                match = [c for c in DEFAULT_CLASS_NAMES if c.lower() == name.lower()]
                if not match:
                    raise ConfigError(key, "unknown class")
                prev[match[0]] = _cast(key, value, float)
            elif key in casts:
                kwargs[key] = _cast(key, value, casts[key])
        return cls(prevalence=prev, **kwargs)


def _cast(key, value, kind):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}") from None


# one rare-negative class, the rest rare-positive to moderately common
DEFAULT_PREVALENCE = (0.85, 0.3, 0.15, 0.35, 0.45)

BACKGROUND = 0.15

# faint contrast for UNC entries, clearly visible contrast for POS entries
UNC_CONTRAST = (0.06, 0.16)
POS_CONTRAST = (0.22, 0.7)


def _shape_masks():
    """Class-specific binary shapes as functions of (dy, dx, r)."""
    a = np.abs
    return (
        lambda y, x, r: y * y + x * x <= r * r,  # disc
        lambda y, x, r: np.maximum(a(y), a(x)) <= 0.8 * r,  # square
        lambda y, x, r: ((a(y) <= r / 4) & (a(x) <= r)) | ((a(x) <= r / 4) & (a(y) <= r)),  # plus
        lambda y, x, r: (y <= 0.7 * r) & (y >= -r + 2 * a(x)),  # triangle
        lambda y, x, r: (y * y + x * x <= r * r) & (y * y + x * x >= (0.55 * r) ** 2),  # ring
        lambda y, x, r: a(x) + a(y) <= r,  # diamond
        lambda y, x, r: (a(a(x) - a(y)) <= r / 4) & (np.maximum(a(x), a(y)) <= r),  # saltire
        lambda y, x, r: (a(y) <= r / 4) & (a(x) <= r),  # horizontal bar
        lambda y, x, r: (a(x) <= r / 4) & (a(y) <= r),  # vertical bar
        lambda y, x, r: (np.maximum(a(y), a(x)) <= r) & (np.maximum(a(y), a(x)) >= 0.6 * r),  # frame
        lambda y, x, r: ((a(x + r / 2) <= r / 4) & (a(y) <= r)) | ((a(y - 3 * r / 4) <= r / 4) & (a(x) <= r)),  # ell
        lambda y, x, r: ((a(y + 3 * r / 4) <= r / 4) & (a(x) <= r)) | ((a(x) <= r / 4) & (a(y) <= r)),  # tee
        lambda y, x, r: ((y * y + (x - r / 2) ** 2) <= (r / 2.5) ** 2) | ((y * y + (x + r / 2) ** 2) <= (r / 2.5) ** 2),  # two dots
    )


SHAPES = _shape_masks()


def _render(rng, codes, contrast, size, noise_std):
    n, C = codes.shape
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    imgs = np.full((n, size, size), BACKGROUND)
    for i in range(n):
        canvas = imgs[i]
        for c in range(C):
            if contrast[i, c] <= 0:
                continue
            r = rng.uniform(0.12, 0.2) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            canvas += contrast[i, c] * SHAPES[c](yy - cy, xx - cx, r)
        canvas += rng.normal(0.0, noise_std, size=(size, size))
    return np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(config=SynthConfig(), rng=None):
    """In-memory synthetic corpus of geometric patterns.

    Each class has its own shape. An entry is UNC with probability
    ``uncertain_frac``; its shape is then drawn at a faint contrast close to
    the noise floor. Otherwise the entry is POS with the class prevalence and
    its shape is drawn at clearly visible contrast, or NEG with no shape.
    """
    rng = seeded_rng(config.seed) if rng is None else rng
    n, C = config.n, config.classes
    unc = rng.random((n, C)) < config.uncertain_frac
    pos = (rng.random((n, C)) < config.prevalences()[None, :]) & ~unc
    codes = np.where(unc, Label.UNC, np.where(pos, Label.POS, Label.NEG)).astype(np.int8)
    contrast = np.zeros((n, C))
    contrast[unc] = rng.uniform(*UNC_CONTRAST, size=int(unc.sum()))
    contrast[pos] = rng.uniform(*POS_CONTRAST, size=int(pos.sum()))
    pixels = _render(rng, codes, contrast, config.image_size, config.noise_std)
    paths = tuple(f"img{i:05d}.pgm" for i in range(n))
    labels = LabelMatrix(codes, config.class_names)
    return Dataset(paths, labels, (config.image_size, config.image_size), pixels=pixels, contrast=contrast)


OOD_FAMILIES = ("checker", "ramp")

# fine checkerboards: period in pixels and amplitude around the background
CHECKER_PERIOD = (2.0, 4.0)
CHECKER_AMPLITUDE = (0.08, 0.15)
# smooth illumination ramps: peak deviation from the background
RAMP_AMPLITUDE = (0.15, 0.3)


def generate_ood(config=SynthConfig(), rng=None):
    """Same-modality texture images that never occur in-distribution.

    Half the images are fine checkerboards, half are linear illumination
    ramps at a random angle. Both sit on the in-distribution background
    level with the same pixel noise, so they stay within the scanner's
    intensity range while containing none of the class shapes.

    All labels are BLANK.
    """
    rng = seeded_rng(config.seed) if rng is None else rng
    n, size = config.n, config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    imgs = np.empty((n, size, size))
    for i in range(n):
        if rng.random() < 0.5:
            period = rng.uniform(*CHECKER_PERIOD)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(*CHECKER_AMPLITUDE)
            wave = np.sign(np.sin(2 * np.pi * xx / period + phase) * np.sin(2 * np.pi * yy / period + phase))
        else:
            theta = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(*RAMP_AMPLITUDE)
            wave = (np.cos(theta) * (xx - centre) + np.sin(theta) * (yy - centre)) / centre
        imgs[i] = BACKGROUND + amp * wave + rng.normal(0.0, config.noise_std, size=(size, size))
    pixels = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
    codes = np.full((n, config.classes), Label.BLANK, dtype=np.int8)
    paths = tuple(f"ood{i:05d}.pgm" for i in range(n))
    return Dataset(paths, LabelMatrix(codes, config.class_names), (size, size), pixels=pixels)
