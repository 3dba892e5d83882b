"""Procedural imbalanced segmentation benchmarks and the continual split.

Images are (H, W, 3) grids in [0, 1]; label maps are (H, W) uint16 with
0 = background and 65535 = ignore.  Each class is keyed by a (shape kind,
base color) pair; shapes are painted back-to-front so later shapes occlude
earlier ones, which erodes minority classes the way real long-tail pixel
distributions do.  Generation is a pure function of the spec: every image
uses its own hash-derived PRNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import Rng

IGNORE_ID = 65535
BACKGROUND_ID = 0

DATASET_MAGIC = b"FCLS"
DATASET_VERSION = 1

SHAPE_KINDS = ("rect", "circle", "triangle")

BACKGROUND_COLOR = (0.08, 0.08, 0.08)

_BASE_COLORS = (
    (0.90, 0.15, 0.15),
    (0.15, 0.85, 0.15),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.20, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.90, 0.90, 0.90),
)

COLOR_JITTER = 0.1


@dataclass
class SegSample:
    """One RGB image grid plus its integer label map."""

    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) uint16


@dataclass(frozen=True)
class BenchmarkSpec:
    num_classes: int
    image_size: Tuple[int, int]
    class_frequencies: Tuple[float, ...]
    shape_palette: Tuple[Tuple[str, Tuple[float, float, float]], ...]
    noise_sigma: float
    train_count: int
    test_count: int
    seed: int

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ConfigError(f"zero-area image size {self.image_size}")
        if min(h, w) < 8:
            raise ConfigError("image sides must be at least 8 pixels")
        if self.num_classes < 1 or self.num_classes >= IGNORE_ID:
            raise ConfigError(f"invalid num_classes {self.num_classes}")
        freqs = np.asarray(self.class_frequencies, dtype=np.float64)
        if freqs.shape != (self.num_classes,):
            raise ConfigError(
                f"class_frequencies must have length {self.num_classes}"
            )
        if np.any(freqs <= 0):
            raise ConfigError("class_frequencies entries must be > 0")
        if abs(float(freqs.sum()) - 1.0) > 1e-9:
            raise ConfigError(
                f"class_frequencies must sum to 1, got {float(freqs.sum())!r}"
            )
        if len(self.shape_palette) != self.num_classes:
            raise ConfigError("shape_palette must have one entry per class")
        for kind, color in self.shape_palette:
            if kind not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {kind!r}")
            if len(color) != 3:
                raise ConfigError("palette colors must be RGB triples")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("train_count and test_count must be >= 1")
        return self

    def manifest_fields(self):
        freqs = ",".join(f"{f:.12g}" for f in self.class_frequencies)
        palette = ";".join(
            f"{kind}:{c[0]:.6g}:{c[1]:.6g}:{c[2]:.6g}"
            for kind, c in self.shape_palette
        )
        return {
            "num_classes": str(self.num_classes),
            "image_height": str(self.image_size[0]),
            "image_width": str(self.image_size[1]),
            "class_frequencies": freqs,
            "shape_palette": palette,
            "noise_sigma": f"{self.noise_sigma:.12g}",
            "train_count": str(self.train_count),
            "test_count": str(self.test_count),
            "seed": str(self.seed),
        }


def zipf_frequencies(num_classes, exponent=1.5):
    """Frequencies proportional to rank^-exponent, normalized to sum 1."""
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    f = ranks**-exponent
    f /= f.sum()
    return tuple(float(x) for x in f)


def default_palette(num_classes):
    palette = []
    for c in range(num_classes):
        kind = SHAPE_KINDS[c % len(SHAPE_KINDS)]
        base = _BASE_COLORS[c % len(_BASE_COLORS)]
        if c >= len(_BASE_COLORS):
            # darken repeated colors so ids stay visually distinct
            scale = 0.6 ** (c // len(_BASE_COLORS))
            base = tuple(v * scale for v in base)
        palette.append((kind, base))
    return tuple(palette)


def shapes_benchmark(num_classes=8, image_size=(32, 32), noise_sigma=0.04,
                     train_count=200, test_count=50, seed=7,
                     zipf_exponent=1.5):
    """The default desk benchmark: skewed shape classes on small canvases."""
    return BenchmarkSpec(
        num_classes=num_classes,
        image_size=image_size,
        class_frequencies=zipf_frequencies(num_classes, zipf_exponent),
        shape_palette=default_palette(num_classes),
        noise_sigma=noise_sigma,
        train_count=train_count,
        test_count=test_count,
        seed=seed,
    ).validate()


@dataclass(frozen=True)
class TaskSplit:
    """Ordered disjoint class-id sets, one per continual step."""

    steps: Tuple[Tuple[int, ...], ...]
    protocol: str = "overlapped"

    def validate(self, num_classes=None):
        seen = set()
        for step in self.steps:
            if not step:
                raise ConfigError("empty step in task split")
            for c in step:
                if c < 1 or (num_classes is not None and c > num_classes):
                    raise ConfigError(f"class id {c} outside 1..{num_classes}")
                if c in seen:
                    raise ConfigError(f"class id {c} appears in two steps")
                seen.add(c)
        if self.protocol != "overlapped":
            raise ConfigError(f"unsupported protocol {self.protocol!r}")
        return self

    @property
    def num_steps(self):
        return len(self.steps)

    def classes_at(self, step):
        self._check_step(step)
        return frozenset(self.steps[step - 1])

    def known_through(self, step):
        self._check_step(step)
        out = set()
        for s in self.steps[:step]:
            out.update(s)
        return frozenset(out)

    def old_classes(self, step):
        self._check_step(step)
        out = set()
        for s in self.steps[: step - 1]:
            out.update(s)
        return frozenset(out)

    def _check_step(self, step):
        if not 1 <= step <= len(self.steps):
            raise ConfigError(f"step {step} outside 1..{len(self.steps)}")

    @classmethod
    def from_sizes(cls, sizes, num_classes):
        """Build a split like "5-3": consecutive ids, ascending."""
        if isinstance(sizes, str):
            try:
                sizes = [int(tok) for tok in sizes.split("-")]
            except ValueError as exc:
                raise ConfigError(f"bad split spec {sizes!r}") from exc
        if sum(sizes) > num_classes:
            raise ConfigError(
                f"split sizes {sizes} exceed {num_classes} classes"
            )
        steps = []
        nxt = 1
        for n in sizes:
            if n < 1:
                raise ConfigError("split step sizes must be >= 1")
            steps.append(tuple(range(nxt, nxt + n)))
            nxt += n
        return cls(steps=tuple(steps)).validate(num_classes)


def _paint_shape(image, labels, rng, kind, color, class_id):
    h, w = labels.shape
    smin = max(3, min(h, w) // 6)
    smax = max(smin + 1, min(h, w) // 2)
    if kind == "rect":
        sh = smin + rng.randint(smax - smin + 1)
        sw = smin + rng.randint(smax - smin + 1)
        r0 = rng.randint(h - sh + 1)
        c0 = rng.randint(w - sw + 1)
        image[r0 : r0 + sh, c0 : c0 + sw, :] = color
        labels[r0 : r0 + sh, c0 : c0 + sw] = class_id
    elif kind == "circle":
        rmin = max(2, smin // 2)
        rmax = max(rmin + 1, smax // 2)
        radius = rmin + rng.randint(rmax - rmin + 1)
        cy = radius + rng.randint(h - 2 * radius)
        cx = radius + rng.randint(w - 2 * radius)
        rr, cc = np.ogrid[:h, :w]
        mask = (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2
        image[mask] = color
        labels[mask] = class_id
    else:  # triangle: right angle at the top-left corner
        sh = smin + rng.randint(smax - smin + 1)
        sw = smin + rng.randint(smax - smin + 1)
        r0 = rng.randint(h - sh + 1)
        c0 = rng.randint(w - sw + 1)
        dr = np.arange(sh, dtype=np.float64)[:, None] + 0.5
        dc = np.arange(sw, dtype=np.float64)[None, :] + 0.5
        mask = dr * sw + dc * sh <= sh * sw
        sub_img = image[r0 : r0 + sh, c0 : c0 + sw]
        sub_lab = labels[r0 : r0 + sh, c0 : c0 + sw]
        sub_img[mask] = color
        sub_lab[mask] = class_id


def _generate_image(spec, rng):
    h, w = spec.image_size
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:, :] = BACKGROUND_COLOR
    labels = np.zeros((h, w), dtype=np.uint16)
    freqs = np.asarray(spec.class_frequencies, dtype=np.float64)
    cdf = np.cumsum(freqs)
    n_shapes = 1 + rng.randint(4)
    for _ in range(n_shapes):
        u = rng.uniform()
        class_id = 1 + int(np.searchsorted(cdf, u, side="right"))
        class_id = min(class_id, spec.num_classes)
        kind, base = spec.shape_palette[class_id - 1]
        jitter = [COLOR_JITTER * (2.0 * rng.uniform() - 1.0) for _ in range(3)]
        color = tuple(base[i] + jitter[i] for i in range(3))
        _paint_shape(image, labels, rng, kind, color, class_id)
    if spec.noise_sigma > 0:
        noise = rng.normals(h * w * 3).reshape(h, w, 3)
        image += spec.noise_sigma * noise
    np.clip(image, 0.0, 1.0, out=image)
    # quantize through float32 so the file format round-trips bit-exactly
    image = image.astype(np.float32).astype(np.float64)
    return SegSample(image=image, labels=labels)


def generate(spec):
    """Generate (train, test) sample lists; pure function of the spec."""
    spec.validate()
    root = Rng(spec.seed)
    train = [
        _generate_image(spec, root.split(f"train/{i}"))
        for i in range(spec.train_count)
    ]
    test = [
        _generate_image(spec, root.split(f"test/{i}"))
        for i in range(spec.test_count)
    ]
    return train, test


def collapse_labels(sample, split, step):
    """Collapse labels outside the step's class set into background.

    Current-step classes keep their ids; the ignore sentinel passes through;
    everything else becomes background.  The image is shared, not copied.
    """
    split._check_step(step)
    keep = np.zeros(IGNORE_ID + 1, dtype=bool)
    keep[list(split.steps[step - 1])] = True
    keep[IGNORE_ID] = True
    labels = sample.labels
    collapsed = np.where(keep[labels], labels, np.uint16(BACKGROUND_ID))
    return SegSample(image=sample.image, labels=collapsed.astype(np.uint16))


def evaluation_labels(sample, split, step):
    """Collapse labels to the classes known through `step`.

    Unlike :func:`collapse_labels` (the training view, which keeps only the
    current step's classes), evaluation after step t scores every class
    introduced at any step up to t; classes from future steps collapse into
    background.
    """
    split._check_step(step)
    keep = np.zeros(IGNORE_ID + 1, dtype=bool)
    keep[sorted(split.known_through(step))] = True
    keep[IGNORE_ID] = True
    labels = sample.labels
    collapsed = np.where(keep[labels], labels, np.uint16(BACKGROUND_ID))
    return SegSample(image=sample.image, labels=collapsed.astype(np.uint16))


def select_step_indices(samples, split, step):
    """Indices of samples with at least one pixel of a current-step class."""
    classes = np.array(sorted(split.classes_at(step)), dtype=np.uint16)
    out = []
    for i, sample in enumerate(samples):
        if np.isin(sample.labels, classes).any():
            out.append(i)
    return out


def select_step_images(samples, split, step):
    return [samples[i] for i in select_step_indices(samples, split, step)]


def class_pixel_counts(samples, num_classes):
    """Pixel counts indexed 0..num_classes (0 = background); ignores excluded."""
    counts = np.zeros(num_classes + 1, dtype=np.int64)
    for sample in samples:
        labels = sample.labels[sample.labels != IGNORE_ID]
        counts += np.bincount(labels.astype(np.int64), minlength=num_classes + 1)[
            : num_classes + 1
        ]
    return counts


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}", offset=fh.tell())
    return data


def write_dataset(samples, path, num_classes, manifest=None):
    """Write samples in the binary dataset format; optional sidecar manifest."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(DATASET_VERSION.to_bytes(2, "little"))
        fh.write(int(num_classes).to_bytes(2, "little"))
        fh.write(len(samples).to_bytes(4, "little"))
        for sample in samples:
            h, w = sample.labels.shape
            fh.write(h.to_bytes(4, "little"))
            fh.write(w.to_bytes(4, "little"))
            fh.write(
                np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
            )
            fh.write(
                np.ascontiguousarray(sample.labels, dtype="<u2").tobytes()
            )
    if manifest is not None:
        write_manifest(f"{path}.manifest", manifest)


def read_dataset(path):
    """Read a dataset file; returns (samples, num_classes)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != DATASET_MAGIC:
            raise FormatError(
                f"bad magic {magic!r}, expected {DATASET_MAGIC.decode()!r}",
                offset=0,
            )
        version = int.from_bytes(_read_exact(fh, 2, "version"), "little")
        if version != DATASET_VERSION:
            raise FormatError(
                f"unsupported dataset version {version}", offset=4
            )
        num_classes = int.from_bytes(_read_exact(fh, 2, "num_classes"), "little")
        count = int.from_bytes(_read_exact(fh, 4, "count"), "little")
        samples = []
        for k in range(count):
            h = int.from_bytes(_read_exact(fh, 4, f"sample {k} height"), "little")
            w = int.from_bytes(_read_exact(fh, 4, f"sample {k} width"), "little")
            if h == 0 or w == 0:
                raise FormatError(
                    f"sample {k} has zero-area header {h}x{w}", offset=fh.tell()
                )
            img_bytes = _read_exact(fh, h * w * 3 * 4, f"sample {k} image")
            lab_bytes = _read_exact(fh, h * w * 2, f"sample {k} labels")
            image = (
                np.frombuffer(img_bytes, dtype="<f4")
                .reshape(h, w, 3)
                .astype(np.float64)
            )
            labels = np.frombuffer(lab_bytes, dtype="<u2").reshape(h, w).copy()
            if not np.all(np.isfinite(image)):
                raise FormatError(f"sample {k} image has non-finite values")
            if image.min() < 0.0 or image.max() > 1.0:
                raise FormatError(f"sample {k} image values outside [0, 1]")
            bad = (labels > num_classes) & (labels != IGNORE_ID)
            if bad.any():
                raise FormatError(
                    f"sample {k} labels outside 0..{num_classes} + ignore"
                )
            samples.append(SegSample(image=image, labels=labels))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last sample", offset=fh.tell() - 1)
    return samples, num_classes


def write_manifest(path, fields):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in fields.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path):
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"manifest line without '=': {line!r}")
            key, value = line.split("=", 1)
            fields[key] = value
    return fields
