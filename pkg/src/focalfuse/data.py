"""Synthetic ellipsoid phantoms, the MVOL1 volume file format, dataset splits.

MVOL1 layout::

    MVOL1\\n
    key: value\\n        (UTF-8 header, one field per line)
    ...
    \\n                  (blank line ends the header)
    <image payload><label payload>

Header fields: id, extents (W H Z), spacing (three floats), num_classes,
image_dtype (float32 | none), label_dtype (uint8), image_bytes,
label_bytes, digest (sha256 hex of both payloads).  Payloads are raw
little-endian arrays in C order over (W, H, Z).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"MVOL1\n"
DIVISOR = 16


@dataclass
class VolumeSample:
    """Image (1, W, H, Z) float32 or None, labels (W, H, Z) uint8, spacing in mm."""

    image: Optional[np.ndarray]
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = "sample"
    num_classes: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DataError(f"labels must be (W, H, Z), got {self.labels.shape}")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float32)
            if self.image.ndim == 3:
                self.image = self.image[None]
            if self.image.shape[1:] != self.labels.shape:
                raise DataError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
            if not np.isfinite(self.image).all():
                raise DataError("image contains non-finite values")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.max() >= self.num_classes:
            raise DataError(f"labels exceed num_classes={self.num_classes}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class PhantomSpec:
    """Random axis-aligned ellipsoids, one per foreground class.

    Class k gets mean intensity ``intensities[k]`` (background is index 0);
    by default intensities are evenly spaced in [0, 1].
    """

    extents: Tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 6
    radius_range: Tuple[float, float] = (3.5, 7.0)
    intensities: Optional[Sequence[float]] = None
    noise_std: float = 0.03
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    allow_overlap: bool = False
    max_attempts: int = 2000

    @classmethod
    def loads(cls, text: str) -> "PhantomSpec":
        """Parse ``key = value`` lines; tuple fields take space-separated numbers."""
        tuples = {"extents": int, "radius_range": float, "intensities": float, "spacing": float}
        scalars = {"num_classes": int, "noise_std": float, "seed": int, "max_attempts": int}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            try:
                if not sep:
                    raise ValueError("expected 'key = value'")
                if key in tuples:
                    kw[key] = tuple(tuples[key](v) for v in value.split())
                elif key in scalars:
                    kw[key] = scalars[key](value)
                elif key == "allow_overlap":
                    kw[key] = value.lower() in ("true", "1", "yes")
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ConfigError(f"phantom spec line {lineno}: {exc}")
        spec = cls(**kw)
        spec.validate()
        return spec

    def class_intensities(self) -> List[float]:
        if self.intensities is not None:
            vals = [float(v) for v in self.intensities]
            if len(vals) != self.num_classes:
                raise ConfigError(f"need {self.num_classes} intensities, got {len(vals)}")
            if len(set(vals)) != len(vals):
                raise ConfigError("class intensities must be distinct")
            return vals
        return [k / (self.num_classes - 1) for k in range(self.num_classes)]

    def validate(self) -> None:
        if len(self.extents) != 3 or any(e % DIVISOR or e < 2 * DIVISOR for e in self.extents):
            raise ConfigError(f"extents {self.extents} must be multiples of {DIVISOR}, >= {2 * DIVISOR}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ConfigError("num_classes must lie in [2, 256]")
        lo, hi = self.radius_range
        if not 1.0 <= lo <= hi:
            raise ConfigError(f"radius range {self.radius_range} must satisfy 1 <= lo <= hi")
        if 2 * hi + 1 > min(self.extents):
            raise ConfigError(f"max radius {hi} does not fit inside extents {self.extents}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        self.class_intensities()


@dataclass
class Ellipsoid:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]

    def contains(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        acc = 0.0
        for x, c, r in zip(coords, self.center, self.radii):
            acc = acc + ((x - c) / r) ** 2
        return acc <= 1.0


def sample_ellipsoids(spec: PhantomSpec, rng: np.random.Generator) -> List[Ellipsoid]:
    """One ellipsoid per foreground class, fully inside the volume."""
    placed: List[Ellipsoid] = []
    lo, hi = spec.radius_range
    for cls in range(1, spec.num_classes):
        for _ in range(spec.max_attempts):
            radii = tuple(float(r) for r in rng.uniform(lo, hi, size=3))
            center = tuple(float(rng.uniform(r, e - 1 - r)) for r, e in zip(radii, spec.extents))
            cand = Ellipsoid(center, radii)
            if spec.allow_overlap or all(_apart(cand, other) for other in placed):
                placed.append(cand)
                break
        else:
            raise ConfigError(
                f"could not place class {cls} without overlap after {spec.max_attempts} attempts; "
                "reduce radius_range or num_classes")
    return placed


def _apart(a: Ellipsoid, b: Ellipsoid) -> bool:
    # Bounding spheres plus one voxel of clearance.
    d = math.dist(a.center, b.center)
    return d > max(a.radii) + max(b.radii) + 1.0


def generate_phantom(spec: PhantomSpec, sample_id: Optional[str] = None) -> VolumeSample:
    """Deterministic labelled phantom for ``spec.seed``; higher class ids win overlaps."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shapes = sample_ellipsoids(spec, rng)
    coords = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in spec.extents), indexing="ij")
    labels = np.zeros(spec.extents, dtype=np.uint8)
    for cls, ell in enumerate(shapes, start=1):
        labels[ell.contains(coords)] = cls
    means = np.asarray(spec.class_intensities(), dtype=np.float64)
    image = means[labels]
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=labels.shape)
    return VolumeSample(image.astype(np.float32)[None], labels, spec.spacing,
                        sample_id or f"phantom_{spec.seed}", spec.num_classes)


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed derived deterministically from a dataset seed."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(spec: PhantomSpec, count: int, seed: int) -> List[VolumeSample]:
    out = []
    for i in range(count):
        s = sample_seed(seed, i)
        sub = PhantomSpec(**{**spec.__dict__, "seed": s})
        out.append(generate_phantom(sub, sample_id=f"phantom_{i:04d}"))
    return out


# ------------------------------------------------------------ file format

def encode_volume(sample: VolumeSample) -> bytes:
    img = b"" if sample.image is None else sample.image[0].astype("<f4").tobytes(order="C")
    lab = sample.labels.astype(np.uint8).tobytes(order="C")
    digest = hashlib.sha256(img + lab).hexdigest()
    header = [
        f"id: {sample.id}",
        "extents: " + " ".join(str(e) for e in sample.extents),
        "spacing: " + " ".join(repr(float(s)) for s in sample.spacing),
        f"num_classes: {sample.num_classes}",
        f"image_dtype: {'none' if sample.image is None else 'float32'}",
        "label_dtype: uint8",
        f"image_bytes: {len(img)}",
        f"label_bytes: {len(lab)}",
        f"digest: {digest}",
    ]
    return MAGIC + ("\n".join(header) + "\n\n").encode("utf-8") + img + lab


def write_volume(sample: VolumeSample, path) -> None:
    if "\n" in sample.id:
        raise DataError("sample id may not contain newlines")
    Path(path).write_bytes(encode_volume(sample))


def decode_volume(raw: bytes) -> VolumeSample:
    if not raw.startswith(MAGIC):
        raise FormatError("bad magic: not an MVOL1 file")
    end = raw.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise FormatError("unterminated header")
    try:
        text = raw[len(MAGIC):end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not UTF-8: {exc}")
    fields = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition(": ")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        fields[key] = value
    required = ("id", "extents", "spacing", "num_classes", "image_dtype", "label_dtype",
                "image_bytes", "label_bytes", "digest")
    missing = [k for k in required if k not in fields]
    if missing:
        raise FormatError(f"header missing fields: {', '.join(missing)}")
    try:
        extents = tuple(int(v) for v in fields["extents"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        num_classes = int(fields["num_classes"])
        n_img, n_lab = int(fields["image_bytes"]), int(fields["label_bytes"])
    except ValueError as exc:
        raise FormatError(f"bad numeric header field: {exc}")
    if len(extents) != 3 or len(spacing) != 3:
        raise FormatError("extents and spacing need three values")
    payload = raw[end + 2:]
    if len(payload) != n_img + n_lab:
        raise FormatError(
            f"payload size mismatch: header declares {n_img + n_lab} bytes, found {len(payload)}")
    nvox = extents[0] * extents[1] * extents[2]
    if fields["label_dtype"] != "uint8" or n_lab != nvox:
        raise FormatError(f"label payload of {n_lab} bytes does not match extents {extents}")
    if fields["image_dtype"] == "float32":
        if n_img != 4 * nvox:
            raise FormatError(f"image payload of {n_img} bytes does not match extents {extents}")
    elif fields["image_dtype"] != "none" or n_img != 0:
        raise FormatError(f"unsupported image dtype {fields['image_dtype']!r}")
    if hashlib.sha256(payload).hexdigest() != fields["digest"]:
        raise FormatError("digest mismatch: payload is corrupted")
    image = None
    if n_img:
        image = np.frombuffer(payload[:n_img], dtype="<f4").astype(np.float32).reshape((1,) + extents)
    labels = np.frombuffer(payload[n_img:], dtype=np.uint8).reshape(extents).copy()
    return VolumeSample(image, labels, spacing, fields["id"], num_classes)


def read_volume(path) -> VolumeSample:
    return decode_volume(Path(path).read_bytes())


def split_dataset(samples: Sequence, train_fraction: float, seed: int):
    """Seeded disjoint (train, test) partition; neither side may be empty."""
    n = len(samples)
    if n < 2:
        raise ConfigError("need at least 2 samples to split")
    n_train = int(round(n * train_fraction))
    if not 0 < n_train < n:
        raise ConfigError(f"train_fraction={train_fraction} leaves one side of the split empty")
    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]
