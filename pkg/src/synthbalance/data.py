"""Image containers, manifest I/O and the offline dataset transforms.

Everything here is a pure function over immutable inputs. Pixel data lives in
``ImageTensor.values`` as a read-only ``float32`` array of shape (H, W, C).
"""

from __future__ import annotations

import csv
import json
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

RANGE_TAGS = ("raw_0_255", "standardized_0_1", "tanh_m1_1")
LABELS = {"benign": 0, "malignant": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
PROVENANCES = ("original", "synthetic", "augmented")
RESAMPLE_KERNEL = "bilinear"
PAD_VALUE = 0.0


@dataclass(frozen=True, eq=False)
class ImageTensor:
    values: np.ndarray
    range_tag: str = "raw_0_255"

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {values.shape}")
        h, w, c = values.shape
        if h < 1 or w < 1 or c not in (1, 3):
            raise ValueError(f"invalid image shape {values.shape}")
        if self.range_tag not in RANGE_TAGS:
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image contains non-finite values")
        lo, hi = {"standardized_0_1": (0.0, 1.0), "tanh_m1_1": (-1.0, 1.0)}.get(
            self.range_tag, (-np.inf, np.inf)
        )
        if values.min() < lo or values.max() > hi:
            raise ValueError(f"values outside [{lo}, {hi}] for {self.range_tag}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def equals(self, other: "ImageTensor") -> bool:
        return self.range_tag == other.range_tag and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class LabelledSample:
    id: str
    image: ImageTensor
    label: int
    provenance: str = "original"
    source_id: str | None = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "synthetic" and not self.source_id:
            raise ValueError(f"synthetic sample {self.id!r} needs a source id")


@dataclass(frozen=True)
class LabelledDataset:
    samples: tuple[LabelledSample, ...] = ()
    permutation_seed: int | None = None

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        seen: set[str] = set()
        for s in samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[LabelledSample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> LabelledSample:
        return self.samples[i]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in LABELS}
        for s in self.samples:
            counts[LABEL_NAMES[s.label]] += 1
        return counts

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def images(self) -> list[ImageTensor]:
        return [s.image for s in self.samples]

    def with_label(self, label: int) -> "LabelledDataset":
        return LabelledDataset(tuple(s for s in self.samples if s.label == label))

    def map_images(self, fn) -> "LabelledDataset":
        """Apply ``fn`` to every image, keeping ids, labels and order."""
        return LabelledDataset(
            tuple(
                LabelledSample(s.id, fn(s.image), s.label, s.provenance, s.source_id)
                for s in self.samples
            ),
            self.permutation_seed,
        )


# ---------------------------------------------------------------------------
# Manifest and snapshot I/O


def decode_image(path: Path) -> ImageTensor:
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "I", "I;16", "F") else "RGB")
        arr = np.asarray(im, dtype=np.float32)
    return ImageTensor(arr, "raw_0_255")


def load_manifest(manifest_path: str | Path, image_root: str | Path) -> LabelledDataset:
    """Read a ``path,label`` table into a dataset, in file order.

    Optional columns ``id``, ``provenance`` and ``source_id`` are honoured so
    that snapshots written by :func:`save_snapshot` round-trip. Errors name the
    file line of the offending row.
    """
    manifest_path = Path(manifest_path)
    image_root = Path(image_root)
    try:
        fh = manifest_path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {manifest_path}: {exc}") from exc
    samples = []
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("empty dataset")
        missing = {"path", "label"} - set(reader.fieldnames)
        if missing:
            raise DataError(f"manifest header lacks columns {sorted(missing)}")
        for row in reader:
            line = reader.line_num
            label_name = (row["label"] or "").strip()
            if label_name not in LABELS:
                raise DataError(f"row {line}: unknown label {label_name!r}")
            rel = (row["path"] or "").strip()
            path = image_root / rel
            if not path.is_file():
                raise DataError(f"row {line}: missing image file {path}")
            try:
                image = decode_image(path)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                raise DataError(f"row {line}: cannot decode {path}: {exc}") from exc
            provenance = (row.get("provenance") or "original").strip()
            source_id = (row.get("source_id") or "").strip() or None
            try:
                samples.append(
                    LabelledSample(
                        id=(row.get("id") or "").strip() or rel,
                        image=image,
                        label=LABELS[label_name],
                        provenance=provenance,
                        source_id=source_id,
                    )
                )
            except ValueError as exc:
                raise DataError(f"row {line}: {exc}") from exc
    if not samples:
        raise DataError("empty dataset")
    try:
        return LabelledDataset(tuple(samples))
    except DataError as exc:
        raise DataError(f"{manifest_path}: {exc}") from exc


def to_uint8(image: ImageTensor) -> np.ndarray:
    """Quantize to 8-bit pixels for PNG storage."""
    v = image.values.astype(np.float64)
    if image.range_tag == "standardized_0_1":
        v = v * 255.0
    elif image.range_tag == "tanh_m1_1":
        v = (v + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def write_png(image: ImageTensor, path: Path) -> None:
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def save_snapshot(
    dataset: LabelledDataset, directory: str | Path, metadata: Mapping | None = None
) -> Path:
    """Write ``images/`` + ``manifest.csv`` + ``metadata.json`` under ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(dataset):
        rel = f"images/{i:06d}_{_UNSAFE.sub('_', s.id)[:80]}.png"
        write_png(s.image, directory / rel)
        rows.append((rel, LABEL_NAMES[s.label], s.id, s.provenance, s.source_id or ""))
    with (directory / "manifest.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("path", "label", "id", "provenance", "source_id"))
        writer.writerows(rows)
    meta = {
        "n_samples": len(dataset),
        "class_counts": dataset.class_counts,
        "permutation_seed": dataset.permutation_seed,
        **(dict(metadata) if metadata else {}),
    }
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_snapshot(directory: str | Path) -> tuple[LabelledDataset, dict]:
    directory = Path(directory)
    dataset = load_manifest(directory / "manifest.csv", directory)
    meta_path = directory / "metadata.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return LabelledDataset(dataset.samples, meta.get("permutation_seed")), meta


# ---------------------------------------------------------------------------
# Geometry and intensity


def pad_and_resize(image: ImageTensor, target_side: int) -> ImageTensor:
    """Zero-pad to a centred square, then resample to ``target_side``."""
    if target_side < 8:
        raise ValueError(f"target_side must be >= 8, got {target_side}")
    v = image.values
    h, w, _ = v.shape
    side = max(h, w)
    if h != w:
        top, left = (side - h) // 2, (side - w) // 2
        v = np.pad(
            v,
            ((top, side - h - top), (left, side - w - left), (0, 0)),
            constant_values=PAD_VALUE,
        )
    if side != target_side:
        t = torch.from_numpy(np.array(v, dtype=np.float64)).permute(2, 0, 1)[None].double()
        t = F.interpolate(
            t, size=(target_side, target_side), mode=RESAMPLE_KERNEL,
            align_corners=False, antialias=target_side < side,
        )
        v = t[0].permute(1, 2, 0).numpy()
        # resampling weights are convex; clamp float rounding back into range
        v = np.clip(v, min(float(image.values.min()), PAD_VALUE), float(image.values.max()))
    return ImageTensor(v, image.range_tag)


def standardize(image: ImageTensor) -> ImageTensor:
    """Per-image min-max rescale to [0, 1]; a constant image maps to zeros."""
    if image.range_tag == "tanh_m1_1":
        raise ValueError("standardize expects raw (or already standardized) intensities")
    v = image.values.astype(np.float64)
    lo, hi = v.min(), v.max()
    z = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    return ImageTensor(z, "standardized_0_1")


def to_tanh_range(image: ImageTensor) -> ImageTensor:
    if image.range_tag != "standardized_0_1":
        image = standardize(image)
    return ImageTensor(image.values * 2.0 - 1.0, "tanh_m1_1")


def from_tanh_range(image: ImageTensor) -> ImageTensor:
    if image.range_tag != "tanh_m1_1":
        raise ValueError("expected a tanh-range image")
    return ImageTensor(np.clip((image.values + 1.0) / 2.0, 0.0, 1.0), "standardized_0_1")


# ---------------------------------------------------------------------------
# Dataset-level operations


def undersample_balance(dataset: LabelledDataset, seed: int) -> LabelledDataset:
    """Randomly drop majority-class samples down to the minority count.

    Kept samples stay in their input order.
    """
    labels = dataset.labels
    idx = {lab: np.flatnonzero(labels == lab) for lab in (0, 1)}
    if len(idx[0]) == 0 or len(idx[1]) == 0:
        raise DataError("undersampling needs both classes present")
    major = 0 if len(idx[0]) >= len(idx[1]) else 1
    n_minor = len(idx[1 - major])
    rng = np.random.default_rng(seed)
    kept = set(rng.choice(idx[major], size=n_minor, replace=False).tolist())
    kept.update(idx[1 - major].tolist())
    return LabelledDataset(tuple(s for i, s in enumerate(dataset) if i in kept))


def merge_and_shuffle(
    original: LabelledDataset, synthetic: LabelledDataset, seed: int
) -> LabelledDataset:
    collisions = set(original.ids) & set(synthetic.ids)
    if collisions:
        raise DataError(f"id collision while merging: {sorted(collisions)[:5]}")
    merged = original.samples + synthetic.samples
    order = np.random.default_rng(seed).permutation(len(merged))
    return LabelledDataset(tuple(merged[i] for i in order), permutation_seed=seed)


TRANSFORMS = (
    "horizontal_flip",
    "vertical_flip",
    "gaussian_noise",
    "brightness",
    "zoom",
    "horizontal_shift",
    "vertical_shift",
    "per_pixel_noise",
    "color_space_conversion",
    "rotation",
)

DEFAULT_MAGNITUDES: dict[str, tuple[float, float]] = {
    "rotation": (-25.0, 25.0),  # degrees
    "brightness": (-0.2, 0.2),  # relative gain offset
    "zoom": (0.9, 1.1),  # scale factor
    "horizontal_shift": (-0.1, 0.1),  # fraction of width
    "vertical_shift": (-0.1, 0.1),  # fraction of height
    "gaussian_noise": (0.02, 0.02),  # sigma, fraction of 0..255
    "per_pixel_noise": (0.02, 0.02),  # sigma, fraction of 0..255, shared across channels
    "color_space_conversion": (0.0, 1.0),  # blend weight toward luminance
}

DEFAULT_TRANSFORMS = (
    "horizontal_flip",
    "vertical_flip",
    "gaussian_noise",
    "brightness",
    "zoom",
    "horizontal_shift",
    "vertical_shift",
    "rotation",
)


@dataclass(frozen=True)
class AugmentationSpec:
    """Offline augmentation plan.

    ``factor`` multiplies the dataset size (originals included). ``target_total``,
    when set, overrides it with an absolute output size, e.g. 5400 for a 900-image
    set enlarged "5x" in the sense of adding five augmented copies per image.
    """

    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS
    magnitudes: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_MAGNITUDES)
    )
    factor: int = 1
    target_total: int | None = None
    seed: int = 0
    apply_probability: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "transforms", tuple(self.transforms))
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")
        mags = {**DEFAULT_MAGNITUDES, **{k: tuple(v) for k, v in dict(self.magnitudes).items()}}
        for name, (lo, hi) in mags.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"magnitude range for {name} must be finite with lo <= hi")
        object.__setattr__(self, "magnitudes", mags)
        if int(self.factor) != self.factor or self.factor < 1:
            raise ValueError("factor must be an integer >= 1")
        if self.target_total is not None and self.target_total < 1:
            raise ValueError("target_total must be positive")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")

    def output_size(self, n_input: int) -> int:
        total = self.target_total if self.target_total is not None else self.factor * n_input
        if total < n_input:
            raise ValueError(f"target size {total} is smaller than the input ({n_input})")
        return total


def _sample_rng(seed: int, sample_id: str, copy: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8")), copy])


def augment_image(image: ImageTensor, spec: AugmentationSpec, rng: np.random.Generator) -> ImageTensor:
    """One random draw of the enabled transforms, applied to a raw image."""
    v = image.values.astype(np.float64)
    h, w, c = v.shape
    mags = spec.magnitudes
    # every transform consumes its draws whether or not it fires, so enabling one
    # transform never reshuffles the randomness of another
    fire = {t: rng.random() < spec.apply_probability for t in TRANSFORMS}
    draw = {t: rng.uniform(*mags[t]) for t in DEFAULT_MAGNITUDES}
    on = {t for t in spec.transforms if fire[t]}

    angle = math.radians(draw["rotation"]) if "rotation" in on else 0.0
    scale = draw["zoom"] if "zoom" in on else 1.0
    dy = draw["vertical_shift"] * h if "vertical_shift" in on else 0.0
    dx = draw["horizontal_shift"] * w if "horizontal_shift" in on else 0.0
    if angle or scale != 1.0 or dx or dy:
        cos, sin = math.cos(angle), math.sin(angle)
        inv = np.array([[cos, sin], [-sin, cos]]) / scale
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = centre - inv @ (centre + np.array([dy, dx]))
        v = np.stack(
            [
                ndimage.affine_transform(v[:, :, k], inv, offset=offset, order=1, mode="constant", cval=0.0)
                for k in range(c)
            ],
            axis=2,
        )
    if "horizontal_flip" in on:
        v = v[:, ::-1]
    if "vertical_flip" in on:
        v = v[::-1]
    if "brightness" in on:
        v = v * (1.0 + draw["brightness"])
    if "color_space_conversion" in on and c == 3:
        lum = v @ np.array([0.299, 0.587, 0.114])
        t = draw["color_space_conversion"]
        v = (1.0 - t) * v + t * lum[:, :, None]
    if "gaussian_noise" in on:
        v = v + rng.normal(0.0, draw["gaussian_noise"] * 255.0, size=v.shape)
    if "per_pixel_noise" in on:
        v = v + rng.normal(0.0, draw["per_pixel_noise"] * 255.0, size=(h, w, 1))
    return ImageTensor(np.clip(v, 0.0, 255.0), image.range_tag)


def augment_offline(dataset: LabelledDataset, spec: AugmentationSpec) -> LabelledDataset:
    """Originals first, then augmented copies cycling over the input in order.

    Each copy's random stream is keyed by (seed, sample id, copy index), so the
    result does not depend on processing order.
    """
    n = len(dataset)
    total = spec.output_size(n)
    extra = []
    for k in range(total - n):
        src = dataset[k % n]
        copy = k // n
        rng = _sample_rng(spec.seed, src.id, copy)
        extra.append(
            LabelledSample(
                id=f"{src.id}#aug{copy}",
                image=augment_image(src.image, spec, rng),
                label=src.label,
                provenance="augmented",
                source_id=src.id,
            )
        )
    return LabelledDataset(dataset.samples + tuple(extra), dataset.permutation_seed)


def stack_images(images: Sequence[ImageTensor] | Iterable[ImageTensor]) -> np.ndarray:
    """(N, C, H, W) float32 array from a list of images."""
    images = list(images)
    if not images:
        return np.zeros((0, 0, 0, 0), dtype=np.float32)
    return np.stack([im.values.transpose(2, 0, 1) for im in images]).astype(np.float32)
