"""Manifests, patient-level splits, position balancing, curriculum epoch plans,
input-type variants, augmentation and the synthetic ultrasound generator."""

from __future__ import annotations

import dataclasses
import json
import math
import random
import warnings
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from scipy import ndimage
from torchvision.transforms import InterpolationMode

from promptus.prompts import InputType, Nature, Position, Task


PARTITIONS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DataError(ValueError):
    pass


class EmptyDataset(DataError):
    pass


class InvalidRatios(DataError):
    pass


class InvalidSpec(DataError):
    pass


class InvalidRecord(DataError):
    pass


class EmptyMaskWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRecord:
    dataset_id: str
    record_id: str
    patient_id: str
    image_path: str
    mask_path: str | None = None
    class_label: int | None = None
    position: str = ""
    nature: str = ""
    input_type: str = InputType.WHOLE.value

    def __post_init__(self):
        if self.mask_path is None and self.class_label is None:
            raise InvalidRecord(f"{self.record_id}: needs a mask_path or a class_label")
        if self.class_label is not None and self.class_label not in (0, 1):
            raise InvalidRecord(f"{self.record_id}: class_label must be 0 or 1")
        InputType(self.input_type)

    @property
    def has_mask(self) -> bool:
        return self.mask_path is not None

    @property
    def has_label(self) -> bool:
        return self.class_label is not None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Load a JSONL manifest; relative file paths are resolved against its directory."""
    path = Path(path)
    root = path.parent
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                for key in ("image_path", "mask_path"):
                    if row.get(key) and not Path(row[key]).is_absolute():
                        row[key] = str(root / row[key])
                record = ManifestRecord(**row)
            except (TypeError, json.JSONDecodeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if record.record_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate record_id {record.record_id}")
            seen.add(record.record_id)
            records.append(record)
    if not records:
        raise EmptyDataset(f"{path} holds no records")
    return records


def write_splits(assignment: dict[str, str], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rid in sorted(assignment):
            fh.write(json.dumps({"record_id": rid, "partition": assignment[rid]}) + "\n")


def read_splits(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["record_id"]] = row["partition"]
    return out


# --------------------------------------------------------------------------
# splitting


def _partition_counts(count: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``count`` items."""
    exact = [count * ratio for ratio in ratios]
    counts = [math.floor(share) for share in exact]
    order = sorted(range(len(ratios)), key=lambda index: (-(exact[index] - counts[index]), index))
    for index in order[: count - sum(counts)]:
        counts[index] += 1
    return counts


def split_by_patient(
    records: Sequence[ManifestRecord], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> dict[str, str]:
    """Assign every record to train/val/test so that no patient spans partitions.

    Patients are shuffled and apportioned independently within each dataset.
    """
    if not records:
        raise EmptyDataset("cannot split an empty manifest")
    if len(ratios) != 3 or any(ratio < 0 for ratio in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidRatios(f"ratios {tuple(ratios)} must be three nonnegative values summing to 1")
    by_dataset: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    for record in records:
        if not record.patient_id:
            raise InvalidRecord(f"{record.record_id}: missing patient_id")
        by_dataset[record.dataset_id][record.patient_id].append(record.record_id)
    assignment: dict[str, str] = {}
    for dataset_id in sorted(by_dataset):
        patients = sorted(by_dataset[dataset_id])
        random.Random(f"{seed}/{dataset_id}").shuffle(patients)
        start = 0
        for part, count in zip(PARTITIONS, _partition_counts(len(patients), ratios)):
            for pid in patients[start:start + count]:
                for rid in by_dataset[dataset_id][pid]:
                    assignment[rid] = part
            start += count
    return assignment


def select_partition(records: Sequence[ManifestRecord], assignment: dict[str, str], part: str) -> list[ManifestRecord]:
    return [record for record in records if assignment.get(record.record_id) == part]


# --------------------------------------------------------------------------
# raster I/O


def load_image(path: str | Path) -> np.ndarray:
    """8-bit grayscale raster -> float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def save_image(arr: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8), mode="L").save(path, optimize=False)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, optimize=False)


# --------------------------------------------------------------------------
# input-type variants


def local_crop_box(mask: np.ndarray, margin: float = 0.2) -> tuple[int, int, int, int] | None:
    """Half-open (row0, row1, col0, col1) of the foreground box grown by ``margin`` per side."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1
    dr = int(round(margin * (r1 - r0)))
    dc = int(round(margin * (c1 - c0)))
    height, width = mask.shape
    return max(0, r0 - dr), min(height, r1 + dr), max(0, c0 - dc), min(width, c1 + dc)


def location_enhance(image: np.ndarray, mask: np.ndarray, gain: float = 1.3) -> np.ndarray:
    out = image.copy()
    out[mask > 0] = np.clip(out[mask > 0] * gain, 0.0, 1.0)
    return out


def variant_id(record_id: str, input_type: InputType) -> str:
    return record_id if input_type is InputType.WHOLE else f"{record_id}#{input_type.value}"


def derive_input_variants(record: ManifestRecord, mask: np.ndarray | None = None) -> list[ManifestRecord]:
    """Whole, plus Local and Location variants for records with a nonempty mask.

    The pixel transform itself is applied on load (see :func:`materialize`);
    variants share the source files and differ only in ``input_type``.
    """
    if not record.has_mask:
        return [record]
    if mask is None:
        mask = load_mask(record.mask_path)
    if not mask.any():
        warnings.warn(f"EmptyMask: {record.record_id} has no foreground; emitting Whole only", EmptyMaskWarning, stacklevel=2)
        return [record]
    return [record] + [
        dataclasses.replace(record, record_id=variant_id(record.record_id, kind), input_type=kind.value)
        for kind in (InputType.LOCAL, InputType.LOCATION)
    ]


def _resize(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    tensor = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
    mode = InterpolationMode.NEAREST if nearest else InterpolationMode.BILINEAR
    out = TF.resize(tensor, [size, size], interpolation=mode, antialias=not nearest)[0].numpy()
    return out.astype(arr.dtype) if nearest else np.clip(out, 0.0, 1.0)


def materialize(
    record: ManifestRecord, image_size: int, local_margin: float = 0.2, location_gain: float = 1.3
) -> tuple[np.ndarray, np.ndarray | None]:
    """Pixels for a record after its input-type transform, resized to ``image_size``."""
    image = load_image(record.image_path)
    mask = load_mask(record.mask_path) if record.has_mask else None
    kind = InputType(record.input_type)
    if kind is not InputType.WHOLE:
        if mask is None or not mask.any():
            raise InvalidRecord(f"{record.record_id}: {kind.value} variant needs a nonempty mask")
        if kind is InputType.LOCAL:
            r0, r1, c0, c1 = local_crop_box(mask, local_margin)
            image, mask = image[r0:r1, c0:c1], mask[r0:r1, c0:c1]
        else:
            image = location_enhance(image, mask, location_gain)
    image = _resize(image, image_size, nearest=False)
    if mask is not None:
        mask = _resize(mask, image_size, nearest=True)
    return image.astype(np.float32), mask


# --------------------------------------------------------------------------
# balancing and curriculum


def balance_by_position(records: Sequence[ManifestRecord], seed: int = 0) -> list[ManifestRecord]:
    """Oversample every position up to the size of the largest one.

    Each record of an under-represented position appears at least once; the
    shortfall is drawn with replacement.
    """
    if not records:
        raise EmptyDataset("cannot balance an empty training set")
    groups: dict[str, list[ManifestRecord]] = defaultdict(list)
    for record in records:
        groups[record.position].append(record)
    target = max(len(group) for group in groups.values())
    rng = random.Random(seed)
    out: list[ManifestRecord] = []
    for pos in sorted(groups):
        group = groups[pos]
        out.extend(group)
        out.extend(rng.choices(group, k=target - len(group)))
    return out


@dataclass
class Batch:
    refs: list[ManifestRecord]
    task: Task


@dataclass
class EpochPlan:
    batches: list[Batch] = field(default_factory=list)

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    @property
    def tasks(self) -> list[Task]:
        return [batch.task for batch in self.batches]


def _chunks(items: list, size: int) -> list[list]:
    return [items[index:index + size] for index in range(0, len(items), size)]


def build_epoch_plan(refs: Sequence[ManifestRecord], batch_size: int, seed: int = 0) -> EpochPlan:
    """All segmentation batches first, then classification batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = random.Random(seed)
    seg = [record for record in refs if record.has_mask]
    cls = [record for record in refs if record.has_label]
    rng.shuffle(seg)
    rng.shuffle(cls)
    plan = EpochPlan()
    plan.batches += [Batch(batch, Task.SEGMENTATION) for batch in _chunks(seg, batch_size)]
    plan.batches += [Batch(batch, Task.CLASSIFICATION) for batch in _chunks(cls, batch_size)]
    return plan


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0
    # crop as fractions of the side: (top, left, height, width)
    crop: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle == 0.0 and self.crop == (0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation: float = 20.0
    crop_area: tuple[float, float] = (0.9, 1.0)


def sample_augment_params(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    side = math.sqrt(float(rng.uniform(*cfg.crop_area)))
    top, left = (float(offset) for offset in rng.uniform(0.0, 1.0 - side, size=2))
    return AugmentParams(flip, angle, (top, left, side, side))


def hflip(arr: np.ndarray) -> np.ndarray:
    return arr[..., ::-1].copy()


def apply_augment(image: np.ndarray, mask: np.ndarray | None, params: AugmentParams):
    """Apply one geometric transform to the image (bilinear) and mask (nearest)."""
    if params.is_identity:
        return image.copy(), None if mask is None else mask.copy()
    height, width = image.shape
    planes = [(torch.from_numpy(np.ascontiguousarray(image))[None], InterpolationMode.BILINEAR)]
    if mask is not None:
        planes.append((torch.from_numpy(mask.astype(np.float32))[None], InterpolationMode.NEAREST))
    out = []
    for plane, mode in planes:
        if params.flip:
            plane = TF.hflip(plane)
        if params.angle:
            plane = TF.rotate(plane, params.angle, interpolation=mode, fill=0.0)
        top, left, crop_height, crop_width = params.crop
        if (crop_height, crop_width) != (1.0, 1.0):
            plane = TF.resized_crop(
                plane, int(round(top * height)), int(round(left * width)), max(1, int(round(crop_height * height))),
                max(1, int(round(crop_width * width))),
                [height, width], interpolation=mode, antialias=False,
            )
        out.append(plane[0].numpy())
    img = np.clip(out[0], 0.0, 1.0).astype(np.float32)
    mask_out = (out[1] > 0.5).astype(np.uint8) if mask is not None else None
    return img, mask_out


def augment(image: np.ndarray, mask: np.ndarray | None = None, seed: int = 0, cfg: AugmentConfig = AugmentConfig()):
    return apply_augment(image, mask, sample_augment_params(np.random.default_rng(seed), cfg))


# --------------------------------------------------------------------------
# synthetic data

DEFAULT_NATURE = {
    Position.BREAST: Nature.TUMOR,
    Position.THYROID: Nature.TUMOR,
    Position.LIVER: Nature.TUMOR,
    Position.APPENDIX: Nature.TUMOR,
    Position.CARDIAC: Nature.ORGAN,
    Position.HEAD: Nature.ORGAN,
    Position.KIDNEY: Nature.ORGAN,
}

MALIGNANT_ECCENTRICITY = 0.6


def eccentricity_label(eccentricity: float) -> int:
    return int(eccentricity >= MALIGNANT_ECCENTRICITY)


def rasterize_ellipse(size: int, cy: float, cx: float, major: float, minor: float, theta: float) -> np.ndarray:
    """Boolean mask of pixel centres inside the ellipse (semi-axes major >= minor, rotated by theta)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    along = dx * math.cos(theta) + dy * math.sin(theta)
    across = -dx * math.sin(theta) + dy * math.cos(theta)
    return (along / major) ** 2 + (across / minor) ** 2 <= 1.0


def _style(dataset_id: str, position: str) -> dict:
    """Intensity statistics keyed by position, with a milder per-dataset shift."""
    pr = random.Random(zlib.crc32(position.encode()))
    dr = random.Random(zlib.crc32(f"{dataset_id}|{position}".encode()))
    return {
        "background": pr.uniform(0.35, 0.6) + dr.uniform(-0.05, 0.05),
        "contrast": pr.uniform(0.3, 0.55),
        "speckle": pr.uniform(0.15, 0.35) * dr.uniform(0.85, 1.15),
        "blur": pr.uniform(0.6, 1.4),
        "gradient": pr.uniform(-0.25, 0.25),
    }


def _speckle_background(rng: np.random.Generator, size: int, style: dict) -> np.ndarray:
    noise = rng.gamma(shape=1.0 / style["speckle"] ** 2, scale=style["speckle"] ** 2, size=(size, size))
    noise = ndimage.gaussian_filter(noise, style["blur"])
    depth = np.linspace(0.0, 1.0, size)[:, None]
    field_ = style["background"] * (1.0 + style["gradient"] * (depth - 0.5))
    return field_ * noise


@dataclass
class SynthSpec:
    positions: dict[str, int]
    image_size: int = 64
    seed: int = 0
    dataset_id: str = "synth"
    natures: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, values: dict) -> "SynthSpec":
        try:
            return cls(**values)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc

    def validate(self):
        if not self.positions:
            raise InvalidSpec("no positions requested")
        for pos, count in self.positions.items():
            if int(count) < 1:
                raise InvalidSpec(f"position {pos!r} needs count >= 1")
        if self.image_size < 16:
            raise InvalidSpec("image_size must be >= 16")

    def nature_of(self, position: str) -> Nature:
        if position in self.natures:
            return Nature(self.natures[position])
        try:
            return DEFAULT_NATURE[Position(position)]
        except (ValueError, KeyError):
            return Nature.TUMOR


def _draw_shape(rng: np.random.Generator, size: int, nature: Nature) -> dict:
    if nature is Nature.TUMOR:
        # keep eccentricities clear of the decision threshold
        eccentricity = float(rng.uniform(0.0, 0.35) if rng.random() < 0.5 else rng.uniform(0.8, 0.95))
        major = float(rng.uniform(0.14, 0.26) * size)
    else:
        eccentricity = float(rng.uniform(0.0, 0.5))
        major = float(rng.uniform(0.22, 0.34) * size)
    minor = major * math.sqrt(1.0 - eccentricity * eccentricity)
    pad = major + 2
    return {
        "cy": float(rng.uniform(pad, size - pad)),
        "cx": float(rng.uniform(pad, size - pad)),
        "a": major, "b": minor,
        "theta": float(rng.uniform(0, math.pi)),
        "eccentricity": eccentricity,
        "inner": 0.55 if nature is Nature.ORGAN else 0.0,
    }


def shape_mask(size: int, shape: dict) -> np.ndarray:
    outer = rasterize_ellipse(size, shape["cy"], shape["cx"], shape["a"], shape["b"], shape["theta"])
    if shape.get("inner", 0.0) > 0:
        ratio = shape["inner"]
        inner = rasterize_ellipse(size, shape["cy"], shape["cx"], shape["a"] * ratio, shape["b"] * ratio, shape["theta"])
        outer &= ~inner
    return outer


def render_synthetic(rng: np.random.Generator, size: int, style: dict, nature: Nature) -> tuple[np.ndarray, np.ndarray, dict]:
    shape = _draw_shape(rng, size, nature)
    mask = shape_mask(size, shape)
    img = _speckle_background(rng, size, style)
    lesion = _speckle_background(rng, size, style)
    if nature is Nature.TUMOR:
        # hypoechoic lesion
        img = np.where(mask, lesion * style["contrast"], img)
    else:
        img = np.where(mask, np.clip(lesion * (1.0 + 1.5 * style["contrast"]), 0, 1), img)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8), shape


def generate_synthetic_dataset(spec: SynthSpec | dict, out_dir: str | Path) -> list[ManifestRecord]:
    """Write images, masks, ``manifest.jsonl`` and ``shapes.jsonl`` under ``out_dir``.

    Tumor records carry an ellipse mask and a class label from its eccentricity;
    organ records carry a ring mask only.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, zlib.crc32(spec.dataset_id.encode())])
    records, shapes = [], []
    patient_no, left_for_patient = 0, 0
    for position in spec.positions:
        count = int(spec.positions[position])
        nature = spec.nature_of(position)
        style = _style(spec.dataset_id, position)
        for index in range(count):
            if left_for_patient == 0:
                patient_no += 1
                left_for_patient = int(rng.integers(1, 4))
            left_for_patient -= 1
            rid = f"{spec.dataset_id}-{position}-{index:04d}"
            img, mask, shape = render_synthetic(rng, spec.image_size, style, nature)
            save_image(img, out / "images" / f"{rid}.png")
            save_mask(mask, out / "masks" / f"{rid}.png")
            records.append(ManifestRecord(
                dataset_id=spec.dataset_id,
                record_id=rid,
                patient_id=f"{spec.dataset_id}-p{patient_no:04d}",
                image_path=f"images/{rid}.png",
                mask_path=f"masks/{rid}.png",
                class_label=eccentricity_label(shape["eccentricity"]) if nature is Nature.TUMOR else None,
                position=position,
                nature=nature.value,
            ))
            shapes.append({"record_id": rid, **shape})
        left_for_patient = 0  # patients do not straddle positions
    write_manifest(records, out / "manifest.jsonl")
    with open(out / "shapes.jsonl", "w") as fh:
        for entry in shapes:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return read_manifest(out / "manifest.jsonl")


def annotation_counts(records: Iterable[ManifestRecord]) -> Counter:
    counts: Counter = Counter()
    for record in records:
        counts["seg"] += record.has_mask
        counts["cls"] += record.has_label
    return counts
