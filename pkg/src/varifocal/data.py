"""Image ingestion, preprocessing, augmentation and case-level fold splitting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .numeric.ops import resize_array
from .zoom import VarifocalConstants, ground_truth_box

N_TYPES = 24
BACKGROUND = 255
MANIFEST_COLUMNS = ("case_id", "sex", "image_path", "type_label", "polarity_label")


@dataclass
class Sample:
    image: np.ndarray
    type_label: int
    polarity_label: int
    case_id: str

    def __post_init__(self):
        if not 0 <= self.type_label < N_TYPES:
            raise ValueError(f"type label {self.type_label} outside 0..23")
        if self.polarity_label not in (0, 1):
            raise ValueError(f"polarity label {self.polarity_label} not in {{0, 1}}")
        if np.asarray(self.image).size == 0:
            raise ValueError("empty image")


@dataclass
class CaseRecord:
    case_id: str
    sex: str = "unknown"
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if self.sex not in ("male", "female", "unknown"):
            raise ValueError(f"sex must be male, female or unknown, got {self.sex!r}")
        for s in self.samples:
            if s.case_id != self.case_id:
                raise ValueError(f"sample case {s.case_id} inside case {self.case_id}")


@dataclass
class FoldSplit:
    assignments: dict  # case_id -> fold index
    n_folds: int = 5

    def test_cases(self, fold: int) -> list:
        return [c for c, f in self.assignments.items() if f == fold]

    def train_cases(self, fold: int) -> list:
        return [c for c, f in self.assignments.items() if f != fold]

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.assignments.values() if f == k) for k in range(self.n_folds)]


@dataclass(frozen=True)
class PreprocessConfig:
    pad_side: int = 320
    image_side: int = 256

    def __post_init__(self):
        if self.image_side > self.pad_side or self.image_side % 8:
            raise ValueError("image_side must be a multiple of 8 no larger than pad_side")

    @classmethod
    def desk(cls, image_side: int) -> "PreprocessConfig":
        """Same 320:256 pad-to-input ratio at a smaller input side."""
        return cls(pad_side=image_side * 5 // 4, image_side=image_side)


def pad_to_square(image: np.ndarray, side: int = 320) -> np.ndarray:
    img = np.asarray(image)
    h, w = img.shape[-2:]
    if h > side or w > side:
        raise ValueError(f"image {h}×{w} exceeds the {side}×{side} canvas; rescale upstream")
    out = np.full((side, side), BACKGROUND, dtype=img.dtype)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = img.reshape(h, w)
    return out


def normalize(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    sigma = img.std()
    if sigma == 0:
        raise ValueError("cannot normalize a constant image")
    return (img - img.mean()) / sigma


def resize_and_normalize(image: np.ndarray, image_side: int = 256) -> np.ndarray:
    """Bilinear resize to ``image_side``² then per-image zero mean / unit variance; returns 1×S×S."""
    resized = resize_array(np.asarray(image, dtype=np.float64), image_side, image_side)
    return normalize(resized)[None]


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    max_rotation: float = 45.0


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if degrees == 0:
        return img.copy()
    return ndimage.rotate(img, degrees, reshape=False, order=1, mode="constant", cval=BACKGROUND)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Random horizontal flip, rotation in [0, max_rotation] degrees, and vertical
    flip; only the vertical flip changes the label (polarity toggles)."""
    img = np.asarray(sample.image)
    polarity = sample.polarity_label
    if rng.random() < cfg.hflip_p:
        img = img[:, ::-1]
    img = rotate(img, rng.uniform(0.0, cfg.max_rotation))
    if rng.random() < cfg.vflip_p:
        img = img[::-1, :]
        polarity = 1 - polarity
    return replace(sample, image=np.ascontiguousarray(img), polarity_label=polarity)


def split_folds(cases: Sequence[CaseRecord], seed: int, n_folds: int = 5) -> FoldSplit:
    if len(cases) < n_folds:
        raise ValueError(f"need at least {n_folds} cases, got {len(cases)}")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit({ids[j]: i % n_folds for i, j in enumerate(order)}, n_folds)


# ---------------------------------------------------------------------------
# prepared arrays for training / evaluation


@dataclass
class PreparedSet:
    images: np.ndarray       # N×1×S×S normalized
    types: np.ndarray
    polarities: np.ndarray
    case_ids: np.ndarray
    boxes: np.ndarray        # N×3 ground-truth relative boxes

    def __len__(self) -> int:
        return len(self.types)

    def subset(self, idx) -> "PreparedSet":
        idx = np.asarray(idx)
        return PreparedSet(self.images[idx], self.types[idx], self.polarities[idx], self.case_ids[idx], self.boxes[idx])


def sample_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch) so results do not depend on processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index, epoch]))


def prepare(samples: Sequence[Sample], pre: PreprocessConfig, consts: VarifocalConstants,
            augment_seed: Optional[int] = None, epoch: int = 0, dtype=np.float32) -> PreparedSet:
    n, s = len(samples), pre.image_side
    images = np.empty((n, 1, s, s), dtype=dtype)
    boxes = np.empty((n, 3))
    types = np.empty(n, dtype=np.int64)
    pols = np.empty(n, dtype=np.int64)
    for i, smp in enumerate(samples):
        canvas = pad_to_square(smp.image, pre.pad_side).astype(np.float64)
        if augment_seed is not None:
            smp = augment(replace(smp, image=canvas), sample_rng(augment_seed, i, epoch))
            canvas = smp.image
        raw = resize_array(canvas, s, s)
        boxes[i] = ground_truth_box(raw, consts).as_array()
        images[i] = normalize(raw)[None]
        types[i], pols[i] = smp.type_label, smp.polarity_label
    return PreparedSet(images, types, pols, np.array([smp.case_id for smp in samples]), boxes)


# ---------------------------------------------------------------------------
# manifest I/O


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def write_manifest(path, cases: Sequence[CaseRecord], image_paths: dict) -> None:
    """``image_paths`` maps ``id(sample)`` to a path relative to the manifest directory."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for case in cases:
            for smp in case.samples:
                w.writerow([case.case_id, case.sex, image_paths[id(smp)], smp.type_label, smp.polarity_label])


def load_manifest(path) -> list[CaseRecord]:
    path = Path(path)
    cases: dict[str, CaseRecord] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: manifest missing columns {missing}")
        for row in reader:
            cid = row["case_id"]
            case = cases.setdefault(cid, CaseRecord(cid, row["sex"] or "unknown"))
            img = read_image(path.parent / row["image_path"])
            case.samples.append(Sample(img, int(row["type_label"]), int(row["polarity_label"]), cid))
    return list(cases.values())


def validation_split(cases: Sequence[CaseRecord], fraction: float, seed: int):
    """Hold out ``fraction`` of the training cases (at least one, never all) for validation."""
    if fraction <= 0 or len(cases) < 2:
        return list(cases), []
    n_val = min(max(1, round(fraction * len(cases))), len(cases) - 1)
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(cases))
    val = {int(i) for i in order[:n_val]}
    return [c for i, c in enumerate(cases) if i not in val], [c for i, c in enumerate(cases) if i in val]
