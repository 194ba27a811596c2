"""Synthetic phantom dataset, stratified splits, PNG/CSV storage and classic augmentation.

Dataset directory layout::

    <root>/images/<id>.png
    <root>/masks/<id>.png        (tumor samples only)
    <root>/manifest.csv          id,image,mask,domain,label,split
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

NORMAL, TUMOR = "normal", "tumor"
DOMAINS = (NORMAL, TUMOR)
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["id", "image", "mask", "domain", "label", "split"]


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray
    domain: str
    mask: Optional[np.ndarray] = None
    label: int = 0
    split: Optional[str] = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"{self.id}: unknown domain {self.domain!r}")
        if self.domain == NORMAL and (self.mask is not None or self.label != 0):
            raise ValueError(f"{self.id}: normal samples carry label 0 and no mask")
        if self.domain == TUMOR:
            if self.mask is None or self.label != 1:
                raise ValueError(f"{self.id}: tumor samples carry label 1 and a mask")
            if self.mask.shape != self.image.shape:
                raise ValueError(f"{self.id}: mask shape differs from image shape")
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"{self.id}: mask is not binary")


@dataclass(frozen=True)
class LesionParams:
    """Lesion radii as fractions of the image size, and brightness over background."""

    radius_min: float = 0.08
    radius_max: float = 0.25
    intensity_min: float = 0.4
    intensity_max: float = 0.9
    edge_softness: float = 0.15


def oracle_rule(image: np.ndarray, mask: np.ndarray, margin: float = 0.2) -> bool:
    """True if the masked region is brighter than the rest of the image by ``margin``."""
    inside = mask.astype(bool)
    if not inside.any() or inside.all():
        return False
    return float(image[inside].mean() - image[~inside].mean()) > margin


# ----------------------------------------------------------------------------
# Phantom generation
# ----------------------------------------------------------------------------


def _phantom_image(rng: np.random.Generator, size: int, lesion: Optional[LesionParams]):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    ay = rng.uniform(0.40, 0.46) * size
    ax = rng.uniform(0.36, 0.44) * size
    skull = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0

    texture = np.zeros((size, size))
    for _ in range(rng.integers(5, 16)):
        r = np.sqrt(rng.uniform(0, 1))
        phi = rng.uniform(0, 2 * np.pi)
        by, bx = cy + r * ay * np.sin(phi), cx + r * ax * np.cos(phi)
        sigma = rng.uniform(0.05, 0.2) * size
        amp = rng.uniform(0.3, 1.0)
        texture += amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma**2))
    texture += rng.normal(0.0, 0.03, size=(size, size))
    vals = texture[skull]
    texture = (texture - vals.min()) / max(vals.max() - vals.min(), 1e-12)
    image = np.where(skull, -0.7 + 0.8 * texture, -1.0)

    mask = None
    if lesion is not None:
        ry = rng.uniform(lesion.radius_min, lesion.radius_max) * size
        rx = rng.uniform(lesion.radius_min, lesion.radius_max) * size
        theta = rng.uniform(0, np.pi)
        reach = max(ry, rx)
        # lesion centre drawn from the skull ellipse shrunk by the lesion reach
        sy, sx = max(ay - reach, 0.0), max(ax - reach, 0.0)
        r = np.sqrt(rng.uniform(0, 1))
        phi = rng.uniform(0, 2 * np.pi)
        ly, lx = cy + r * sy * np.sin(phi), cx + r * sx * np.cos(phi)
        dy, dx = yy - ly, xx - lx
        u = (np.cos(theta) * dy + np.sin(theta) * dx) / ry
        v = (-np.sin(theta) * dy + np.cos(theta) * dx) / rx
        rho = np.sqrt(u**2 + v**2)
        amp = rng.uniform(lesion.intensity_min, lesion.intensity_max)
        profile = amp * 0.5 * (1 + np.tanh((1 - rho) / lesion.edge_softness))
        image = image + np.where(skull, profile, 0.0)
        mask = ((rho <= 1.0) & skull).astype(np.uint8)
    image = np.clip(image + np.where(skull, rng.normal(0, 0.02, (size, size)), 0), -1, 1)
    return image.astype(np.float32), mask


def generate_phantom(
    seed: int,
    n_samples: int,
    image_size: int = 64,
    tumor_fraction: float = 0.5,
    lesion_params: LesionParams = LesionParams(),
) -> List[SampleRecord]:
    """Textured elliptical phantoms; tumor samples carry one bright soft-edged lesion."""
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if not 0.0 <= tumor_fraction <= 1.0:
        raise ValueError("tumor_fraction must lie in [0, 1]")
    lp = lesion_params
    if not 0 < lp.radius_min <= lp.radius_max:
        raise ValueError("need 0 < radius_min <= radius_max")
    if lp.radius_max >= 0.5:
        raise ValueError("lesion radius must stay below half the image size")
    rng = np.random.default_rng(seed)
    n_tumor = int(round(n_samples * tumor_fraction))
    is_tumor = np.zeros(n_samples, dtype=bool)
    is_tumor[rng.permutation(n_samples)[:n_tumor]] = True
    records = []
    for i in range(n_samples):
        image, mask = _phantom_image(rng, image_size, lp if is_tumor[i] else None)
        if is_tumor[i]:
            records.append(SampleRecord(f"ph{i:05d}", image, TUMOR, mask.astype(np.float32), 1))
        else:
            records.append(SampleRecord(f"ph{i:05d}", image, NORMAL))
    return records


# ----------------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------------


@dataclass
class ManifestRow:
    id: str
    image: str
    mask: str
    domain: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    rows: List[ManifestRow] = field(default_factory=list)

    def split_of(self) -> Dict[str, str]:
        return {r.id: r.split for r in self.rows}

    def ids(self, split: str) -> List[str]:
        return [r.id for r in self.rows if r.split == split]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    records: Sequence[SampleRecord],
    ratios: Tuple[float, float, float] = (0.70, 0.20, 0.10),
    seed: int = 0,
) -> DatasetManifest:
    """Stratified train/val/test split. Val and test get ``round(ratio * n)``, train the rest."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1: {ratios}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids are not unique")
    rng = np.random.default_rng(seed)
    split = {}
    for label in (0, 1):
        members = [r.id for r in records if r.label == label]
        if not members:
            continue
        if len(members) < 10:
            raise ValueError(f"class {label} has {len(members)} samples; at least 10 required")
        order = [members[i] for i in rng.permutation(len(members))]
        n_val = _round_half_up(ratios[1] * len(members))
        n_test = _round_half_up(ratios[2] * len(members))
        n_train = len(members) - n_val - n_test
        for k, rid in enumerate(order):
            split[rid] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    rows = [
        ManifestRow(
            r.id,
            f"images/{r.id}.png",
            f"masks/{r.id}.png" if r.mask is not None else "",
            r.domain,
            r.label,
            split[r.id],
        )
        for r in records
    ]
    return DatasetManifest(rows)


def apply_manifest(records: Sequence[SampleRecord], manifest: DatasetManifest) -> List[SampleRecord]:
    lookup = manifest.split_of()
    return [replace(r, split=lookup[r.id]) for r in records]


def scarce_subset(
    records: Sequence[SampleRecord], tumor_keep: float, seed: int
) -> List[SampleRecord]:
    """Keep every normal record and ``round(tumor_keep * n)`` (at least one) tumor records."""
    if not 0 < tumor_keep <= 1:
        raise ValueError("tumor_keep must lie in (0, 1]")
    tumors = [r for r in records if r.domain == TUMOR]
    n_keep = max(1, _round_half_up(tumor_keep * len(tumors))) if tumors else 0
    rng = np.random.default_rng(seed)
    keep = {tumors[i].id for i in rng.permutation(len(tumors))[:n_keep]}
    return [r for r in records if r.domain == NORMAL or r.id in keep]


# ----------------------------------------------------------------------------
# Storage
# ----------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1, 1) + 1) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


class DatasetError(RuntimeError):
    pass


def save_dataset(records: Sequence[SampleRecord], manifest: DatasetManifest, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    by_id = {r.id: r for r in records}
    for row in manifest.rows:
        rec = by_id[row.id]
        if rec.image.min() < -1 - 1e-6 or rec.image.max() > 1 + 1e-6:
            raise ValueError(f"{rec.id}: image values outside [-1, 1]")
        Image.fromarray(to_uint8(rec.image), mode="L").save(root / row.image)
        if row.mask:
            Image.fromarray((rec.mask > 0.5).astype(np.uint8) * 255, mode="L").save(root / row.mask)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in manifest.rows:
            writer.writerow([row.id, row.image, row.mask, row.domain, row.label, row.split])
    return root


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{path}: line 1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, fields_ in enumerate(reader, start=2):
            if len(fields_) != len(MANIFEST_HEADER):
                raise DatasetError(f"{path}: line {lineno}: expected 6 fields, got {len(fields_)}")
            rid, image, mask, domain, label, split = fields_
            if domain not in DOMAINS or label not in ("0", "1") or split not in SPLITS:
                raise DatasetError(f"{path}: line {lineno}: malformed row {fields_}")
            rows.append(ManifestRow(rid, image, mask, domain, int(label), split))
    ids = [r.id for r in rows]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate ids")
    return DatasetManifest(rows)


def load_dataset(root) -> List[SampleRecord]:
    root = Path(root)
    manifest = read_manifest(root)
    records = []
    for row in manifest.rows:
        img_path = root / row.image
        if not img_path.is_file():
            raise DatasetError(f"sample {row.id}: image file missing: {img_path}")
        image = from_uint8(np.asarray(Image.open(img_path).convert("L")))
        mask = None
        if row.mask:
            mask_path = root / row.mask
            if not mask_path.is_file():
                raise DatasetError(f"sample {row.id}: mask file missing: {mask_path}")
            mask = (np.asarray(Image.open(mask_path).convert("L")) >= 128).astype(np.float32)
        records.append(SampleRecord(row.id, image, row.domain, mask, row.label, row.split))
    return records


def select(records: Sequence[SampleRecord], split: str) -> List[SampleRecord]:
    return [r for r in records if r.split == split]


# ----------------------------------------------------------------------------
# Classic augmentation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """One concrete geometric transform.

    ``crop_scale`` is the side of the crop window relative to the image, and
    ``crop_offset`` its centre shift in units of the free margin (-1..1).
    ``rotation_deg`` is counter-clockwise as displayed; ``translate`` is
    (rows, cols) as fractions of the image size.
    """

    crop_scale: float = 1.0
    crop_offset: Tuple[float, float] = (0.0, 0.0)
    rotation_deg: float = 0.0
    hflip: bool = False
    translate: Tuple[float, float] = (0.0, 0.0)

    def clamped(self) -> "AugmentSpec":
        clip = lambda v, lo, hi: float(min(max(v, lo), hi))  # noqa: E731
        return AugmentSpec(
            crop_scale=clip(self.crop_scale, 0.8, 1.0),
            crop_offset=tuple(clip(v, -1.0, 1.0) for v in self.crop_offset),
            rotation_deg=clip(self.rotation_deg, -15.0, 15.0),
            hflip=bool(self.hflip),
            translate=tuple(clip(v, -0.1, 0.1) for v in self.translate),
        )

    @classmethod
    def random(cls, rng: np.random.Generator) -> "AugmentSpec":
        return cls(
            crop_scale=float(rng.uniform(0.8, 1.0)),
            crop_offset=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
            rotation_deg=float(rng.uniform(-15, 15)),
            hflip=bool(rng.random() < 0.5),
            translate=(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1))),
        )

    def inverse_affine(self, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        """(matrix, offset) mapping output (row, col) to input coordinates."""
        h, w = shape
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        s = self.crop_scale
        crop_shift = np.array(self.crop_offset) * (1 - s) * np.array([h, w]) / 2
        shift = np.array(self.translate) * np.array([h, w])
        a = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        matrix = s * rot.T
        offset = centre + crop_shift - matrix @ (centre + shift)
        return matrix, offset

    def is_identity(self) -> bool:
        return self.crop_scale == 1.0 and self.rotation_deg == 0.0 and self.translate == (0.0, 0.0)


def classic_augment(
    image: np.ndarray,
    mask: Optional[np.ndarray] = None,
    spec: Optional[AugmentSpec] = None,
    seed: Optional[int] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply one geometric transform jointly to ``image`` and ``mask``.

    With ``spec=None`` a transform is drawn from ``seed``: crop-and-resize
    (scale 0.8-1.0), rotation within 15 degrees, horizontal flip, translation
    within 10 percent.
    """
    if spec is None:
        spec = AugmentSpec.random(np.random.default_rng(seed))
    spec = spec.clamped()
    out_img = np.asarray(image, dtype=np.float32)
    out_mask = None if mask is None else np.asarray(mask, dtype=np.float32)
    if spec.hflip:
        out_img = out_img[:, ::-1]
        out_mask = None if out_mask is None else out_mask[:, ::-1]
    if not spec.is_identity():
        matrix, offset = spec.inverse_affine(out_img.shape)
        out_img = ndimage.affine_transform(
            out_img, matrix, offset=offset, order=1, mode="constant", cval=-1.0
        )
        if out_mask is not None:
            out_mask = ndimage.affine_transform(
                out_mask, matrix, offset=offset, order=1, mode="constant", cval=0.0
            )
            out_mask = (out_mask >= 0.5).astype(np.float32)
    out_img = np.clip(out_img, -1, 1).astype(np.float32)
    return np.ascontiguousarray(out_img), (
        None if out_mask is None else np.ascontiguousarray(out_mask)
    )
