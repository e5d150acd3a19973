"""Dataset container plus on-disk image/covariate IO.

Directory layout: ``<root>/images/<id>.png`` (8-bit grayscale) and
``<root>/covariates.csv`` with header ``id,age,sex,site``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

__all__ = [
    "CovariateRecord",
    "Dataset",
    "save_dataset",
    "load_dataset",
    "ingest",
]

CSV_COLUMNS = ("id", "age", "sex", "site")


@dataclass(frozen=True)
class CovariateRecord:
    """Per-subject covariates: age in years, binary sex, site label."""

    age: float
    sex: int
    site: str

    def __post_init__(self):
        if not math.isfinite(self.age):
            raise ValueError(f"age must be finite, got {self.age}")
        if self.sex not in (0, 1):
            raise ValueError(f"sex must be 0 or 1, got {self.sex!r}")
        if not self.site:
            raise ValueError("site label must be non-empty")

    def with_site(self, site: str) -> "CovariateRecord":
        return replace(self, site=site)


class Dataset:
    """Images in [0, 1] paired with covariate records and stable ids."""

    def __init__(self, images: np.ndarray, records: Sequence[CovariateRecord], ids: Sequence[str]):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 3:
            raise ValueError(f"images must have shape (n, H, W), got {images.shape}")
        if not (len(images) == len(records) == len(ids)):
            raise ValueError(
                f"length mismatch: {len(images)} images, {len(records)} records, {len(ids)} ids"
            )
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if list(ids).count(i) > 1})
            raise ValueError(f"duplicate ids: {dupes[:5]}")
        if not np.all(np.isfinite(images)):
            raise ValueError("images contain non-finite values")
        self.images = images
        self.records = list(records)
        self.ids = [str(i) for i in ids]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    def sites(self) -> list[str]:
        return [r.site for r in self.records]

    def site_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.site] = counts.get(r.site, 0) + 1
        return counts

    def modal_site(self) -> str:
        """Largest site by sample count; ties break by label order."""
        counts = self.site_counts()
        return max(sorted(counts), key=lambda s: counts[s])

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(
            self.images[idx],
            [self.records[i] for i in idx],
            [self.ids[i] for i in idx],
        )

    def subset_by_site(self, site: str) -> "Dataset":
        return self.subset([i for i, r in enumerate(self.records) if r.site == site])

    def sorted_by_id(self) -> "Dataset":
        order = sorted(range(len(self)), key=lambda i: self.ids[i])
        return self.subset(order)


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: Path) -> None:
    Image.fromarray(image_to_uint8(img), mode="L").save(path, format="PNG")


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write ``<root>/images/*.png`` and ``<root>/covariates.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for img, rec_id in zip(dataset.images, dataset.ids):
        save_image(img, root / "images" / f"{rec_id}.png")
    with open(root / "covariates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec_id, rec in zip(dataset.ids, dataset.records):
            writer.writerow([rec_id, repr(float(rec.age)), rec.sex, rec.site])
    return root


def _parse_covariates_csv(csv_path: Path, age_range: tuple[float, float]) -> list[tuple[str, CovariateRecord]]:
    rows: list[tuple[str, CovariateRecord]] = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{csv_path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                age = float(row["age"])
                sex = int(row["sex"])
                rec = CovariateRecord(age=age, sex=sex, site=row["site"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{csv_path} row {lineno} (id={row.get('id')!r}): {exc}") from exc
            if not age_range[0] <= age <= age_range[1]:
                raise ValueError(
                    f"{csv_path} row {lineno} (id={row['id']!r}): age {age} outside "
                    f"declared range {age_range}"
                )
            rows.append((row["id"], rec))
    return rows


def _load_grayscale(path: Path, resolution: int | None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32)


def load_dataset(
    root: str | Path,
    resolution: int | None = None,
    age_range: tuple[float, float] = (0.0, 150.0),
) -> Dataset:
    """Load a dataset previously written by :func:`save_dataset` (values / 255)."""
    root = Path(root)
    csv_path = root / "covariates.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no covariates.csv under {root}")
    rows = _parse_covariates_csv(csv_path, age_range)
    images, records, ids = [], [], []
    for rec_id, rec in rows:
        img_path = root / "images" / f"{rec_id}.png"
        if not img_path.exists():
            raise FileNotFoundError(f"image for id {rec_id!r} not found at {img_path}")
        images.append(_load_grayscale(img_path, resolution) / 255.0)
        records.append(rec)
        ids.append(rec_id)
    return Dataset(np.stack(images), records, ids)


def ingest(
    image_dir: str | Path,
    covariates_csv: str | Path,
    resolution: int = 32,
    age_range: tuple[float, float] = (0.0, 150.0),
) -> Dataset:
    """Ingest an external grayscale dataset: resize, then min-max normalize to [0, 1].

    Constant images map to all-zeros. Every csv id must resolve to
    ``<image_dir>/<id>.png`` (``.jpg``/``.jpeg``/``.tif`` also accepted).
    """
    image_dir = Path(image_dir)
    rows = _parse_covariates_csv(Path(covariates_csv), age_range)
    images, records, ids = [], [], []
    for rec_id, rec in rows:
        for ext in (".png", ".jpg", ".jpeg", ".tif"):
            img_path = image_dir / f"{rec_id}{ext}"
            if img_path.exists():
                break
        else:
            raise FileNotFoundError(f"no image for id {rec_id!r} under {image_dir}")
        raw = _load_grayscale(img_path, resolution)
        lo, hi = float(raw.min()), float(raw.max())
        if hi > lo:
            img = (raw - lo) / (hi - lo)
        else:
            img = np.zeros_like(raw)
        images.append(img)
        records.append(rec)
        ids.append(rec_id)
    return Dataset(np.stack(images), records, ids)
