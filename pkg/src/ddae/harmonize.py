"""Site-transfer harmonization.

Each image is deterministically encoded to its stochastic code under its
own covariates, then decoded with the site covariate swapped to a
reference site while age, sex and the unknown-semantics latent stay
fixed.  Transferring an image to its own site is therefore exactly the
plain reconstruction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import CovariateRecord, Dataset, save_dataset
from .model import DdaeModel, to_model_range
from .sampling import SamplerConfig, ddim_decode, ddim_encode
from .schedule import NoiseSchedule, schedule_from_fingerprint

MANIFEST_COLUMNS = ("id", "source_path", "age", "sex", "site_original", "site_target", "status")


@dataclass(frozen=True)
class HarmonizationJob:
    """A dataset-level harmonization request.

    ``target_site`` of None means "the largest site in the dataset".
    ``source_root`` is only used to fill the manifest's source_path column.
    """

    dataset: Dataset
    model: DdaeModel
    target_site: str | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    output_dir: str | Path | None = None
    source_root: str | Path | None = None
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.target_site is not None and self.target_site not in self.model.site_vocabulary:
            raise ValueError(
                f"target site {self.target_site!r} not in checkpoint vocabulary "
                f"{list(self.model.site_vocabulary)}"
            )


def _transfer_batch(
    images01: torch.Tensor,
    records: Sequence[CovariateRecord],
    target_sites: Sequence[str],
    model: DdaeModel,
    schedule: NoiseSchedule,
    config: SamplerConfig,
) -> torch.Tensor:
    z_upsilon = model.encode_unknown(to_model_range(images01))
    z_kappa_src = model.encode_known(model.conditions(records))
    x_T = ddim_encode(images01, z_kappa_src, z_upsilon, model, schedule, config)
    retargeted = [r.with_site(s) for r, s in zip(records, target_sites)]
    z_kappa_tgt = model.encode_known(model.conditions(retargeted))
    return ddim_decode(x_T, z_kappa_tgt, z_upsilon, model, schedule, config)


def harmonize_image(
    x0: torch.Tensor,
    record: CovariateRecord,
    target_site: str,
    model: DdaeModel,
    schedule: NoiseSchedule,
    config: SamplerConfig = SamplerConfig(),
) -> torch.Tensor:
    """Re-generate one image with its site covariate replaced.

    The unknown-semantics latent and the stochastic code come from the
    source image; only the known-latent input changes, with age and sex
    copied over unchanged.  Output is in [0, 1] with the input's shape.
    """
    if target_site not in model.site_vocabulary:
        raise ValueError(
            f"target site {target_site!r} not in checkpoint vocabulary "
            f"{list(model.site_vocabulary)}"
        )
    squeeze = x0.ndim == 2
    batch = x0[None] if squeeze else x0
    if batch.ndim != 3 or batch.shape[0] != 1:
        raise ValueError(f"harmonize_image takes one (H, W) image, got shape {tuple(x0.shape)}")
    out = _transfer_batch(batch, [record], [target_site], model, schedule, config)
    return out[0] if squeeze else out


def harmonize_dataset(job: HarmonizationJob) -> tuple[Dataset, list[dict]]:
    """Harmonize every image in the job's dataset to the target site.

    Returns the harmonized dataset (covariate records unchanged, so any
    residual site signal can still be probed against the true source
    labels) and one manifest row per input sample.  Per-image failures
    are recorded in the manifest's status column and excluded from the
    output dataset; nothing is skipped silently.  When ``output_dir`` is
    set, images, covariates.csv and manifest.csv are written there.
    """
    ds = job.dataset
    model = job.model
    schedule = schedule_from_fingerprint(model.schedule_fingerprint)
    target = job.target_site if job.target_site is not None else (ds.modal_site() if len(ds) else None)
    if len(ds) and target not in model.site_vocabulary:
        raise ValueError(
            f"target site {target!r} not in checkpoint vocabulary {list(model.site_vocabulary)}"
        )

    ordered = ds.sorted_by_id()
    images = torch.from_numpy(np.ascontiguousarray(ordered.images))
    manifest: list[dict] = []
    kept_images: list[np.ndarray] = []
    kept_records: list[CovariateRecord] = []
    kept_ids: list[str] = []

    for start in range(0, len(ordered), job.batch_size):
        stop = min(start + job.batch_size, len(ordered))
        idx = range(start, stop)
        batch_records = [ordered.records[i] for i in idx]
        try:
            out = _transfer_batch(
                images[start:stop], batch_records, [target] * len(batch_records),
                model, schedule, job.sampler,
            )
            results = [(out[j].numpy(), None) for j in range(len(batch_records))]
        except Exception:
            # isolate which image(s) in the batch actually fail
            results = []
            for i in idx:
                try:
                    one = _transfer_batch(
                        images[i : i + 1], [ordered.records[i]], [target],
                        model, schedule, job.sampler,
                    )
                    results.append((one[0].numpy(), None))
                except Exception as exc:
                    results.append((None, f"{type(exc).__name__}: {exc}"))

        for i, (img, error) in zip(idx, results):
            record = ordered.records[i]
            sample_id = ordered.ids[i]
            if job.source_root is not None:
                source_path = str(Path(job.source_root) / "images" / f"{sample_id}.png")
            else:
                source_path = f"images/{sample_id}.png"
            manifest.append(
                {
                    "id": sample_id,
                    "source_path": source_path,
                    "age": repr(float(record.age)),
                    "sex": record.sex,
                    "site_original": record.site,
                    "site_target": target if target is not None else "",
                    "status": "ok" if error is None else f"error: {error}",
                }
            )
            if error is None:
                kept_images.append(img.astype(np.float32))
                kept_records.append(record)
                kept_ids.append(sample_id)

    resolution = ordered.resolution if len(ordered) else (ds.images.shape[1] if ds.images.ndim == 3 else 0)
    stacked = (
        np.stack(kept_images)
        if kept_images
        else np.zeros((0, resolution, resolution), dtype=np.float32)
    )
    harmonized = Dataset(stacked, kept_records, kept_ids)

    if job.output_dir is not None:
        out_dir = Path(job.output_dir)
        save_dataset(harmonized, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            writer.writerows(manifest)
    return harmonized, manifest


def failure_count(manifest: Sequence[dict]) -> int:
    return sum(1 for row in manifest if row["status"] != "ok")
