"""Pixel-level ComBat harmonization baseline.

Location/scale empirical-Bayes adjustment in the standard formulation:
features are standardized by a covariate regression (age, sex), per-site
location and scale estimates are shrunk toward parametric priors (normal
for locations, inverse-gamma for scales) by iterative moment matching,
and the adjusted features are mapped back to the original scale with the
covariate contribution restored.  Features here are flattened pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CovariateRecord, Dataset, save_dataset
from .harmonize import MANIFEST_COLUMNS

_CONV_TOL = 1e-6
_MAX_ITER = 1000


@dataclass(frozen=True)
class CombatModel:
    """Fitted ComBat parameters; apply with :func:`combat_apply`."""

    site_vocabulary: tuple[str, ...]
    beta_cov: np.ndarray  # (2, p): age and sex regression coefficients
    alpha: np.ndarray  # (p,) grand mean
    var_pooled: np.ndarray  # (p,)
    gamma_star: np.ndarray  # (n_sites, p) shrunken location shifts (standardized units)
    delta_sq_star: np.ndarray  # (n_sites, p) shrunken scale factors (variances, > 0)
    constant_mask: np.ndarray  # (p,) features carried through untouched

    def __post_init__(self):
        if np.any(self.delta_sq_star[:, ~self.constant_mask] <= 0):
            raise ValueError("delta_sq_star must be positive on non-constant features")


def _design(records: Sequence[CovariateRecord], vocabulary: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    vocab = list(vocabulary)
    unknown = sorted({r.site for r in records} - set(vocab))
    if unknown:
        raise ValueError(f"unknown site(s) {unknown}; model knows {vocab}")
    batch = np.zeros((len(records), len(vocab)))
    for i, r in enumerate(records):
        batch[i, vocab.index(r.site)] = 1.0
    covariates = np.array([[r.age, float(r.sex)] for r in records])
    return batch, covariates


def _flatten(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(images.shape[0], -1)


def combat_fit(images: np.ndarray, records: Sequence[CovariateRecord]) -> CombatModel:
    """Estimate site effects from (n, H, W) images and covariate records.

    Requires at least two sites with at least two samples each.  Features
    whose pooled residual variance is zero (e.g. constant background
    pixels) are flagged and later passed through unchanged.
    """
    Y = _flatten(images)
    n, p = Y.shape
    if n != len(records):
        raise ValueError(f"{n} images but {len(records)} records")
    vocabulary = tuple(sorted({r.site for r in records}))
    if len(vocabulary) < 2:
        raise ValueError(f"ComBat needs >= 2 sites, got {list(vocabulary)}")
    counts = {s: sum(r.site == s for r in records) for s in vocabulary}
    thin = [s for s, c in counts.items() if c < 2]
    if thin:
        raise ValueError(f"sites with fewer than 2 samples: {thin}")

    batch, covariates = _design(records, vocabulary)
    X = np.hstack([batch, covariates])
    coeffs, *_ = np.linalg.lstsq(X, Y, rcond=None)
    gamma_hat_raw = coeffs[: len(vocabulary)]  # per-site intercepts
    beta_cov = coeffs[len(vocabulary) :]

    weights = np.array([counts[s] for s in vocabulary], dtype=np.float64) / n
    alpha = weights @ gamma_hat_raw
    stand_mean = alpha[None, :] + covariates @ beta_cov
    resid = Y - batch @ gamma_hat_raw - covariates @ beta_cov
    var_pooled = (resid**2).mean(axis=0)
    constant_mask = Y.var(axis=0) <= 1e-12
    degenerate = ~constant_mask & (var_pooled <= 1e-12)
    if np.any(degenerate):
        raise ValueError(
            f"{int(degenerate.sum())} non-constant feature(s) have zero residual variance; "
            "ComBat cannot standardize them"
        )

    scale = np.sqrt(np.where(constant_mask, 1.0, var_pooled))
    Z = (Y - stand_mean) / scale

    gamma_star = np.zeros((len(vocabulary), p))
    delta_sq_star = np.ones((len(vocabulary), p))
    if np.any(~constant_mask):
        for i, site in enumerate(vocabulary):
            rows = batch[:, i] == 1.0
            Zi = Z[rows][:, ~constant_mask]
            g_star, d_star = _eb_shrink(Zi)
            gamma_star[i, ~constant_mask] = g_star
            delta_sq_star[i, ~constant_mask] = d_star
    return CombatModel(
        site_vocabulary=vocabulary,
        beta_cov=beta_cov,
        alpha=alpha,
        var_pooled=var_pooled,
        gamma_star=gamma_star,
        delta_sq_star=delta_sq_star,
        constant_mask=constant_mask,
    )


def _eb_shrink(Z_site: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical-Bayes shrinkage of one site's per-feature location/scale.

    Normal prior on locations and inverse-gamma on scales, moment-matched
    across features, solved by the standard fixed-point iteration.  When a
    prior is degenerate (zero spread across features) the corresponding
    estimate is left unshrunk, which is the analytic limit.
    """
    n_i = Z_site.shape[0]
    gamma_hat = Z_site.mean(axis=0)
    delta_sq_hat = Z_site.var(axis=0, ddof=1)
    if gamma_hat.size < 2:  # a cross-feature prior needs >= 2 features
        return gamma_hat, np.maximum(delta_sq_hat, 1e-12)

    gamma_bar = gamma_hat.mean()
    tau_sq = gamma_hat.var(ddof=1)
    m = delta_sq_hat.mean()
    s_sq = delta_sq_hat.var(ddof=1)
    if s_sq > 0:
        a_prior = (2.0 * s_sq + m**2) / s_sq
        b_prior = (m * s_sq + m**3) / s_sq

    g_star, d_star = gamma_hat.copy(), delta_sq_hat.copy()
    for _ in range(_MAX_ITER):
        if tau_sq > 0:
            g_new = (n_i * tau_sq * gamma_hat + d_star * gamma_bar) / (n_i * tau_sq + d_star)
        else:
            g_new = np.full_like(gamma_hat, gamma_bar)
        if s_sq > 0:
            sum_sq = ((Z_site - g_new[None, :]) ** 2).sum(axis=0)
            d_new = (0.5 * sum_sq + b_prior) / (n_i / 2.0 + a_prior - 1.0)
        else:
            d_new = delta_sq_hat
        change = max(
            np.max(np.abs(g_new - g_star) / np.maximum(np.abs(g_star), 1e-12)),
            np.max(np.abs(d_new - d_star) / np.maximum(np.abs(d_star), 1e-12)),
        )
        g_star, d_star = g_new, d_new
        if change < _CONV_TOL:
            break
    return g_star, np.maximum(d_star, 1e-12)


def combat_apply(
    model: CombatModel, images: np.ndarray, records: Sequence[CovariateRecord]
) -> np.ndarray:
    """Remove fitted site effects from images; output clamped to [0, 1].

    Per feature: standardize, subtract the site's shrunken location,
    divide by its shrunken scale, then restore the covariate regression
    prediction and grand mean.  Constant features pass through unchanged.
    """
    Y = _flatten(images)
    if Y.shape[0] != len(records):
        raise ValueError(f"{Y.shape[0]} images but {len(records)} records")
    if Y.shape[1] != model.alpha.size:
        raise ValueError(f"feature count {Y.shape[1]} != fitted {model.alpha.size}")
    batch, covariates = _design(records, model.site_vocabulary)

    keep = model.constant_mask
    scale = np.sqrt(np.where(keep, 1.0, model.var_pooled))
    stand_mean = model.alpha[None, :] + covariates @ model.beta_cov
    Z = (Y - stand_mean) / scale
    gamma = batch @ model.gamma_star
    delta = np.sqrt(batch @ model.delta_sq_star)
    adjusted = stand_mean + scale * (Z - gamma) / delta
    adjusted[:, keep] = Y[:, keep]
    return np.clip(adjusted, 0.0, 1.0).astype(np.float32).reshape(np.asarray(images).shape)


def combat_harmonize_dataset(
    dataset: Dataset,
    output_dir: str | Path | None = None,
    source_root: str | Path | None = None,
) -> tuple[Dataset, list[dict]]:
    """Fit-and-apply ComBat to a dataset, with the same outputs as the
    diffusion harmonizer: a harmonized dataset plus one manifest row per
    sample (``site_target`` is ``"pooled"`` since ComBat removes site
    effects rather than mapping onto one site)."""
    ordered = dataset.sorted_by_id()
    manifest: list[dict] = []
    if len(ordered) == 0:
        harmonized = ordered
    else:
        model = combat_fit(ordered.images, ordered.records)
        adjusted = combat_apply(model, ordered.images, ordered.records)
        harmonized = Dataset(adjusted, ordered.records, ordered.ids)
    for sample_id, record in zip(ordered.ids, ordered.records):
        if source_root is not None:
            source_path = str(Path(source_root) / "images" / f"{sample_id}.png")
        else:
            source_path = f"images/{sample_id}.png"
        manifest.append(
            {
                "id": sample_id,
                "source_path": source_path,
                "age": repr(float(record.age)),
                "sex": record.sex,
                "site_original": record.site,
                "site_target": "pooled",
                "status": "ok",
            }
        )
    if output_dir is not None:
        out_dir = Path(output_dir)
        save_dataset(harmonized, out_dir)
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            writer.writerows(manifest)
    return harmonized, manifest
