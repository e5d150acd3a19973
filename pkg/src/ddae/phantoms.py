"""Synthetic multi-site phantom cohorts with known age, sex, and site effects.

Each phantom is an elliptical "brain" with a bright cortical rim and an
interior dark "ventricle" whose area grows linearly with normalized age.
Sex controls a lateral ventricle offset plus a left/right intensity tilt;
per-subject jitter of the shape parameters provides unknown variance.
Site effects (gain, contrast gamma, bias field, noise) are applied on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import CovariateRecord, Dataset, save_dataset

__all__ = [
    "SiteEffectSpec",
    "CohortSpec",
    "default_site_specs",
    "interpolated_site_specs",
    "render_phantom",
    "apply_site_effect",
    "generate_cohort",
]

MIN_RESOLUTION = 16


@dataclass(frozen=True)
class SiteEffectSpec:
    """Intensity transform of one acquisition site.

    ``bias_field_amplitude`` is the peak-to-peak span of a fixed horizontal
    multiplicative ramp centered at 1.
    """

    gain: float = 1.0
    bias_field_amplitude: float = 0.0
    contrast_gamma: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.gain <= 0.0:
            raise ValueError(f"gain must be > 0, got {self.gain}")
        if self.contrast_gamma <= 0.0:
            raise ValueError(f"contrast_gamma must be > 0, got {self.contrast_gamma}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def default_site_specs() -> dict[str, SiteEffectSpec]:
    """Three sites with strong, visually obvious effects."""
    return {
        "siteA": SiteEffectSpec(gain=0.7, bias_field_amplitude=0.0, contrast_gamma=1.2, noise_sigma=0.02),
        "siteB": SiteEffectSpec(gain=1.0, bias_field_amplitude=0.15, contrast_gamma=1.0, noise_sigma=0.02),
        "siteC": SiteEffectSpec(gain=1.3, bias_field_amplitude=0.3, contrast_gamma=0.8, noise_sigma=0.02),
    }


def interpolated_site_specs(n: int) -> dict[str, SiteEffectSpec]:
    """``n`` sites whose effects sweep the default three-site range.

    Gain runs 0.7 to 1.3, bias-field amplitude 0 to 0.3 and contrast gamma
    1.2 down to 0.8, all linearly; ``n = 3`` reproduces
    :func:`default_site_specs` exactly.
    """
    if n < 2:
        raise ValueError(f"need at least 2 sites, got {n}")

    def ramp(a: float, b: float, i: int) -> float:
        return round(a + (b - a) * i / (n - 1), 12)

    def name(i: int) -> str:
        return f"site{chr(ord('A') + i)}" if n <= 26 else f"site{i + 1:03d}"

    return {
        name(i): SiteEffectSpec(
            gain=ramp(0.7, 1.3, i),
            bias_field_amplitude=ramp(0.0, 0.3, i),
            contrast_gamma=ramp(1.2, 0.8, i),
            noise_sigma=0.02,
        )
        for i in range(n)
    }


@dataclass(frozen=True)
class CohortSpec:
    """Recipe for one synthetic multi-site cohort."""

    n_per_site: int = 200
    sites: Mapping[str, SiteEffectSpec] = field(default_factory=default_site_specs)
    age_range: tuple[float, float] = (20.0, 80.0)
    sex_ratio: float = 0.5
    resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_per_site < 1:
            raise ValueError(f"n_per_site must be >= 1, got {self.n_per_site}")
        if len(self.sites) < 2:
            raise ValueError("harmonization cohorts need at least 2 sites")
        if not self.age_range[0] < self.age_range[1]:
            raise ValueError(f"invalid age_range {self.age_range}")
        if not 0.0 <= self.sex_ratio <= 1.0:
            raise ValueError(f"sex_ratio must be in [0, 1], got {self.sex_ratio}")
        if self.resolution < MIN_RESOLUTION:
            raise ValueError(f"resolution must be >= {MIN_RESOLUTION}, got {self.resolution}")


def _ellipse_radius(x, y, cx, cy, a, b, theta):
    dx, dy = x - cx, y - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    return np.sqrt(u * u + v * v)


def _phantom_geometry(age: float, sex: int, rng: np.random.Generator, age_range) -> dict:
    lo, hi = age_range
    age_norm = (float(age) - lo) / (hi - lo)
    jit = lambda s, c: float(np.clip(rng.normal(0.0, s), -c, c))
    # ventricle area grows linearly with age_norm: factor 4 from min to max age
    vent_scale = 0.11 * np.sqrt(1.0 + 3.0 * age_norm) * (1.0 + jit(0.03, 0.06))
    return {
        "cx": jit(0.02, 0.05),
        "cy": jit(0.02, 0.05),
        "a": 0.72 * (1.0 + jit(0.02, 0.05)),
        "b": 0.58 * (1.0 + jit(0.02, 0.05)),
        "theta": jit(0.06, 0.15),
        "tissue": 0.55 + jit(0.015, 0.04),
        "rim": 0.78 + jit(0.015, 0.04),
        "tilt": 0.06 if sex == 1 else -0.06,
        "vent_dx": (0.12 if sex == 1 else -0.12) + jit(0.015, 0.03),
        "vent_dy": jit(0.015, 0.03),
        "vent_a": vent_scale * 0.85,
        "vent_b": vent_scale * 1.25,
        "vent_level": 0.12,
    }


def _render_from_geometry(g: dict, resolution: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    coords = np.linspace(-1.0, 1.0, resolution)
    x, y = np.meshgrid(coords, coords)
    px = 2.0 / resolution  # one pixel in normalized units

    r = _ellipse_radius(x, y, g["cx"], g["cy"], g["a"], g["b"], g["theta"])
    brain = r <= 1.0
    edge = np.clip((1.0 - r) / px, 0.0, 1.0)  # anti-alias ramp, interior only

    tissue = g["tissue"] * (1.0 - 0.15 * r * r)
    rim_w = np.clip((r - 0.80) / 0.08, 0.0, 1.0)
    value = tissue * (1.0 - rim_w) + g["rim"] * rim_w
    value = value * (1.0 + g["tilt"] * (x - g["cx"]) / g["a"])

    rv = _ellipse_radius(x, y, g["cx"] + g["vent_dx"], g["cy"] + g["vent_dy"],
                         g["vent_a"], g["vent_b"], g["theta"])
    vent = rv <= 1.0
    vent_w = np.clip((1.0 - rv) / (px / max(g["vent_a"], 1e-6)), 0.0, 1.0)
    value = value * (1.0 - vent_w) + g["vent_level"] * vent_w

    img = np.where(brain, np.clip(value, 0.0, 1.0) * edge, 0.0)
    masks = {"brain": brain, "ventricle": vent & brain}
    return img.astype(np.float32), masks


def render_phantom(
    age: float,
    sex: int,
    rng: np.random.Generator | int,
    resolution: int = 32,
    age_range: tuple[float, float] = (20.0, 80.0),
    return_masks: bool = False,
):
    """Render one phantom in [0, 1]; background is exactly 0.

    Deterministic given the rng state. With ``return_masks`` also returns
    boolean ``brain`` and ``ventricle`` masks (the generator's own oracle).
    """
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if not age_range[0] <= age <= age_range[1]:
        raise ValueError(f"age {age} outside spec range {age_range}")
    rng = np.random.default_rng(rng)
    g = _phantom_geometry(age, sex, rng, age_range)
    img, masks = _render_from_geometry(g, resolution)
    return (img, masks) if return_masks else img


def apply_site_effect(
    image: np.ndarray, spec: SiteEffectSpec, rng: np.random.Generator | int
) -> np.ndarray:
    """``clamp(image^gamma * gain * bias_field + N(0, sigma^2), 0, 1)``."""
    rng = np.random.default_rng(rng)
    img = np.asarray(image, dtype=np.float64)
    ramp = np.linspace(-0.5, 0.5, img.shape[-1])
    bias = 1.0 + spec.bias_field_amplitude * ramp[np.newaxis, :]
    out = np.power(img, spec.contrast_gamma) * spec.gain * bias
    if spec.noise_sigma > 0.0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _subject_rng(seed: int, site_index: int, subject_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, site_index, subject_index]))


def generate_cohort(spec: CohortSpec, out_dir: str | Path | None = None) -> Dataset:
    """Generate the cohort; optionally also write it to ``out_dir``.

    Fully seeded: ages, sexes, phantom jitter, and site noise all derive from
    per-subject rng streams keyed by (seed, site index, subject index).
    """
    images, records, ids = [], [], []
    for site_index, site in enumerate(sorted(spec.sites)):
        effect = spec.sites[site]
        for subject_index in range(spec.n_per_site):
            rng = _subject_rng(spec.seed, site_index, subject_index)
            age = float(rng.uniform(*spec.age_range))
            sex = int(rng.random() < spec.sex_ratio)
            img = render_phantom(age, sex, rng, spec.resolution, spec.age_range)
            img = apply_site_effect(img, effect, rng)
            rec_id = f"{site}_{subject_index:04d}"
            if rec_id in ids:
                raise ValueError(f"output path collision for id {rec_id!r}")
            images.append(img)
            records.append(CovariateRecord(age=age, sex=sex, site=site))
            ids.append(rec_id)
    dataset = Dataset(np.stack(images), records, ids)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    return dataset
