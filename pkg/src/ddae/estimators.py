"""Scikit-learn style wrappers around the training / harmonization pipelines.

These follow the usual estimator conventions -- ``__init__`` only stores
hyperparameters, ``fit`` learns state into trailing-underscore attributes
and returns ``self``, ``transform`` maps a :class:`~ddae.data.Dataset` to
its harmonized counterpart -- so they compose with ``get_params`` /
``set_params`` tooling.  ``X`` is always a Dataset (images + covariate
records), not a bare matrix.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .combat import combat_apply, combat_fit
from .data import Dataset
from .evalsuite import ProbeConfig, age_r2, sex_accuracy, site_accuracy, train_probe
from .harmonize import HarmonizationJob, failure_count, harmonize_dataset
from .model import ModelConfig, load_checkpoint, save_checkpoint, to_model_range
from .sampling import SamplerConfig
from .training import TrainConfig, train
from .validation import check_dataset


class DdaeHarmonizer(BaseEstimator, TransformerMixin):
    """Diffusion-autoencoder harmonizer: fit on a multi-site cohort, then
    transform any dataset onto a single target site.

    ``target_site=None`` means "the largest site of the dataset being
    transformed".  All randomness derives from ``seed``.
    """

    def __init__(
        self,
        epochs: int = 30,
        batch_size: int = 32,
        learning_rate: float = 1e-4,
        schedule_T: int = 200,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        aux_mode: str = "both",
        aux_weight: float = 0.1,
        grl_scale: float = 1.0,
        num_steps: int = 20,
        target_site: str | None = None,
        seed: int = 0,
        model_config: ModelConfig | None = None,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.schedule_T = schedule_T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.aux_mode = aux_mode
        self.aux_weight = aux_weight
        self.grl_scale = grl_scale
        self.num_steps = num_steps
        self.target_site = target_site
        self.seed = seed
        self.model_config = model_config
        self.model_ = None
        self.history_ = None

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            schedule_T=self.schedule_T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            aux_mode=self.aux_mode,
            aux_weight=self.aux_weight,
            grl_scale=self.grl_scale,
            seed=self.seed,
            model=self.model_config if self.model_config is not None else ModelConfig(),
        )

    def _check_fitted(self):
        if self.model_ is None:
            raise NotFittedError("call fit() or from_checkpoint() before using this harmonizer")

    def fit(self, X: Dataset, y=None):
        X = check_dataset(X)
        self.model_, self.history_ = train(self._train_config(), X)
        return self

    def transform(self, X: Dataset, y=None) -> Dataset:
        """Harmonize every image of X to the target site.

        Raises if any image fails to transfer; use
        :func:`~ddae.harmonize.harmonize_dataset` directly to get partial
        output plus a per-image manifest instead.
        """
        self._check_fitted()
        X = check_dataset(X, self.model_.config.resolution)
        job = HarmonizationJob(
            dataset=X,
            model=self.model_,
            target_site=self.target_site,
            sampler=SamplerConfig(num_steps=self.num_steps),
        )
        harmonized, manifest = harmonize_dataset(job)
        failures = failure_count(manifest)
        if failures:
            bad = next(r for r in manifest if r["status"] != "ok")
            raise RuntimeError(f"{failures} image(s) failed to harmonize; first: {bad['id']}: {bad['status']}")
        return harmonized

    def encode(self, X: Dataset) -> np.ndarray:
        """Per-sample latent codes, the known and unknown halves concatenated."""
        self._check_fitted()
        X = check_dataset(X, self.model_.config.resolution)
        with torch.no_grad():
            z_kappa = self.model_.encode_known(self.model_.conditions(X.records))
            x0 = to_model_range(torch.from_numpy(np.ascontiguousarray(X.images)))
            z_upsilon = self.model_.encode_unknown(x0)
        return torch.cat([z_kappa, z_upsilon], dim=1).numpy()

    def save(self, path: str | Path) -> None:
        self._check_fitted()
        params = self.get_params()
        if params.get("model_config") is not None:
            params["model_config"] = asdict(params["model_config"])
        save_checkpoint(self.model_, path, train_config=params, seed=self.seed)

    @classmethod
    def from_checkpoint(cls, path: str | Path, **params) -> "DdaeHarmonizer":
        """Build an already-fitted harmonizer from a saved checkpoint."""
        est = cls(**params)
        est.model_ = load_checkpoint(path)
        est.history_ = []
        return est


class CombatHarmonizer(BaseEstimator, TransformerMixin):
    """Pixelwise location/scale batch-effect removal with empirical-Bayes
    shrinkage, fit per site and applied toward the pooled average site."""

    def __init__(self):
        self.model_ = None

    def fit(self, X: Dataset, y=None):
        X = check_dataset(X)
        self.model_ = combat_fit(X.images, X.records)
        return self

    def transform(self, X: Dataset, y=None) -> Dataset:
        if self.model_ is None:
            raise NotFittedError("call fit() before transform()")
        X = check_dataset(X)
        adjusted = combat_apply(self.model_, X.images, X.records)
        return Dataset(adjusted, X.records, list(X.ids))


class ImageProbe(BaseEstimator):
    """Small convolutional predictor of one covariate from images; its
    accuracy (or R^2) measures how much of that covariate a dataset leaks."""

    def __init__(
        self,
        task: str = "site",
        epochs: int = 300,
        patience: int = 30,
        learning_rate: float = 1e-4,
        batch_size: int = 64,
        val_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.task = task
        self.epochs = epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.probe_ = None

    def fit(self, X: Dataset, y=None):
        X = check_dataset(X)
        config = ProbeConfig(
            task=self.task,
            epochs=self.epochs,
            patience=self.patience,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            val_fraction=self.val_fraction,
            seed=self.seed,
        )
        self.probe_ = train_probe(X, config)
        return self

    def _check_fitted(self):
        if self.probe_ is None:
            raise NotFittedError("call fit() before using this probe")

    def predict(self, X: Dataset) -> np.ndarray:
        self._check_fitted()
        X = check_dataset(X)
        return np.asarray(self.probe_.predict(X.images))

    def score(self, X: Dataset, y=None) -> float:
        """Task metric on X: classification accuracy for site/sex, R^2 for age."""
        self._check_fitted()
        X = check_dataset(X)
        metric = {"site": site_accuracy, "sex": sex_accuracy, "age": age_r2}[self.task]
        return metric(self.probe_, X)

    def features(self, X: Dataset) -> np.ndarray:
        """Penultimate-layer activations, e.g. as a distribution-distance feature space."""
        self._check_fitted()
        X = check_dataset(X)
        return self.probe_.extract_features(X.images)
