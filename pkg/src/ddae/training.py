"""Training objective and loop for the diffusion autoencoder.

The main term is the simplified denoising objective: corrupt each image
with a fresh uniformly-drawn timestep and Gaussian noise, then penalize
the squared error of the predicted noise.  Auxiliary heads add the
disentanglement pressure: covariate supervision on ``z_kappa`` and/or
adversarial covariate scrubbing of ``z_upsilon`` via gradient reversal.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import CovariateRecord, Dataset
from .model import (
    CovariateNorm,
    DdaeModel,
    FingerprintMismatchError,
    ModelConfig,
    reverse_gradient,
    save_checkpoint,
)
from .schedule import NoiseSchedule, make_linear_schedule

AUX_MODES = ("none", "supervise_kappa", "adversarial_upsilon", "both")


class DivergenceError(RuntimeError):
    """A loss term became non-finite during optimization."""


def _to_float(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    schedule_T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    aux_mode: str = "both"
    aux_weight: float = 0.1
    grl_scale: float = 1.0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_path: str | None = None
    history_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        if self.aux_mode not in AUX_MODES:
            raise ValueError(f"aux_mode must be one of {AUX_MODES}, got {self.aux_mode!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """One optimization step's loss terms; ``total`` is what gets minimized."""

    diffusion_loss: torch.Tensor
    aux_age_loss: torch.Tensor
    aux_sex_loss: torch.Tensor
    aux_site_loss: torch.Tensor
    aux_weight: float
    total: torch.Tensor

    @classmethod
    def compute(cls, diffusion, age, sex, site, aux_weight: float) -> "LossBreakdown":
        terms = {
            "diffusion_loss": diffusion,
            "aux_age_loss": age,
            "aux_sex_loss": sex,
            "aux_site_loss": site,
        }
        for name, value in terms.items():
            if not np.isfinite(_to_float(value)):
                raise DivergenceError(f"non-finite {name}: {_to_float(value)}")
        total = diffusion + aux_weight * (age + sex + site)
        return cls(diffusion, age, sex, site, aux_weight, total)

    def as_floats(self) -> dict[str, float]:
        return {
            "diffusion_loss": _to_float(self.diffusion_loss),
            "aux_age_loss": _to_float(self.aux_age_loss),
            "aux_sex_loss": _to_float(self.aux_sex_loss),
            "aux_site_loss": _to_float(self.aux_site_loss),
            "total": _to_float(self.total),
        }


def _aux_targets(records: Sequence[CovariateRecord], model: DdaeModel, device, dtype):
    norm = model.covariate_norm
    vocab = list(model.site_vocabulary)
    age = torch.tensor(
        [(r.age - norm.age_mean) / norm.age_std for r in records], dtype=dtype, device=device
    )
    sex = torch.tensor([float(r.sex) for r in records], dtype=dtype, device=device)
    site = torch.tensor([vocab.index(r.site) for r in records], dtype=torch.long, device=device)
    return age, sex, site


def _head_losses(heads, z, age_t, sex_t, site_t):
    age_loss = F.mse_loss(heads["age"](z).squeeze(-1), age_t)
    sex_loss = F.binary_cross_entropy_with_logits(heads["sex"](z).squeeze(-1), sex_t)
    site_loss = F.cross_entropy(heads["site"](z), site_t)
    return age_loss, sex_loss, site_loss


def aux_losses(
    z_kappa: torch.Tensor,
    z_upsilon: torch.Tensor,
    records: Sequence[CovariateRecord],
    model: DdaeModel,
    aux_mode: str,
    grl_scale: float = 1.0,
):
    """Covariate-prediction losses on the latents, per the chosen mode.

    ``supervise_kappa`` reads age/sex/site out of ``z_kappa`` with the kappa
    heads (squared error, binary cross-entropy, cross-entropy).
    ``adversarial_upsilon`` runs the upsilon heads on ``z_upsilon`` behind a
    gradient reversal, so the heads learn to predict covariates while the
    encoder learns to remove them.  ``both`` sums the two; ``none`` returns
    zeros.
    """
    if aux_mode not in AUX_MODES:
        raise ValueError(f"aux_mode must be one of {AUX_MODES}, got {aux_mode!r}")
    zero = torch.zeros((), dtype=z_kappa.dtype, device=z_kappa.device)
    if aux_mode == "none":
        return zero, zero.clone(), zero.clone()

    age_t, sex_t, site_t = _aux_targets(records, model, z_kappa.device, z_kappa.dtype)
    age = sex = site = zero
    if aux_mode in ("supervise_kappa", "both"):
        a, s, c = _head_losses(model.kappa_heads, z_kappa, age_t, sex_t, site_t)
        age, sex, site = age + a, sex + s, site + c
    if aux_mode in ("adversarial_upsilon", "both"):
        z_rev = reverse_gradient(z_upsilon, grl_scale)
        a, s, c = _head_losses(model.upsilon_heads, z_rev, age_t, sex_t, site_t)
        age, sex, site = age + a, sex + s, site + c
    return age, sex, site


def ddae_loss(
    images: torch.Tensor,
    records: Sequence[CovariateRecord],
    model: DdaeModel,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    *,
    aux_mode: str = "both",
    aux_weight: float = 0.1,
    grl_scale: float = 1.0,
) -> LossBreakdown:
    """One batch's loss: denoising MSE plus weighted auxiliary terms.

    Each sample gets its own uniformly-drawn timestep and fresh Gaussian
    noise from ``generator``.  Images are expected in [0, 1] and mapped to
    the model range [-1, 1] before corruption.
    """
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError(f"expected non-empty (n, H, W) image batch, got {tuple(images.shape)}")
    if len(records) != images.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {len(records)} records")
    n = images.shape[0]

    x0 = (images if images.is_floating_point() else images.to(torch.float32)) * 2.0 - 1.0
    t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    alpha_bar = torch.tensor(schedule.alpha_bars, dtype=x0.dtype)[t - 1]
    x_t = alpha_bar.sqrt()[:, None, None] * x0 + (1.0 - alpha_bar).sqrt()[:, None, None] * eps

    c = model.conditions(records)
    z_kappa = model.encode_known(c)
    z_upsilon = model.encode_unknown(x0)
    eps_hat = model.predict_noise(x_t, t, z_kappa, z_upsilon)
    diffusion = F.mse_loss(eps_hat, eps)

    age, sex, site = aux_losses(z_kappa, z_upsilon, records, model, aux_mode, grl_scale)
    return LossBreakdown.compute(diffusion, age, sex, site, aux_weight)


def _batch_indices(perm: torch.Tensor, batch_size: int) -> list[torch.Tensor]:
    chunks = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    # batch-norm layers in the aux heads cannot train on a single sample,
    # so a leftover singleton is folded into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = torch.cat([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


HISTORY_COLUMNS = ("epoch", "diffusion_loss", "aux_age_loss", "aux_sex_loss", "aux_site_loss", "total")


def _write_history(history: list[dict], path: str | Path | None) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history)


def train(
    config: TrainConfig, dataset: Dataset, model: DdaeModel | None = None
) -> tuple[DdaeModel, list[dict]]:
    """Fit a model on a dataset; returns the trained model and epoch history.

    Runs single-threaded with all randomness derived from ``config.seed``,
    so repeated runs produce identical parameters and losses.  If the loss
    goes non-finite, the run aborts with a :class:`DivergenceError` that
    carries the history accumulated so far (also flushed to
    ``history_path`` when set).

    Passing a ``model`` continues optimization from its current weights
    (e.g. to resume from a checkpoint); its noise-schedule fingerprint and
    site vocabulary must agree with ``config`` and ``dataset``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.resolution != config.model.resolution:
        raise ValueError(
            f"dataset resolution {dataset.resolution} != model resolution {config.model.resolution}"
        )

    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    schedule = make_linear_schedule(config.schedule_T, config.beta_start, config.beta_end)
    vocabulary = sorted(dataset.site_counts())

    if model is None:
        ages = np.array([r.age for r in dataset.records], dtype=np.float64)
        age_std = float(ages.std())
        norm = CovariateNorm(float(ages.mean()), age_std if age_std > 0 else 1.0)
        model = DdaeModel(config.model, vocabulary, norm, schedule.fingerprint())
    else:
        if model.schedule_fingerprint is not None and model.schedule_fingerprint != schedule.fingerprint():
            raise FingerprintMismatchError(
                f"model was trained with schedule {model.schedule_fingerprint}, "
                f"config asks for {schedule.fingerprint()}"
            )
        missing = sorted(set(vocabulary) - set(model.site_vocabulary))
        if missing:
            raise ValueError(f"dataset has site(s) {missing} unknown to the model")
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    images = torch.from_numpy(np.ascontiguousarray(dataset.images))

    history: list[dict] = []
    try:
        for epoch in range(1, config.epochs + 1):
            perm = torch.randperm(len(dataset), generator=generator)
            sums = dict.fromkeys(HISTORY_COLUMNS[1:], 0.0)
            for idx in _batch_indices(perm, config.batch_size):
                batch_records = [dataset.records[i] for i in idx.tolist()]
                breakdown = ddae_loss(
                    images[idx],
                    batch_records,
                    model,
                    schedule,
                    generator,
                    aux_mode=config.aux_mode,
                    aux_weight=config.aux_weight,
                    grl_scale=config.grl_scale,
                )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                for key, value in breakdown.as_floats().items():
                    sums[key] += value * len(idx)
            row = {k: v / len(dataset) for k, v in sums.items()}
            history.append({"epoch": epoch, **row})
    except DivergenceError as err:
        _write_history(history, config.history_path)
        err.history = history
        raise

    _write_history(history, config.history_path)
    model.eval()
    if config.checkpoint_path is not None:
        save_checkpoint(model, config.checkpoint_path, train_config=asdict(config), seed=config.seed)
    return model, history
