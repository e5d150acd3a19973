"""Networks for the disentangled diffusion autoencoder.

Three learned pieces plus their plumbing:

* a covariate encoder mapping (age, sex, site) to the known-semantics
  latent ``z_kappa``,
* an image encoder mapping a clean image to the unknown-semantics latent
  ``z_upsilon``,
* a conditional U-Net predicting the noise content of a corrupted image,
  modulated in every residual block by ``[z_kappa || z_upsilon]`` and a
  sinusoidal timestep embedding.

Auxiliary predictor heads (age / sex / site) ride along for the
disentanglement losses and for post-hoc probing, and a gradient-reversal
helper supports adversarial scrubbing of covariates from ``z_upsilon``.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CovariateRecord

SITE_ENCODINGS = ("scalar", "one_hot")


class FingerprintMismatchError(RuntimeError):
    """A checkpoint was trained against a different noise schedule."""


@dataclass(frozen=True)
class CovariateNorm:
    """Age normalization constants frozen from the training cohort."""

    age_mean: float
    age_std: float

    def __post_init__(self):
        if not math.isfinite(self.age_mean) or not math.isfinite(self.age_std):
            raise ValueError("age normalization constants must be finite")
        if self.age_std <= 0:
            raise ValueError(f"age_std must be positive, got {self.age_std}")


def encode_covariates(
    record: CovariateRecord,
    norm: CovariateNorm,
    site_vocabulary: Sequence[str],
    site_encoding: str = "scalar",
) -> np.ndarray:
    """Map a covariate record to the condition vector fed to the known encoder.

    Age is z-scored with the training-cohort constants, sex passes through as
    {0, 1}, and the site becomes either its vocabulary index scaled to [0, 1]
    (``scalar``, vector length 3) or a one-hot block (``one_hot``, vector
    length ``2 + len(site_vocabulary)``).
    """
    if not site_vocabulary:
        raise ValueError("site vocabulary is empty")
    if site_encoding not in SITE_ENCODINGS:
        raise ValueError(f"site_encoding must be one of {SITE_ENCODINGS}, got {site_encoding!r}")
    try:
        index = list(site_vocabulary).index(record.site)
    except ValueError:
        raise ValueError(
            f"unknown site {record.site!r}; vocabulary is {list(site_vocabulary)}"
        ) from None

    age = (record.age - norm.age_mean) / norm.age_std
    if site_encoding == "scalar":
        n = len(site_vocabulary)
        site = index / (n - 1) if n > 1 else 0.0
        values = [age, float(record.sex), site]
    else:
        one_hot = [0.0] * len(site_vocabulary)
        one_hot[index] = 1.0
        values = [age, float(record.sex), *one_hot]
    return np.asarray(values, dtype=np.float32)


def condition_width(site_vocabulary: Sequence[str], site_encoding: str) -> int:
    return 3 if site_encoding == "scalar" else 2 + len(site_vocabulary)


def to_model_range(images01):
    """Map images from the storage range [0, 1] to the model range [-1, 1]."""
    return images01 * 2.0 - 1.0


def from_model_range(images):
    """Map images from the model range [-1, 1] back to [0, 1], clamped."""
    half = (images + 1.0) / 2.0
    return half.clamp(0.0, 1.0) if torch.is_tensor(half) else np.clip(half, 0.0, 1.0)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / (half - 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def reverse_gradient(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; multiplies the gradient by ``-scale``."""
    return _GradientReversal.apply(x, scale)


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    """Residual conv block, optionally modulated by a conditioning vector.

    When ``cond_dim`` is given, the conditioning vector drives a learned
    per-channel scale and shift of the normalized mid-activation.  The
    projection is zero-initialized so modulation starts as the identity.
    """

    def __init__(self, in_channels: int, out_channels: int, cond_dim: int | None = None):
        super().__init__()
        self.norm1 = _group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = _group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )
        if cond_dim is not None:
            self.cond_proj = nn.Linear(cond_dim, 2 * out_channels)
            nn.init.zeros_(self.cond_proj.weight)
            nn.init.zeros_(self.cond_proj.bias)
        else:
            self.cond_proj = None

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.cond_proj is not None:
            scale, shift = self.cond_proj(cond).chunk(2, dim=-1)
            h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the CPU desk scale."""

    resolution: int = 32
    latent_dim: int = 64
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 1
    known_hidden: int = 128
    time_embed_dim: int = 128
    site_encoding: str = "scalar"
    head_hidden: tuple[int, ...] = (128, 32)
    head_dropout: float = 0.5

    def __post_init__(self):
        if self.resolution < 2 ** (len(self.channel_mults) - 1) * 4:
            raise ValueError(
                f"resolution {self.resolution} too small for {len(self.channel_mults)} levels"
            )
        if self.resolution % 2 ** (len(self.channel_mults) - 1) != 0:
            raise ValueError("resolution must be divisible by 2^(levels-1)")
        if self.latent_dim < 1 or self.base_channels < 1 or self.blocks_per_level < 1:
            raise ValueError("latent_dim, base_channels and blocks_per_level must be >= 1")
        if self.site_encoding not in SITE_ENCODINGS:
            raise ValueError(f"site_encoding must be one of {SITE_ENCODINGS}")


class CovariateEncoder(nn.Module):
    """Fully-connected stack mapping a condition vector to ``z_kappa``."""

    def __init__(self, in_dim: int, hidden: int, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, latent_dim))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return self.net(c)


class UnknownEncoder(nn.Module):
    """Down path + middle block of the U-Net, pooled and projected to ``z_upsilon``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        base = config.base_channels
        self.stem = nn.Conv2d(1, base, 3, padding=1)
        blocks: list[nn.Module] = []
        ch = base
        for level, mult in enumerate(config.channel_mults):
            out_ch = base * mult
            for _ in range(config.blocks_per_level):
                blocks.append(ResBlock(ch, out_ch))
                ch = out_ch
            if level < len(config.channel_mults) - 1:
                blocks.append(Downsample(ch))
        blocks.append(ResBlock(ch, ch))
        blocks.append(ResBlock(ch, ch))
        self.blocks = nn.ModuleList(blocks)
        self.out_norm = _group_norm(ch)
        self.proj = nn.Linear(ch, config.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        h = F.silu(self.out_norm(h)).mean(dim=(2, 3))
        return self.proj(h)


class NoisePredictor(nn.Module):
    """Conditional U-Net over single-channel images.

    Every residual block is modulated by the concatenation of the two
    latents and the timestep embedding; the final conv is zero-initialized
    so the untrained network predicts zero noise.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        base = config.base_channels
        cond_dim = 2 * config.latent_dim + config.time_embed_dim
        self.time_embed_dim = config.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, config.time_embed_dim),
            nn.SiLU(),
            nn.Linear(config.time_embed_dim, config.time_embed_dim),
        )

        self.stem = nn.Conv2d(1, base, 3, padding=1)
        down: list[nn.Module] = []
        skip_channels = [base]
        ch = base
        for level, mult in enumerate(config.channel_mults):
            out_ch = base * mult
            for _ in range(config.blocks_per_level):
                down.append(ResBlock(ch, out_ch, cond_dim))
                ch = out_ch
                skip_channels.append(ch)
            if level < len(config.channel_mults) - 1:
                down.append(Downsample(ch))
                skip_channels.append(ch)
        self.down = nn.ModuleList(down)

        self.middle = nn.ModuleList([ResBlock(ch, ch, cond_dim), ResBlock(ch, ch, cond_dim)])

        up: list[nn.Module] = []
        for level in reversed(range(len(config.channel_mults))):
            out_ch = base * config.channel_mults[level]
            for _ in range(config.blocks_per_level + 1):
                up.append(ResBlock(ch + skip_channels.pop(), out_ch, cond_dim))
                ch = out_ch
            if level > 0:
                up.append(Upsample(ch))
        assert not skip_channels
        self.up = nn.ModuleList(up)

        self.out_norm = _group_norm(ch)
        self.out_conv = nn.Conv2d(ch, 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, latents: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_embed_dim))
        cond = torch.cat([latents, temb], dim=-1)

        h = self.stem(x_t)
        skips = [h]
        for block in self.down:
            h = block(h, cond) if isinstance(block, ResBlock) else block(h)
            skips.append(h)
        for block in self.middle:
            h = block(h, cond)
        for block in self.up:
            if isinstance(block, ResBlock):
                h = block(torch.cat([h, skips.pop()], dim=1), cond)
            else:
                h = block(h)
        assert not skips
        return self.out_conv(F.silu(self.out_norm(h)))


class PredictorHead(nn.Module):
    """MLP head for covariate prediction from a latent.

    Hidden layers are separated by ReLU, batch normalization and dropout;
    the final projection maps to the task's output width (1 for age and
    sex logits, vocabulary size for site logits).
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = (128, 32), dropout: float = 0.5):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.ReLU(), nn.BatchNorm1d(width), nn.Dropout(dropout)]
            prev = width
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def _make_heads(config: ModelConfig, vocab_size: int) -> nn.ModuleDict:
    d, hidden, p = config.latent_dim, config.head_hidden, config.head_dropout
    return nn.ModuleDict(
        {
            "age": PredictorHead(d, 1, hidden, p),
            "sex": PredictorHead(d, 1, hidden, p),
            "site": PredictorHead(d, vocab_size, hidden, p),
        }
    )


class DdaeModel(nn.Module):
    """Bundle of the three networks plus auxiliary heads and metadata.

    The kappa heads and upsilon heads are separate instances of the same
    architecture: one set reads covariates out of ``z_kappa``, the other
    chases covariates in ``z_upsilon`` behind a gradient reversal.
    """

    def __init__(
        self,
        config: ModelConfig,
        site_vocabulary: Sequence[str],
        covariate_norm: CovariateNorm,
        schedule_fingerprint: Mapping | None = None,
    ):
        super().__init__()
        if not site_vocabulary:
            raise ValueError("site vocabulary must be non-empty")
        if len(set(site_vocabulary)) != len(site_vocabulary):
            raise ValueError("site vocabulary contains duplicates")
        self.config = config
        self.site_vocabulary = tuple(site_vocabulary)
        self.covariate_norm = covariate_norm
        self.schedule_fingerprint = dict(schedule_fingerprint) if schedule_fingerprint else None

        in_dim = condition_width(self.site_vocabulary, config.site_encoding)
        self.known_encoder = CovariateEncoder(in_dim, config.known_hidden, config.latent_dim)
        self.unknown_encoder = UnknownEncoder(config)
        self.noise_predictor = NoisePredictor(config)
        self.kappa_heads = _make_heads(config, len(self.site_vocabulary))
        self.upsilon_heads = _make_heads(config, len(self.site_vocabulary))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def conditions(self, records: Sequence[CovariateRecord]) -> torch.Tensor:
        """Stack condition vectors for a batch of records."""
        rows = [
            encode_covariates(r, self.covariate_norm, self.site_vocabulary, self.config.site_encoding)
            for r in records
        ]
        return torch.from_numpy(np.stack(rows))

    def encode_known(self, c: torch.Tensor) -> torch.Tensor:
        if c.ndim == 1:
            return self.known_encoder(c[None])[0]
        return self.known_encoder(c)

    def encode_unknown(self, x0: torch.Tensor) -> torch.Tensor:
        """Latent for a clean image (or batch) given in the model range [-1, 1]."""
        squeeze = x0.ndim == 2
        x = self._as_batched(x0)
        z = self.unknown_encoder(x)
        return z[0] if squeeze else z

    def predict_noise(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        z_kappa: torch.Tensor,
        z_upsilon: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the noise in ``x_t`` at timestep ``t`` under both latents."""
        x = self._as_batched(x_t)
        n = x.shape[0]
        if isinstance(t, int):
            t = torch.full((n,), t, dtype=torch.long)
        if t.ndim != 1 or t.shape[0] != n:
            raise ValueError(f"t must be a scalar or length-{n} vector, got shape {tuple(t.shape)}")
        if bool((t < 1).any()):
            raise ValueError("timesteps must be >= 1")
        if self.schedule_fingerprint is not None and bool((t > self.schedule_fingerprint["T"]).any()):
            raise ValueError(f"timestep exceeds schedule T={self.schedule_fingerprint['T']}")
        zk = z_kappa[None] if z_kappa.ndim == 1 else z_kappa
        zu = z_upsilon[None] if z_upsilon.ndim == 1 else z_upsilon
        if zk.shape != (n, self.latent_dim) or zu.shape != (n, self.latent_dim):
            raise ValueError(
                f"latents must have shape ({n}, {self.latent_dim}); "
                f"got {tuple(zk.shape)} and {tuple(zu.shape)}"
            )
        eps = self.noise_predictor(x, t.to(x.device), torch.cat([zk, zu], dim=-1))
        return eps.reshape(x_t.shape)

    def _as_batched(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 2:
            image = image[None, None]
        elif image.ndim == 3:
            image = image[:, None]
        elif image.ndim != 4:
            raise ValueError(f"expected image of 2-4 dims, got shape {tuple(image.shape)}")
        r = self.config.resolution
        if image.shape[-2:] != (r, r):
            raise ValueError(f"expected {r}x{r} images, got {tuple(image.shape[-2:])}")
        return image


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


CHECKPOINT_VERSION = 1


def save_checkpoint(
    model: DdaeModel,
    path: str | Path,
    train_config: Mapping | None = None,
    seed: int | None = None,
) -> None:
    """Persist the model and its metadata atomically (temp file + rename)."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "site_vocabulary": list(model.site_vocabulary),
        "covariate_norm": asdict(model.covariate_norm),
        "schedule_fingerprint": model.schedule_fingerprint,
        "train_config": dict(train_config) if train_config is not None else None,
        "seed": seed,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path, expected_schedule: Mapping | None = None) -> DdaeModel:
    """Load a checkpoint into eval mode, validating metadata.

    ``expected_schedule`` is a schedule fingerprint dict; a mismatch with
    the stored fingerprint raises :class:`FingerprintMismatchError`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    vocab = payload["site_vocabulary"]
    if not vocab:
        raise ValueError("checkpoint has an empty site vocabulary")
    stored = payload["schedule_fingerprint"]
    if expected_schedule is not None and dict(expected_schedule) != dict(stored or {}):
        raise FingerprintMismatchError(
            f"checkpoint schedule {stored} does not match expected {dict(expected_schedule)}"
        )
    config_dict = dict(payload["model_config"])
    config_dict["channel_mults"] = tuple(config_dict["channel_mults"])
    config_dict["head_hidden"] = tuple(config_dict["head_hidden"])
    model = DdaeModel(
        ModelConfig(**config_dict),
        vocab,
        CovariateNorm(**payload["covariate_norm"]),
        stored,
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def checkpoint_metadata(path: str | Path) -> dict:
    """Read checkpoint metadata without instantiating the networks."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    return {k: payload[k] for k in payload if k != "state_dict"}
