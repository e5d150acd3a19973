"""Deterministic DDIM-style decoding and encoding.

With eta = 0 the reverse process consumes no randomness: decoding maps a
noise-level state x_T and a latent pair to an image, and encoding runs
the same update in reverse to recover the x_T that decodes back to the
input.  Together they give reconstruction and attribute-swapped
regeneration from a single stochastic code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .schedule import NoiseSchedule


class NonFiniteStateError(RuntimeError):
    """The sampler state left the finite range at some step."""


@dataclass(frozen=True)
class SamplerConfig:
    """Step-count / step-schedule choice for the deterministic sampler.

    ``step_schedule`` optionally pins the exact sub-sequence of timesteps
    (strictly increasing, ending at T); otherwise a uniform stride with
    ``num_steps`` entries is used.  ``eta`` is fixed at 0.
    """

    num_steps: int = 20
    step_schedule: tuple[int, ...] | None = None
    eta: float = 0.0

    def __post_init__(self):
        if self.eta != 0.0:
            raise ValueError("only the deterministic sampler (eta = 0) is supported")
        if self.step_schedule is not None:
            steps = tuple(int(s) for s in self.step_schedule)
            if not steps or any(b <= a for a, b in zip(steps, steps[1:])):
                raise ValueError(f"step schedule must be strictly increasing, got {steps}")
            if steps[0] < 1:
                raise ValueError("step schedule entries must be >= 1")
            object.__setattr__(self, "step_schedule", steps)
            object.__setattr__(self, "num_steps", len(steps))
        elif self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")

    def resolve_steps(self, T: int) -> tuple[int, ...]:
        """The ascending timesteps the sampler will visit, ending at T."""
        if self.step_schedule is not None:
            if self.step_schedule[-1] != T:
                raise ValueError(f"step schedule must end at T={T}, got {self.step_schedule}")
            return self.step_schedule
        if self.num_steps > T:
            raise ValueError(f"num_steps={self.num_steps} exceeds T={T}")
        steps = tuple(int(round(i * T / self.num_steps)) for i in range(1, self.num_steps + 1))
        assert steps[-1] == T and all(b > a for a, b in zip(steps, steps[1:]))
        return steps


def _check_finite(x: torch.Tensor, t: int, op: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteStateError(f"non-finite state in {op} at step t={t}")


class _inference_mode:
    """Put an nn.Module into eval mode for the duration, then restore it."""

    def __init__(self, model):
        self.model = model
        self.was_training = getattr(model, "training", False)

    def __enter__(self):
        if self.was_training:
            self.model.eval()
        return self

    def __exit__(self, *exc):
        if self.was_training:
            self.model.train()
        return False


def ddim_decode(
    x_T: torch.Tensor,
    z_kappa: torch.Tensor,
    z_upsilon: torch.Tensor,
    model,
    schedule: NoiseSchedule,
    config: SamplerConfig = SamplerConfig(),
) -> torch.Tensor:
    """Deterministically decode a stochastic code to an image in [0, 1].

    Walks the step schedule downward; at each step the predicted noise
    gives the implied clean image x0_hat = (x_t - sqrt(1-ab_t) eps_hat) /
    sqrt(ab_t), which is re-noised to the previous scheduled level
    (alpha_bar(0) = 1, so the final step lands on x0_hat itself).
    """
    steps = config.resolve_steps(schedule.T)
    levels = (0,) + steps
    x = x_T
    _check_finite(x, steps[-1], "ddim_decode input")
    with _inference_mode(model), torch.no_grad():
        for i in range(len(steps), 0, -1):
            t, t_prev = levels[i], levels[i - 1]
            eps_hat = model.predict_noise(x, t, z_kappa, z_upsilon)
            ab_t = schedule.alpha_bar(t)
            ab_prev = schedule.alpha_bar(t_prev)
            x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
            x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
            _check_finite(x, t, "ddim_decode")
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def ddim_encode(
    x0: torch.Tensor,
    z_kappa: torch.Tensor,
    z_upsilon: torch.Tensor,
    model,
    schedule: NoiseSchedule,
    config: SamplerConfig = SamplerConfig(),
) -> torch.Tensor:
    """Deterministically map an image in [0, 1] to its stochastic code x_T.

    Runs the decode update in reverse order, evaluating the noise
    predictor at the level being left (clamped to t >= 1, since the
    predictor is undefined at t = 0).  Inverse of :func:`ddim_decode` up
    to discretization error.
    """
    steps = config.resolve_steps(schedule.T)
    levels = (0,) + steps
    x = x0 * 2.0 - 1.0
    _check_finite(x, levels[0], "ddim_encode input")
    with _inference_mode(model), torch.no_grad():
        for i in range(1, len(levels)):
            t_prev, t = levels[i - 1], levels[i]
            eps_hat = model.predict_noise(x, max(t_prev, 1), z_kappa, z_upsilon)
            ab_prev = schedule.alpha_bar(t_prev)
            ab_t = schedule.alpha_bar(t)
            x0_hat = (x - math.sqrt(1.0 - ab_prev) * eps_hat) / math.sqrt(ab_prev)
            x = math.sqrt(ab_t) * x0_hat + math.sqrt(1.0 - ab_t) * eps_hat
            _check_finite(x, t, "ddim_encode")
    return x
