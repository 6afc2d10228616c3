"""Training objectives.

Positive learning descends the mean squared reconstruction error on normal
data. Negative learning hinders reconstruction of labeled abnormal data:
the naive form descends the negated (optionally weighted) squared error,
which ascends the error itself; the scaled form descends
mean(exp(-(residual)^2)), bounding the objective to (0, 1] so it cannot
overwhelm the positive loss. The adversarial pair regularizes the latent
code toward the Gaussian prior.

All reductions are means over pixels and batch, so loss magnitudes are
invariant to image size and batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

PROB_EPS = 1e-7  # clamp for log terms
FD_STEP = 1e-3  # central finite-difference step for gradient checks


@dataclass
class LossValue:
    """scalar is the batch mean of per_sample; both stay differentiable."""

    scalar: torch.Tensor
    per_sample: torch.Tensor


@dataclass
class GradientCheckReport:
    loss_op: str
    max_relative_error: float
    tolerance: float
    passed: bool


def _paired(reconstruction, target) -> tuple[torch.Tensor, torch.Tensor]:
    recon = torch.as_tensor(reconstruction)
    tgt = torch.as_tensor(target, dtype=recon.dtype)
    if recon.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(tgt.shape)}")
    for name, t in (("reconstruction", recon), ("target", tgt)):
        with torch.no_grad():
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")
    return recon, tgt


def _per_sample_mse(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((recon - target) ** 2).flatten(1).mean(dim=1)


def positive_loss(reconstruction, target) -> LossValue:
    """Mean squared error per sample; the trainer descends the batch mean."""
    recon, tgt = _paired(reconstruction, target)
    per_sample = _per_sample_mse(recon, tgt)
    return LossValue(scalar=per_sample.mean(), per_sample=per_sample)


def negative_loss_naive(reconstruction, target, weight: float = 1.0) -> LossValue:
    """Negated (weighted) squared error: descending it ascends the error."""
    if weight <= 0:
        raise ValueError(f"weight must be > 0, got {weight}")
    recon, tgt = _paired(reconstruction, target)
    per_sample = -weight * _per_sample_mse(recon, tgt)
    return LossValue(scalar=per_sample.mean(), per_sample=per_sample)


def negative_loss_scaled(reconstruction, target) -> LossValue:
    """Bounded negative loss: per-element exp(-(residual)^2), batch mean.

    Equal inputs give exactly 1; contributions shrink monotonically toward 0
    as the residual grows, so per_sample lies in (0, 1].
    """
    recon, tgt = _paired(reconstruction, target)
    per_sample = torch.exp(-((recon - tgt) ** 2)).flatten(1).mean(dim=1)
    return LossValue(scalar=per_sample.mean(), per_sample=per_sample)


def adversarial_losses(real_probs, fake_probs) -> tuple[LossValue, LossValue]:
    """(discriminator loss, generator loss) from per-sample probabilities.

    real_probs come from prior samples, fake_probs from encoder codes.
    Probabilities are clamped away from {0, 1} before the log terms.
    """
    real = torch.as_tensor(real_probs)
    fake = torch.as_tensor(fake_probs, dtype=real.dtype)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    real_c = real.clamp(PROB_EPS, 1.0 - PROB_EPS)
    fake_c = fake.clamp(PROB_EPS, 1.0 - PROB_EPS)
    disc_per_sample = -(torch.log(real_c) + torch.log(1.0 - fake_c))
    gen_per_sample = -torch.log(fake_c)
    return (
        LossValue(scalar=disc_per_sample.mean(), per_sample=disc_per_sample),
        LossValue(scalar=gen_per_sample.mean(), per_sample=gen_per_sample),
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = FD_STEP
) -> torch.Tensor:
    """Central differences of a scalar function, element by element."""
    x = x.contiguous()
    grad = torch.zeros_like(x)
    flat = x.view(-1)  # aliasing view: perturbations must hit x itself
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn(x).item()
        flat[i] = orig - step
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = numeric.abs().clamp_min(1e-8)
    return ((analytic - numeric).abs() / denom).max().item()


def _check_single_input(fn, x: torch.Tensor, step: float) -> float:
    xg = x.clone().requires_grad_(True)
    fn(xg).backward()
    analytic = xg.grad.detach()
    numeric = finite_difference_gradient(fn, x.clone(), step)
    return max_relative_error(analytic, numeric)


def gradient_check(
    loss_op: str, tolerance: float = 1e-4, seed: int = 0, step: float = FD_STEP
) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences on
    random 8-element double-precision inputs."""
    rng = torch.Generator().manual_seed(int(seed))

    def rand(shape, lo, hi):
        return lo + (hi - lo) * torch.rand(shape, generator=rng, dtype=torch.float64)

    shape = (2, 1, 2, 2)  # 8 elements, two samples so the batch mean matters
    errors: list[float] = []
    if loss_op == "positive_loss":
        target = rand(shape, -1.0, 1.0)
        recon = rand(shape, -1.0, 1.0)
        errors.append(
            _check_single_input(lambda x: positive_loss(x, target).scalar, recon, step)
        )
    elif loss_op == "negative_loss_naive":
        target = rand(shape, -1.0, 1.0)
        recon = rand(shape, -1.0, 1.0)
        errors.append(
            _check_single_input(
                lambda x: negative_loss_naive(x, target, weight=2.0).scalar, recon, step
            )
        )
    elif loss_op == "negative_loss_scaled":
        target = rand(shape, -1.0, 1.0)
        recon = rand(shape, -1.0, 1.0)
        errors.append(
            _check_single_input(
                lambda x: negative_loss_scaled(x, target).scalar, recon, step
            )
        )
    elif loss_op == "adversarial_losses":
        real = rand((8,), 0.05, 0.95)
        fake = rand((8,), 0.05, 0.95)
        errors.append(
            _check_single_input(
                lambda x: adversarial_losses(x, fake)[0].scalar, real, step
            )
        )
        errors.append(
            _check_single_input(
                lambda x: adversarial_losses(real, x)[0].scalar, fake, step
            )
        )
        errors.append(
            _check_single_input(
                lambda x: adversarial_losses(real, x)[1].scalar, fake, step
            )
        )
    else:
        raise ValueError(f"unknown loss_op {loss_op!r}")

    worst = max(errors)
    return GradientCheckReport(
        loss_op=loss_op,
        max_relative_error=worst,
        tolerance=tolerance,
        passed=worst <= tolerance,
    )


def clip_gradients(parameters, max_norm: float) -> None:
    """Global-norm gradient clipping; disarms the unbounded naive loss."""
    torch.nn.utils.clip_grad_norm_(parameters, max_norm)
