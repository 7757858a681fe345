"""Loss terms, each a pure function of network outputs.

Every reduction is a mean over all elements, so the L1 weight keeps the same
meaning at any resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import torch
import torch.nn.functional as F

GAN_TERMS = ("L_GAN_X", "L_GAN_Y")
EX_TERMS = ("L_ex_X", "L_ex_Y")
L1_TERMS = ("L_S", "L_auto_X", "L_auto_Y", "L_recon_X", "L_recon_Y")
GENERATOR_TERMS = GAN_TERMS + EX_TERMS + L1_TERMS
REPORT_TERMS = ("L_S", "L_recon_X", "L_recon_Y", "L_auto_X", "L_auto_Y", "L_GAN_X", "L_GAN_Y",
                "L_ex_X", "L_ex_Y", "L_Dz_X", "L_Dz_Y", "L_D_X", "L_D_Y")


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite or exceeded the divergence bound."""

    def __init__(self, term: str, value: float):
        super().__init__(f"training diverged: {term} = {value}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    w_gan: float = 1.0
    w_ex: float = 0.1
    w_l1: float = 100.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    total: float = 0.0

    def to_dict(self) -> dict:
        out = {k: float(self.terms.get(k, 0.0)) for k in REPORT_TERMS}
        out["total"] = float(self.total)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _t(value) -> torch.Tensor:
    return value if isinstance(value, torch.Tensor) else torch.as_tensor(value, dtype=torch.float64)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _nonempty(t, what):
    if t.numel() == 0:
        raise ValueError(f"{what}: empty batch")


def shared_loss(s_x, s_y) -> torch.Tensor:
    """Mean absolute difference between the two domains' shared codes."""
    s_x, s_y = _t(s_x), _t(s_y)
    _same_shape(s_x, s_y, "shared_loss")
    return (s_x - s_y).abs().mean()


def latent_recon_loss(original_shared, original_noise, re_encoded) -> torch.Tensor:
    """L1 between the re-encoded (shared, exclusive) and the decoder's inputs.

    Every latent element counts once, shared and exclusive alike.
    """
    shared, exclusive = re_encoded
    original_shared, original_noise = _t(original_shared), _t(original_noise)
    shared, exclusive = _t(shared), _t(exclusive)
    _same_shape(shared, original_shared, "latent_recon_loss (shared)")
    _same_shape(exclusive, original_noise, "latent_recon_loss (exclusive)")
    mass = (shared - original_shared).abs().sum() + (exclusive - original_noise).abs().sum()
    return mass / (shared.numel() + exclusive.numel())


def gradient_norms(critic: Callable, real, fake, condition, eps=None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """L2 norm of the critic gradient at ``eps * real + (1 - eps) * fake``.

    One ``eps ~ U[0, 1]`` per batch element. The graph is kept so the penalty
    can be backpropagated into the critic.
    """
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    eps = eps.view(-1, *([1] * (real.dim() - 1)))
    mixed = (eps * real + (1 - eps) * fake).detach().requires_grad_(True)
    out = critic(mixed, condition)
    (grad,) = torch.autograd.grad(out.sum(), mixed, create_graph=True)
    return grad.flatten(1).norm(2, dim=1)


def wgan_gp_disc_loss(d_real, d_fake, grad_norms, lambda_gp: float = 10.0) -> torch.Tensor:
    d_real, d_fake, grad_norms = _t(d_real), _t(d_fake), _t(grad_norms)
    for t, what in ((d_real, "d_real"), (d_fake, "d_fake"), (grad_norms, "grad_norms")):
        _nonempty(t, f"wgan_gp_disc_loss {what}")
    return d_fake.mean() - d_real.mean() + lambda_gp * ((grad_norms - 1) ** 2).mean()


def wgan_gen_loss(d_fake) -> torch.Tensor:
    d_fake = _t(d_fake)
    _nonempty(d_fake, "wgan_gen_loss")
    return -d_fake.mean()


def cross_autoencoder_loss(x, x_reconstructed) -> torch.Tensor:
    x, x_reconstructed = _t(x), _t(x_reconstructed)
    _same_shape(x, x_reconstructed, "cross_autoencoder_loss")
    return (x - x_reconstructed).abs().mean()


def noise_match_losses(dz_on_E, dz_on_z):
    """Original GAN losses for the exclusive-code discriminator.

    Returns ``(disc, gen)``; ``gen`` is the non-saturating encoder loss.
    """
    dz_on_E, dz_on_z = _t(dz_on_E), _t(dz_on_z)
    for t, what in ((dz_on_E, "dz_on_E"), (dz_on_z, "dz_on_z")):
        _nonempty(t, f"noise_match_losses {what}")
        if bool(((t <= 0) | (t >= 1)).any()):
            raise ValueError(f"noise_match_losses: {what} must lie strictly inside (0, 1)")
    disc = -torch.log(dz_on_z).mean() - torch.log1p(-dz_on_E).mean()
    gen = -torch.log(dz_on_E).mean()
    return disc, gen


def noise_match_losses_from_logits(logits_E, logits_z):
    """Same values as :func:`noise_match_losses` on ``sigmoid(logits)``, without saturation."""
    disc = (F.binary_cross_entropy_with_logits(logits_z, torch.ones_like(logits_z))
            + F.binary_cross_entropy_with_logits(logits_E, torch.zeros_like(logits_E)))
    return disc, noise_gen_loss_from_logits(logits_E)


def noise_gen_loss_from_logits(logits_E):
    return F.binary_cross_entropy_with_logits(logits_E, torch.ones_like(logits_E))


def check_finite(terms: dict, bound: float = math.inf):
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v) or abs(v) > bound:
            raise TrainingDivergence(name, v)


def total_loss(terms: dict, weights: LossWeights = LossWeights(),
               active: Optional[Iterable[str]] = None):
    """Weighted sum of the generator-side terms.

    ``w_gan * (GAN_X + GAN_Y) + w_ex * (ex_X + ex_Y)
    + w_l1 * (S + auto_X + auto_Y + recon_X + recon_Y)``.
    Terms missing from ``active`` (default: all) are left out of the sum.
    """
    active = set(GENERATOR_TERMS if active is None else active)
    check_finite({k: v for k, v in terms.items() if k in GENERATOR_TERMS})
    groups = ((weights.w_gan, GAN_TERMS), (weights.w_ex, EX_TERMS), (weights.w_l1, L1_TERMS))
    total = 0.0
    for w, names in groups:
        for name in names:
            if name in active and name in terms:
                total = total + w * terms[name]
    return total
