import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdis.losses import (LossWeights, TrainingDivergence, cross_autoencoder_loss,
                             gradient_norms, latent_recon_loss, noise_match_losses,
                             noise_match_losses_from_logits, shared_loss, total_loss,
                             wgan_gen_loss, wgan_gp_disc_loss)

pytestmark = pytest.mark.core

# ---------------------------------------------------------------- scalar-loop oracles


def loop_mean_abs(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    acc = 0.0
    for i in range(len(a)):
        acc += abs(a[i] - b[i])
    return acc / len(a)


def loop_mean(v):
    v = np.asarray(v, float).ravel()
    acc = 0.0
    for x in v:
        acc += x
    return acc / len(v)


def loop_latent_recon(s0, z0, s1, z1):
    mass, count = 0.0, 0
    for a, b in zip(np.ravel(s0), np.ravel(s1)):
        mass += abs(a - b)
        count += 1
    for a, b in zip(np.ravel(z0), np.ravel(z1)):
        mass += abs(a - b)
        count += 1
    return mass / count


def loop_wgan_gp(d_real, d_fake, norms, lam):
    pen = 0.0
    for g in norms:
        pen += (g - 1.0) ** 2
    return loop_mean(d_fake) - loop_mean(d_real) + lam * pen / len(norms)


def loop_noise(dz_E, dz_z):
    disc = 0.0
    for p in dz_z:
        disc -= math.log(p) / len(dz_z)
    for p in dz_E:
        disc -= math.log(1.0 - p) / len(dz_E)
    gen = 0.0
    for p in dz_E:
        gen -= math.log(p) / len(dz_E)
    return disc, gen


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64)


# ---------------------------------------------------------------- shared_loss

def test_shared_loss_examples(rng):
    s = t64(rng.normal(size=(2, 4, 3, 3)))
    assert shared_loss(s, s).item() == 0.0
    assert shared_loss(s, s + 1).item() == pytest.approx(1.0, abs=1e-12)


def test_shared_loss_matches_loop(rng):
    a, b = rng.normal(size=(3, 5, 2, 2)), rng.normal(size=(3, 5, 2, 2))
    assert shared_loss(t64(a), t64(b)).item() == pytest.approx(loop_mean_abs(a, b), abs=1e-6)


def test_shared_loss_shape_mismatch():
    with pytest.raises(ValueError):
        shared_loss(torch.zeros(2, 3), torch.zeros(3, 2))


# ---------------------------------------------------------------- latent_recon_loss

def test_latent_recon_exact_is_zero(rng):
    s, z = t64(rng.normal(size=(2, 4, 2, 2))), t64(rng.normal(size=(2, 8)))
    assert latent_recon_loss(s, z, (s.clone(), z.clone())).item() == 0.0


def test_latent_recon_exclusive_share(rng):
    s, z = t64(rng.normal(size=(1, 4, 2, 2))), t64(rng.normal(size=(1, 8)))
    value = latent_recon_loss(s, z, (s.clone(), z + 1)).item()
    shared_size = 16
    assert value == pytest.approx(8 / (8 + shared_size), abs=1e-12)


def test_latent_recon_matches_loop(rng):
    s0, z0 = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(3, 8))
    s1, z1 = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(3, 8))
    got = latent_recon_loss(t64(s0), t64(z0), (t64(s1), t64(z1))).item()
    assert got == pytest.approx(loop_latent_recon(s0, z0, s1, z1), abs=1e-6)


def test_latent_recon_shape_mismatch():
    with pytest.raises(ValueError):
        latent_recon_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 8), (torch.zeros(1, 4, 2, 2), torch.zeros(1, 7)))


# ---------------------------------------------------------------- WGAN-GP

def test_wgan_gp_zero_case():
    d = torch.tensor([0.3, -1.2, 2.0])
    assert wgan_gp_disc_loss(d, d, torch.ones(3), 10.0).item() == 0.0


def test_wgan_gp_constant_discriminator_returns_lambda():
    c = torch.full((4,), 0.7)
    for lam in (10.0, 3.5):
        assert wgan_gp_disc_loss(c, c, torch.zeros(4), lam).item() == lam


def test_wgan_gp_constant_critic_end_to_end():
    # a critic that ignores its input has zero gradient everywhere
    real, fake, cond = torch.rand(5, 3, 4, 4), torch.rand(5, 3, 4, 4), torch.rand(5, 3, 4, 4)
    critic = lambda cand, c: (cand * 0.0).flatten(1).sum(1) + 2.0  # noqa: E731
    norms = gradient_norms(critic, real, fake, cond)
    loss = wgan_gp_disc_loss(critic(real, cond), critic(fake, cond), norms, 10.0)
    assert loss.item() == 10.0


def test_wgan_gp_matches_loop(rng):
    d_real, d_fake, norms = rng.normal(size=7), rng.normal(size=7), rng.uniform(0, 3, size=7)
    got = wgan_gp_disc_loss(t64(d_real), t64(d_fake), t64(norms), 10.0).item()
    assert got == pytest.approx(loop_wgan_gp(d_real, d_fake, norms, 10.0), abs=1e-6)


def test_gradient_norms_linear_critic():
    # D(c) = <w, c> has gradient w everywhere, so the norm is ||w||
    w = torch.randn(3, 4, 4, dtype=torch.float64)
    critic = lambda cand, c: (cand * w).flatten(1).sum(1)  # noqa: E731
    real, fake = torch.randn(6, 3, 4, 4, dtype=torch.float64), torch.randn(6, 3, 4, 4, dtype=torch.float64)
    norms = gradient_norms(critic, real, fake, None)
    assert torch.allclose(norms, w.norm().expand(6))


def test_wgan_losses_reject_empty():
    with pytest.raises(ValueError):
        wgan_gp_disc_loss(torch.zeros(0), torch.zeros(0), torch.zeros(0))
    with pytest.raises(ValueError):
        wgan_gen_loss(torch.zeros(0))


def test_wgan_gen_examples(rng):
    assert wgan_gen_loss(torch.zeros(5)).item() == 0.0
    assert wgan_gen_loss(torch.tensor([1.0, 3.0])).item() == -2.0
    d = rng.normal(size=9)
    assert wgan_gen_loss(t64(d)).item() == pytest.approx(-loop_mean(d), abs=1e-6)


# ---------------------------------------------------------------- cross autoencoder

def test_cross_autoencoder_examples(rng):
    x = t64(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    assert cross_autoencoder_loss(x, x.clone()).item() == 0.0
    black, white = -torch.ones(2, 3, 4, 4), torch.ones(2, 3, 4, 4)
    assert cross_autoencoder_loss(black, white).item() == 2.0


def test_cross_autoencoder_matches_loop(rng):
    a, b = rng.uniform(-1, 1, size=(2, 3, 4, 4)), rng.uniform(-1, 1, size=(2, 3, 4, 4))
    assert cross_autoencoder_loss(t64(a), t64(b)).item() == pytest.approx(loop_mean_abs(a, b), abs=1e-6)


def test_cross_autoencoder_shape_mismatch():
    with pytest.raises(ValueError):
        cross_autoencoder_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


# ---------------------------------------------------------------- noise matching

def test_noise_match_half():
    half = torch.full((4,), 0.5, dtype=torch.float64)
    disc, gen = noise_match_losses(half, half)
    assert disc.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert gen.item() == pytest.approx(math.log(2), abs=1e-12)


def test_noise_match_perfect_discriminator_limit():
    eps = 1e-9
    disc, _ = noise_match_losses(torch.full((3,), eps, dtype=torch.float64),
                                 torch.full((3,), 1 - eps, dtype=torch.float64))
    assert disc.item() < 1e-8


def test_noise_match_matches_loop(rng):
    a, b = rng.uniform(0.01, 0.99, size=6), rng.uniform(0.01, 0.99, size=6)
    disc, gen = noise_match_losses(t64(a), t64(b))
    ref_disc, ref_gen = loop_noise(a, b)
    assert disc.item() == pytest.approx(ref_disc, abs=1e-6)
    assert gen.item() == pytest.approx(ref_gen, abs=1e-6)


def test_noise_match_logits_variant_agrees(rng):
    la, lb = rng.normal(size=10), rng.normal(size=10)
    d1, g1 = noise_match_losses_from_logits(t64(la), t64(lb))
    d2, g2 = noise_match_losses(torch.sigmoid(t64(la)), torch.sigmoid(t64(lb)))
    assert d1.item() == pytest.approx(d2.item(), abs=1e-10)
    assert g1.item() == pytest.approx(g2.item(), abs=1e-10)


@pytest.mark.parametrize("bad", [0.0, 1.0, 1.5, -0.1])
def test_noise_match_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        noise_match_losses(torch.tensor([0.5, bad]), torch.tensor([0.5]))


# ---------------------------------------------------------------- total loss

def _terms(value):
    names = ["L_GAN_X", "L_GAN_Y", "L_ex_X", "L_ex_Y", "L_S", "L_auto_X", "L_auto_Y",
             "L_recon_X", "L_recon_Y"]
    return {n: value(n) for n in names}


def test_total_zero():
    assert total_loss(_terms(lambda n: 0.0)) == 0.0


def test_total_default_weights_all_ones():
    assert total_loss(_terms(lambda n: 1.0), LossWeights(1.0, 0.1, 100.0)) == pytest.approx(502.2, abs=1e-9)


def test_total_matches_hand_computation(rng):
    terms = _terms(lambda n: float(rng.normal()))
    w = LossWeights(0.7, 0.3, 42.0)
    hand = (0.7 * (terms["L_GAN_X"] + terms["L_GAN_Y"]) + 0.3 * (terms["L_ex_X"] + terms["L_ex_Y"])
            + 42.0 * (terms["L_S"] + terms["L_auto_X"] + terms["L_auto_Y"] + terms["L_recon_X"]
                      + terms["L_recon_Y"]))
    assert total_loss(terms, w) == pytest.approx(hand, rel=1e-6)


def test_total_linear_in_l1_weight(rng):
    terms = _terms(lambda n: float(rng.uniform(0, 2)))
    l1 = sum(terms[n] for n in ("L_S", "L_auto_X", "L_auto_Y", "L_recon_X", "L_recon_Y"))
    a = total_loss(terms, LossWeights(1, 0.1, 50))
    b = total_loss(terms, LossWeights(1, 0.1, 100))
    assert b - a == pytest.approx(50 * l1, rel=1e-12)


def test_total_respects_active_set():
    terms = _terms(lambda n: 1.0)
    active = set(terms) - {"L_S"}
    assert total_loss(terms, LossWeights(1, 0.1, 100), active) == pytest.approx(402.2)


def test_total_nonfinite_names_term():
    terms = _terms(lambda n: 1.0)
    terms["L_auto_Y"] = float("nan")
    with pytest.raises(TrainingDivergence, match="L_auto_Y") as info:
        total_loss(terms)
    assert info.value.term == "L_auto_Y"


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(w_l1=-1)


# ---------------------------------------------------------------- gradients vs finite differences

def _fd_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def _check_grad(f, x):
    x = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(f(x), x)
    numeric = _fd_grad(f, x.detach().clone())
    assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_loss_gradients_match_finite_differences(rng):
    other = t64(rng.normal(size=8))
    # keep elements away from the |.| kink so central differences are valid
    probe = other + t64(rng.choice([-1, 1], size=8) * rng.uniform(0.1, 1.0, size=8))
    _check_grad(lambda v: shared_loss(v, other), probe)
    _check_grad(lambda v: cross_autoencoder_loss(v, other), probe)
    _check_grad(lambda v: latent_recon_loss(other[:4], other[4:], (v[:4], v[4:])), probe)
    _check_grad(lambda v: wgan_gen_loss(v), probe)
    _check_grad(lambda v: wgan_gp_disc_loss(v, other, other.abs(), 10.0), probe)
    _check_grad(lambda v: wgan_gp_disc_loss(other, other, v, 10.0), probe)
    probs = t64(rng.uniform(0.1, 0.9, size=8))
    _check_grad(lambda v: noise_match_losses(v, probs)[0], probs.flip(0))
    _check_grad(lambda v: noise_match_losses(v, probs)[1], probs.flip(0))


# ---------------------------------------------------------------- properties

arrays8 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=8, max_size=8)


@settings(max_examples=50, deadline=None)
@given(arrays8, arrays8, st.permutations(range(8)))
def test_losses_permutation_invariant_and_nonnegative(a, b, perm):
    a, b = t64(a), t64(b)
    p = list(perm)
    assert shared_loss(a, b).item() >= 0
    assert shared_loss(a[p], b[p]).item() == pytest.approx(shared_loss(a, b).item(), abs=1e-12)
    assert cross_autoencoder_loss(a[p], b[p]).item() == pytest.approx(cross_autoencoder_loss(a, b).item(), abs=1e-12)
    assert wgan_gen_loss(a[p]).item() == pytest.approx(wgan_gen_loss(a).item(), abs=1e-12)
    norms = b.abs()
    assert wgan_gp_disc_loss(a[p], b[p], norms[p]).item() == pytest.approx(
        wgan_gp_disc_loss(a, b, norms).item(), abs=1e-9)
    probs = torch.sigmoid(a).clamp(1e-6, 1 - 1e-6)
    disc, gen = noise_match_losses(probs, probs[p])
    assert disc.item() >= 0 and gen.item() >= 0
