"""Helpers shared by several test modules."""

from __future__ import annotations

import numpy as np

from jmvae import tensor as T
from jmvae.models import build_model, objective_jmkl, elbo_cvae, elbo_jm, elbo_vae
from jmvae.networks import Architecture

TINY_ARCH = Architecture(enc_hidden=(8,), shared=2, latent=1, dec_hidden=(8, 8, 8))
SMALL_ARCH = Architecture(enc_hidden=(6,), shared=4, latent=2, dec_hidden=(6,))


def randomize(handle, seed: int, scale: float = 0.5):
    """Add Gaussian noise to every parameter so biases are non-zero too."""
    rng = np.random.default_rng(seed)
    for p in handle.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return handle


def random_handle(variant, x_spec, w_spec, arch=SMALL_ARCH, seed=0, alpha=0.5):
    return randomize(build_model(variant, x_spec, w_spec, arch, alpha=alpha, seed=seed), seed + 1000)


def single_sample_elbo(handle, x, w, noise):
    """Per-datum single-draw bound for the variant (the joint bound for both jmvae variants)."""
    if handle.variant == "vae":
        return elbo_vae(handle, x, noise)
    if handle.variant == "cvae":
        return elbo_cvae(handle, x, w, noise)
    return elbo_jm(handle, x, w, noise)


def expected_elbo(handle, x, w=None, points: int = 4001, objective=single_sample_elbo) -> float:
    """E over the reparameterisation noise of a single-draw bound, 1-D latent.

    The noise integral is done with the trapezoid rule on [-10, 10], so the
    value is the exact expectation up to quadrature error.
    """
    eps = np.linspace(-10.0, 10.0, points)
    wt = np.full(points, eps[1] - eps[0])
    wt[[0, -1]] *= 0.5
    wt *= np.exp(-0.5 * eps**2) / np.sqrt(2 * np.pi)
    xs = np.repeat(np.atleast_2d(x), points, axis=0)
    ws = None if w is None else np.repeat(np.atleast_2d(w), points, axis=0)
    with T.no_grad():
        vals = objective(handle, xs, ws, eps[:, None]).per_datum
    return float(wt @ vals)


def jmkl_objective(handle, x, w, noise):
    return objective_jmkl(handle, x, w, noise)
