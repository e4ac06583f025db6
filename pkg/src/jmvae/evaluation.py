"""Test-time log-likelihood estimation.

Importance-weighted bounds with a choice of proposal (single-modality
encoder or the joint encoder), the prior Monte Carlo estimate of log p(w),
and a trapezoid-rule oracle that integrates the latent out exactly enough
to serve as ground truth when the latent has one or two dimensions.

Everything here runs at float64 on a frozen copy of the model.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import distributions as D
from . import tensor as T
from .models import ModelHandle, VariantError, encode, generate
from .rng import content_key, stream

TARGETS = ("marginal-x", "conditional-x-given-w", "joint-xw")
PATHS = ("single-x", "single-w", "multiple")
ORACLE_TARGETS = (*TARGETS, "marginal-w", "conditional-w-given-x")

QUAD_RANGE = 10.0
QUAD_POINTS_1D = 20001
QUAD_POINTS_2D = 801


@dataclass(frozen=True)
class BoundSpec:
    target: str
    path: str
    k: int = 1
    n_w: int = 5000

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}; choose from {TARGETS}")
        if self.path not in PATHS:
            raise ValueError(f"unknown path {self.path!r}; choose from {PATHS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_w < 1:
            raise ValueError("n_w must be >= 1")


@dataclass
class BoundReport:
    values: np.ndarray
    k: int
    target: str
    path: str
    seconds: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def stderr(self) -> float:
        n = len(self.values)
        return float(np.std(self.values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "bound", "k", "target", "path"])
            for i, v in enumerate(self.values):
                wr.writerow([i, repr(float(v)), self.k, self.target, self.path])


def as_float64(handle: ModelHandle) -> ModelHandle:
    return handle if handle.dtype == np.float64 else handle.astype(np.float64)


def check_spec(handle: ModelHandle, spec: BoundSpec) -> None:
    v = handle.variant
    if v == "vae" and (spec.target != "marginal-x" or spec.path != "single-x"):
        raise VariantError("a vae supports only marginal-x with the single-x path")
    if v == "cvae" and (spec.target != "conditional-x-given-w" or spec.path != "multiple"):
        raise VariantError("a cvae supports only conditional-x-given-w with the multiple path")


def proposal(handle: ModelHandle, path: str, x, w) -> D.DiagGaussian:
    if path == "multiple":
        if x is None or w is None:
            raise ValueError("the multiple path needs both x and w")
        return encode(handle, x=x, w=w)
    if path == "single-x":
        if x is None:
            raise ValueError("the single-x path needs x")
        return encode(handle, x=x)
    if w is None:
        raise ValueError("the single-w path needs w")
    return encode(handle, w=w)


def log_numerator(handle: ModelHandle, target: str, z, x, w) -> np.ndarray:
    """log p(datum, z) for the target; ``z`` is (k, B, L), data (B, D)."""
    lp = D.log_standard_normal(z).data
    if handle.variant == "cvae":
        return lp + D.log_likelihood(generate(handle, z, "x", w=w), x, check=False).data
    lx = D.log_likelihood(generate(handle, z, "x"), x, check=False).data
    if target == "marginal-x":
        return lp + lx
    return lp + lx + D.log_likelihood(generate(handle, z, "w"), w, check=False).data


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m, axis=axis)


def log_weights(handle: ModelHandle, spec: BoundSpec, x, w, noise: np.ndarray) -> np.ndarray:
    """Importance log-weights ``log p(datum, z_i) - log q(z_i)``, shape (k, B)."""
    with T.no_grad():
        q = proposal(handle, spec.path, x, w)
        mu, lv = q.mean.data, q.logvar.data
        z = mu[None] + np.exp(0.5 * lv)[None] * noise
        logq = D.log_normal(z, D.DiagGaussian(T.Tensor(mu[None]), T.Tensor(lv[None]))).data
        return log_numerator(handle, spec.target, z, x, w) - logq


def iw_bound(
    handle: ModelHandle,
    spec: BoundSpec,
    x=None,
    w=None,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    log_pw: np.ndarray | float | None = None,
) -> np.ndarray:
    """Per-datum ``log (1/k) sum_i w_i``, minus log p(w) for jmvae conditional targets.

    ``x``/``w`` are (B, D) batches (a single vector is treated as B=1).
    Pass ``noise`` of shape (k, B, L) to fix the draws; otherwise ``rng``
    supplies them.
    """
    check_spec(handle, spec)
    h = as_float64(handle)
    x = None if x is None else np.atleast_2d(np.asarray(x, np.float64))
    w = None if w is None else np.atleast_2d(np.asarray(w, np.float64))
    needs_w = spec.target != "marginal-x" or spec.path != "single-x"
    if x is None or (needs_w and w is None):
        raise ValueError(f"{spec.target}/{spec.path} needs x{' and w' if needs_w else ''}")
    B = len(x)
    if noise is None:
        noise = (rng or np.random.default_rng()).standard_normal((spec.k, B, h.latent_dim))
    if noise.shape != (spec.k, B, h.latent_dim):
        raise T.ShapeError("iw_bound", noise.shape, (spec.k, B, h.latent_dim))
    lw = log_weights(h, spec, x, w, noise)
    out = _lse(lw, axis=0) - math.log(spec.k)
    if spec.target == "conditional-x-given-w" and h.is_joint:
        if log_pw is None:
            log_pw = log_p_w(h, w, spec.n_w, rng or np.random.default_rng())
        out = out - log_pw
    return out


def log_p_w(handle: ModelHandle, w, n_w: int, rng: np.random.Generator) -> np.ndarray | float:
    """``log (1/N_w) sum_i p(w | z_i)`` with ``z_i ~ N(0, I)``.

    All rows of ``w`` share the same prior draws.
    """
    if n_w < 1:
        raise ValueError("n_w must be >= 1")
    h = as_float64(handle)
    w = np.asarray(w, np.float64)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    z = rng.standard_normal((n_w, h.latent_dim))
    with T.no_grad():
        params = generate(h, z, "w").params.data
        ll = D.log_likelihood(D.LikelihoodParams(h.w_spec.family, T.Tensor(params[:, None, :])), w2[None], check=False).data
    out = _lse(ll, axis=0) - math.log(n_w)
    return float(out[0]) if single else out


def evaluate(handle: ModelHandle, x, w, spec: BoundSpec, seed: int = 0, chunk_rows: int = 200_000) -> BoundReport:
    """Bound for every datum with per-datum random substreams.

    Each datum draws its proposal noise from a substream keyed by its
    contents, and log p(w) for a given w value likewise, so results do not
    depend on batch order or chunking.
    """
    t0 = time.perf_counter()
    check_spec(handle, spec)
    h = as_float64(handle)
    x = np.asarray(x, np.float64)
    w = None if w is None else np.asarray(w, np.float64)
    n, L = len(x), h.latent_dim
    log_pw = None
    if spec.target == "conditional-x-given-w" and h.is_joint:
        uniq, inv = np.unique(w, axis=0, return_inverse=True)
        per = np.array([log_p_w(h, u, spec.n_w, stream(seed, "log_p_w", content_key(u))) for u in uniq])
        log_pw = per[np.asarray(inv).reshape(-1)]
    # noise is keyed by datum contents so a datum's value does not depend on its row position
    keys = [(content_key(x[i]), 0 if w is None else content_key(w[i])) for i in range(n)]
    step = max(1, chunk_rows // spec.k)
    out = np.empty(n)
    for s in range(0, n, step):
        idx = np.arange(s, min(n, s + step))
        noise = np.stack([stream(seed, "eval", *keys[i]).standard_normal((spec.k, L)) for i in idx], axis=1)
        out[idx] = iw_bound(
            h, spec, x[idx], None if w is None else w[idx], noise=noise, log_pw=None if log_pw is None else log_pw[idx]
        )
    return BoundReport(out, spec.k, spec.target, spec.path, time.perf_counter() - t0)


# -- quadrature oracle --------------------------------------------------------------------

def quad_grid(latent_dim: int, points: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid nodes on [-10, 10]^L and their log weights."""
    if latent_dim not in (1, 2):
        raise ValueError(f"quadrature oracle supports latent dim 1 or 2, got {latent_dim}")
    n = points or (QUAD_POINTS_1D if latent_dim == 1 else QUAD_POINTS_2D)
    g = np.linspace(-QUAD_RANGE, QUAD_RANGE, n)
    wt = np.full(n, g[1] - g[0])
    wt[[0, -1]] *= 0.5
    if latent_dim == 1:
        return g[:, None], np.log(wt)
    zz = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    return zz, np.log(np.outer(wt, wt).reshape(-1))


def prior_tail_mass(latent_dim: int) -> float:
    """Prior probability outside the quadrature box."""
    return 1.0 - (1.0 - math.erfc(QUAD_RANGE / math.sqrt(2.0))) ** latent_dim


def _np_loglik(family: str, params: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """log p(obs_b | params_g) as a (G, B) matrix, written directly in numpy."""
    if family == D.BERNOULLI:
        return params @ obs.T - np.logaddexp(0.0, params).sum(axis=1, keepdims=True)
    if family == D.CATEGORICAL:
        m = params.max(axis=1, keepdims=True)
        logp = params - (m + np.log(np.exp(params - m).sum(axis=1, keepdims=True)))
        return logp @ obs.T
    d = params.shape[1]
    sq = (params**2).sum(1)[:, None] - 2 * params @ obs.T + (obs**2).sum(1)[None, :]
    return -0.5 * sq - 0.5 * d * D.LOG_2PI


def quadrature_oracle(handle: ModelHandle, target: str, x=None, w=None, points: int | None = None, chunk: int = 50_000) -> np.ndarray:
    """log of the latent integral of ``p(datum | z) p(z)`` by the trapezoid rule.

    Conditional targets are differences of two integrals. Returns one value
    per datum.
    """
    if target not in ORACLE_TARGETS:
        raise ValueError(f"unknown oracle target {target!r}")
    h = as_float64(handle)
    zz, logwt = quad_grid(h.latent_dim, points)
    logprior = -0.5 * (zz**2).sum(1) - 0.5 * h.latent_dim * D.LOG_2PI
    x = None if x is None else np.atleast_2d(np.asarray(x, np.float64))
    w = None if w is None else np.atleast_2d(np.asarray(w, np.float64))

    def integrate(parts):
        # parts: list of (family, params_fn, obs) whose log-likelihoods are summed
        acc = None
        for s in range(0, len(zz), chunk):
            zc = zz[s : s + chunk]
            tot = (logprior[s : s + chunk] + logwt[s : s + chunk])[:, None]
            for fam, fn, obs in parts:
                tot = tot + _np_loglik(fam, fn(zc), obs)
            part = _lse(tot, axis=0)
            acc = part if acc is None else np.logaddexp(acc, part)
        return acc

    with T.no_grad():
        if h.variant == "cvae":
            if target != "conditional-x-given-w":
                raise VariantError("cvae oracle covers only conditional-x-given-w")
            out = np.empty(len(x))
            for i in range(len(x)):
                fn = lambda zc, wi=w[i]: generate(h, zc, "x", w=wi).params.data
                out[i] = integrate([(h.x_spec.family, fn, x[i : i + 1])])[0]
            return out
        px = lambda zc: generate(h, zc, "x").params.data
        pw = lambda zc: generate(h, zc, "w").params.data
        fx, fw = h.x_spec.family, h.w_spec.family
        if target == "marginal-x":
            return integrate([(fx, px, x)])
        if target == "marginal-w":
            return integrate([(fw, pw, w)])
        joint = integrate([(fx, px, x), (fw, pw, w)])
        if target == "joint-xw":
            return joint
        if target == "conditional-x-given-w":
            return joint - integrate([(fw, pw, w)])
        return joint - integrate([(fx, px, x)])


def bound_convergence_report(
    handle: ModelHandle,
    x,
    w,
    k_schedule=(1, 10, 100, 1000, 5000),
    target: str = "marginal-x",
    seed: int = 0,
    n_w: int = 5000,
) -> list[dict]:
    """Single-path and multiple-path bounds side by side for growing k.

    The single path is ``single-x`` for the marginal and ``single-w`` for
    the conditional target. Both paths at a given k reuse the same noise.
    """
    h = as_float64(handle)
    if h.variant not in ("jmvae-zero", "jmvae-kl"):
        raise VariantError("convergence report needs a model with both encoder paths")
    x = np.atleast_2d(np.asarray(x, np.float64))
    w = np.atleast_2d(np.asarray(w, np.float64))
    single = "single-x" if target == "marginal-x" else "single-w"
    log_pw = None
    if target == "conditional-x-given-w":
        log_pw = log_p_w(h, w, n_w, stream(seed, "log_p_w"))
    rows = []
    for k in k_schedule:
        noise = stream(seed, "eval", k).standard_normal((k, len(x), h.latent_dim))
        s = iw_bound(h, BoundSpec(target, single, k, n_w), x, w, noise=noise, log_pw=log_pw)
        m = iw_bound(h, BoundSpec(target, "multiple", k, n_w), x, w, noise=noise, log_pw=log_pw)
        rows.append({"k": k, "single": s, "multiple": m, "gap": np.abs(s - m)})
    return rows


def jmkl_bound_mc(handle: ModelHandle, x, w, alpha: float = 1.0, n: int = 10_000, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo estimate (and standard error) of the jmvae-kl objective per datum.

    The reconstruction expectation is sampled; the three KL terms are exact.
    """
    h = as_float64(handle)
    if h.variant != "jmvae-kl":
        raise VariantError("needs a jmvae-kl model")
    rng = rng or np.random.default_rng()
    x = np.atleast_2d(np.asarray(x, np.float64))
    w = np.atleast_2d(np.asarray(w, np.float64))
    with T.no_grad():
        q = encode(h, x=x, w=w)
        kl = D.kl_to_standard_normal(q).data
        kls = D.kl_between(q, encode(h, x=x)).data + D.kl_between(q, encode(h, w=w)).data
        eps = rng.standard_normal((n, len(x), h.latent_dim))
        z = q.mean.data[None] + q.std[None] * eps
        rec = D.log_likelihood(generate(h, z, "x"), x).data + D.log_likelihood(generate(h, z, "w"), w).data
    mean = rec.mean(axis=0) - kl - alpha * kls
    se = rec.std(axis=0, ddof=1) / math.sqrt(n)
    return mean, se


# -- representation and cross-modal checks ---------------------------------------------------

def latent_means(handle: ModelHandle, x, w) -> np.ndarray:
    """Posterior means from the encoder that sees everything the variant accepts."""
    h = as_float64(handle)
    with T.no_grad():
        q = encode(h, x=x) if h.variant == "vae" else encode(h, x=x, w=w)
    return q.mean.data


def centroid_separation(z: np.ndarray, labels: np.ndarray) -> float:
    """Mean distance between class centroids over mean distance of points to their own centroid."""
    classes = np.unique(labels)
    cents = np.stack([z[labels == c].mean(axis=0) for c in classes])
    spread = np.mean([np.linalg.norm(z[labels == c] - cents[i], axis=1).mean() for i, c in enumerate(classes)])
    diff = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    inter = diff[np.triu_indices(len(classes), 1)].mean()
    return float(inter / spread)


def conditional_images(handle: ModelHandle, classes, n_per_class: int, seed: int = 0, sample: bool = True, zeta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Decoder mean images from q(z|w) for each class index; returns (images, labels)."""
    h = as_float64(handle)
    C = h.w_spec.dim
    labels = np.repeat(np.asarray(classes), n_per_class)
    w = np.eye(C)[labels]
    rng = stream(seed, "generate")
    with T.no_grad():
        q = encode(h, w=w) if h.is_joint else None
        if q is None:
            raise VariantError(f"{h.variant} cannot generate x from w alone")
        z = q.mean.data
        if sample:
            z = z + q.std * rng.standard_normal(z.shape) * math.sqrt(zeta)
        imgs = generate(h, z, "x").mean()
    return imgs, labels


def nearest_prototype(images: np.ndarray, protos: np.ndarray) -> np.ndarray:
    d = ((images[:, None, :] - protos[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)
