"""VAE, CVAE and JMVAE (zero / kl) model handles and their training objectives.

Parameter groups follow the usual naming: ``theta_x`` and ``theta_w`` are
the decoders, ``phi`` the joint (or conditional) encoder, ``phi_x`` and
``phi_w`` the single-modality encoders.

All objectives are lower bounds to be *maximised*; they return the mean
over the batch of one reparameterised sample per datum.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import distributions as D
from . import tensor as T
from .data import ModalitySpec, zero_fill
from .networks import Architecture, Decoder, DecoderConfig, Encoder, EncoderConfig, Module
from .rng import stream
from .tensor import Tensor

VARIANTS = ("vae", "cvae", "jmvae-zero", "jmvae-kl")
GROUPS = {
    "vae": ("theta_x", "phi_x"),
    "cvae": ("theta_x", "phi"),
    "jmvae-zero": ("theta_x", "theta_w", "phi"),
    "jmvae-kl": ("theta_x", "theta_w", "phi", "phi_x", "phi_w"),
}


class VariantError(ValueError):
    pass


@dataclass
class ModelHandle:
    variant: str
    x_spec: ModalitySpec
    w_spec: ModalitySpec
    arch: Architecture
    groups: dict[str, Module]
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}")
        if tuple(self.groups) != GROUPS[self.variant]:
            raise VariantError(f"{self.variant} needs groups {GROUPS[self.variant]}, got {tuple(self.groups)}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @property
    def latent_dim(self) -> int:
        return self.arch.latent

    @property
    def is_joint(self) -> bool:
        return self.variant.startswith("jmvae")

    @property
    def dtype(self) -> np.dtype:
        return self.parameters()[0].dtype

    def __getitem__(self, group: str) -> Module:
        try:
            return self.groups[group]
        except KeyError:
            raise VariantError(f"{self.variant} has no parameter group {group!r}") from None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{g}/{n}", p) for g, mod in self.groups.items() for n, p in mod.named_parameters()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> ModelHandle:
        """Deep copy with every parameter cast to ``dtype``."""
        out = copy.deepcopy(self)
        for _, p in out.named_parameters():
            p.data = p.data.astype(dtype)
        return out

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _enc(branches, arch: Architecture) -> EncoderConfig:
    return EncoderConfig(tuple(branches), arch.enc_hidden, arch.shared, arch.latent, arch.fusion, arch.slope)


def _dec(in_width: int, spec: ModalitySpec, arch: Architecture) -> DecoderConfig:
    return DecoderConfig(in_width, arch.dec_hidden, spec.dim, spec.family, arch.slope)


def group_configs(variant: str, x_spec: ModalitySpec, w_spec: ModalitySpec, arch: Architecture) -> dict:
    dx, dw, L = x_spec.dim, w_spec.dim, arch.latent
    table = {
        "theta_x": _dec(L + dw if variant == "cvae" else L, x_spec, arch),
        "theta_w": _dec(L, w_spec, arch),
        "phi": _enc([("xw", dx + dw)] if variant == "cvae" else [("x", dx), ("w", dw)], arch),
        "phi_x": _enc([("x", dx)], arch),
        "phi_w": _enc([("w", dw)], arch),
    }
    return {g: table[g] for g in GROUPS[variant]}


def build_model(
    variant: str,
    x_spec: ModalitySpec,
    w_spec: ModalitySpec,
    arch: Architecture | None = None,
    alpha: float = 0.0,
    seed: int = 0,
    dtype=np.float64,
    init: str = "glorot",
) -> ModelHandle:
    """Construct a handle with Glorot-uniform weights and zero biases.

    Groups are initialised in a fixed order (decoders, joint encoder, then
    single encoders) from one stream, so variants that share groups start
    from identical values for the same seed.
    """
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant {variant!r}")
    arch = arch or Architecture()
    rng = stream(seed, "init")
    groups: dict[str, Module] = {}
    for name, cfg in group_configs(variant, x_spec, w_spec, arch).items():
        if isinstance(cfg, EncoderConfig):
            groups[name] = Encoder(cfg, rng, dtype, init)
        else:
            groups[name] = Decoder(cfg, rng, dtype, init)
    return ModelHandle(variant, x_spec, w_spec, arch, groups, float(alpha), int(seed))


@dataclass
class LossBreakdown:
    """Batch-mean terms of one objective evaluation; ``total`` stays on the tape."""

    total: Tensor
    kl_prior: float
    recon_x: float
    recon_w: float = 0.0
    kl_sx: float = 0.0
    kl_sw: float = 0.0
    beta: float = 1.0
    alpha: float = 0.0
    per_datum: np.ndarray | None = None

    def recomposed(self) -> float:
        return -self.beta * self.kl_prior + self.recon_x + self.recon_w - self.alpha * (self.kl_sx + self.kl_sw)

    def row(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "kl_prior": self.kl_prior,
            "recon_x": self.recon_x,
            "recon_w": self.recon_w,
            "kl_sx": self.kl_sx,
            "kl_sw": self.kl_sw,
        }


def _require(handle: ModelHandle, *variants: str, op: str) -> None:
    if handle.variant not in variants:
        raise VariantError(f"{op} needs variant in {variants}, got {handle.variant}")


def _batch_match(x, w) -> None:
    if len(x) != len(w):
        raise ValueError(f"batch size mismatch: x has {len(x)} rows, w has {len(w)}")


def elbo_vae(handle: ModelHandle, x, noise, beta: float = 1.0) -> LossBreakdown:
    _require(handle, "vae", op="elbo_vae")
    q = handle["phi_x"](x=x)
    z = D.rsample(q, noise)
    kl = D.kl_to_standard_normal(q)
    rx = D.log_likelihood(handle["theta_x"](z), x)
    vals = rx - kl * beta
    return LossBreakdown(T.mean(vals), float(kl.data.mean()), float(rx.data.mean()), beta=beta, per_datum=vals.data)


def _jm_terms(handle, x, w, noise, beta, x_in=None, w_in=None):
    _batch_match(x, w)
    q = handle["phi"](x=x if x_in is None else x_in, w=w if w_in is None else w_in)
    z = D.rsample(q, noise)
    kl = D.kl_to_standard_normal(q)
    rx = D.log_likelihood(handle["theta_x"](z), x)
    rw = D.log_likelihood(handle["theta_w"](z), w)
    return q, kl, rx, rw, rx + rw - kl * beta


def elbo_jm(handle: ModelHandle, x, w, noise, beta: float = 1.0, x_in=None, w_in=None) -> LossBreakdown:
    """Joint bound ``-beta KL(q(z|x,w) || p(z)) + E[log p(x|z)] + E[log p(w|z)]``.

    ``x_in`` / ``w_in`` override what the encoder sees (e.g. zero-filled
    rows for modality dropout) while the reconstruction targets stay ``x``, ``w``.
    """
    _require(handle, "jmvae-zero", "jmvae-kl", op="elbo_jm")
    _, kl, rx, rw, vals = _jm_terms(handle, x, w, noise, beta, x_in, w_in)
    return LossBreakdown(T.mean(vals), float(kl.data.mean()), float(rx.data.mean()), float(rw.data.mean()), beta=beta, per_datum=vals.data)


def objective_jmkl(handle: ModelHandle, x, w, noise, beta: float = 1.0, alpha: float | None = None) -> LossBreakdown:
    """Joint bound minus ``alpha [KL(q(z|x,w)||q(z|x)) + KL(q(z|x,w)||q(z|w))]``.

    Warm-up ``beta`` scales only the prior KL; the alpha terms are never annealed.
    """
    _require(handle, "jmvae-kl", op="objective_jmkl")
    a = handle.alpha if alpha is None else float(alpha)
    q, kl, rx, rw, vals = _jm_terms(handle, x, w, noise, beta)
    ksx = D.kl_between(q, handle["phi_x"](x=x))
    ksw = D.kl_between(q, handle["phi_w"](w=w))
    vals = vals - (ksx + ksw) * a
    return LossBreakdown(
        T.mean(vals),
        float(kl.data.mean()),
        float(rx.data.mean()),
        float(rw.data.mean()),
        float(ksx.data.mean()),
        float(ksw.data.mean()),
        beta,
        a,
        vals.data,
    )


def elbo_cvae(handle: ModelHandle, x, w, noise, beta: float = 1.0) -> LossBreakdown:
    """Conditional bound on log p(x|w); w is concatenated to encoder and decoder inputs."""
    _require(handle, "cvae", op="elbo_cvae")
    _batch_match(x, w)
    dt = handle.dtype
    x, w = np.asarray(x, dtype=dt), np.asarray(w, dtype=dt)
    q = handle["phi"](xw=np.concatenate([x, w], axis=-1))
    z = D.rsample(q, noise)
    kl = D.kl_to_standard_normal(q)
    rx = D.log_likelihood(handle["theta_x"](T.concat([z, Tensor(w)], axis=-1)), x)
    vals = rx - kl * beta
    return LossBreakdown(T.mean(vals), float(kl.data.mean()), float(rx.data.mean()), beta=beta, per_datum=vals.data)


def objective(handle: ModelHandle, x, w, noise, beta: float = 1.0, **kw) -> LossBreakdown:
    """The training objective for the handle's variant."""
    if handle.variant == "vae":
        return elbo_vae(handle, x, noise, beta)
    if handle.variant == "cvae":
        return elbo_cvae(handle, x, w, noise, beta)
    if handle.variant == "jmvae-kl":
        return objective_jmkl(handle, x, w, noise, beta)
    return elbo_jm(handle, x, w, noise, beta, **kw)


def encode(handle: ModelHandle, x=None, w=None) -> D.DiagGaussian:
    """Approximate posterior given whichever modalities are present.

    Both present: the joint encoder. One present: ``phi_x`` / ``phi_w`` for
    jmvae-kl, the joint encoder with the other input zero-filled for
    jmvae-zero.
    """
    if x is None and w is None:
        raise ValueError("encode needs at least one modality")
    v = handle.variant
    if v == "vae":
        if x is None:
            raise VariantError("vae cannot encode from w alone")
        return handle["phi_x"](x=x)
    if v == "cvae":
        if x is None or w is None:
            raise VariantError("cvae encoder needs both x and w")
        dt = handle.dtype
        return handle["phi"](xw=np.concatenate([np.asarray(x, dt), np.asarray(w, dt)], axis=-1))
    if x is not None and w is not None:
        return handle["phi"](x=x, w=w)
    if v == "jmvae-kl":
        return handle["phi_x"](x=x) if w is None else handle["phi_w"](w=w)
    present = x if x is not None else w
    batch = None if np.ndim(_data(present)) == 1 else len(present)
    if x is None:
        return handle["phi"](x=zero_fill(handle.x_spec, batch, handle.dtype), w=w)
    return handle["phi"](x=x, w=zero_fill(handle.w_spec, batch, handle.dtype))


def _data(v):
    return v.data if isinstance(v, Tensor) else v


def generate(handle: ModelHandle, z, modality: str, w=None) -> D.LikelihoodParams:
    """Decoder output for ``modality`` ('x' or 'w') at latent ``z``.

    The cvae x-decoder additionally needs the conditioning ``w``.
    """
    if modality not in ("x", "w"):
        raise ValueError("modality must be 'x' or 'w'")
    z = T.as_tensor(np.asarray(_data(z), dtype=handle.dtype)) if not isinstance(z, Tensor) else z
    if z.shape[-1] != handle.latent_dim:
        raise T.ShapeError("generate", z.shape, (handle.latent_dim,))
    if modality == "w":
        if not handle.is_joint:
            raise VariantError(f"{handle.variant} has no w decoder")
        return handle["theta_w"](z)
    if handle.variant == "cvae":
        if w is None:
            raise VariantError("cvae x decoder needs the conditioning w")
        w = np.broadcast_to(np.asarray(w, dtype=handle.dtype), (*z.shape[:-1], handle.w_spec.dim))
        return handle["theta_x"](T.concat([z, Tensor(np.ascontiguousarray(w))], axis=-1))
    return handle["theta_x"](z)
