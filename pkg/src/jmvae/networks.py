"""MLP encoders and decoders.

A multimodal encoder runs one MLP branch per modality up to a shared-top
width, fuses the branches (elementwise sum by default), applies the leaky
rectifier and then two linear heads for the posterior mean and log-variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ModalitySpec, zero_fill
from .distributions import DiagGaussian, LikelihoodParams
from .tensor import Tensor

FUSIONS = ("sum", "concat")


@dataclass(frozen=True)
class MlpConfig:
    widths: tuple[int, ...]
    slope: float = T.LEAKY_SLOPE

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("an MLP needs an input width, at least one hidden layer and an output width")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive: {self.widths}")


@dataclass(frozen=True)
class EncoderConfig:
    """Branches are ``(name, input_width)``; each runs ``input -> *hidden -> shared``."""

    branches: tuple[tuple[str, int], ...]
    hidden: tuple[int, ...]
    shared: int
    latent: int
    fusion: str = "sum"
    slope: float = T.LEAKY_SLOPE

    def __post_init__(self):
        if not self.branches:
            raise ValueError("encoder needs at least one input branch")
        if not self.hidden or any(w <= 0 for w in (*self.hidden, self.shared, self.latent)):
            raise ValueError("encoder widths must be positive with at least one hidden layer")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")

    @property
    def fused_width(self) -> int:
        return self.shared * (len(self.branches) if self.fusion == "concat" else 1)

    def to_dict(self) -> dict:
        return {
            "branches": [list(b) for b in self.branches],
            "hidden": list(self.hidden),
            "shared": self.shared,
            "latent": self.latent,
            "fusion": self.fusion,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        return cls(
            tuple((str(n), int(w)) for n, w in d["branches"]),
            tuple(int(h) for h in d["hidden"]),
            int(d["shared"]),
            int(d["latent"]),
            d.get("fusion", "sum"),
            float(d.get("slope", T.LEAKY_SLOPE)),
        )


@dataclass(frozen=True)
class DecoderConfig:
    input_width: int
    hidden: tuple[int, ...]
    output_width: int
    family: str
    slope: float = T.LEAKY_SLOPE

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "hidden": list(self.hidden),
            "output_width": self.output_width,
            "family": self.family,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DecoderConfig:
        return cls(int(d["input_width"]), tuple(int(h) for h in d["hidden"]), int(d["output_width"]), d["family"], float(d.get("slope", T.LEAKY_SLOPE)))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Minimal parameter container: ordered, named tensors."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self) -> np.dtype:
        return self.named_parameters()[0][1].dtype


def _input(v, dtype) -> Tensor:
    """Wrap data in the network's precision; tape-attached tensors pass through."""
    if isinstance(v, Tensor):
        return v if v.requires_grad or v.dtype == dtype else Tensor(v.data.astype(dtype))
    return Tensor(np.asarray(v, dtype=dtype))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None, dtype, init: str = "glorot"):
        if init == "zero":
            w = np.zeros((fan_in, fan_out), dtype=dtype)
        else:
            w = glorot(rng, fan_in, fan_out, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Mlp(Module):
    """Stack of affine layers with leaky rectifiers between them (none after the last)."""

    def __init__(self, config: MlpConfig, rng, dtype, init: str = "glorot"):
        self.slope = config.slope
        w = config.widths
        self.layers = [Linear(a, b, rng, dtype, init) for a, b in zip(w[:-1], w[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.leaky_relu(x, self.slope)
        return x


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng, dtype=np.float64, init: str = "glorot"):
        self.config = config
        self.branches = {
            name: Mlp(MlpConfig((width, *config.hidden, config.shared), config.slope), rng, dtype, init)
            for name, width in config.branches
        }
        self.head_mean = Linear(config.fused_width, config.latent, rng, dtype, init)
        self.head_logvar = Linear(config.fused_width, config.latent, rng, dtype, init)

    def __call__(self, **inputs) -> DiagGaussian:
        names = [n for n, _ in self.config.branches]
        missing = set(names) - inputs.keys()
        if missing:
            raise ValueError(f"encoder inputs missing: {sorted(missing)}")
        dt = self.head_mean.weight.dtype
        outs = [self.branches[n](_input(inputs[n], dt)) for n in names]
        if self.config.fusion == "concat":
            h = T.concat(outs, axis=-1)
        else:
            h = outs[0]
            for o in outs[1:]:
                h = h + o
        h = T.leaky_relu(h, self.config.slope)
        return DiagGaussian(self.head_mean(h), self.head_logvar(h))


class Decoder(Module):
    def __init__(self, config: DecoderConfig, rng, dtype=np.float64, init: str = "glorot"):
        self.config = config
        self.net = Mlp(MlpConfig((config.input_width, *config.hidden, config.output_width), config.slope), rng, dtype, init)

    def __call__(self, z) -> LikelihoodParams:
        return LikelihoodParams(self.config.family, self.net(_input(z, self.net.layers[0].weight.dtype)))


def build_encoder(config: EncoderConfig, rng=None, dtype=np.float64, init: str = "glorot") -> Encoder:
    if init != "zero" and rng is None:
        raise ValueError("random initialisation needs an rng")
    return Encoder(config, rng, dtype, init)


def build_decoder(config: DecoderConfig, modality: ModalitySpec | None = None, rng=None, dtype=np.float64, init: str = "glorot") -> Decoder:
    if modality is not None and (config.output_width != modality.dim or config.family != modality.family):
        raise ValueError(f"decoder head {config.output_width}/{config.family} does not match modality {modality.name}")
    if init != "zero" and rng is None:
        raise ValueError("random initialisation needs an rng")
    return Decoder(config, rng, dtype, init)


def zero_fill_input(modality: ModalitySpec, batch: int | None = None, dtype=np.float64) -> np.ndarray:
    return zero_fill(modality, batch, dtype)


def mlp_param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def encoder_param_count(config: EncoderConfig) -> int:
    branches = sum(mlp_param_count((w, *config.hidden, config.shared)) for _, w in config.branches)
    return branches + 2 * mlp_param_count((config.fused_width, config.latent))


@dataclass(frozen=True)
class Architecture:
    """Layer widths shared by all variants; defaults are the MNIST-scale widths."""

    enc_hidden: tuple[int, ...] = (512, 512)
    shared: int = 64
    latent: int = 64
    dec_hidden: tuple[int, ...] = (512, 512, 512)
    fusion: str = "sum"
    slope: float = T.LEAKY_SLOPE

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if min(self.shared, self.latent, *self.enc_hidden, *self.dec_hidden) <= 0:
            raise ValueError("layer widths must be positive")

    def to_dict(self) -> dict:
        return {
            "enc_hidden": list(self.enc_hidden),
            "shared": self.shared,
            "latent": self.latent,
            "dec_hidden": list(self.dec_hidden),
            "fusion": self.fusion,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        return cls(
            tuple(int(h) for h in d["enc_hidden"]),
            int(d["shared"]),
            int(d["latent"]),
            tuple(int(h) for h in d["dec_hidden"]),
            d.get("fusion", "sum"),
            float(d.get("slope", T.LEAKY_SLOPE)),
        )
