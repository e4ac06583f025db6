"""SGVB training: Adam, linear KL warm-up, per-epoch binarisation resampling."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BimodalDataset
from .models import ModelHandle, objective
from .rng import stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "beta", "total", "kl_prior", "recon_x", "recon_w", "kl_sx", "kl_sw", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 100
    learning_rate: float = 1e-3
    warmup_epochs: int = 200
    alpha: float = 0.01
    seed: int = 0
    precision: str = "float32"
    resample_binarization: bool = True
    eval_every: int = 0
    modality_dropout: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.modality_dropout < 1.0:
            raise ValueError("modality_dropout must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def warmup_beta(epoch: int, n_t: int) -> float:
    """Prior-KL weight for 0-based ``epoch``: ``min(1, (epoch + 1) / n_t)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 1.0 if epoch + 1 >= n_t else (epoch + 1) / n_t


class Adam:
    """Adam with bias-corrected moments, updating parameter tensors in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise T.ShapeError("adam_step", p.shape, g.shape)
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype, copy=False)


def resample_binarization(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Each pixel becomes 1 with probability equal to its grey value."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0):
        raise ValueError("grey values must lie in [0, 1]")
    return (rng.random(raw.shape) < raw).astype(raw.dtype if raw.dtype.kind == "f" else np.float64)


def binarize_epoch(raw: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    return resample_binarization(raw, stream(seed, "binarize", epoch))


def _first_nonfinite(names, arrays) -> str | None:
    for n, a in zip(names, arrays):
        if not np.all(np.isfinite(a)):
            return n
    return None


def train(
    handle: ModelHandle,
    dataset: BimodalDataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[ModelHandle, list[dict]]:
    """Maximise the variant's objective with Adam; returns the handle and per-epoch metrics.

    With ``out_dir`` set, ``metrics.csv`` is rewritten after every epoch, a
    checkpoint is saved every ``eval_every`` epochs and ``final.jmck`` at the end.
    """
    if dataset.x_spec.dim != handle.x_spec.dim or dataset.w_spec.dim != handle.w_spec.dim:
        raise ValueError("dataset modalities do not match the model")
    dtype = np.dtype(config.precision)
    for p in handle.parameters():
        if p.dtype != dtype:
            p.data = p.data.astype(dtype)
    params = handle.parameters()
    names = [n for n, _ in handle.named_parameters()]
    opt = Adam(params, config.learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    n, bs, L = len(dataset), config.batch_size, handle.latent_dim
    raw_x, w_all = dataset.x.astype(dtype), dataset.w.astype(dtype)
    rows: list[dict] = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = warmup_beta(epoch, config.warmup_epochs)
        x_all = binarize_epoch(raw_x, config.seed, epoch) if config.resample_binarization else raw_x
        order = stream(config.seed, "shuffle", epoch).permutation(n)
        noise_rng = stream(config.seed, "noise", epoch)
        drop_rng = stream(config.seed, "dropout", epoch) if config.modality_dropout > 0 else None
        sums = dict.fromkeys(METRIC_FIELDS[2:-1], 0.0)
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            xb, wb = x_all[idx], w_all[idx]
            eps = noise_rng.standard_normal((len(idx), L)).astype(dtype)
            extra = {}
            if drop_rng is not None and handle.variant == "jmvae-zero":
                u = drop_rng.random(len(idx))
                half = config.modality_dropout / 2
                extra = {"x_in": np.where((u < half)[:, None], 0.0, xb).astype(dtype), "w_in": np.where(((u >= half) & (u < 2 * half))[:, None], 0.0, wb).astype(dtype)}
            br = objective(handle, xb, wb, eps, beta, **extra)
            row = br.row()
            # components first so the message names the root cause rather than the sum
            terms = [k for k in row if k != "total"] + ["total"]
            bad = _first_nonfinite(terms, [row[k] for k in terms])
            if bad:
                raise TrainingError(f"non-finite loss term {bad!r} at epoch {epoch + 1}, batch {b}")
            grads = T.grad(-br.total, params)
            bad = _first_nonfinite(names, grads)
            if bad:
                raise TrainingError(f"non-finite gradient for {bad!r} at epoch {epoch + 1}, batch {b}")
            opt.step(grads)
            for k in sums:
                sums[k] += row[k] * len(idx)
        metrics = {"epoch": epoch + 1, "beta": beta, **{k: v / n for k, v in sums.items()}, "seconds": time.perf_counter() - t0}
        rows.append(metrics)
        log.info("epoch %d beta=%.3f total=%.4f", epoch + 1, beta, metrics["total"])
        if out is not None:
            write_metrics(rows, out / "metrics.csv")
            if config.eval_every and (epoch + 1) % config.eval_every == 0:
                from .checkpoint import save

                save(handle, out / f"epoch{epoch + 1:04d}.jmck")
    if out is not None:
        from .checkpoint import save

        save(handle, out / "final.jmck")
    return handle, rows


def write_metrics(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})
