"""Command line: ``jmvae train | eval | generate | latent-dump``.

Run configuration is a plain ``key = value`` file (``#`` comments, no
sections). Keys and defaults are listed in :data:`CONFIG_SCHEMA`; unknown
keys are rejected. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation
from . import tensor as T
from .data import BimodalDataset, DataError, load_idx, make_toy, split
from .models import VARIANTS, ModelHandle, VariantError, build_model, encode, generate
from .networks import Architecture
from .rng import stream
from .training import TrainConfig, train

log = logging.getLogger("jmvae")

USAGE, RUNTIME = 2, 1

# key -> (type, default); a default of None means required when relevant
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "variant": (str, "jmvae-kl"),
    "alpha": (float, 0.01),
    "epochs": (int, 500),
    "batch_size": (int, 100),
    "learning_rate": (float, 1e-3),
    "warmup_epochs": (int, 200),
    "seed": (int, 0),
    "precision": (str, "float32"),
    "resample_binarization": (bool, True),
    "eval_every": (int, 0),
    "modality_dropout": (float, 0.0),
    "enc_hidden": (tuple, (512, 512)),
    "shared": (int, 64),
    "latent": (int, 64),
    "dec_hidden": (tuple, (512, 512, 512)),
    "fusion": (str, "sum"),
    "slope": (float, T.LEAKY_SLOPE),
    "dataset": (str, "toy"),
    "train_images": (str, None),
    "train_labels": (str, None),
    "test_images": (str, ""),
    "test_labels": (str, ""),
    "train_fraction": (float, 5 / 6),
    "toy_classes": (int, 10),
    "toy_dim": (int, 64),
    "toy_n_per_class": (int, 500),
    "toy_test_n_per_class": (int, 100),
    "toy_noise": (float, 0.05),
    "toy_seed": (int, 0),
    "out_dir": (str, None),
}

MNIST_HINT = (
    "MNIST is not downloaded by this tool. Fetch train-images-idx3-ubyte.gz and "
    "train-labels-idx1-ubyte.gz (and the t10k files) from an MNIST mirror and point "
    "train_images / train_labels (test_images / test_labels) at them."
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            warmup_epochs=self.warmup_epochs,
            alpha=self.alpha,
            seed=self.seed,
            precision=self.precision,
            resample_binarization=self.resample_binarization,
            eval_every=self.eval_every,
            modality_dropout=self.modality_dropout,
        )

    def architecture(self) -> Architecture:
        return Architecture(self.enc_hidden, self.shared, self.latent, self.dec_hidden, self.fusion, self.slope)

    def dump(self) -> str:
        lines = []
        for k in CONFIG_SCHEMA:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: str):
    typ, _ = CONFIG_SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    given = dict(cp["run"])
    unknown = sorted(set(given) - set(CONFIG_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
    for k, raw in given.items():
        values[k] = _coerce(k, raw)
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text())


def validate(cfg: RunConfig, need_out: bool = False) -> None:
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if cfg.dataset not in ("idx", "toy"):
        raise ConfigError("dataset must be 'idx' or 'toy'")
    if cfg.dataset == "idx":
        for key in ("train_images", "train_labels"):
            if not cfg.values[key]:
                raise ConfigError(f"{key} is required for dataset = idx. {MNIST_HINT}")
        if bool(cfg.test_images) != bool(cfg.test_labels):
            raise ConfigError("give both test_images and test_labels, or neither")
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if cfg.values[key] and not Path(cfg.values[key]).is_file():
                raise ConfigError(f"{key}: file not found: {cfg.values[key]}")
    if need_out and not cfg.out_dir:
        raise ConfigError("out_dir is required")
    try:
        cfg.train_config()
        cfg.architecture()
        Architecture.from_dict(cfg.architecture().to_dict())
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not cfg.enc_hidden or not cfg.dec_hidden:
        raise ConfigError("enc_hidden and dec_hidden need at least one width")


def load_datasets(cfg: RunConfig) -> tuple[BimodalDataset, BimodalDataset]:
    if cfg.dataset == "toy":
        tr = make_toy(cfg.toy_classes, cfg.toy_dim, cfg.toy_n_per_class, cfg.toy_noise, cfg.toy_seed)
        te = make_toy(cfg.toy_classes, cfg.toy_dim, cfg.toy_test_n_per_class, cfg.toy_noise, cfg.toy_seed + 1)
        tr.split, te.split = "train", "test"
        return tr, te
    full = load_idx(cfg.train_images, cfg.train_labels)
    if cfg.test_images:
        te = load_idx(cfg.test_images, cfg.test_labels)
        te.split = "test"
        full.split = "train"
        return full, te
    return split(full, cfg.train_fraction, cfg.seed)


# -- PGM ------------------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray, shape: tuple[int, ...]) -> None:
    """Binary PGM (P5, maxval 255) from values in [0, 1]."""
    h, w = shape if len(shape) == 2 else (1, int(np.prod(shape)))
    pix = np.clip(np.rint(np.asarray(image).reshape(h, w) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / maxval


# -- commands --------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.values["out_dir"] = args.out_dir
    validate(cfg, need_out=True)
    train_set, _ = load_datasets(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dump())
    handle = build_model(
        cfg.variant, train_set.x_spec, train_set.w_spec, cfg.architecture(), cfg.alpha if cfg.variant == "jmvae-kl" else 0.0,
        cfg.seed, np.dtype(cfg.precision),
    )
    _, rows = train(handle, train_set, cfg.train_config(), out)
    print(f"trained {cfg.variant} for {len(rows)} epochs; final objective {rows[-1]['total']:.4f}; outputs in {out}")
    return 0


def _compatible(handle: ModelHandle, ds: BimodalDataset) -> None:
    if handle.x_spec.dim != ds.x_spec.dim or handle.w_spec.dim != ds.w_spec.dim:
        raise ConfigError(
            f"checkpoint expects x:{handle.x_spec.dim} w:{handle.w_spec.dim}, dataset has x:{ds.x_spec.dim} w:{ds.w_spec.dim}"
        )


def _dataset_for(args) -> BimodalDataset:
    cfg = load_config(args.config)
    tr, te = load_datasets(cfg)
    return te if args.split == "test" else tr


def _binary_x(ds: BimodalDataset, seed: int) -> np.ndarray:
    x = ds.x
    if np.all((x == 0) | (x == 1)):
        return x
    return (stream(seed, "binarize", 0).random(x.shape) < x).astype(np.float64)


def cmd_eval(args) -> int:
    handle = checkpoint.load(args.checkpoint)
    ds = _dataset_for(args)
    _compatible(handle, ds)
    try:
        spec = evaluation.BoundSpec(args.target, args.path, args.k, args.n_w)
        evaluation.check_spec(handle, spec)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rep = evaluation.evaluate(handle, _binary_x(ds, args.seed), ds.w, spec, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"bounds_{args.target}_{args.path}_k{args.k}.csv"
    rep.write_csv(csv_path)
    print(f"{args.target} [{args.path}] k={args.k} N_w={args.n_w}: {rep.mean:.4f} +/- {rep.stderr:.4f} over {len(rep.values)} data")
    return 0


def cmd_generate(args) -> int:
    handle = checkpoint.load(args.checkpoint)
    h = evaluation.as_float64(handle)
    v = h.variant
    C, L = h.w_spec.dim, h.latent_dim
    rng = stream(args.seed, "generate")
    if args.mode == "from-w" and v == "vae":
        raise ConfigError("from-w needs a model with a w path (jmvae or cvae)")
    if args.mode == "from-x" and v == "cvae":
        raise ConfigError("from-x is not defined for a cvae")
    if (args.mode == "from-w" or v == "cvae") and args.cls is None:
        raise ConfigError("--class is required for this mode/variant")
    if args.cls is not None and not 0 <= args.cls < C:
        raise ConfigError(f"--class must lie in [0, {C})")
    x_in = None
    if args.mode == "from-x":
        if not args.image or not Path(args.image).is_file():
            raise ConfigError("from-x needs --image pointing to a PGM file")
        x_in = read_pgm(args.image).reshape(-1)
        if x_in.size != h.x_spec.dim:
            raise ConfigError(f"image has {x_in.size} pixels, model expects {h.x_spec.dim}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w_onehot = None if args.cls is None else np.eye(C)[args.cls]

    with T.no_grad():
        if args.mode == "prior-sample" or v == "cvae":
            z = rng.standard_normal((args.count, L))
        else:
            q = encode(h, w=w_onehot[None]) if args.mode == "from-w" else encode(h, x=x_in[None])
            z = np.repeat(q.mean.data, args.count, axis=0)
            if args.sample:
                z = z + np.repeat(q.std, args.count, axis=0) * rng.standard_normal(z.shape) * np.sqrt(args.zeta)
        cond = None if v != "cvae" else np.broadcast_to(w_onehot, (args.count, C))
        images = generate(h, z, "x", w=cond).mean()
        for i, img in enumerate(images):
            write_pgm(out / f"sample_{i:04d}.pgm", img, h.x_spec.input_shape)
        if h.is_joint and args.mode != "from-w":
            probs = generate(h, z, "w").mean()
            with open(out / "w_probs.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["index", *[f"p{c}" for c in range(C)]])
                for i, row in enumerate(probs):
                    wr.writerow([i, *[f"{p:.6f}" for p in row]])
    print(f"wrote {len(images)} images to {out}")
    return 0


def cmd_latent_dump(args) -> int:
    handle = checkpoint.load(args.checkpoint)
    ds = _dataset_for(args)
    _compatible(handle, ds)
    z = evaluation.latent_means(handle, _binary_x(ds, 0), ds.w)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["label", *[f"z{i + 1}" for i in range(z.shape[1])]])
        for lab, row in zip(ds.labels, z):
            wr.writerow([int(lab), *[repr(float(v)) for v in row]])
    print(f"wrote {len(z)} latent rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jmvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("config")
    t.add_argument("--out-dir", help="override out_dir from the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="importance-weighted test bound")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="run config naming the dataset")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--target", choices=evaluation.TARGETS, default="marginal-x")
    e.add_argument("--path", choices=evaluation.PATHS, default="single-x")
    e.add_argument("--k", type=int, default=5000)
    e.add_argument("--n-w", type=int, default=5000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="write decoder-mean images as PGM")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--mode", choices=("prior-sample", "from-w", "from-x"), default="prior-sample")
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--class", dest="cls", type=int)
    g.add_argument("--image", help="PGM input for from-x")
    g.add_argument("--sample", action="store_true", help="draw z around the posterior mean")
    g.add_argument("--zeta", type=float, default=1.0, help="noise variance scale with --sample")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("latent-dump", help="export posterior means and labels as CSV")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--split", choices=("train", "test"), default="test")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_latent_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, VariantError, DataError, checkpoint.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
