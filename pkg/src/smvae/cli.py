"""Command-line entry point: ``smvae <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CHECKPOINT_MAGIC, decode, load_checkpoint
from .config import load_config, render
from .data import (ClusterSpec, LinearGaussianSpec, closed_form_log_marginal, gen_clusters, gen_linear_gaussian,
                   load_dataset, load_mnist, save_dataset, write_idx)
from .errors import ConfigError, FormatError, SmvaeError
from .evaluation import export_latents, estimate_log_likelihoods, subset_mask, write_jsonl
from .gradcheck import DEFAULT_TOL, micro_model_report
from .modality import ModalityBatch
from .model import cross_modal_generate
from .rng import stream
from .train import CHECKPOINT_NAME, CONFIG_NAME, build_model, fit


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_dataset(data_cfg):
    kind = data_cfg.kind
    if kind == "clusters":
        spec = ClusterSpec(data_cfg.n_clusters, data_cfg.dim, None, data_cfg.scale, data_cfg.label_noise,
                           data_cfg.n, data_cfg.seed)
        return gen_clusters(spec)
    if kind == "linear-gaussian":
        try:
            dims = tuple(int(d) for d in data_cfg.dims.split(","))
        except ValueError:
            raise ConfigError(f"data.dims must be comma-separated integers, got {data_cfg.dims!r}")
        spec = LinearGaussianSpec.random(data_cfg.latent_dim, dims, data_cfg.noise, data_cfg.n, data_cfg.seed,
                                         data_cfg.loading_scale)
        return gen_linear_gaussian(spec)
    if kind == "mnist":
        if not data_cfg.images or not data_cfg.labels:
            raise ConfigError("data.kind = mnist needs data.images and data.labels")
        return load_mnist(data_cfg.images, data_cfg.labels, data_cfg.binarize, data_cfg.limit or None)
    raise ConfigError(f"unknown data.kind {kind!r}; expected clusters, linear-gaussian or mnist")


def _overrides(args, seed_key):
    items = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        items.append(f"{seed_key} = {args.seed}")
    if getattr(args, "precision", None) is not None:
        items.append(f"model.precision = {args.precision}")
    return items


def _run_config(args, checkpoint=None):
    """Config for commands that use a trained model: --config, else the run's saved config."""
    path = args.config
    if path is None and checkpoint is not None:
        sidecar = Path(checkpoint).with_name(CONFIG_NAME)
        if sidecar.exists():
            path = sidecar
    return load_config(path, _overrides(args, "train.seed"))


def _load_model(args, modalities=None):
    cfg, _ = _run_config(args, args.checkpoint)
    model = build_model(cfg, modalities if not cfg.modalities else None)
    if modalities is not None:
        declared = [m.describe() for m in model.modalities]
        given = [m.describe() for m in modalities]
        if declared != given:
            raise FormatError(f"dataset modalities {given} do not match the checkpoint's {declared}")
    load_checkpoint(model, args.checkpoint)
    return cfg, model


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args):
    _, data_cfg = load_config(args.config, _overrides(args, "data.seed"))
    dataset = build_dataset(data_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    print(render(None, data_cfg), end="")
    print(f"wrote {len(dataset)} samples ({', '.join(m.describe() for m in dataset.modalities)}) to {out}")
    return 0


def cmd_train(args):
    cfg, data_cfg = load_config(args.config, _overrides(args, "train.seed"))
    dataset = load_dataset(args.data)
    model = build_model(cfg, dataset.modalities)
    print(render(cfg, data_cfg), end="")
    rows = fit(model, dataset, cfg, args.out, data_cfg)
    if rows:
        print(f"trained {cfg.epochs} epochs, {len(rows)} steps; final loss {rows[-1]['loss']:.4f}")
    print(f"checkpoint: {Path(args.out) / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args):
    dataset = load_dataset(args.data)
    cfg, model = _load_model(args, dataset.modalities)
    if args.limit:
        dataset = dataset.subset(np.arange(min(args.limit, len(dataset))))
    K = args.K or cfg.K
    subsets = args.subsets.split(";") if args.subsets else cfg.eval_subsets([m.name for m in model.modalities])
    for s in subsets:
        subset_mask(model, s.strip())  # validate every subset before any work
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "likelihoods.jsonl"
    metrics_path.write_text("", encoding="utf-8")
    batch = dataset.batch()
    target = model.index(args.target) if args.target else 0
    closed = None
    if dataset.meta.get("kind") == "linear-gaussian":
        spec = LinearGaussianSpec.from_meta(dataset.meta)
        closed = closed_form_log_marginal(spec, {target: batch.data[target]})
    print(f"{'subset':<24}{'log p(x)':>12}{'log p(x,y)':>12}{'log p(x|y)':>12}")
    for s in subsets:
        report = estimate_log_likelihoods(model, batch, s.strip(), K, cfg.seed, target)
        if closed is not None:
            report.extra["closed_form_log_px"] = closed
            report.extra["abs_error_log_px"] = np.abs(report.log_px - closed)
        write_jsonl(metrics_path, report.records(cfg.seed), mode="a")
        means = report.means()
        print(f"{report.condition:<24}{means['log_px']:>12.4f}{means['log_pxy']:>12.4f}{means['log_px_given_y']:>12.4f}")
        if closed is not None:
            print(f"{'':<24}mean |log p(x) - closed form| = {means['abs_error_log_px']:.4f}")
    if args.latents:
        n = export_latents(model, dataset, subsets, args.latents)
        print(f"wrote {n} latent rows to {args.latents}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_generate(args):
    dataset = load_dataset(args.data) if args.data else None
    cfg, model = _load_model(args, dataset.modalities if dataset is not None else None)
    target = model.index(args.target)
    observed = subset_mask(model, args.observed)
    if args.values:
        batch = _batch_from_values(model, observed, args.values)
    elif dataset is not None:
        batch = dataset.batch(np.arange(min(args.n, len(dataset))))
    else:
        raise ConfigError("generate needs --data or --values to supply observed inputs")
    rng = stream(cfg.seed, "generate")
    out = cross_modal_generate(model, batch.restrict(observed), target, rng, args.mode)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = model.modalities[target]
    if spec.kind == "binary-image":
        write_idx(path, out.astype(np.float32) if args.mode == "mean" else out.astype(np.uint8))
    else:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"{spec.name}_{j}" for j in range(spec.flat_dim)])
            writer.writerows([[repr(float(v)) for v in row] for row in out.reshape(len(out), -1)])
    print(f"wrote {len(out)} generations of {spec.name!r} with shape {out.shape[1:]} to {path}")
    return 0


def _batch_from_values(model, observed, values):
    """One-hot inputs for a single observed label modality from class indices like '0,1,2'."""
    idx = np.flatnonzero(observed)
    if len(idx) != 1 or model.modalities[idx[0]].kind != "one-hot-label":
        raise ConfigError("--values needs exactly one observed one-hot-label modality")
    spec = model.modalities[idx[0]]
    try:
        classes = [int(v) for v in values.split(",")]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated class indices, got {values!r}")
    if any(c < 0 or c >= spec.flat_dim for c in classes):
        raise ConfigError(f"class indices must lie in [0, {spec.flat_dim})")
    n = len(classes)
    data = [np.zeros((n,) + m.shape) for m in model.modalities]
    data[idx[0]] = np.eye(spec.flat_dim)[classes]
    return ModalityBatch(data, np.tile(observed, (n, 1)))


def cmd_gradcheck(args):
    precision = args.precision or "f64"
    report = micro_model_report(args.seed or 0, args.aggregator, precision)
    width = max(len(n) for n in report)
    failed = 0
    for name, err in report.items():
        ok = err < args.tol
        failed += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(report)} tensors, worst {max(report.values()):.3e}, tolerance {args.tol:g}: "
          f"{'PASS' if not failed else f'{failed} FAILED'}")
    return 0 if not failed else 3


def cmd_inspect_checkpoint(args):
    path = Path(args.checkpoint)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc.strerror}", path=str(path)) from exc
    tensors, _ = decode(buf, CHECKPOINT_MAGIC, str(path))
    total = 0
    for name, arr in tensors.items():
        total += arr.size
        print(f"{name:<32} {'x'.join(map(str, arr.shape)):>12}  mean {arr.mean():+.4e}  std {arr.std():.4e}")
    print(f"{len(tensors)} tensors, {total} parameters, {len(buf)} bytes, CRC ok")
    return 0


# -- argument parsing -------------------------------------------------------------

def make_parser():
    parser = UsageParser(prog="smvae", description="Set multimodal VAE toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    def common(p, out_help):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset (or convert MNIST IDX files)")
    common(p, "dataset file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p, "run directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="importance-sampled likelihood metrics")
    common(p, "directory for likelihoods.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subsets", help="conditioning subsets, e.g. 'image+label;image'")
    p.add_argument("--K", type=int, help="importance samples")
    p.add_argument("--target", help="modality playing x (default: the first)")
    p.add_argument("--limit", type=int, help="evaluate only the first N samples")
    p.add_argument("--latents", help="also export posterior means to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="cross-modal generation")
    common(p, "output file (IDX for images, CSV otherwise)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--observed", required=True, help="observed modalities, e.g. 'label' or 'image+label'")
    p.add_argument("--target", required=True)
    p.add_argument("--data", help="dataset supplying observed inputs")
    p.add_argument("--values", help="class indices for an observed label modality, e.g. '0,1,2'")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--aggregator", default="smvae", choices=("smvae", "poe", "moe", "sumpool"))
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-checkpoint", help="list tensors and verify the CRC")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect_checkpoint)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SmvaeError as exc:
        print(f"smvae {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"smvae {args.command}: numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"smvae {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
