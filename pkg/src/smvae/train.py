"""Mini-batch training loop with checkpoints, JSON-lines metrics and a run manifest."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import render, reweighted
from .errors import NumericError
from .model import SmvaeModel, beta_schedule, training_step
from .optim import Adam
from .rng import stream

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.smva"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.txt"
MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    config: str
    code_version: str
    seed: int
    start_time: float
    end_time: float = None
    status: str = "running"
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    error: str = None

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_model(cfg, modalities=None):
    """Model described by ``cfg``; ``modalities`` (e.g. from a dataset) win over ``cfg.modalities``."""
    specs = list(modalities) if modalities is not None else cfg.modality_specs()
    specs = [reweighted(s, cfg.weights.get(s.name)) for s in specs]
    return SmvaeModel(specs, cfg.latent_dim, cfg.embed_dim, cfg.heads, cfg.decoder_hidden or None,
                      cfg.aggregator, cfg.seed, cfg.precision)


def iterate_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(order[start : start + batch_size])


def fit(model, dataset, cfg, out_dir=None, data_cfg=None, on_step=None):
    """Train ``model`` on ``dataset`` for ``cfg.epochs`` epochs.

    With ``out_dir`` set, writes the resolved config, a metrics file (one
    row per step), a checkpoint every ``cfg.save_every`` epochs and at the
    end, and a manifest.  A numeric failure aborts the run; the last
    checkpoint written before it is left in place and the error re-raised.
    Returns the list of per-step metric rows.
    """
    optimizer = Adam(model.params, lr=cfg.lr)
    rows = []
    manifest = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        resolved = cfg.__class__(**{**asdict(cfg), "modalities": ",".join(m.describe() for m in model.modalities),
                                    "weights": {m.name: m.weight for m in model.modalities}})
        config_text = render(resolved, data_cfg)
        (out / CONFIG_NAME).write_text(config_text, encoding="utf-8")
        metrics_path = out / METRICS_NAME
        metrics_path.write_text("", encoding="utf-8")
        ckpt_path = out / CHECKPOINT_NAME
        manifest = RunManifest(config_text, __version__, cfg.seed, time.time(), metrics=[str(metrics_path)])
        if cfg.epochs == 0:
            save_checkpoint(model, ckpt_path)
            manifest.checkpoints.append(str(ckpt_path))

    step = 0
    try:
        for epoch in range(cfg.epochs):
            beta = beta_schedule(epoch, cfg.anneal_epochs)
            noise = stream(cfg.seed, "train", epoch)
            epoch_rows = []
            for index in iterate_batches(len(dataset), cfg.batch_size, stream(cfg.seed, "shuffle", epoch)):
                report = training_step(model, optimizer, dataset.batch(index), noise, beta, cfg.gamma,
                                       cfg.subset_policy, step)
                row = {"epoch": epoch, "step": step, **report}
                epoch_rows.append(row)
                if on_step is not None:
                    on_step(row)
                step += 1
            rows += epoch_rows
            if manifest is not None:
                with metrics_path.open("a", encoding="utf-8") as fh:
                    for row in epoch_rows:
                        fh.write(json.dumps(row, sort_keys=True) + "\n")
                if (epoch + 1) % cfg.save_every == 0 or epoch + 1 == cfg.epochs:
                    save_checkpoint(model, ckpt_path)
                    if str(ckpt_path) not in manifest.checkpoints:
                        manifest.checkpoints.append(str(ckpt_path))
            logger.info("epoch %d beta %.3f loss %.4f", epoch, beta, np.mean([r["loss"] for r in epoch_rows]))
    except NumericError as exc:
        if manifest is not None:
            manifest.status, manifest.error, manifest.end_time = "aborted", str(exc), time.time()
            manifest.write(out / MANIFEST_NAME)
        raise
    if manifest is not None:
        manifest.status, manifest.end_time = "ok", time.time()
        manifest.write(out / MANIFEST_NAME)
    return rows


def smoothed(values, window=10):
    """Trailing moving average."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return values
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
