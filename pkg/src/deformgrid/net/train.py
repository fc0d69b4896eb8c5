"""Training loop: Adam over the multi-resolution loss with early stopping.

Batches accumulate gradients sample by sample in a fixed order, so a fixed
seed reproduces the run bitwise (single-threaded BLAS assumed; the CLI pins
threads). The best-validation parameters are checkpointed, and every epoch
appends a row to a CSV log.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import formats
from ..sample import CH_SDF, Sample
from . import model, ops

log = logging.getLogger(__name__)

_SHUFFLE_TAG = 103


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0)
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    cache_samples: bool = False

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != model.STAGES:
            raise ValueError(f"need {model.STAGES} loss weights")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")


class SampleStore:
    """Ordered view of one split's sample files, loaded lazily."""

    def __init__(self, root, rel_paths: list, cache: bool = False):
        self.paths = [os.path.join(root, p) for p in rel_paths]
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = formats.read_sample(self.paths[i])
        if self._cache is not None:
            self._cache[i] = s
        return s


def sample_tensors(s: Sample):
    """(input, target pyramid, mask pyramid) in the sample's dtype."""
    x = s.input.data
    target = s.target.data
    targets = ops.target_pyramid(target, model.STAGES)
    occupancy = (x[..., CH_SDF] <= 0.0).astype(x.dtype)
    masks = [m.astype(x.dtype) for m in ops.occupancy_pyramid(occupancy, model.STAGES)]
    return x, targets, masks


def sample_loss(params: list, cfg: model.NetworkConfig, s: Sample, lambdas) -> float:
    x, targets, masks = sample_tensors(s)
    outs = model.forward(params, cfg, x)
    return ops.total_loss(outs, targets, masks, lambdas)[0]


def mean_loss(params: list, cfg: model.NetworkConfig, store: SampleStore, lambdas):
    if len(store) == 0:
        raise ValueError("empty sample store")
    total = 0.0
    for i in range(len(store)):
        total += sample_loss(params, cfg, store.load(i), lambdas)
    return total / len(store)


def _batch_gradients(params, cfg, store, indices, lambdas):
    """Mean loss and mean parameter gradients over the index list."""
    grads = None
    loss_sum = 0.0
    for i in indices:
        x, targets, masks = sample_tensors(store.load(i))
        cache = {}
        outs = model.forward(params, cfg, x, cache)
        loss, gouts = ops.total_loss(outs, targets, masks, lambdas)
        loss_sum += loss
        g = model.backward(params, cfg, cache, gouts)
        if grads is None:
            grads = g
        else:
            for acc, one in zip(grads, g):
                acc += one
    inv = 1.0 / len(indices)
    for acc in grads:
        acc *= np.asarray(inv, dtype=acc.dtype)
    return loss_sum * inv, grads


@dataclass
class TrainResult:
    params: list
    log: list = field(default_factory=list)  # dict rows: epoch, losses, time
    checkpoint_path: str = ""
    best_val_loss: float = np.inf
    epochs_run: int = 0
    stopped_early: bool = False


def _checkpoint_header(cfg: model.NetworkConfig, train_cfg: TrainingConfig,
                       epoch: int, val_loss: float) -> dict:
    return {
        "grid_n": cfg.grid_n,
        "stage_channels": list(cfg.stage_channels),
        "kernel_size": cfg.kernel_size,
        "in_channels": cfg.in_channels,
        "out_channels": cfg.out_channels,
        "seed": train_cfg.seed,
        "epoch": epoch,
        "val_loss": val_loss,
    }


def net_config_from_header(header: dict) -> model.NetworkConfig:
    return model.NetworkConfig(
        grid_n=int(header["grid_n"]),
        stage_channels=tuple(header["stage_channels"]),
        kernel_size=int(header["kernel_size"]),
        in_channels=int(header["in_channels"]),
        out_channels=int(header["out_channels"]),
    )


def _write_log(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_time"])
        for r in rows:
            writer.writerow([
                r["epoch"],
                f"{r['train_loss']:.10e}",
                f"{r['val_loss']:.10e}",
                f"{r['wall_time']:.3f}",
            ])


def train(data_dir, net_cfg: model.NetworkConfig, train_cfg: TrainingConfig,
          out_dir) -> TrainResult:
    """Fit to the train split, early-stop on the val split.

    Writes checkpoint.dgnet (best validation parameters) and
    training_log.csv under out_dir.
    """
    manifest = formats.read_manifest(os.path.join(data_dir, "manifest.txt"))
    train_store = SampleStore(
        data_dir, manifest.paths("train"), cache=train_cfg.cache_samples
    )
    val_store = SampleStore(
        data_dir, manifest.paths("val"), cache=train_cfg.cache_samples
    )
    if len(train_store) == 0 or len(val_store) == 0:
        raise ValueError(
            f"need nonempty splits, got {len(train_store)} train / "
            f"{len(val_store)} val"
        )

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.dgnet")
    log_path = os.path.join(out_dir, "training_log.csv")

    params = model.init_params(net_cfg, seed=train_cfg.seed)
    state = ops.AdamState.for_params(params)
    shuffler = np.random.default_rng([_SHUFFLE_TAG, train_cfg.seed])
    result = TrainResult(params=params, checkpoint_path=ckpt_path)

    t0 = time.perf_counter()
    bad_epochs = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = shuffler.permutation(len(train_store))
        train_sum = 0.0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = order[lo : lo + train_cfg.batch_size]
            loss, grads = _batch_gradients(
                params, net_cfg, train_store, batch, train_cfg.lambdas
            )
            train_sum += loss * len(batch)
            ops.adam_step(
                params, grads, state,
                learning_rate=train_cfg.learning_rate,
                beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
            )
        train_loss = train_sum / len(train_store)
        val_loss = mean_loss(params, net_cfg, val_store, train_cfg.lambdas)

        result.epochs_run = epoch
        result.log.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "wall_time": time.perf_counter() - t0,
        })
        _write_log(log_path, result.log)
        log.info(
            "epoch %d/%d: train %.4e, val %.4e (%.0fs)",
            epoch, train_cfg.max_epochs, train_loss, val_loss,
            time.perf_counter() - t0,
        )

        first_epoch = epoch == 1
        if val_loss < result.best_val_loss or first_epoch:
            # epoch 1 always writes so a checkpoint exists even if training
            # immediately diverges to NaN
            result.best_val_loss = min(result.best_val_loss, val_loss)
            bad_epochs = 0
            formats.write_checkpoint(
                ckpt_path,
                _checkpoint_header(net_cfg, train_cfg, epoch, val_loss),
                params,
                state={"step": state.step, "m": state.m, "v": state.v},
            )
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                result.stopped_early = True
                break

    # hand back the best-validation parameters, not the last iterate
    _, best_params, _ = formats.read_checkpoint(ckpt_path)
    result.params = best_params
    return result


def infer(params: list, cfg: model.NetworkConfig, x: np.ndarray):
    """Full-resolution displacement estimate and elapsed seconds."""
    t0 = time.perf_counter()
    out = model.forward(params, cfg, x)[0]
    return out, time.perf_counter() - t0
