"""AdamW training loop over an in-memory set of (blurred, sharp, mask) triples."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import NumericError
from .losses import pruning_loss, reconstruction_loss
from .metrics import psnr
from .model import LMDViT, forward, pad_input, philox
from .optim import AdamW, cosine_lr

LOG_FIELDS = ("step", "loss", "loss_r", "loss_p", "psnr", "lr")


@dataclass
class Batch:
    blur: np.ndarray
    sharp: np.ndarray
    mask: np.ndarray

    @classmethod
    def stack(cls, examples) -> "Batch":
        return cls(np.stack([e.blur for e in examples]), np.stack([e.sharp for e in examples]),
                   np.stack([e.mask for e in examples]))

    def take(self, idx) -> "Batch":
        return Batch(self.blur[idx], self.sharp[idx], self.mask[idx])


def loss_terms(model: LMDViT, batch: Batch, rng, tcfg: TrainConfig):
    res = forward(model, batch.blur, "train", rng)
    padded_mask = pad_input(batch.mask, model.config.pad_multiple)
    recon = reconstruction_loss(res.output, batch.sharp, batch.mask, tcfg.loss)
    prune = pruning_loss(res.confidences, padded_mask, tcfg.loss.prune_weight)
    return res, recon, prune


def _diagnose(model, batch, tcfg, state) -> str:
    """Replay a step with anomaly detection to name the first non-finite op."""
    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = state
    with T.detect_anomaly():
        try:
            _, recon, prune = loss_terms(model, batch, rng, tcfg)
            T.backward(recon + prune)
        except NumericError as exc:
            return str(exc)
        op = T.first_anomaly()
    T.clear_tape()
    return op or "unknown op"


def train(model: LMDViT, examples, tcfg: TrainConfig, log_path=None, on_step=None,
          config_hash: str | None = None) -> list[dict]:
    """Run ``tcfg.steps`` AdamW steps; returns the per-step log rows.

    Each row holds the loss terms and the batch PSNR measured by the forward
    pass of that step, i.e. before its parameter update.
    """
    data = examples if isinstance(examples, Batch) else Batch.stack(examples)
    n = data.blur.shape[0]
    rng = philox(tcfg.seed)
    opt = AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    rows = []
    order = np.arange(n)
    pos = n
    for step in range(tcfg.steps):
        if tcfg.batch_size >= n:
            idx = order
        else:
            if pos + tcfg.batch_size > n:
                order, pos = rng.permutation(n), 0
            idx = order[pos:pos + tcfg.batch_size]
            pos += tcfg.batch_size
        batch = data.take(idx)
        lr = cosine_lr(step, tcfg.steps, tcfg.lr, tcfg.min_lr, tcfg.lr_update_every)
        state = rng.bit_generator.state
        res, recon, prune = loss_terms(model, batch, rng, tcfg)
        loss = recon + prune
        if not math.isfinite(loss.item()):
            T.clear_tape()
            rng.bit_generator.state = state
            raise NumericError(f"non-finite loss at step {step}; first non-finite op: "
                               f"{_diagnose(model, batch, tcfg, state)}")
        row = {"step": step, "loss": loss.item(), "loss_r": recon.item(), "loss_p": prune.item(),
               "psnr": psnr(res.output.data, batch.sharp), "lr": lr}
        model.zero_grad()
        T.backward(loss)
        opt.step(lr)
        rows.append(row)
        if on_step is not None:
            on_step(row, res)
    if log_path is not None:
        write_log(log_path, rows, config_hash)
    return rows


def write_log(path, rows, config_hash: str | None = None) -> None:
    """CSV log; a leading ``# config <hash>`` line records the run configuration."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
