"""Training loop, evaluation, and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..losses import LossWeights, cross_entropy, diversity_loss, mask_overlap, total_loss
from ..network import Model, build_network
from ..tensor import NumericalError, Rng
from .checkpoint import Checkpoint
from .config import RunConfig, from_dict, parse_text, to_text
from .data import PartsDataset, generate_parts_dataset
from .metrics import alignment_baseline, mode_part_alignment
from .optim import OptimState, optimizer_step

log = logging.getLogger(__name__)

INIT_STREAM = 11
SHUFFLE_STREAM = 12
TEST_SEED_OFFSET = 7919
LOG_FIELDS = ("epoch", "step", "ce", "ld", "total", "train_acc")


def datasets_for(cfg: RunConfig) -> tuple[PartsDataset, PartsDataset]:
    train = generate_parts_dataset(cfg.data, cfg.seed, cfg.data.train_samples)
    test = generate_parts_dataset(cfg.data, cfg.seed + TEST_SEED_OFFSET, cfg.data.test_samples)
    return train, test


def init_model(cfg: RunConfig) -> Model:
    return build_network(cfg.arch, Rng(cfg.seed).spawn(INIT_STREAM))


def compute_loss(model: Model, x, y, lambda_d: float):
    """Forward + backward for one batch; returns (ce, ld, total, acc, grads)."""
    logits = model.forward(x)
    ce, grad_logits = cross_entropy(logits, y)
    ld = 0.0
    grad_masks = {}
    for name, block in model.mode_blocks():
        value, grad_m = diversity_loss(block.state.M)
        ld += value
        grad_masks[name] = lambda_d * grad_m
    _, grads = model.backward(grad_logits, grad_masks)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return ce, ld, total_loss(ce, ld, LossWeights(lambda_d)), acc, grads


def make_checkpoint(cfg: RunConfig, model: Model, opt: OptimState, rng: Rng, epoch: int) -> Checkpoint:
    return Checkpoint(
        to_text(cfg), epoch, rng.state(), opt.step,
        {k: v.copy() for k, v in model.parameters().items()},
        {k: v.copy() for k, v in model.buffers().items()},
        {k: v.copy() for k, v in opt.slots.items()},
    )


def restore(ckpt: Checkpoint) -> tuple[RunConfig, Model, OptimState, Rng]:
    cfg = from_dict(parse_text(ckpt.config_text))
    model = init_model(cfg)
    model.load_parameters({**ckpt.params, **ckpt.buffers})
    opt = OptimState(ckpt.opt_step, {k: v.copy() for k, v in ckpt.opt_slots.items()})
    return cfg, model, opt, Rng(*ckpt.rng_state)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    epochs_run: int
    final_train_acc: float
    test_metrics: dict | None


def train(cfg: RunConfig, out_dir, resume=None, epochs: int | None = None, evaluate_test: bool = True) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``epochs`` total epochs.

    Writes ``log.csv`` (one row per step), ``epoch_NNN.stra`` and ``last.stra``
    into ``out_dir``. Deterministic for a fixed config in single-threaded mode.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ckpt = Checkpoint.load(resume)
        cfg, model, opt, rng = restore(ckpt)
        start = ckpt.epoch
    else:
        model = init_model(cfg)
        opt = OptimState()
        rng = Rng(cfg.seed).spawn(SHUFFLE_STREAM)
        start = 0
    end = cfg.epochs if epochs is None else epochs
    train_ds, test_ds = datasets_for(cfg)
    log_path = out / "log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    model.set_training(True)
    last_acc = float("nan")
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_FIELDS)
        step = opt.step
        for epoch in range(start, end):
            lr = cfg.optimizer.lr_at(epoch)
            order = rng.permutation(len(train_ds))
            accs = []
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                ce, ld, tot, acc, grads = compute_loss(model, train_ds.images[idx], train_ds.labels[idx], cfg.lambda_d)
                if not np.isfinite(tot):
                    diag = out / "diagnostic.stra"
                    make_checkpoint(cfg, model, opt, rng, epoch).save(diag)
                    raise NumericalError(f"non-finite loss at epoch {epoch} step {step}; state saved to {diag}")
                optimizer_step(model.parameters(), grads, opt, cfg.optimizer, lr)
                step += 1
                accs.append(acc * len(idx))
                writer.writerow([epoch, step, repr(ce), repr(ld), repr(tot), repr(acc)])
            last_acc = float(np.sum(accs) / len(train_ds))
            fh.flush()
            ckpt = make_checkpoint(cfg, model, opt, rng, epoch + 1)
            ckpt.save(out / f"epoch_{epoch + 1:03d}.stra")
            ckpt.save(out / "last.stra")
            log.info("epoch %d lr %.4g train_acc %.4f", epoch + 1, lr, last_acc)
    metrics = evaluate(model, test_ds, cfg) if evaluate_test else None
    if metrics is not None:
        log.info("test accuracy %.4f", metrics["accuracy"])
    return TrainResult(out / "last.stra", log_path, end - start, last_acc, metrics)


def collect(model: Model, ds: PartsDataset, batch: int = 128):
    """Eval-mode pass; returns logits and per-block lists of (M, R)."""
    model.set_training(False)
    logits, masks, coefs = [], {}, {}
    try:
        for i in range(0, len(ds), batch):
            logits.append(model.forward(ds.images[i : i + batch]))
            for name, block in model.mode_blocks():
                masks.setdefault(name, []).append(block.state.M)
                coefs.setdefault(name, []).append(block.state.R)
    finally:
        model.set_training(True)
    return (
        np.concatenate(logits),
        {k: np.concatenate(v) for k, v in masks.items()},
        {k: np.concatenate(v) for k, v in coefs.items()},
    )


def evaluate(model: Model, ds: PartsDataset, cfg: RunConfig, radius: float | None = None, seed: int = 0) -> dict:
    """Accuracy, diversity loss, mask overlap and mode-part alignment.

    Mask metrics use the first mode-attention block. ``radius`` (pixels)
    defaults to half the part size plus one.
    """
    logits, masks, _ = collect(model, ds, cfg.eval_batch)
    out = {"accuracy": float(np.mean(np.argmax(logits, axis=1) == ds.labels))}
    if masks:
        M = next(iter(masks.values()))
        r = cfg.data.part_size / 2 + 1 if radius is None else radius
        hw = (cfg.data.image_size, cfg.data.image_size)
        out["ld"] = float(sum(diversity_loss(m)[0] for m in masks.values()))
        out["mask_overlap"] = mask_overlap(M) if M.shape[1] > 1 else 0.0
        out["alignment"] = mode_part_alignment(M, ds.part_positions, hw, r, Rng(seed))
        out["alignment_baseline"] = alignment_baseline(M, ds.part_positions, hw, r, Rng(seed + 1))
    return out
