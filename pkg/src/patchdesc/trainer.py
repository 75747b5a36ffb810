"""Descriptor training loop: batching, optimization, logging, checkpoints.

Each step forwards the anchor and positive patch stacks of one batch
through the network in train mode as a single concatenated pass, applies
the configured mining loss, backpropagates, and takes one SGD-momentum
step.  Validation metrics, an append-only CSV log, and per-epoch
checkpoints make runs resumable and auditable.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError
from .losses import adaptive_margin_triplet_loss, hardnet_loss, triplet_loss
from .matching import match_nn
from .model import DescriptorNet, preprocess_patch, save_checkpoint
from .nn_core import sgd_momentum_step
from .util import dequantize_u8, make_rng, tune_allocator

LOG_HEADER = ("epoch,batch,loss,epoch_mean_loss,val_precision,"
              "val_matching_score,wall_seconds")
LOSS_KINDS = ("hardnet", "triplet", "adaptive")


@dataclass
class TrainConfig:
    """Training-run parameters.

    Attributes:
        batch_size: Pairs per optimization step; at least 2 (mining
            needs in-batch negatives).
        lr: Initial learning rate.
        momentum: Classical momentum coefficient.
        margin: Loss margin (ignored by the adaptive loss).
        loss: "hardnet", "triplet", or "adaptive".
        epochs: Full passes over the training split.
        seed: Master seed for init, splitting, shuffling, and sampling.
        checkpoint_path: Where the model is saved each epoch and at end.
        log_path: CSV training log destination.
        val_split: Fraction of pairs held out for validation.
        pe: Projection-error threshold (pixels) for validation metrics.
        lr_decay: Linearly decay the rate to lr/epochs over the run.
        holdout_by_frame: Hold out whole source frames for validation
            instead of a per-pair split.
        deterministic: Byte-stable outputs: wall-clock fields are logged
            as 0 so reruns with one seed produce identical files.
    """

    batch_size: int = 128
    lr: float = 0.001
    momentum: float = 0.9
    margin: float = 1.0
    loss: str = "hardnet"
    epochs: int = 50
    seed: int = 0
    checkpoint_path: str = "model.ckpt"
    log_path: str = "train_log.csv"
    val_split: float = 0.1
    pe: float = 5.0
    lr_decay: bool = False
    holdout_by_frame: bool = False
    deterministic: bool = False


@dataclass(frozen=True)
class TrainLogRecord:
    """One CSV log row; per-batch rows leave the epoch fields None and
    epoch-summary rows leave the loss field None."""

    epoch: int
    batch: int
    loss: float = None
    epoch_mean_loss: float = None
    val_precision: float = None
    val_matching_score: float = None
    wall_seconds: float = 0.0


def _check_config(cfg):
    if cfg.batch_size < 2:
        raise ParameterError(
            f"batch_size must be >= 2 for in-batch mining, got "
            f"{cfg.batch_size}")
    if not 0.0 < cfg.val_split < 1.0:
        raise ParameterError(
            f"val_split must lie in (0, 1), got {cfg.val_split}")
    if cfg.loss not in LOSS_KINDS:
        raise ParameterError(
            f"loss must be one of {LOSS_KINDS}, got {cfg.loss!r}")
    if cfg.epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {cfg.epochs}")
    if cfg.lr <= 0 or not 0.0 <= cfg.momentum < 1.0:
        raise ParameterError(
            f"need lr > 0 and momentum in [0, 1), got lr={cfg.lr} "
            f"momentum={cfg.momentum}")


def _split_indices(ds, cfg):
    """Seeded validation split; returns (train_idx, val_idx) arrays."""
    n = len(ds)
    rng = make_rng(cfg.seed, 1)
    n_val = int(round(n * cfg.val_split))
    n_val = min(max(n_val, 1), n - cfg.batch_size)
    if n_val < 1:
        return np.arange(n), np.zeros(0, dtype=np.int64)
    if cfg.holdout_by_frame:
        frame_ids = np.array([p.frame_id for p in ds.pairs])
        frames = rng.permutation(np.unique(frame_ids))
        held, count = [], 0
        for f in frames:
            if count >= n_val and held:
                break
            held.append(f)
            count += int((frame_ids == f).sum())
        val_mask = np.isin(frame_ids, held)
        if (~val_mask).sum() < cfg.batch_size:
            raise ParameterError(
                "frame hold-out leaves fewer training pairs than one batch")
        return np.flatnonzero(~val_mask), np.flatnonzero(val_mask)
    perm = rng.permutation(n)
    return perm[n_val:], perm[:n_val]


def _patch_bank(ds):
    """Standardize every patch once; float32 (anchors, positives) stacks.

    Standardization is per patch, so doing it up front is numerically
    identical to doing it per batch and saves the repeated passes.
    """
    anchors = np.stack([p.anchor for p in ds.pairs])
    positives = np.stack([p.positive for p in ds.pairs])
    both = preprocess_patch(dequantize_u8(
        np.concatenate([anchors, positives], axis=0)))
    return both[:len(ds)], both[len(ds):]


def _batch_tensor(bank, idx):
    """Gather the anchor+positive patches of one batch from the bank."""
    bank_a, bank_p = bank
    return np.concatenate([bank_a[idx], bank_p[idx]], axis=0)


def _loss_step(cfg, desc_a, desc_p, rng):
    if cfg.loss == "hardnet":
        return hardnet_loss(desc_a, desc_p, m=cfg.margin)
    if cfg.loss == "triplet":
        return triplet_loss(desc_a, desc_p, m=cfg.margin, rng=rng)
    return adaptive_margin_triplet_loss(desc_a, desc_p, rng=rng)


def _forward_descriptors(net, bank, idx, batch=256):
    out = []
    for lo in range(0, len(idx), batch):
        x = _batch_tensor(bank, idx[lo:lo + batch])
        half = len(x) // 2
        d = net.forward(x, train=False)
        out.append((d[:half], d[half:]))
    da = np.concatenate([a for a, _ in out], axis=0)
    dp = np.concatenate([p for _, p in out], axis=0)
    return da, dp


def validate(net, ds, val_idx, pe=5.0, bank=None):
    """Pooled nearest-neighbor validation over held-out pairs.

    All anchor descriptors are matched against all positive descriptors
    in eval mode.  A match is correct when it lands on a positive from
    the same source frame whose key-point lies within ``pe`` pixels of
    the anchor's key-point, so positives of the same physical location
    under different warps still count.  With one-way matching every
    anchor is matched, making the matching score equal precision here.

    Args:
        net: DescriptorNet, evaluated without state updates.
        ds: PairDataset.
        val_idx: Indices of the validation pairs; at least one.
        pe: Key-point distance threshold in source-frame pixels.
        bank: Optional pre-standardized patch stacks from _patch_bank.

    Returns:
        tuple: (precision, matching_score).
    """
    if len(val_idx) < 1:
        raise ParameterError("validation requires at least one pair")
    if bank is None:
        bank = _patch_bank(ds)
    desc_a, desc_p = _forward_descriptors(net, bank, np.asarray(val_idx))
    matches = match_nn(desc_a, desc_p)
    if not matches:
        return 0.0, 0.0
    pairs = [ds.pairs[i] for i in val_idx]
    n_correct = 0
    for m in matches:
        a, b = pairs[m.i], pairs[m.j]
        if a.frame_id != b.frame_id:
            continue
        gap = np.hypot(a.kp.x - b.kp.x, a.kp.y - b.kp.y)
        if gap <= pe:
            n_correct += 1
    precision = n_correct / len(matches)
    return precision, precision * (len(matches) / len(pairs))


def _write_log(records, path):
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in records:
            fh.write(f"{r.epoch},{r.batch},{fmt(r.loss)},"
                     f"{fmt(r.epoch_mean_loss)},{fmt(r.val_precision)},"
                     f"{fmt(r.val_matching_score)},{fmt(r.wall_seconds)}\n")


def train(ds, cfg):
    """Train a descriptor network on a positive-pair dataset.

    Per epoch: seeded shuffle of the training split, fixed-size batches
    with the trailing remainder dropped, one concatenated train-mode
    forward over anchors and positives, loss, backward, SGD-momentum
    step.  After every epoch the model is validated in eval mode and
    checkpointed to cfg.checkpoint_path; the CSV log goes to
    cfg.log_path.  Fully deterministic for a fixed seed.

    Args:
        ds: PairDataset with at least cfg.batch_size pairs.
        cfg: TrainConfig.

    Returns:
        tuple: (net, records) with the trained DescriptorNet and the
        TrainLogRecord list that was written to the log.

    Raises:
        ParameterError: On invalid config or a too-small dataset.
        NumericalError: If a batch produces a non-finite loss; the
            message carries the offending epoch and dataset indices.
    """
    _check_config(cfg)
    if len(ds) < cfg.batch_size:
        raise ParameterError(
            f"dataset has {len(ds)} pairs but one batch needs "
            f"{cfg.batch_size}")
    tune_allocator()
    train_idx, val_idx = _split_indices(ds, cfg)
    bank = _patch_bank(ds)
    net = DescriptorNet(seed=cfg.seed)
    opt_state = None
    records = []
    start = time.monotonic()

    def clock():
        return 0.0 if cfg.deterministic else time.monotonic() - start

    n_batches = len(train_idx) // cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = make_rng(cfg.seed, 2, epoch).permutation(train_idx)
        lr = cfg.lr
        if cfg.lr_decay:
            lr = cfg.lr * (1.0 - (epoch - 1) / cfg.epochs)
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = _batch_tensor(bank, idx)
            desc = net.forward(x, train=True)
            half = cfg.batch_size
            rng = make_rng(cfg.seed, 3, epoch, b)
            loss, da, dp = _loss_step(cfg, desc[:half], desc[half:], rng)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss {loss!r} at epoch {epoch} batch {b}; "
                    f"pair indices {sorted(int(i) for i in idx)}")
            net.backward(np.concatenate([da, dp], axis=0))
            opt_state = sgd_momentum_step(net.params(), net.grads(),
                                          opt_state, lr=lr,
                                          momentum=cfg.momentum)
            losses.append(float(loss))
            records.append(TrainLogRecord(epoch=epoch, batch=b,
                                          loss=float(loss),
                                          wall_seconds=clock()))
        mean_loss = float(np.mean(losses)) if losses else 0.0
        val_p = val_ms = None
        if len(val_idx):
            val_p, val_ms = validate(net, ds, val_idx, pe=cfg.pe, bank=bank)
        records.append(TrainLogRecord(epoch=epoch, batch=n_batches,
                                      epoch_mean_loss=mean_loss,
                                      val_precision=val_p,
                                      val_matching_score=val_ms,
                                      wall_seconds=clock()))
        save_checkpoint(net, cfg.checkpoint_path)
        _write_log(records, cfg.log_path)
    save_checkpoint(net, cfg.checkpoint_path)
    _write_log(records, cfg.log_path)
    return net, records
