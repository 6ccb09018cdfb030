"""Deterministic training, Dice evaluation and the freeze/fine-tune transfer experiment.

Segmentation trains with per-pixel softmax cross-entropy over the four
classes; the auto-encoder task trains with mean-squared error against the
replicated-image target. Shuffling, and therefore the whole run, is a pure
function of the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .data import NUM_CLASSES, Sample, autoencoder_target
from .errors import NumericError, PrrmError, ShapeError, UnknownKeyError
from .models import Model, ParamKey, build_model
from .rng import Rng, derive_seed
from .tensor import Tensor

TASK_SEG = "seg"
TASK_AUTO = "auto"

EVAL_BATCH = 32


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 8
    epochs: int = 30
    seed: int = 0
    task: str = TASK_SEG
    freeze_mask: frozenset[ParamKey] = field(default_factory=frozenset)


@dataclass(frozen=True)
class EvalResult:
    dice_per_class: tuple[float, float, float, float]
    dice_mean: float


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int) -> float:
    """2|P∩G| / (|P|+|G|) for one class; 1.0 when both sets are empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class_id must be in 0..{NUM_CLASSES - 1}")
    p = pred_mask == class_id
    g = gt_mask == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def _stack_masks(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples]).astype(np.int64)


def seg_loss_grad(logits: Tensor, masks: np.ndarray) -> tuple[float, Tensor]:
    """Mean per-pixel softmax cross-entropy and its gradient w.r.t. logits."""
    z = logits.data
    n, c, h, w = z.shape
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    onehot = np.eye(c, dtype=z.dtype)[masks].transpose(0, 3, 1, 2)
    logp_t = (z - zmax - np.log(denom)) * onehot
    count = n * h * w
    loss = float(-logp_t.sum() / count)
    grad = (p - onehot) / np.asarray(count, dtype=z.dtype)
    return loss, Tensor(grad.astype(z.dtype))


def mse_loss_grad(logits: Tensor, target: np.ndarray) -> tuple[float, Tensor]:
    diff = logits.data - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, Tensor(grad.astype(logits.dtype))


def evaluate(m: Model, val_data: list[Sample]) -> EvalResult:
    """Eval-mode Dice: per-image per-class Dice, then mean over images."""
    if not val_data:
        raise PrrmError("empty validation set")
    sums = np.zeros(NUM_CLASSES, dtype=np.float64)
    n_total = len(val_data)
    for start in range(0, n_total, EVAL_BATCH):
        chunk = val_data[start : start + EVAL_BATCH]
        x = Tensor(_stack_images(chunk))
        logits = m.forward(x, "eval")
        pred = logits.data.argmax(axis=1)
        gt = _stack_masks(chunk)
        for cls in range(NUM_CLASSES):
            p = pred == cls
            g = gt == cls
            inter = (p & g).sum(axis=(1, 2)).astype(np.float64)
            denom = p.sum(axis=(1, 2)) + g.sum(axis=(1, 2))
            per_image = np.where(denom == 0, 1.0, 2.0 * inter / np.maximum(denom, 1))
            sums[cls] += per_image.sum()
    per_class = sums / n_total
    return EvalResult(
        dice_per_class=tuple(float(v) for v in per_class),
        dice_mean=float(per_class.mean()),
    )


def train(
    m: Model,
    data: list[Sample],
    cfg: TrainConfig,
    val_data: list[Sample] | None = None,
) -> tuple[Model, list[dict]]:
    """Train in place; returns the model and per-epoch history.

    History entries carry the mean training loss of the epoch and, when
    val_data is given, the validation dice_mean.
    """
    if not data:
        raise PrrmError("empty training set")
    if cfg.batch > len(data):
        raise PrrmError(f"batch {cfg.batch} exceeds dataset size {len(data)}")
    if cfg.task not in (TASK_SEG, TASK_AUTO):
        raise PrrmError(f"unknown task {cfg.task!r}")
    valid_keys = set(m.param_keys())
    for key in cfg.freeze_mask:
        if key not in valid_keys:
            raise UnknownKeyError(f"freeze key {key.canonical()} not in {m.arch_id}")

    images = _stack_images(data)
    if cfg.task == TASK_SEG:
        masks = _stack_masks(data)
    else:
        targets = np.stack([autoencoder_target(s).data for s in data])

    freeze = frozenset(cfg.freeze_mask)
    trainable = m.trainable_params()
    freeze_flags = [key in freeze for key, _ in trainable]
    params = [t for _, t in trainable]
    velocity = [Tensor(np.zeros_like(t.data)) for t in params]

    shuffle_rng = Rng(derive_seed(cfg.seed, "train/shuffle"))
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(data))
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(data), cfg.batch):
            idx = order[start : start + cfg.batch]
            x = Tensor(images[idx])
            logits, values, caches = m.forward_train_cached(x, freeze=freeze)
            if cfg.task == TASK_SEG:
                loss, grad = seg_loss_grad(logits, masks[idx])
            else:
                loss, grad = mse_loss_grad(logits, targets[idx])
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {steps} (task={cfg.task})"
                )
            m.backward_cached(values, caches, grad)
            ops.sgd_step(params, cfg.lr, cfg.momentum, velocity, freeze_flags)
            epoch_loss += loss
            steps += 1
        entry = {"epoch": epoch, "loss": epoch_loss / max(steps, 1)}
        if val_data is not None:
            entry["val_dice_mean"] = evaluate(m, val_data).dice_mean
        history.append(entry)
    return m, history


def run_transfer_experiment(
    source: Model,
    reusable: set[ParamKey],
    data_small: list[Sample],
    data_val: list[Sample],
    mode: str,
    cfg: TrainConfig,
) -> tuple[Model, dict]:
    """One row of the transfer table: scratch, freeze or finetune.

    scratch ignores the source parameters entirely; freeze copies the
    reusable set and keeps it fixed; finetune copies the reusable set and
    trains everything.
    """
    if mode not in ("scratch", "freeze", "finetune"):
        raise PrrmError(f"unknown transfer mode {mode!r}")
    target = build_model(source.arch_id, cfg.seed)
    valid = set(target.param_keys())
    unknown = {k for k in reusable if k not in valid}
    if unknown:
        raise UnknownKeyError(
            f"reusable keys not in {source.arch_id}: "
            + ", ".join(sorted(k.canonical() for k in unknown))
        )

    run_cfg = cfg
    if mode == "scratch":
        run_cfg = replace(cfg, freeze_mask=frozenset())
    else:
        for key in sorted(reusable, key=ParamKey.order):
            target.set_param(key, source.get_param(key))
        run_cfg = replace(
            cfg, freeze_mask=frozenset(reusable) if mode == "freeze" else frozenset()
        )
    target, _ = train(target, data_small, run_cfg)
    result = evaluate(target, data_val)
    row = {
        "mode": mode,
        "samples": len(data_small),
        "dice_per_class": list(result.dice_per_class),
        "dice_mean": result.dice_mean,
    }
    return target, row
