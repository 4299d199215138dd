"""Training loop, metrics, attention-map export.

SGD with momentum and optional weight decay, deterministic given the config
seed: batch order is derived from (seed, epoch), the moment-exchange pairing
stream from a dedicated seed, and initialization happens in the caller. The
loop aborts with a diagnostic if the loss leaves the finite range, persists
the best-validation checkpoint, and appends one CSV row per metric.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attacks import AttackSpec, robust_accuracy
from .data import DatasetSplit, batches
from .model import LnlModel, save_checkpoint
from .moex import make_plan, moex_loss
from .nn import cross_entropy, softmax
from .tensor import DomainError, Tensor

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "TrainingDivergedError",
    "SGD",
    "sgd_step",
    "train",
    "evaluate",
    "export_attention",
    "write_heatmap_csv",
    "write_heatmap_pgm",
    "METRICS_HEADER",
]

METRICS_HEADER = "epoch,split,metric,value"


class TrainingDivergedError(RuntimeError):
    """Loss left the finite range; training state at the failure is in the
    message."""


@dataclass
class TrainConfig:
    dataset: str = "synth"
    batch_size: int = 32
    epochs: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    lr_schedule: str = "constant"  # constant | cosine
    clip_norm: float = 1.0  # 0 disables clipping
    moex_enabled: bool = False
    moex_lambda: float = 0.9
    moex_layer: int = 0
    moex_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.moex_enabled and self.batch_size < 2:
            raise ValueError("moment exchange needs batches of at least 2")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.moex_enabled and not 0.0 < self.moex_lambda < 1.0:
            raise ValueError("moex lambda must lie in (0, 1)")

    def epoch_lr(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_top1: float
    val_top5: float
    robust: Optional[dict] = None

    def __post_init__(self):
        if not 0.0 <= self.val_top1 <= self.val_top5 <= 1.0:
            raise ValueError(
                f"metric bounds violated: top1={self.val_top1} top5={self.val_top5}"
            )


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``;
    returns the pre-clip norm."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum())
                          for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


def sgd_step(
    params: list[Tensor],
    velocities: list[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- m v + g + w theta; theta <- theta - lr v; gradients cleared."""
    for p, v in zip(params, velocities):
        if p.grad is None:
            raise ValueError("sgd step with a missing gradient")
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data = p.data - lr * v
        p.grad = None


class SGD:
    def __init__(self, params: list[Tensor], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.velocities, self.lr, self.momentum,
                 self.weight_decay)


def evaluate(model, split: DatasetSplit, batch_size: int = 128) -> tuple[float, float]:
    """(top-1, top-k) accuracy with k = min(5, classes); ties in the logit
    ordering break toward the lowest class index. Augmentation hooks are
    never active here."""
    if len(split) == 0:
        raise ValueError("evaluate on an empty split")
    k = min(5, split.num_classes)
    top1 = top5 = 0
    for pair in batches(split, batch_size, shuffle=False):
        logits = model.forward(pair.images).logits.data
        ranked = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
        top1 += int((ranked[:, 0] == pair.labels).sum())
        top5 += int((ranked == pair.labels[:, None]).any(axis=1).sum())
    return top1 / len(split), top5 / len(split)


def _append_metrics(path: str, epoch: int, rows: list[tuple[str, str, float]]) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a") as fh:
        if fresh:
            fh.write(METRICS_HEADER + "\n")
        for split_name, metric, value in rows:
            fh.write(f"{epoch},{split_name},{metric},{value}\n")


def train(
    model: LnlModel,
    data: dict[str, DatasetSplit],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    eval_attacks: Optional[list[AttackSpec]] = None,
    log=None,
) -> list[MetricsRecord]:
    """Run the full training schedule; returns one MetricsRecord per epoch.

    With ``out_dir`` set, metrics stream to ``metrics.csv`` and the best
    validation checkpoint is kept at ``best.ckpt``. ``eval_attacks`` adds a
    post-training robustness sweep on the validation split.
    """
    train_split, val_split = data["train"], data["val"]
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    moex_rng = np.random.default_rng(np.random.SeedSequence([cfg.moex_seed, 0x30EC]))
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    records: list[MetricsRecord] = []
    best_top1 = -1.0
    step_idx = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.epoch_lr(epoch)
        losses = []
        for pair in batches(train_split, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            try:
                if cfg.moex_enabled and len(pair.labels) >= 2:
                    plan = make_plan(len(pair.labels), cfg.moex_lambda,
                                     cfg.moex_layer, moex_rng)
                    result = model.forward(pair.images, train=True,
                                           moex_plan=plan, moex_labels=pair.labels)
                    ya, yb = result.moex_pair
                    loss = moex_loss(result.logits, ya, yb, cfg.moex_lambda)
                else:
                    result = model.forward(pair.images, train=True)
                    loss = cross_entropy(result.logits, pair.labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise DomainError(f"loss is {value}")
                loss.backward()
                if cfg.clip_norm:
                    clip_gradients(opt.params, cfg.clip_norm)
                opt.step()
            except DomainError as e:
                raise TrainingDivergedError(
                    f"diverged at epoch {epoch} step {step_idx}: {e}"
                ) from e
            losses.append(value)
            step_idx += 1

        try:
            top1, top5 = evaluate(model, val_split)
        except DomainError as e:
            raise TrainingDivergedError(
                f"diverged evaluating after epoch {epoch}: {e}"
            ) from e
        record = MetricsRecord(epoch, float(np.mean(losses)), top1, top5)
        records.append(record)
        if log:
            log(f"epoch {epoch:3d}  loss {record.train_loss:.4f}  "
                f"val top1 {top1:.4f}  top5 {top5:.4f}")
        if metrics_path:
            _append_metrics(metrics_path, epoch, [
                ("train", "loss", record.train_loss),
                ("val", "top1", top1),
                ("val", "top5", top5),
            ])
        if out_dir and top1 > best_top1:
            best_top1 = top1
            save_checkpoint(os.path.join(out_dir, "best.ckpt"), model)

    if eval_attacks:
        robust = {}
        val_images = val_split.images_float()
        for spec in eval_attacks:
            rep = robust_accuracy(model, val_images, val_split.labels, spec)
            key = f"{spec.family}_eps{spec.epsilon:g}"
            robust[key] = rep.robust_accuracy
            robust["clean"] = rep.clean_accuracy
            if metrics_path:
                _append_metrics(metrics_path, cfg.epochs - 1,
                                [("val", f"robust_{key}", rep.robust_accuracy)])
        records[-1].robust = robust
        _warn_if_ordering_violated(robust)
    return records


def _warn_if_ordering_violated(robust: dict) -> None:
    """clean >= fgsm >= pgd is the empirically expected ordering; it is
    reported, not asserted."""
    clean = robust.get("clean")
    fgsm_accs = [v for k, v in robust.items() if k.startswith("fgsm")]
    pgd_accs = [v for k, v in robust.items() if k.startswith("pgd")]
    if clean is not None and fgsm_accs and clean < max(fgsm_accs) - 1e-9:
        warnings.warn(f"fgsm accuracy {max(fgsm_accs)} above clean {clean}")
    if fgsm_accs and pgd_accs and min(fgsm_accs) < max(pgd_accs) - 1e-9:
        warnings.warn(
            f"pgd accuracy {max(pgd_accs)} above fgsm {min(fgsm_accs)}"
        )


# -- attention-map export -----------------------------------------------------


def export_attention(
    model: LnlModel, image, layer: int
) -> tuple[np.ndarray, int, float]:
    """Class-token attention of one sentence-level block as a patch-grid
    heatmap, plus the prediction.

    The class token's attention row (head-averaged, self-attention entry
    dropped) is reshaped to the patch grid and min-max normalized to [0, 1];
    a constant row maps to a uniform 0.5 grid. Confidence is the softmax
    maximum of the logits.
    """
    depth = model.cfg.depth
    if not 0 <= layer < depth:
        raise ValueError(f"layer {layer} outside [0, {depth})")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    result = model.forward(Tensor(arr))
    attn = result.outer_attention[layer].data[0]      # (heads, T, T)
    row = attn.mean(axis=0)[0, 1:]                     # class token -> patches
    side = model.cfg.patch_grid
    grid = row.reshape(side, side)
    span = grid.max() - grid.min()
    if span < 1e-12:
        heatmap = np.full_like(grid, 0.5)
    else:
        heatmap = (grid - grid.min()) / span
    probs = softmax(result.logits).data[0]
    label = int(np.argmax(probs))
    return heatmap, label, float(probs[label])


def write_heatmap_csv(path: str, heatmap: np.ndarray) -> None:
    np.savetxt(path, heatmap, delimiter=",", fmt="%.8f")


def write_heatmap_pgm(path: str, heatmap: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    h, w = heatmap.shape
    pixels = np.clip(np.round(heatmap * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
