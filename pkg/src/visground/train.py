"""AdamW training with split learning rates, encoder freezing and step decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .boxes import LossWeights, accuracy_from_arrays, iou_array, total_loss
from .data import GroundingSample, load_dataset, stack
from .errors import ConfigError, DimensionError, NumericError
from .model import GroundingModel, ModelConfig
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

ENCODER_PREFIXES = ("visual_encoder.", "text_encoder.")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    # 5x the usual 1e-4 / 1e-5 pair: the toy encoders train from scratch
    base_lr: float = 5e-4
    encoder_lr: float = 5e-5
    lr_decay_epoch: int | None = None  # default: 2/3 of epochs
    decay_factor: float = 10.0
    freeze_epochs: int | None = None  # default: 1/9 of epochs
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    seed: int = 0
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    max_steps: int | None = None
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.lr_decay_epoch is None:
            self.lr_decay_epoch = (2 * self.epochs) // 3
        if self.freeze_epochs is None:
            self.freeze_epochs = self.epochs // 9
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.encoder_lr > self.base_lr:
            raise ConfigError(f"encoder_lr {self.encoder_lr} exceeds base_lr {self.base_lr}")
        if not 0 <= self.freeze_epochs < self.epochs:
            raise ConfigError(f"freeze_epochs {self.freeze_epochs} must be in [0, epochs)")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_giou, self.lambda_l1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config field {unknown[0]!r}")
        return cls(**d)


def adamw_update(p, g, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One decoupled-decay Adam update; returns new ``(p, m, v)``.

    Decay is applied first (``p * (1 - lr * wd)``), then the bias-corrected
    moment step.
    """
    b1, b2 = betas
    p = p * (1 - lr * weight_decay)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    """AdamW over named parameter groups, with per-parameter step counts."""

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]], lrs: dict[str, float],
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.groups = groups
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, active: Sequence[str] | None = None) -> None:
        for gname in active if active is not None else self.groups:
            lr = self.lrs[gname]
            for name, p in self.groups[gname]:
                g = p.grad
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient for parameter {name}")
                st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "step": 0})
                st["step"] += 1
                dt = p.dtype
                new, st["m"], st["v"] = adamw_update(
                    p.data, g, st["m"], st["v"], st["step"], lr, self.betas, self.eps, self.weight_decay
                )
                p.data = new.astype(dt, copy=False)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(k)
    return total


def split_groups(model: GroundingModel) -> dict[str, list[tuple[str, Tensor]]]:
    groups: dict[str, list[tuple[str, Tensor]]] = {"base": [], "encoder": []}
    for name, p in model.named_parameters():
        groups["encoder" if name.startswith(ENCODER_PREFIXES) else "base"].append((name, p))
    return groups


def save_model(model: GroundingModel, path) -> Path:
    return checkpoint.save(path, model.state_dict(), model.config.to_dict())


def load_model(path) -> GroundingModel:
    tensors, cfg = checkpoint.load(path)
    if cfg is None:
        raise DimensionError(f"{path}: checkpoint carries no model config")
    model = GroundingModel(ModelConfig.from_dict(cfg))
    model.load_state_dict(tensors)
    return model


def fit_model(
    model: GroundingModel,
    samples: Sequence[GroundingSample],
    config: TrainConfig,
    on_epoch: Callable[[dict, GroundingModel], None] | None = None,
) -> list[dict]:
    """Optimise ``model`` in place; returns one metrics record per epoch."""
    images, tokens, boxes = stack(samples)
    return fit_arrays(model, images, tokens, boxes, config, on_epoch)


def fit_arrays(model, images, tokens, boxes, config: TrainConfig, on_epoch=None) -> list[dict]:
    """``fit_model`` on pre-stacked images ``[n, 3, S, S]``, token lists and boxes ``[n, 4]``."""
    images = np.asarray(images, dtype=model.dtype)
    boxes = np.asarray(boxes, dtype=np.float64)
    n = len(images)
    if len(tokens) != n or boxes.shape != (n, 4):
        raise DimensionError(f"{n} images but {len(tokens)} token lists and boxes of shape {boxes.shape}")
    groups = split_groups(model)
    opt = AdamW(groups, {"base": config.base_lr, "encoder": config.encoder_lr}, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    weights = config.loss_weights
    history: list[dict] = []
    steps = 0
    for epoch in range(1, config.epochs + 1):
        frozen = epoch <= config.freeze_epochs
        model.visual_encoder.set_requires_grad(not frozen)
        model.text_encoder.set_requires_grad(not frozen)
        decay = 1.0 / config.decay_factor if epoch > config.lr_decay_epoch else 1.0
        opt.lrs = {"base": config.base_lr * decay, "encoder": config.encoder_lr * decay}
        active = ["base"] if frozen else ["base", "encoder"]
        trainable = [p for g in active for _, p in groups[g]]

        perm = rng.permutation(n)
        loss_sum = 0.0
        preds = np.zeros((n, model.config.stages, 4))
        seen_idx = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            with Tape() as tape:
                out = model.forward_batch(images[idx], [tokens[i] for i in idx])
                loss = total_loss(out.boxes, boxes[idx], weights).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {steps + 1}")
            backward(loss, tape)
            tape.clear()
            clip_grad_norm(trainable, config.grad_clip)
            opt.step(active)
            model.zero_grad()
            preds[idx] = out.boxes.data
            seen_idx.append(idx)
            loss_sum += value * len(idx)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break

        seen_idx = np.concatenate(seen_idx)
        seen, gt_seen = preds[seen_idx], boxes[seen_idx]
        record = {
            "epoch": epoch,
            "loss": loss_sum / len(seen),
            "lr": dict(opt.lrs),
            "acc@0.5": accuracy_from_arrays(seen[:, -1], gt_seen),
            "per_stage_acc": [accuracy_from_arrays(seen[:, k], gt_seen) for k in range(seen.shape[1])],
        }
        if model.config.use_verification and float(model.verification.alpha.data) <= 0:
            log.warning("epoch %d: verification alpha is %.4g (<= 0)", epoch, float(model.verification.alpha.data))
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, model)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    model.set_requires_grad(True)
    return history


def predict_stages(model: GroundingModel, samples: Sequence[GroundingSample], batch_size: int = 64) -> np.ndarray:
    images, tokens, _ = stack(samples)
    return predict_arrays(model, images, tokens, batch_size)


def predict_arrays(model: GroundingModel, images, tokens, batch_size: int = 64) -> np.ndarray:
    """Per-stage boxes ``[n, N, 4]``."""
    images = np.asarray(images, dtype=model.dtype)
    out = np.zeros((len(images), model.config.stages, 4))
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = model.forward_batch(images[sl], tokens[sl]).boxes.data
    return out


def score_predictions(stage_boxes: np.ndarray, gt: np.ndarray) -> dict:
    return {
        "acc@0.5": accuracy_from_arrays(stage_boxes[:, -1], gt),
        "per_stage_acc": [accuracy_from_arrays(stage_boxes[:, k], gt) for k in range(stage_boxes.shape[1])],
        "mean_iou": float(np.mean(iou_array(stage_boxes[:, -1], gt))),
        "count": int(len(gt)),
    }


def evaluate_model(model: GroundingModel, samples: Sequence[GroundingSample]) -> dict:
    _, _, gt = stack(samples)
    return score_predictions(predict_stages(model, samples), gt)


def evaluate(checkpoint_path, dataset_path) -> dict:
    return evaluate_model(load_model(checkpoint_path), load_dataset(dataset_path))


def train(config: TrainConfig, dataset_path, out_dir) -> tuple[Path, Path]:
    """Train on a dataset file; writes ``model.ckpt`` and ``metrics.jsonl`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(dataset_path)
    model = GroundingModel(config.model, seed=config.seed)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def on_epoch(record, m):
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if config.checkpoint_every and record["epoch"] % config.checkpoint_every == 0:
            save_model(m, out / f"model_epoch{record['epoch']:04d}.ckpt")

    fit_model(model, samples, config, on_epoch)
    ckpt = save_model(model, out / "model.ckpt")
    return ckpt, metrics_path
