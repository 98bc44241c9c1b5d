"""scikit-learn style wrapper around the grounding model and its trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .boxes import accuracy_from_arrays
from .data import GroundingSample, stack
from .errors import DimensionError
from .model import GroundingModel, ModelConfig
from .train import TrainConfig, fit_arrays, load_model, predict_arrays, save_model


def _split_inputs(X, y=None):
    """Accept a list of ``GroundingSample`` or of ``(image, tokens)`` pairs."""
    if len(X) == 0:
        raise DimensionError("empty input")
    if isinstance(X[0], GroundingSample):
        images, tokens, boxes = stack(X)
        return images, tokens, boxes if y is None else _check_boxes(y, len(X))
    images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in X])
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"images must be [3, H, W], got {images.shape[1:]}")
    tokens = [list(map(int, t)) for _, t in X]
    return images, tokens, None if y is None else _check_boxes(y, len(X))


def _check_boxes(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, 4):
        raise DimensionError(f"targets must have shape ({n}, 4), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DimensionError("targets contain non-finite values")
    return y


class GroundingRegressor(BaseEstimator):
    """Predict one ``(cx, cy, w, h)`` box per (image, expression) pair.

    ``X`` is a list of ``GroundingSample`` objects (targets taken from them
    when ``y`` is omitted) or of ``(image [3, H, W], token ids)`` pairs.
    ``score`` returns accuracy@0.5 as a fraction.
    """

    def __init__(
        self,
        num_stages=6,
        d_model=64,
        num_heads=4,
        ffn_dim=256,
        use_verification=True,
        use_context=True,
        multi_stage=True,
        epochs=300,
        batch_size=32,
        base_lr=5e-4,
        encoder_lr=5e-5,
        weight_decay=1e-4,
        grad_clip=0.1,
        lambda_giou=2.0,
        lambda_l1=5.0,
        dtype="float32",
        random_state=0,
    ):
        self.num_stages = num_stages
        self.d_model = d_model
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.use_verification = use_verification
        self.use_context = use_context
        self.multi_stage = multi_stage
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.encoder_lr = encoder_lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.lambda_giou = lambda_giou
        self.lambda_l1 = lambda_l1
        self.dtype = dtype
        self.random_state = random_state

    def _configs(self, image_size: int) -> TrainConfig:
        model = ModelConfig(
            num_stages=self.num_stages,
            d_model=self.d_model,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            use_verification=self.use_verification,
            use_context=self.use_context,
            multi_stage=self.multi_stage,
            image_size=image_size,
            dtype=self.dtype,
        )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            encoder_lr=self.encoder_lr,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            lambda_giou=self.lambda_giou,
            lambda_l1=self.lambda_l1,
            seed=self.random_state,
            model=model,
        )

    def fit(self, X, y=None):
        images, tokens, boxes = _split_inputs(X, y)
        if boxes is None:
            raise DimensionError("y is required when X holds (image, tokens) pairs")
        config = self._configs(images.shape[-1])
        self.model_ = GroundingModel(config.model, seed=self.random_state)
        self.history_ = fit_arrays(self.model_, images, tokens, boxes, config)
        self.n_features_in_ = 2
        return self

    def predict_stages(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images, tokens, _ = _split_inputs(X)
        return predict_arrays(self.model_, images, tokens)

    def predict(self, X) -> np.ndarray:
        return self.predict_stages(X)[:, -1]

    def score(self, X, y=None) -> float:
        images, tokens, boxes = _split_inputs(X, y)
        if boxes is None:
            raise DimensionError("y is required when X holds (image, tokens) pairs")
        check_is_fitted(self, "model_")
        pred = predict_arrays(self.model_, images, tokens)[:, -1]
        return accuracy_from_arrays(pred, boxes) / 100.0

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_model(self.model_, path)

    @classmethod
    def from_checkpoint(cls, path) -> "GroundingRegressor":
        model = load_model(path)
        c = model.config
        est = cls(
            num_stages=c.num_stages, d_model=c.d_model, num_heads=c.num_heads, ffn_dim=c.ffn_dim,
            use_verification=c.use_verification, use_context=c.use_context, multi_stage=c.multi_stage,
            dtype=c.dtype,
        )
        est.model_ = model
        est.n_features_in_ = 2
        return est

