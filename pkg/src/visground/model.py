"""Verification, language-guided context encoding and the multi-stage decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import Box
from .encoders import FeatureMap, TextEmbeddings, TextEncoder, VisualEncoder
from .errors import ConfigError, DimensionError
from .nn import FFN, MLP3, LayerNorm, Linear, Module, MultiHeadAttention, RelativeEncodingTable, param
from .tensor import Tensor

SIGMA_FLOOR = 1e-3


@dataclass
class ModelConfig:
    num_stages: int = 6
    d_model: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    use_verification: bool = True
    use_context: bool = True
    multi_stage: bool = True
    visual_layers: int = 2
    text_layers: int = 2
    patch_size: int = 8
    image_size: int = 64
    max_text_len: int = 16
    vocab_size: int = 32
    share_box_head: bool = True
    alpha_init: float = 1.0
    sigma_init: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def stages(self) -> int:
        return self.num_stages if self.multi_stage else 1

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config field {unknown[0]!r}")
        return cls(**d)


@dataclass
class TargetQueryState:
    t_q: Tensor
    t_l: Tensor | None = None
    t_v: Tensor | None = None
    t_q_next: Tensor | None = None
    attention: Tensor | None = None


@dataclass
class StagePredictions:
    """Per-stage boxes ``[B, N, 4]`` plus attention diagnostics as arrays."""

    boxes: Tensor
    score_map: np.ndarray | None = None
    stage_attention: list[np.ndarray] = field(default_factory=list)
    context_attention: np.ndarray | None = None

    @property
    def num_stages(self) -> int:
        return self.boxes.shape[-2]

    def box_list(self, sample: int = 0) -> list[Box]:
        return [Box(*map(float, row)) for row in self.boxes.data[sample]]

    def final_boxes(self) -> np.ndarray:
        return self.boxes.data[:, -1, :]


def verification_kernel(cos: Tensor, alpha: Tensor, sigma: Tensor) -> Tensor:
    """``alpha * exp(-(1 - cos)^2 / (2 sigma^2))`` with sigma floored at 1e-3."""
    sig = T.clamp_min(sigma, SIGMA_FLOOR)
    d = 1.0 - cos
    return alpha * T.exp(-(d * d) / (2.0 * sig * sig))


class VerificationModule(Module):
    def __init__(self, d_model, num_heads, rng, dtype=np.float32, alpha=1.0, sigma=0.5):
        self.cross_attention = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.proj_v = Linear(d_model, d_model, rng, dtype)
        self.proj_s = Linear(d_model, d_model, rng, dtype)
        self.alpha = param(alpha, dtype)
        self.sigma = param(sigma, dtype)

    def __call__(self, fv: Tensor, text: TextEmbeddings, text_pos: np.ndarray) -> tuple[Tensor, Tensor]:
        """Return the score map ``[..., HW]`` and the semantic map ``F_s``."""
        if fv.shape[-1] != text.channels:
            raise DimensionError(f"visual channels {fv.shape[-1]} != text channels {text.channels}")
        fs, _ = self.cross_attention(fv, text.values + text_pos, text.values, key_mask=text.mask)
        cos = (T.l2_normalize(self.proj_v(fv)) * T.l2_normalize(self.proj_s(fs))).sum(axis=-1)
        return verification_kernel(cos, self.alpha, self.sigma), fs


class ContextEncoder(Module):
    def __init__(self, d_model, num_heads, grid, rng, dtype=np.float32):
        self.text_attention = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.guided_self_attention = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self._rel = RelativeEncodingTable(grid, grid, d_model, dtype)

    @property
    def rel(self) -> RelativeEncodingTable:
        return self._rel

    def __call__(self, fv: Tensor, text: TextEmbeddings, text_pos: np.ndarray):
        """Return ``(F_vc, F_c, attention)``; values of the guided attention are ``F_v``."""
        if fv.shape[-1] != text.channels:
            raise DimensionError(f"visual channels {fv.shape[-1]} != text channels {text.channels}")
        fc, _ = self.text_attention(fv, text.values + text_pos, text.values, key_mask=text.mask)
        qk = fv + fc
        fvc, attn = self.guided_self_attention(qk, qk, fv, rel=self._rel)
        return fvc, fc, attn


def modulate(fv: Tensor, fvc: Tensor | None, scores: Tensor | None) -> Tensor:
    """``(F_v + F_vc) * S`` with S broadcast over channels; missing parts drop out."""
    x = fv if fvc is None else fv + fvc
    if scores is None:
        return x
    if scores.shape != fv.shape[:-1]:
        raise DimensionError(f"score map shape {scores.shape} does not match feature map {fv.shape[:-1]}")
    return x * scores.reshape(*scores.shape, 1)


class DecoderStage(Module):
    def __init__(self, d_model, num_heads, ffn_dim, rng, dtype=np.float32):
        self.text_attention = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.visual_attention = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.ffn = FFN(d_model, ffn_dim, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)

    def __call__(self, state: TargetQueryState, text: TextEmbeddings, text_pos, fv_hat: Tensor, fv: Tensor):
        # keys are the modulated map, values the raw visual features
        t_l, _ = self.text_attention(state.t_q, text.values + text_pos, text.values, key_mask=text.mask)
        t_v, attn = self.visual_attention(t_l, fv_hat, fv)
        t_mid = self.norm1(state.t_q + t_v)
        t_next = self.norm2(t_mid + self.ffn(t_mid))
        return TargetQueryState(state.t_q, t_l, t_v, t_next, attn)


def predict_box(t_q: Tensor, head: MLP3) -> Tensor:
    return T.sigmoid(head(t_q))


class GroundingModel(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        cfg = config or ModelConfig()
        self._config = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        C, heads, ffn = cfg.d_model, cfg.num_heads, cfg.ffn_dim
        self.visual_encoder = VisualEncoder(
            C, heads, ffn, cfg.visual_layers, cfg.patch_size, cfg.image_size, rng, dtype
        )
        self.text_encoder = TextEncoder(cfg.vocab_size, C, heads, ffn, cfg.text_layers, cfg.max_text_len, rng, dtype)
        if cfg.use_verification:
            self.verification = VerificationModule(C, heads, rng, dtype, cfg.alpha_init, cfg.sigma_init)
        if cfg.use_context:
            self.context = ContextEncoder(C, heads, cfg.grid, rng, dtype)
        self.target_query = param(rng.normal(0.0, 1.0, size=C), dtype)
        self.stages = [DecoderStage(C, heads, ffn, rng, dtype) for _ in range(cfg.stages)]
        if cfg.share_box_head:
            self.box_head = MLP3(C, rng, dtype)
        else:
            self.box_heads = [MLP3(C, rng, dtype) for _ in range(cfg.stages)]

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def dtype(self):
        return np.dtype(self._config.dtype)

    def encoder_parameters(self) -> list[Tensor]:
        return self.visual_encoder.parameters() + self.text_encoder.parameters()

    def head_for(self, stage: int) -> MLP3:
        return self.box_head if self._config.share_box_head else self.box_heads[stage]

    def encode(self, images, token_lists: Sequence[Sequence[int]]) -> tuple[FeatureMap, TextEmbeddings, np.ndarray]:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        fmap = self.visual_encoder(T.Tensor(images))
        ids, mask = self.text_encoder.pack(token_lists)
        text = self.text_encoder(ids, mask)
        text_pos = self.text_encoder.positions[: ids.shape[1]]
        return fmap, text, text_pos

    def forward_batch(self, images, token_lists: Sequence[Sequence[int]]) -> StagePredictions:
        """Run the network on a batch of ``[B, 3, H, W]`` images and token lists.

        Padded text positions are masked out of every attention, so each
        sample's output equals that of a batch of one.
        """
        fmap, text, text_pos = self.encode(images, token_lists)
        fv = fmap.values
        scores = None
        fvc = None
        ctx_attn = None
        if self._config.use_verification:
            scores, _ = self.verification(fv, text, text_pos)
        if self._config.use_context:
            fvc, _, ctx_attn = self.context(fv, text, text_pos)
        fv_hat = modulate(fv, fvc, scores)

        batch = fv.shape[0]
        state = TargetQueryState(T.Tensor(np.zeros((batch, 1, 1), dtype=self.dtype)) + self.target_query)
        boxes, attn_maps = [], []
        for i, stage in enumerate(self.stages):
            state = stage(state, text, text_pos, fv_hat, fv)
            boxes.append(predict_box(state.t_q_next, self.head_for(i)))
            attn_maps.append(state.attention.data[:, :, 0, :])
            state = TargetQueryState(state.t_q_next)
        g = fmap.height
        return StagePredictions(
            boxes=T.concat(boxes, axis=-2),
            score_map=None if scores is None else scores.data.reshape(batch, g, g),
            stage_attention=attn_maps,
            context_attention=None if ctx_attn is None else ctx_attn.data,
        )

    def forward(self, image, tokens: Sequence[int]) -> StagePredictions:
        return self.forward_batch(np.asarray(image)[None], [tokens])

    __call__ = forward_batch
