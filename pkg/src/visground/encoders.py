"""Toy feature extractors: patch-embedding image encoder and token text encoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError, VocabularyError
from .nn import EncoderLayer, Linear, Module, grid_encoding, param, sinusoidal_encoding
from .tensor import Tensor

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
RESERVED = (PAD, BOS, EOS)


class Vocabulary:
    """Bijective token <-> id map with the reserved tokens at ids 0, 1, 2."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self._ids[w] for w in words]
        except KeyError as e:
            raise VocabularyError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise VocabularyError(f"unknown token id {i}")
            out.append(self.tokens[int(i)])
        return out

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass
class FeatureMap:
    """Channels-last view of a C x H x W map: ``values`` is ``[..., H*W, C]``."""

    values: Tensor
    height: int
    width: int

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def to_chw(self) -> np.ndarray:
        v = self.values.data
        return np.moveaxis(v.reshape(*v.shape[:-2], self.height, self.width, v.shape[-1]), -1, -3)


@dataclass
class TextEmbeddings:
    """``values`` is ``[..., L, C]``; ``mask`` marks real (non-pad) positions."""

    values: Tensor
    mask: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.values.shape[-2]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


class VisualEncoder(Module):
    def __init__(self, d_model, num_heads, ffn_dim, num_layers, patch_size, image_size, rng, dtype=np.float32):
        if image_size % patch_size:
            raise ConfigError(f"image size {image_size} not divisible by patch size {patch_size}")
        self._patch = patch_size
        self._image_size = image_size
        self._grid = image_size // patch_size
        self._pos = grid_encoding(self._grid, self._grid, d_model).astype(dtype)
        self.patch_embed = Linear(3 * patch_size * patch_size, d_model, rng, dtype)
        self.layers = [EncoderLayer(d_model, num_heads, ffn_dim, rng, dtype) for _ in range(num_layers)]

    @property
    def grid(self) -> int:
        return self._grid

    def patchify(self, images: Tensor) -> Tensor:
        *lead, c, h, w = images.shape
        if h != self._image_size or w != self._image_size:
            raise ConfigError(f"expected {self._image_size}x{self._image_size} image, got {h}x{w}")
        p, g = self._patch, self._grid
        n = len(lead)
        x = images.reshape(*lead, c, g, p, g, p)
        # -> [..., gy, gx, c, py, px]
        x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
        return x.reshape(*lead, g * g, c * p * p)

    def __call__(self, images, pos: np.ndarray | None = None) -> FeatureMap:
        images = T.as_tensor(images)
        if images.shape[-1] % self._patch or images.shape[-2] % self._patch:
            raise ConfigError(f"image dims {images.shape[-2:]} not divisible by patch size {self._patch}")
        x = self.patch_embed(self.patchify(images))
        x = x + (self._pos if pos is None else pos)
        for layer in self.layers:
            x = layer(x)
        return FeatureMap(x, self._grid, self._grid)


class TextEncoder(Module):
    def __init__(self, vocab_size, d_model, num_heads, ffn_dim, num_layers, max_len, rng, dtype=np.float32):
        self._vocab_size = vocab_size
        self._max_len = max_len
        self._pos = sinusoidal_encoding(np.arange(max_len), d_model).astype(dtype)
        self.embed = param(rng.normal(0.0, 1.0, size=(vocab_size, d_model)), dtype)
        self.layers = [EncoderLayer(d_model, num_heads, ffn_dim, rng, dtype) for _ in range(num_layers)]

    @property
    def positions(self) -> np.ndarray:
        return self._pos

    def pack(self, token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Wrap each expression in BOS/EOS and right-pad to a common length."""
        lengths = [len(t) + 2 for t in token_lists]
        longest = max(lengths)
        ids = np.full((len(token_lists), longest), Vocabulary.pad_id, dtype=np.intp)
        for row, toks in enumerate(token_lists):
            if len(toks) + 2 > self._max_len:
                raise LengthError(f"expression of {len(toks)} tokens exceeds max length {self._max_len} with BOS/EOS")
            for t in toks:
                if not 3 <= int(t) < self._vocab_size:
                    raise VocabularyError(f"invalid token id {t}")
            ids[row, : len(toks) + 2] = [Vocabulary.bos_id, *toks, Vocabulary.eos_id]
        mask = np.arange(longest)[None, :] < np.array(lengths)[:, None]
        return ids, mask

    def __call__(self, ids: np.ndarray, mask: np.ndarray | None = None) -> TextEmbeddings:
        x = T.embedding(self.embed, ids) + self._pos[: ids.shape[-1]]
        for layer in self.layers:
            x = layer(x, key_mask=mask)
        return TextEmbeddings(x, mask)


def encode_image(image, params: VisualEncoder) -> FeatureMap:
    """Encode one ``[3, H, W]`` image into a feature map."""
    fm = params(T.as_tensor(image, dtype=params.patch_embed.weight.dtype)[None])
    return FeatureMap(fm.values[0], fm.height, fm.width)


def encode_text(tokens: Sequence[int], params: TextEncoder) -> TextEmbeddings:
    """Encode one expression (ids without BOS/EOS)."""
    ids, _ = params.pack([tokens])
    emb = params(ids)
    return TextEmbeddings(emb.values[0])
