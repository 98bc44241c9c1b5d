"""Parameterised building blocks: linear layers, attention, FFN, encoder layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are public ``Tensor`` attributes; children are
    ``Module`` attributes or lists of modules. Attribute insertion order fixes
    the parameter order, which keeps checkpoints and optimizer state stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                raise ContractError(f"parameter {name} registered twice")
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield path, val
            elif isinstance(val, Module):
                yield from val._walk(path + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m._walk(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise DimensionError(f"checkpoint lacks tensor {missing[0]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"tensor {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = param(xavier_uniform(rng, d_out, d_in, dtype), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


# -- positional encodings -----------------------------------------------------------


def sinusoidal_encoding(position, dim: int) -> np.ndarray:
    """Interleaved sin/cos encoding, base 10000. ``position`` may be an array."""
    if dim % 2:
        raise ConfigError(f"sinusoidal encoding needs an even dim, got {dim}")
    pos = np.asarray(position, dtype=np.float64)[..., None]
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    out = np.empty(pos.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(pos * freq)
    out[..., 1::2] = np.cos(pos * freq)
    return out


def grid_encoding(height: int, width: int, dim: int) -> np.ndarray:
    """Absolute 2-D encoding, [H*W, dim], row-major cells: x half then y half."""
    if dim % 4:
        raise ConfigError(f"2-D encoding needs dim divisible by 4, got {dim}")
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    enc = np.concatenate([sinusoidal_encoding(xs, dim // 2), sinusoidal_encoding(ys, dim // 2)], axis=-1)
    return enc.reshape(height * width, dim)


class RelativeEncodingTable:
    """Sinusoidal encodings of every 2-D offset between cells of an H x W grid.

    Row ``k`` of ``encodings`` is the offset with ``dy = k // (2W-1) - (H-1)``
    and ``dx = k % (2W-1) - (W-1)``; ``index[i, j]`` is the row holding the
    offset ``i - j`` for row-major cells ``i`` (query) and ``j`` (key).
    """

    def __init__(self, height: int, width: int, dim: int, dtype=np.float32):
        if dim % 4:
            raise ConfigError(f"relative encoding needs dim divisible by 4, got {dim}")
        self.height, self.width, self.dim = height, width, dim
        dys, dxs = np.meshgrid(np.arange(-(height - 1), height), np.arange(-(width - 1), width), indexing="ij")
        enc = np.concatenate([sinusoidal_encoding(dxs, dim // 2), sinusoidal_encoding(dys, dim // 2)], axis=-1)
        self.encodings = Tensor(enc.reshape(-1, dim).astype(dtype))
        cy, cx = np.divmod(np.arange(height * width), width)
        dy = cy[:, None] - cy[None, :]
        dx = cx[:, None] - cx[None, :]
        self.index = (dy + height - 1) * (2 * width - 1) + (dx + width - 1)

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def offset_row(self, dx: int, dy: int) -> np.ndarray:
        return self.encodings.data[(dy + self.height - 1) * (2 * self.width - 1) + dx + self.width - 1]


# -- attention ---------------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % num_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {num_heads} heads")
        self._heads = num_heads
        self._d_model = d_model
        self.q = Linear(d_model, d_model, rng, dtype)
        # no key bias: q . b_k is constant along the key axis, so softmax ignores it
        self.k = Linear(d_model, d_model, rng, dtype, bias=False)
        self.v = Linear(d_model, d_model, rng, dtype)
        self.o = Linear(d_model, d_model, rng, dtype)

    @property
    def num_heads(self) -> int:
        return self._heads

    @property
    def d_k(self) -> int:
        return self._d_model // self._heads

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self._heads, self.d_k).transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)

    def __call__(
        self,
        query_in: Tensor,
        key_in: Tensor,
        value_in: Tensor,
        rel: RelativeEncodingTable | None = None,
        key_mask: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Scaled dot-product attention over the key axis.

        Inputs are ``[..., L, C]``. ``key_mask`` (``[..., Lk]`` bools, True = keep)
        excludes padded keys. With ``rel`` the logits gain the relative term
        ``Q(i) . W_K R(i - j)``, where ``W_K`` is the key projection weight.
        Returns the projected output and the attention weights ``[..., h, Lq, Lk]``.
        """
        for name, x in (("query", query_in), ("key", key_in), ("value", value_in)):
            if x.shape[-1] != self._d_model:
                raise DimensionError(f"{name} channel dim {x.shape[-1]} != d_model {self._d_model}")
        if key_in.shape[-2] != value_in.shape[-2]:
            raise DimensionError(f"key length {key_in.shape[-2]} != value length {value_in.shape[-2]}")
        if rel is not None and not (query_in.shape[-2] == key_in.shape[-2] == rel.num_cells):
            raise ContractError(
                f"relative attention needs {rel.num_cells} spatial queries and keys, "
                f"got {query_in.shape[-2]} and {key_in.shape[-2]}"
            )
        q = self._split(self.q(query_in))
        k = self._split(self.k(key_in))
        v = self._split(self.v(value_in))
        logits = T.matmul(q, k.transpose())
        if rel is not None:
            rk = T.linear(rel.encodings, self.k.weight)
            rk = rk.reshape(-1, self._heads, self.d_k).transpose(1, 2, 0)
            logits = logits + T.gather_last(T.matmul(q, rk), rel.index)
        logits = T.scale(logits, 1.0 / math.sqrt(self.d_k))
        mask = None if key_mask is None else np.asarray(key_mask)[..., None, None, :]
        attn = T.softmax(logits, axis=-1, mask=mask)
        out = T.matmul(attn, v)
        nd = out.ndim
        out = out.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)
        out = out.reshape(*out.shape[:-2], self._d_model)
        return self.o(out), attn


def multi_head_attention(query_in, key_in, value_in, params: MultiHeadAttention, rel=None, key_mask=None):
    return params(query_in, key_in, value_in, rel=rel, key_mask=key_mask)


class FFN(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_model, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MLP3(Module):
    """Three linear layers with ReLU between them, producing 4 raw box logits."""

    def __init__(self, d_model: int, rng: np.random.Generator, dtype=np.float32, hidden: int | None = None):
        hidden = hidden or d_model
        self.fc1 = Linear(d_model, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.fc3 = Linear(hidden, 4, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc3(T.relu(self.fc2(T.relu(self.fc1(x)))))


class EncoderLayer(Module):
    """Post-norm transformer encoder layer: LN(x + SA(x)), then LN(x + FFN(x))."""

    def __init__(self, d_model: int, num_heads: int, ffn_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.attn = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.ffn = FFN(d_model, ffn_dim, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, pos: Tensor | None = None) -> Tensor:
        qk = x if pos is None else x + pos
        a, _ = self.attn(qk, qk, x, key_mask=key_mask)
        x = self.norm1(x + a)
        return self.norm2(x + self.ffn(x))
