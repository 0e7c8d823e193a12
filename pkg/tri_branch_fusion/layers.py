"""Parameterized building blocks for the encoders and fusion heads."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .functional import conv3d, layer_norm, scaled_dot_product_attention
from .tensor import Parameter, Tensor, broadcast_to, concat, get_default_dtype


def uniform_fan_in(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int
) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Module:
    """Container that discovers parameters from its attributes."""

    def __call__(self, *args: object, **kwargs: object) -> object:
        return self.forward(*args, **kwargs)  # type: ignore[attr-defined]

    def named_parameters(
        self, prefix: str = ""
    ) -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy values into this module's parameters, checking names/shapes."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(
                f"State mismatch: missing {missing}, unexpected {unexpected}"
            )
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ConfigurationError(
                    f"Shape mismatch for {name}: expected {param.shape}, "
                    f"got {value.shape}"
                )
            param.data = value.astype(param.data.dtype, copy=True)


class Linear(Module):
    """y = x W + b with W stored as [in, out]."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
    ) -> None:
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            uniform_fan_in(rng, (in_features, out_features), in_features)
        )
        self.bias = (
            Parameter(np.zeros(out_features, dtype=get_default_dtype()))
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear expects last dim {self.in_features}, got {x.shape}"
            )
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        fan_in = in_channels * kernel**3
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            uniform_fan_in(
                rng,
                (out_channels, in_channels, kernel, kernel, kernel),
                fan_in,
            )
        )
        self.bias = Parameter(
            np.zeros(out_channels, dtype=get_default_dtype())
        )

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.eps = eps
        self.gamma = Parameter(np.ones(width, dtype=get_default_dtype()))
        self.beta = Parameter(np.zeros(width, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """MA(Q(q), K(k), V(v)) with per-head scaled dot-product attention."""

    def __init__(
        self, embed_dim: int, heads: int, rng: np.random.Generator
    ) -> None:
        if heads < 1 or embed_dim % heads:
            raise ConfigurationError(
                f"embed_dim {embed_dim} not divisible by heads {heads}"
            )
        self.embed_dim = embed_dim
        self.heads = heads
        self.q_proj = Linear(embed_dim, embed_dim, rng)
        self.k_proj = Linear(embed_dim, embed_dim, rng)
        self.v_proj = Linear(embed_dim, embed_dim, rng)
        self.out_proj = Linear(embed_dim, embed_dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        head_dim = self.embed_dim // self.heads
        return x.reshape(b, t, self.heads, head_dim).transpose(0, 2, 1, 3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        for label, x in (("query", q), ("key", k), ("value", v)):
            if x.ndim != 3 or x.shape[-1] != self.embed_dim:
                raise DimensionError(
                    f"attention {label} must be [b, t, {self.embed_dim}], "
                    f"got {x.shape}"
                )
        if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
            raise DimensionError(
                f"attention shape mismatch: q {q.shape}, k {k.shape}, "
                f"v {v.shape}"
            )
        b, t_q, _ = q.shape
        heads = scaled_dot_product_attention(
            self._split(self.q_proj(q)),
            self._split(self.k_proj(k)),
            self._split(self.v_proj(v)),
        )
        merged = heads.transpose(0, 2, 1, 3).reshape(b, t_q, self.embed_dim)
        return self.out_proj(merged)


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, attention: MultiHeadAttention
) -> Tensor:
    """Apply ``attention`` to explicit query/key/value token sets."""
    return attention(q, k, v)


class FeedForward(Module):
    """Two-layer MLP with ReLU."""

    def __init__(
        self, width: int, hidden: int, rng: np.random.Generator
    ) -> None:
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class TransformerBlock(Module):
    """Post-norm encoder block: LN(x + MHA(x)), then LN(x + FF(x))."""

    def __init__(
        self, width: int, heads: int, hidden: int, rng: np.random.Generator
    ) -> None:
        self.attention = MultiHeadAttention(width, heads, rng)
        self.norm1 = LayerNorm(width)
        self.feed_forward = FeedForward(width, hidden, rng)
        self.norm2 = LayerNorm(width)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attention(x, x, x))
        return self.norm2(x + self.feed_forward(x))


class TransformerStack(Module):
    def __init__(
        self,
        depth: int,
        width: int,
        heads: int,
        hidden: int,
        rng: np.random.Generator,
    ) -> None:
        self.blocks = [
            TransformerBlock(width, heads, hidden, rng) for _ in range(depth)
        ]

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_all(x)[-1]

    def forward_all(self, x: Tensor) -> List[Tensor]:
        """Return the input followed by every block's output."""
        outputs = [x]
        for block in self.blocks:
            outputs.append(block(outputs[-1]))
        return outputs


def prepend_token(tokens: Tensor, token: Tensor) -> Tensor:
    """Prepend a learned [1, 1, e] token to every sequence in the batch."""
    b, _, e = tokens.shape
    return concat([broadcast_to(token, (b, 1, e)), tokens], axis=1)


class ClassTokenHead(Module):
    """Class token, transformer blocks and a linear head on the class token."""

    def __init__(
        self,
        width: int,
        depth: int,
        heads: int,
        hidden: int,
        num_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.class_token = Parameter(uniform_fan_in(rng, (1, 1, width), width))
        self.blocks = TransformerStack(depth, width, heads, hidden, rng)
        self.head = Linear(width, num_classes, rng)

    def encode(self, tokens: Tensor) -> Tensor:
        """Return the block outputs for ``[class token] + tokens``."""
        return self.blocks(prepend_token(tokens, self.class_token))

    def forward(self, tokens: Tensor) -> Tensor:
        return self.head(self.encode(tokens)[:, 0, :])


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
