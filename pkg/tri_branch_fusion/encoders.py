"""Image (3D CNN) and tabular (transformer) encoders."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .functional import avg_pool3d, global_avg_pool3d, softmax
from .layers import (
    Conv3d,
    Linear,
    Module,
    TransformerStack,
    prepend_token,
    uniform_fan_in,
)
from .tensor import Parameter, Tensor, as_tensor, get_default_dtype

logger = logging.getLogger(__name__)

Shape4 = Tuple[int, int, int, int]


@dataclass(frozen=True)
class ConvStageConfig:
    """One conv -> ReLU -> average-pool stage."""

    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 1

    def __post_init__(self) -> None:
        """Validate stage hyperparameters after initialization."""
        if self.channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ConfigurationError(
                f"Stage needs positive channels/kernel/stride: {self}"
            )
        if self.padding < 0 or self.pool < 1:
            raise ConfigurationError(
                f"Stage needs padding >= 0 and pool >= 1: {self}"
            )


def _default_stages() -> Tuple[ConvStageConfig, ...]:
    return (ConvStageConfig(8, pool=2), ConvStageConfig(16))


@dataclass(frozen=True)
class ImageEncoderConfig:
    """Input shape (c, h, w, d), conv stage plan and class count."""

    input_shape: Shape4 = (1, 8, 8, 8)
    stages: Tuple[ConvStageConfig, ...] = field(
        default_factory=_default_stages
    )
    num_classes: int = 2

    def __post_init__(self) -> None:
        """Validate that every stage keeps a non-empty grid."""
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigurationError(
                f"input_shape must be 4 positive extents (c,h,w,d), "
                f"got {self.input_shape}"
            )
        if not self.stages:
            raise ConfigurationError("Image encoder needs at least one stage")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        self.stage_shapes()

    def stage_shapes(self) -> List[Shape4]:
        """Return the (c, h, w, d) output shape of every stage."""
        shapes = []
        spatial = list(self.input_shape[1:])
        for i, stage in enumerate(self.stages):
            conv = [
                (s + 2 * stage.padding - stage.kernel) // stage.stride + 1
                for s in spatial
            ]
            if min(conv) < 1:
                raise ConfigurationError(
                    f"Stage {i} convolution leaves no output: {spatial} -> "
                    f"{conv}"
                )
            if any(s % stage.pool for s in conv):
                raise ConfigurationError(
                    f"Stage {i} pool {stage.pool} does not tile {conv}"
                )
            spatial = [s // stage.pool for s in conv]
            shapes.append((stage.channels, spatial[0], spatial[1], spatial[2]))
        return shapes

    @property
    def feature_shape(self) -> Shape4:
        return self.stage_shapes()[-1]

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].channels


@dataclass
class EncoderOutput:
    """Features and branch likelihood of one encoder pass.

    ``features`` is the spatial map [b,c,h,w,d] for images and the token
    sequence [b,t,e] for tables; ``summary`` is the pooled image vector or
    the final class-token feature. ``activations`` holds every conv stage's
    post-ReLU map for Grad-CAM.
    """

    features: Tensor
    logits: Tensor
    likelihood: Tensor
    summary: Tensor
    activations: List[Tensor] = field(default_factory=list)


class ImageEncoder(Module):
    """Stacked 3D conv stages followed by global pooling and a linear head."""

    def __init__(
        self, config: ImageEncoderConfig, rng: np.random.Generator
    ) -> None:
        self.config = config
        in_channels = config.input_shape[0]
        self.convs = []
        for stage in config.stages:
            self.convs.append(
                Conv3d(
                    in_channels,
                    stage.channels,
                    stage.kernel,
                    rng,
                    stride=stage.stride,
                    padding=stage.padding,
                )
            )
            in_channels = stage.channels
        self.head = Linear(in_channels, config.num_classes, rng)

    def encode_image(self, x_i: Tensor) -> EncoderOutput:
        """Return the feature map v_i and z_i = softmax(head(pool(v_i)))."""
        x_i = as_tensor(x_i)
        expected = tuple(self.config.input_shape)
        if x_i.ndim != 5 or x_i.shape[1:] != expected:
            raise ConfigurationError(
                f"Image input must be [b, {', '.join(map(str, expected))}], "
                f"got {x_i.shape}"
            )
        activations = []
        x = x_i
        for conv, stage in zip(self.convs, self.config.stages):
            x = conv(x).relu()
            activations.append(x)
            if stage.pool > 1:
                x = avg_pool3d(x, stage.pool)
        summary = global_avg_pool3d(x)
        logits = self.head(summary)
        return EncoderOutput(
            features=x,
            logits=logits,
            likelihood=softmax(logits, axis=-1),
            summary=summary,
            activations=activations,
        )

    def forward(self, x_i: Tensor) -> EncoderOutput:
        return self.encode_image(x_i)


@dataclass(frozen=True)
class TabularTransformerConfig:
    """Attribute count, token width, transformer shape and class count.

    ``intermediate_block`` selects which block's output is exposed as token
    features for fusion (0 is the embedding itself).
    """

    n_attr: int = 12
    embed_dim: int = 16
    depth: int = 2
    heads: int = 2
    num_classes: int = 2
    class_token: bool = True
    ff_hidden: int = 32
    intermediate_block: int = 1

    def __post_init__(self) -> None:
        """Validate transformer hyperparameters after initialization."""
        if self.n_attr < 1:
            raise ConfigurationError("n_attr must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads "
                f"{self.heads}"
            )
        if self.depth < 1 or self.ff_hidden < 1:
            raise ConfigurationError("depth and ff_hidden must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not 0 <= self.intermediate_block <= self.depth:
            raise ConfigurationError(
                f"intermediate_block must be in [0, {self.depth}], "
                f"got {self.intermediate_block}"
            )

    @property
    def token_count(self) -> int:
        return self.n_attr + (1 if self.class_token else 0)


class TabularTransformer(Module):
    """Per-attribute affine embedding, class token and transformer blocks."""

    def __init__(
        self, config: TabularTransformerConfig, rng: np.random.Generator
    ) -> None:
        self.config = config
        n, e = config.n_attr, config.embed_dim
        self.embed_weight = Parameter(uniform_fan_in(rng, (n, e), 1))
        self.embed_bias = Parameter(
            np.zeros((n, e), dtype=get_default_dtype())
        )
        self.class_token: Optional[Parameter] = (
            Parameter(uniform_fan_in(rng, (1, 1, e), e))
            if config.class_token
            else None
        )
        self.blocks = TransformerStack(
            config.depth, e, config.heads, config.ff_hidden, rng
        )
        self.head = Linear(e, config.num_classes, rng)

    def embed(self, x_t: Tensor) -> Tensor:
        """[b, n_attr] -> [b, n_attr, e] with token j = x_j * W_j + B_j."""
        b, n = x_t.shape
        return x_t.reshape(b, n, 1) * self.embed_weight + self.embed_bias

    def encode_tabular(self, x_t: Tensor) -> EncoderOutput:
        x_t = as_tensor(x_t)
        if x_t.ndim != 2 or x_t.shape[1] != self.config.n_attr:
            raise ConfigurationError(
                f"Tabular input must be [b, {self.config.n_attr}], "
                f"got {x_t.shape}"
            )
        tokens = self.embed(x_t)
        if self.class_token is not None:
            tokens = prepend_token(tokens, self.class_token)
        outputs = self.blocks.forward_all(tokens)
        final = outputs[-1]
        if self.class_token is not None:
            summary = final[:, 0, :]
        else:
            summary = final.mean(axis=1)
        logits = self.head(summary)
        return EncoderOutput(
            features=outputs[self.config.intermediate_block],
            logits=logits,
            likelihood=softmax(logits, axis=-1),
            summary=summary,
        )

    def forward(self, x_t: Tensor) -> EncoderOutput:
        return self.encode_tabular(x_t)
