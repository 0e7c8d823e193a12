"""Fusion blocks that turn image and tabular features into z_f.

Each block exposes its bare fusion operation (``mmtm_fuse``,
``concat_transformer_fuse``, ``token_fuse``, ``cross_modal_attention_fuse``,
``concat_linear_fuse``) and a common ``forward(image_out, tab_out)`` used by
:class:`tri_branch_fusion.network.TnfModel`.
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Union

import numpy as np

from .encoders import (
    EncoderOutput,
    ImageEncoderConfig,
    TabularTransformerConfig,
)
from .errors import ConfigurationError, DimensionError
from .functional import global_avg_pool3d, softmax
from .layers import (
    ClassTokenHead,
    Conv3d,
    FeedForward,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerStack,
    flatten,
)
from .tensor import Tensor, as_tensor, concat


class FusionKind(str, Enum):
    MMTM_ADAPTED = "mmtm_adapted"
    CONCAT_LINEAR = "concat_linear"
    CONCAT_TRANSFORMER = "concat_transformer"
    TOKEN_FUSION = "token_fusion"
    CROSS_MODAL_ATTENTION = "cross_modal_attention"


@dataclass(frozen=True)
class FusionConfig:
    """Hyperparameters shared by the fusion blocks.

    ``proj_kernel``/``proj_stride`` shape the 3D conv that turns the image
    feature map into tokens; ``depth`` counts the transformer blocks of the
    fusion head and ``image_token_blocks`` optional blocks applied to image
    tokens before concatenation.
    """

    hidden_dim: int = 32
    depth: int = 2
    heads: int = 2
    proj_kernel: int = 2
    proj_stride: int = 2
    image_token_blocks: int = 0
    ff_hidden: int = 32

    def __post_init__(self) -> None:
        """Validate fusion hyperparameters after initialization."""
        if min(self.hidden_dim, self.depth, self.heads, self.ff_hidden) < 1:
            raise ConfigurationError(
                "hidden_dim, depth, heads and ff_hidden must be >= 1"
            )
        if self.proj_kernel < 1 or self.proj_stride < 1:
            raise ConfigurationError(
                "proj_kernel and proj_stride must be >= 1"
            )
        if self.image_token_blocks < 0:
            raise ConfigurationError("image_token_blocks must be >= 0")


@dataclass
class FusedFeatures:
    """Recalibrated or attended features and the fusion-branch output.

    ``tokens`` is the fused sequence seen by a transformer head, class
    token included, when the block has one.
    """

    v_i_prime: Tensor
    v_t_prime: Tensor
    logits: Tensor
    z_f: Tensor
    tokens: Optional[Tensor] = None


def _check_width(label: str, tokens: Tensor, width: int) -> None:
    if tokens.ndim != 3 or tokens.shape[-1] != width:
        raise DimensionError(
            f"{label} tokens must be [b, t, {width}], got {tokens.shape}"
        )


class MmtmFusion(Module):
    """Adapted multimodal transfer module.

    v_i' = v_i * sigmoid(f_i(f_c(C(f_avg(v_i), v_t)))) channel-wise, and
    v_t' = v_t * sigmoid(f_t(f_c(C(f_avg(v_i), v_t)))); the head pools v_i',
    concatenates v_t' and applies a linear layer.
    """

    def __init__(
        self,
        image_channels: int,
        tabular_width: int,
        hidden_dim: int,
        num_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.image_channels = image_channels
        self.tabular_width = tabular_width
        self.f_c = Linear(image_channels + tabular_width, hidden_dim, rng)
        self.f_i = Linear(hidden_dim, image_channels, rng)
        self.f_t = Linear(hidden_dim, tabular_width, rng)
        self.head = Linear(image_channels + tabular_width, num_classes, rng)

    def gates(self, v_i: Tensor, v_t: Tensor) -> List[Tensor]:
        """Return the sigmoid channel weights (g_i [b,c], g_t [b,l])."""
        if v_i.ndim != 5 or v_i.shape[1] != self.image_channels:
            raise DimensionError(
                f"MMTM expects image features [b, {self.image_channels}, "
                f"h, w, d], got {v_i.shape}"
            )
        if v_t.ndim != 2 or v_t.shape[1] != self.tabular_width:
            raise DimensionError(
                f"MMTM expects tabular features [b, {self.tabular_width}], "
                f"got {v_t.shape}"
            )
        squeezed = self.f_c(concat([global_avg_pool3d(v_i), v_t], axis=1))
        return [self.f_i(squeezed).sigmoid(), self.f_t(squeezed).sigmoid()]

    def apply_gates(
        self,
        v_i: Tensor,
        v_t: Tensor,
        g_i: Union[Tensor, np.ndarray],
        g_t: Union[Tensor, np.ndarray],
    ) -> FusedFeatures:
        g_i, g_t = as_tensor(g_i), as_tensor(g_t)
        b, c = v_i.shape[:2]
        if g_i.shape != (b, c):
            raise DimensionError(
                f"Image gate {g_i.shape} does not match channels of "
                f"{v_i.shape}"
            )
        if g_t.shape != v_t.shape:
            raise DimensionError(
                f"Tabular gate {g_t.shape} does not match {v_t.shape}"
            )
        v_i_prime = v_i * g_i.reshape(b, c, 1, 1, 1)
        v_t_prime = v_t * g_t
        logits = self.head(
            concat([global_avg_pool3d(v_i_prime), v_t_prime], axis=1)
        )
        return FusedFeatures(
            v_i_prime, v_t_prime, logits, softmax(logits, axis=-1)
        )

    def mmtm_fuse(self, v_i: Tensor, v_t: Tensor) -> FusedFeatures:
        g_i, g_t = self.gates(v_i, v_t)
        return self.apply_gates(v_i, v_t, g_i, g_t)

    def forward(
        self, image_out: EncoderOutput, tab_out: EncoderOutput
    ) -> FusedFeatures:
        return self.mmtm_fuse(image_out.features, tab_out.summary)


class ImageTokenizer(Module):
    """3D conv projection + reshape: [b,c,h,w,d] -> [b, h'w'd', e]."""

    def __init__(
        self,
        channels: int,
        width: int,
        kernel: int,
        stride: int,
        rng: np.random.Generator,
    ) -> None:
        self.width = width
        self.proj = Conv3d(channels, width, kernel, rng, stride=stride)

    def forward(self, v_i: Tensor) -> Tensor:
        projected = self.proj(v_i)
        b, e = projected.shape[:2]
        return projected.reshape(b, e, -1).transpose(0, 2, 1)


class ConcatTransformerFusion(Module):
    """z_f = T(C(v_i', v_t)): image tokens joined with tabular tokens."""

    def __init__(
        self,
        tokenizer: ImageTokenizer,
        width: int,
        options: FusionConfig,
        num_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.width = width
        self.tokenizer = tokenizer
        self.image_blocks = (
            TransformerStack(
                options.image_token_blocks,
                width,
                options.heads,
                options.ff_hidden,
                rng,
            )
            if options.image_token_blocks
            else None
        )
        self.head = ClassTokenHead(
            width,
            options.depth,
            options.heads,
            options.ff_hidden,
            num_classes,
            rng,
        )

    def concat_transformer_fuse(
        self, v_i: Tensor, tab_tokens: Tensor
    ) -> FusedFeatures:
        image_tokens = self.tokenizer(v_i)
        if image_tokens.shape[-1] != self.width:
            raise ConfigurationError(
                f"Projected image width {image_tokens.shape[-1]} differs "
                f"from token width {self.width}"
            )
        if tab_tokens.ndim != 3 or tab_tokens.shape[-1] != self.width:
            raise ConfigurationError(
                f"Tabular token width {tab_tokens.shape} differs from "
                f"projection width {self.width}"
            )
        if self.image_blocks is not None:
            image_tokens = self.image_blocks(image_tokens)
        sequence = self.head.encode(concat([image_tokens, tab_tokens], axis=1))
        logits = self.head.head(sequence[:, 0, :])
        return FusedFeatures(
            image_tokens,
            tab_tokens,
            logits,
            softmax(logits, axis=-1),
            tokens=sequence,
        )

    def forward(
        self, image_out: EncoderOutput, tab_out: EncoderOutput
    ) -> FusedFeatures:
        return self.concat_transformer_fuse(
            image_out.features, tab_out.features
        )


class TokenReweighting(Module):
    """v' = v + MLP((SA(v) * sigmoid(f(v))) + v), one score per token."""

    def __init__(
        self, width: int, heads: int, hidden: int, rng: np.random.Generator
    ) -> None:
        self.attention = MultiHeadAttention(width, heads, rng)
        self.score = Linear(width, 1, rng)
        self.mlp = FeedForward(width, hidden, rng)

    def update(
        self, v: Tensor, scores: Optional[Union[Tensor, np.ndarray]] = None
    ) -> Tensor:
        """Apply the update; ``scores`` [b,t,1] overrides sigmoid(f(v))."""
        weights = self.score(v).sigmoid() if scores is None else scores
        weighted = self.attention(v, v, v) * weights
        return v + self.mlp(weighted + v)

    def forward(self, v: Tensor) -> Tensor:
        return self.update(v)


class TokenFusion(Module):
    def __init__(
        self,
        tokenizer: ImageTokenizer,
        width: int,
        options: FusionConfig,
        num_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.width = width
        self.tokenizer = tokenizer
        self.image_update = TokenReweighting(
            width, options.heads, options.ff_hidden, rng
        )
        self.tabular_update = TokenReweighting(
            width, options.heads, options.ff_hidden, rng
        )
        self.head = ClassTokenHead(
            width,
            options.depth,
            options.heads,
            options.ff_hidden,
            num_classes,
            rng,
        )

    def token_fuse(
        self, v_i_tokens: Tensor, v_t_tokens: Tensor
    ) -> FusedFeatures:
        _check_width("Image", v_i_tokens, self.width)
        _check_width("Tabular", v_t_tokens, self.width)
        v_i_prime = self.image_update(v_i_tokens)
        v_t_prime = self.tabular_update(v_t_tokens)
        sequence = self.head.encode(concat([v_i_prime, v_t_prime], axis=1))
        logits = self.head.head(sequence[:, 0, :])
        return FusedFeatures(
            v_i_prime,
            v_t_prime,
            logits,
            softmax(logits, axis=-1),
            tokens=sequence,
        )

    def forward(
        self, image_out: EncoderOutput, tab_out: EncoderOutput
    ) -> FusedFeatures:
        return self.token_fuse(
            self.tokenizer(image_out.features), tab_out.features
        )


class CrossModalAttentionFusion(Module):
    """v_i' = MA(Q_t(v_t), K_i(v_i), V_i(v_i)); v_t' = MA(Q_i(v_i), K_t(v_t),
    V_t(v_t)).

    ``image_attention`` owns Q_t, K_i, V_i and ``tabular_attention`` owns
    Q_i, K_t, V_t.
    """

    def __init__(
        self,
        tokenizer: ImageTokenizer,
        width: int,
        options: FusionConfig,
        num_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.width = width
        self.tokenizer = tokenizer
        self.image_attention = MultiHeadAttention(width, options.heads, rng)
        self.tabular_attention = MultiHeadAttention(width, options.heads, rng)
        self.head = ClassTokenHead(
            width,
            options.depth,
            options.heads,
            options.ff_hidden,
            num_classes,
            rng,
        )

    def cross_modal_attention_fuse(
        self, v_i_tokens: Tensor, v_t_tokens: Tensor
    ) -> FusedFeatures:
        _check_width("Image", v_i_tokens, self.width)
        _check_width("Tabular", v_t_tokens, self.width)
        v_i_prime = self.image_attention(v_t_tokens, v_i_tokens, v_i_tokens)
        v_t_prime = self.tabular_attention(v_i_tokens, v_t_tokens, v_t_tokens)
        sequence = self.head.encode(concat([v_i_prime, v_t_prime], axis=1))
        logits = self.head.head(sequence[:, 0, :])
        return FusedFeatures(
            v_i_prime,
            v_t_prime,
            logits,
            softmax(logits, axis=-1),
            tokens=sequence,
        )

    def forward(
        self, image_out: EncoderOutput, tab_out: EncoderOutput
    ) -> FusedFeatures:
        return self.cross_modal_attention_fuse(
            self.tokenizer(image_out.features), tab_out.features
        )


class ConcatLinearFusion(Module):
    """Flattened image features joined with the tabular vector, then an MLP."""

    def __init__(
        self,
        n_image: int,
        n_tabular: int,
        hidden_dim: int,
        num_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.n_image = n_image
        self.n_tabular = n_tabular
        self.fc1 = Linear(n_image + n_tabular, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, num_classes, rng)

    def concat_linear_fuse(
        self, img_feat_flat: Tensor, tab_feat: Tensor
    ) -> FusedFeatures:
        if img_feat_flat.ndim != 2 or img_feat_flat.shape[1] != self.n_image:
            raise DimensionError(
                f"Image features must be [b, {self.n_image}], "
                f"got {img_feat_flat.shape}"
            )
        if tab_feat.ndim != 2 or tab_feat.shape[1] != self.n_tabular:
            raise DimensionError(
                f"Tabular features must be [b, {self.n_tabular}], "
                f"got {tab_feat.shape}"
            )
        joined = concat([img_feat_flat, tab_feat], axis=1)
        logits = self.fc2(self.fc1(joined).relu())
        return FusedFeatures(
            img_feat_flat, tab_feat, logits, softmax(logits, axis=-1)
        )

    def forward(
        self, image_out: EncoderOutput, tab_out: EncoderOutput
    ) -> FusedFeatures:
        return self.concat_linear_fuse(
            flatten(image_out.features), tab_out.summary
        )


FusionBlock = Union[
    MmtmFusion,
    ConcatLinearFusion,
    ConcatTransformerFusion,
    TokenFusion,
    CrossModalAttentionFusion,
]


def build_fusion(
    kind: FusionKind,
    image: ImageEncoderConfig,
    tabular: TabularTransformerConfig,
    options: FusionConfig,
    rng: np.random.Generator,
) -> FusionBlock:
    """Instantiate the fusion block for ``kind`` with widths from encoders."""
    kind = FusionKind(kind)
    if image.num_classes != tabular.num_classes:
        raise ConfigurationError(
            f"Encoders disagree on class count: {image.num_classes} vs "
            f"{tabular.num_classes}"
        )
    num_classes = image.num_classes
    channels, h, w, d = image.feature_shape
    width = tabular.embed_dim

    if kind is FusionKind.MMTM_ADAPTED:
        return MmtmFusion(
            channels, width, options.hidden_dim, num_classes, rng
        )
    if kind is FusionKind.CONCAT_LINEAR:
        return ConcatLinearFusion(
            channels * h * w * d, width, options.hidden_dim, num_classes, rng
        )

    if options.heads < 1 or width % options.heads:
        raise ConfigurationError(
            f"Token width {width} not divisible by fusion heads "
            f"{options.heads}"
        )
    grid = [
        (s - options.proj_kernel) // options.proj_stride + 1 for s in (h, w, d)
    ]
    if min(grid) < 1:
        raise ConfigurationError(
            f"Image token projection kernel {options.proj_kernel} exceeds "
            f"feature grid {(h, w, d)}"
        )
    tokenizer = ImageTokenizer(
        channels, width, options.proj_kernel, options.proj_stride, rng
    )
    if kind is FusionKind.CONCAT_TRANSFORMER:
        return ConcatTransformerFusion(
            tokenizer, width, options, num_classes, rng
        )
    if kind is FusionKind.TOKEN_FUSION:
        return TokenFusion(tokenizer, width, options, num_classes, rng)
    return CrossModalAttentionFusion(
        tokenizer, width, options, num_classes, rng
    )
