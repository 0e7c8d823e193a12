"""Three-output model binding both encoders, a fusion block and CLIP heads."""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .encoders import (
    EncoderOutput,
    ImageEncoder,
    ImageEncoderConfig,
    TabularTransformer,
    TabularTransformerConfig,
)
from .errors import ConfigurationError, ContractError
from .fusion import FusedFeatures, FusionConfig, FusionKind, build_fusion
from .layers import Linear, Module
from .models import BranchLikelihoods
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a TNF model; ``fusion=None`` drops the fusion branch.

    ``clip_dim`` adds linear projections of the pooled image feature and the
    tabular class feature to a shared width for contrastive fine-tuning.
    """

    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    tabular: TabularTransformerConfig = field(
        default_factory=TabularTransformerConfig
    )
    fusion: Optional[FusionKind] = FusionKind.MMTM_ADAPTED
    fusion_options: FusionConfig = field(default_factory=FusionConfig)
    clip_dim: Optional[int] = None

    def __post_init__(self) -> None:
        """Check that the encoders agree on the class count."""
        if self.image.num_classes != self.tabular.num_classes:
            raise ConfigurationError(
                f"Image encoder has {self.image.num_classes} classes, "
                f"tabular encoder {self.tabular.num_classes}"
            )
        if self.clip_dim is not None and self.clip_dim < 1:
            raise ConfigurationError("clip_dim must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.image.num_classes


@dataclass
class TnfOutput:
    """Per-branch outputs of one forward pass; missing inputs give ``None``."""

    image: Optional[EncoderOutput] = None
    tabular: Optional[EncoderOutput] = None
    fused: Optional[FusedFeatures] = None

    def likelihoods(self) -> BranchLikelihoods:
        """Return (z_i, z_t, z_f) as probability arrays."""
        return BranchLikelihoods(
            z_i=None if self.image is None else self.image.likelihood.numpy(),
            z_t=(
                None
                if self.tabular is None
                else self.tabular.likelihood.numpy()
            ),
            z_f=None if self.fused is None else self.fused.z_f.numpy(),
        )


class TnfModel(Module):
    """Image branch, tabular branch and (optionally) a fusion branch."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.image_encoder = ImageEncoder(config.image, rng)
        self.tabular_encoder = TabularTransformer(config.tabular, rng)
        self.fusion = (
            build_fusion(
                config.fusion,
                config.image,
                config.tabular,
                config.fusion_options,
                rng,
            )
            if config.fusion is not None
            else None
        )
        self.clip_image: Optional[Linear] = None
        self.clip_tabular: Optional[Linear] = None
        if config.clip_dim is not None:
            self.clip_image = Linear(
                config.image.feature_channels, config.clip_dim, rng
            )
            self.clip_tabular = Linear(
                config.tabular.embed_dim, config.clip_dim, rng
            )
        logger.debug(
            f"Built TNF model ({config.fusion}) with "
            f"{self.num_parameters()} parameters"
        )

    @property
    def has_fusion(self) -> bool:
        return self.fusion is not None

    def forward(
        self,
        x_i: Optional[Tensor] = None,
        x_t: Optional[Tensor] = None,
    ) -> TnfOutput:
        """Run the branches whose inputs are present.

        The fusion branch runs only when both inputs are given.
        """
        if x_i is None and x_t is None:
            raise ContractError("forward needs at least one modality")
        image = None if x_i is None else self.image_encoder(as_tensor(x_i))
        tabular = None if x_t is None else self.tabular_encoder(as_tensor(x_t))
        if image is not None and tabular is not None:
            if image.logits.shape[0] != tabular.logits.shape[0]:
                raise ContractError(
                    f"Batch sizes differ: image {image.logits.shape[0]}, "
                    f"tabular {tabular.logits.shape[0]}"
                )
        fused = None
        both = image is not None and tabular is not None
        if self.fusion is not None and both:
            fused = self.fusion(image, tabular)
        return TnfOutput(image=image, tabular=tabular, fused=fused)

    def clip_features(self, output: TnfOutput) -> Tuple[Tensor, Tensor]:
        """Project (f_i, f_t) into the shared contrastive space."""
        if self.clip_image is None or self.clip_tabular is None:
            raise ConfigurationError("Model was built without clip_dim")
        if output.image is None or output.tabular is None:
            raise ContractError("Contrastive features need both modalities")
        return (
            self.clip_image(output.image.summary),
            self.clip_tabular(output.tabular.summary),
        )
