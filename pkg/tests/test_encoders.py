"""Tests for the image and tabular encoders."""

import numpy as np
import pytest

from tri_branch_fusion.encoders import (
    ConvStageConfig,
    ImageEncoder,
    ImageEncoderConfig,
    TabularTransformer,
    TabularTransformerConfig,
)
from tri_branch_fusion.errors import ConfigurationError
from tri_branch_fusion.tensor import Parameter, Tensor

from .gradcheck import check_gradients

pytestmark = pytest.mark.usefixtures("float64")


class TestImageEncoderConfig:
    """Test cases for image encoder configuration."""

    def test_default_feature_shape(self):
        """Test the default 8x8x8 slab pooled once to 4x4x4."""
        config = ImageEncoderConfig()
        assert config.feature_shape == (16, 4, 4, 4)
        assert config.feature_channels == 16

    def test_stage_shapes_follow_stride_and_pool(self):
        """Test the per-stage (c, h, w, d) shapes."""
        config = ImageEncoderConfig(
            input_shape=(2, 8, 8, 4),
            stages=(
                ConvStageConfig(4, stride=2),
                ConvStageConfig(6, kernel=1, padding=0, pool=2),
            ),
        )
        assert config.stage_shapes() == [(4, 4, 4, 2), (6, 2, 2, 1)]

    def test_pool_must_tile(self):
        """Test that a non-tiling pool is rejected at construction."""
        with pytest.raises(ConfigurationError, match="does not tile"):
            ImageEncoderConfig(
                input_shape=(1, 6, 6, 6),
                stages=(ConvStageConfig(2, pool=4),),
            )

    def test_invalid_stage(self):
        """Test that zero channels are rejected."""
        with pytest.raises(ConfigurationError, match="positive"):
            ConvStageConfig(0)

    def test_needs_two_classes(self):
        """Test that a single class is rejected."""
        with pytest.raises(ConfigurationError, match="num_classes"):
            ImageEncoderConfig(num_classes=1)


class TestImageEncoder:
    """Test cases for the 3D CNN image branch."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = ImageEncoderConfig(
            input_shape=(1, 4, 4, 4),
            stages=(ConvStageConfig(2, pool=2), ConvStageConfig(3)),
        )
        self.encoder = ImageEncoder(self.config, np.random.default_rng(0))
        self.x = np.random.default_rng(1).normal(size=(2, 1, 4, 4, 4))

    def test_output_shapes(self):
        """Test feature map, logits and likelihood shapes."""
        out = self.encoder(Tensor(self.x))
        assert out.features.shape == (2, 3, 2, 2, 2)
        assert out.logits.shape == (2, 2)
        assert out.summary.shape == (2, 3)
        assert [a.shape for a in out.activations] == [
            (2, 2, 4, 4, 4),
            (2, 3, 2, 2, 2),
        ]

    def test_likelihood_is_distribution(self):
        """Test that z_i rows are probabilities summing to one."""
        z = self.encoder(Tensor(self.x)).likelihood.data
        assert (z >= 0).all()
        np.testing.assert_allclose(z.sum(axis=1), 1.0)

    def test_rejects_wrong_input_shape(self):
        """Test that an input of the wrong extent is rejected."""
        with pytest.raises(ConfigurationError, match="Image input"):
            self.encoder(Tensor(np.zeros((2, 1, 4, 4, 8))))

    def test_gradients(self):
        """Test encoder gradients by finite differences."""
        x = Parameter(self.x)
        conv = self.encoder.convs[0]
        conv.bias.data[:] = [0.05, -0.03]
        params = [x, conv.weight, self.encoder.head.weight]
        check_gradients(lambda: (self.encoder(x).logits ** 2).sum(), params)


class TestTabularTransformer:
    """Test cases for the tabular transformer branch."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = TabularTransformerConfig(
            n_attr=3, embed_dim=4, depth=2, heads=2, ff_hidden=6
        )
        self.model = TabularTransformer(self.config, np.random.default_rng(0))
        self.x = np.random.default_rng(1).normal(size=(5, 3))

    def test_token_count(self):
        """Test that the class token adds one token."""
        assert self.config.token_count == 4
        assert TabularTransformerConfig(class_token=False).token_count == 12

    def test_output_shapes(self):
        """Test token features, summary and logits."""
        out = self.model(Tensor(self.x))
        assert out.features.shape == (5, 4, 4)
        assert out.summary.shape == (5, 4)
        assert out.likelihood.shape == (5, 2)

    def test_embedding_is_per_attribute_affine(self):
        """Test token j = x_j * W_j + B_j."""
        self.model.embed_bias.data[:] = 0.5
        tokens = self.model.embed(Tensor(self.x)).data
        expected = (
            self.x[:, :, None] * self.model.embed_weight.data[None] + 0.5
        )
        np.testing.assert_allclose(tokens, expected)

    def test_intermediate_block_zero_is_embedding(self):
        """Test that block 0 exposes the embedded tokens."""
        config = TabularTransformerConfig(
            n_attr=3,
            embed_dim=4,
            depth=1,
            heads=2,
            class_token=False,
            ff_hidden=6,
            intermediate_block=0,
        )
        model = TabularTransformer(config, np.random.default_rng(0))
        out = model(Tensor(self.x))
        np.testing.assert_allclose(
            out.features.data, model.embed(Tensor(self.x)).data
        )

    def test_without_class_token_summary_is_mean(self):
        """Test that a model without class token pools by mean."""
        config = TabularTransformerConfig(
            n_attr=3,
            embed_dim=4,
            depth=1,
            heads=2,
            class_token=False,
            ff_hidden=6,
        )
        model = TabularTransformer(config, np.random.default_rng(0))
        out = model(Tensor(self.x))
        np.testing.assert_allclose(
            out.summary.data, out.features.data.mean(axis=1)
        )

    def test_rejects_wrong_attribute_count(self):
        """Test that a table with the wrong width is rejected."""
        with pytest.raises(ConfigurationError, match="Tabular input"):
            self.model(Tensor(np.zeros((2, 4))))

    def test_intermediate_block_range(self):
        """Test that intermediate_block must not exceed depth."""
        with pytest.raises(ConfigurationError, match="intermediate_block"):
            TabularTransformerConfig(depth=1, intermediate_block=2)

    def test_gradients(self):
        """Test gradients through embedding, blocks and head."""
        x = Parameter(self.x)
        params = [
            x,
            self.model.embed_weight,
            self.model.class_token,
            self.model.head.bias,
        ]
        check_gradients(lambda: (self.model(x).logits ** 2).sum(), params)
