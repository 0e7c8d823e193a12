"""Tests for the three-output model."""

import numpy as np
import pytest

from tri_branch_fusion.encoders import TabularTransformerConfig
from tri_branch_fusion.errors import ConfigurationError, ContractError
from tri_branch_fusion.fusion import FusionKind
from tri_branch_fusion.losses import tnf_loss
from tri_branch_fusion.models import LossWeights
from tri_branch_fusion.network import ModelConfig, TnfModel
from tri_branch_fusion.tensor import Tensor

from .factories import tiny_model_config
from .gradcheck import check_gradients

pytestmark = pytest.mark.usefixtures("float64")


class TestTnfModel:
    """Test cases for TnfModel."""

    def setup_method(self):
        """Set up test fixtures."""
        self.model = TnfModel(tiny_model_config(), seed=4)
        rng = np.random.default_rng(5)
        self.x_i = Tensor(rng.normal(size=(3, 1, 4, 4, 4)))
        self.x_t = Tensor(rng.normal(size=(3, 3)))

    def test_three_branch_outputs(self):
        """Test that both inputs produce z_i, z_t and z_f."""
        z = self.model(self.x_i, self.x_t).likelihoods()
        for branch in (z.z_i, z.z_t, z.z_f):
            assert branch.shape == (3, 2)
            np.testing.assert_allclose(branch.sum(axis=1), 1.0)

    def test_image_only(self):
        """Test that a missing table skips tabular and fusion branches."""
        out = self.model(x_i=self.x_i)
        assert out.tabular is None
        assert out.fused is None
        assert out.likelihoods().z_f is None

    def test_tabular_only(self):
        """Test that a missing image skips image and fusion branches."""
        out = self.model(x_t=self.x_t)
        assert out.image is None
        assert out.fused is None

    def test_needs_a_modality(self):
        """Test that a forward pass without inputs is a contract error."""
        with pytest.raises(ContractError, match="at least one"):
            self.model()

    def test_batch_sizes_must_match(self):
        """Test that paired inputs must have the same batch size."""
        with pytest.raises(ContractError, match="Batch sizes"):
            self.model(self.x_i, Tensor(np.zeros((2, 3))))

    def test_without_fusion(self):
        """Test that fusion=None gives a two-branch model."""
        model = TnfModel(tiny_model_config(fusion=None))
        assert not model.has_fusion
        assert model(self.x_i, self.x_t).fused is None

    def test_seed_determines_weights(self):
        """Test that equal seeds give equal weights."""
        same = TnfModel(tiny_model_config(), seed=4).state_dict()
        other = TnfModel(tiny_model_config(), seed=5).state_dict()
        own = self.model.state_dict()
        assert all(np.array_equal(own[k], same[k]) for k in own)
        assert not all(np.array_equal(own[k], other[k]) for k in own)

    @pytest.mark.parametrize("kind", list(FusionKind))
    def test_every_fusion_kind(self, kind):
        """Test that every fusion block plugs into the model."""
        model = TnfModel(tiny_model_config(fusion=kind))
        assert model(self.x_i, self.x_t).fused.z_f.shape == (3, 2)

    def test_clip_features(self):
        """Test contrastive projections to the shared width."""
        model = TnfModel(tiny_model_config(fusion=None, clip_dim=5))
        f_i, f_t = model.clip_features(model(self.x_i, self.x_t))
        assert f_i.shape == (3, 5)
        assert f_t.shape == (3, 5)

    def test_clip_features_need_projection(self):
        """Test that a model without clip_dim has no projections."""
        with pytest.raises(ConfigurationError, match="clip_dim"):
            self.model.clip_features(self.model(self.x_i, self.x_t))

    def test_clip_features_need_both_modalities(self):
        """Test that contrastive features need image and table."""
        model = TnfModel(tiny_model_config(fusion=None, clip_dim=5))
        with pytest.raises(ContractError, match="both"):
            model.clip_features(model(x_i=self.x_i))

    def test_class_count_must_agree(self):
        """Test that encoders with different class counts are rejected."""
        with pytest.raises(ConfigurationError, match="classes"):
            ModelConfig(tabular=TabularTransformerConfig(num_classes=3))

    def test_end_to_end_gradients(self):
        """Test loss gradients through all three branches."""
        fusion = self.model.fusion
        params = [
            self.model.image_encoder.convs[1].weight,
            self.model.tabular_encoder.embed_weight,
            fusion.f_c.weight,
            fusion.head.bias,
        ]
        weights = LossWeights(0.3, 0.2, 0.5)

        def loss():
            out = self.model(self.x_i, self.x_t)
            return tnf_loss(
                out.image.logits,
                out.tabular.logits,
                out.fused.logits,
                [0, 1, 1],
                [0, 1, 0],
                [0, 1, 1],
                weights,
            )

        check_gradients(loss, params)
