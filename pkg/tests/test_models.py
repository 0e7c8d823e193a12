"""Tests for the data models."""

import numpy as np
import pytest

from tri_branch_fusion.errors import (
    ConfigurationError,
    ContractError,
    ValidationError,
)
from tri_branch_fusion.models import (
    BranchLikelihoods,
    CaseArrays,
    LabelStrategy,
    LossWeights,
    MetricsReport,
    MultimodalSample,
    PredictionSet,
)

from .factories import tiny_cases


class TestLossWeights:
    """Test cases for the LossWeights class."""

    def test_defaults(self):
        """Test the default branch weights."""
        weights = LossWeights()
        assert (weights.lambda1, weights.lambda2, weights.lambda3) == (
            0.1,
            0.1,
            0.8,
        )

    def test_negative_weight_raises_error(self):
        """Test that a negative weight raises ConfigurationError."""
        with pytest.raises(ConfigurationError, match="must be >= 0"):
            LossWeights(-0.1, 0.1, 0.8)

    def test_all_zero_raises_error(self):
        """Test that all-zero weights raise ConfigurationError."""
        with pytest.raises(ConfigurationError, match="must be > 0"):
            LossWeights(0.0, 0.0, 0.0)

    def test_scaled(self):
        """Test scaling every weight by one factor."""
        scaled = LossWeights(0.2, 0.4, 0.4).scaled(0.5)
        assert scaled == LossWeights(0.1, 0.2, 0.2)

    def test_strategy_values(self):
        """Test label strategies parse from their config names."""
        assert LabelStrategy("label_masking") is LabelStrategy.LABEL_MASKING


class TestMultimodalSample:
    """Test cases for the MultimodalSample class."""

    def test_image_label_is_highest_slice_label(self):
        """Test the volume image label comes from the slices."""
        sample = MultimodalSample(
            case_id=4,
            image=np.zeros((1, 2, 2, 3)),
            tabular=np.zeros(3),
            slice_labels=np.array([0, 1, 0]),
            volume_label=1,
        )
        assert sample.image_label == 1

    def test_image_must_be_4d(self):
        """Test that a 3D image raises ValidationError."""
        with pytest.raises(ValidationError, match=r"\[c,h,w,K\]"):
            MultimodalSample(
                case_id=1,
                image=np.zeros((2, 2, 3)),
                tabular=np.zeros(3),
                slice_labels=np.zeros(3),
                volume_label=0,
            )

    def test_slice_label_count(self):
        """Test that slice labels must match the slice count."""
        with pytest.raises(ValidationError, match="2 slice labels for 3"):
            MultimodalSample(
                case_id=1,
                image=np.zeros((1, 2, 2, 3)),
                tabular=np.zeros(3),
                slice_labels=np.zeros(2),
                volume_label=0,
            )


class TestCaseArrays:
    """Test cases for the CaseArrays class."""

    def setup_method(self):
        """Set up test fixtures."""
        self.cases = tiny_cases(4)

    def test_length_mismatch(self):
        """Test that columns of different lengths are rejected."""
        with pytest.raises(ValidationError, match="tabular has 3 rows"):
            CaseArrays(
                case_ids=self.cases.case_ids,
                images=self.cases.images,
                tabular=self.cases.tabular[:3],
                slice_labels=self.cases.slice_labels,
                volume_labels=self.cases.volume_labels,
            )

    def test_subset(self):
        """Test selecting cases keeps every column aligned."""
        subset = self.cases.subset([3, 1])
        assert len(subset) == 2
        np.testing.assert_array_equal(subset.case_ids, [3, 1])
        np.testing.assert_array_equal(subset.volume_labels, [1, 1])
        np.testing.assert_array_equal(subset.images[0], self.cases.images[3])

    def test_samples_round_trip(self):
        """Test splitting into samples and stacking them back."""
        samples = [self.cases.sample(i) for i in range(len(self.cases))]
        assert samples[1].case_id == 1
        rebuilt = CaseArrays.from_samples(samples)
        np.testing.assert_array_equal(rebuilt.tabular, self.cases.tabular)
        np.testing.assert_array_equal(
            rebuilt.slice_labels, self.cases.slice_labels
        )


class TestBranchLikelihoods:
    """Test cases for the BranchLikelihoods class."""

    def test_present(self):
        """Test only the given branches are reported."""
        z = np.array([0.3, 0.7])
        likelihoods = BranchLikelihoods(z_t=z)
        assert len(likelihoods.present()) == 1

    def test_empty_raises_error(self):
        """Test that no branch at all violates the contract."""
        with pytest.raises(ContractError, match="At least one"):
            BranchLikelihoods()

    def test_not_a_probability(self):
        """Test that rows must sum to one."""
        with pytest.raises(ValidationError, match="z_i rows are not"):
            BranchLikelihoods(z_i=np.array([0.3, 0.3]))

    def test_negative_entry(self):
        """Test that negative entries are rejected."""
        with pytest.raises(ValidationError, match="z_f rows are not"):
            BranchLikelihoods(z_f=np.array([1.5, -0.5]))

    def test_shape_mismatch(self):
        """Test that branches must agree in shape."""
        with pytest.raises(ValidationError, match="shapes differ"):
            BranchLikelihoods(
                z_i=np.array([0.5, 0.5]), z_t=np.array([[0.5, 0.5]])
            )


class TestPredictionSet:
    """Test cases for the PredictionSet class."""

    def test_sizes(self):
        """Test the basic accessors."""
        predictions = PredictionSet(
            scores=np.array([[0.4, 0.6], [0.8, 0.2]]),
            predicted=np.array([1, 0]),
            labels=np.array([1, 1]),
        )
        assert len(predictions) == 2
        assert predictions.num_classes == 2

    def test_length_mismatch(self):
        """Test that predictions and labels must align."""
        with pytest.raises(ValidationError, match="differ in n"):
            PredictionSet(
                scores=np.array([[0.4, 0.6]]),
                predicted=np.array([1]),
                labels=np.array([1, 0]),
            )

    def test_theta_range(self):
        """Test that a binary threshold must lie in (0, 1)."""
        with pytest.raises(ValidationError, match="theta"):
            PredictionSet(
                scores=np.array([[0.4, 0.6]]),
                predicted=np.array([1]),
                labels=np.array([1]),
                theta=1.0,
            )

    def test_predicted_range(self):
        """Test that decisions must be valid class ids."""
        with pytest.raises(ValidationError, match="out of range"):
            PredictionSet(
                scores=np.array([[0.4, 0.6]]),
                predicted=np.array([2]),
                labels=np.array([1]),
            )


class TestMetricsReport:
    """Test cases for the MetricsReport class."""

    def test_as_dict(self):
        """Test the scalar metrics keep their order."""
        report = MetricsReport(0.5, 0.0, None, None, 0.5, 0.25, 0.5)
        assert list(report.as_dict()) == [
            "acc",
            "mcc",
            "auroc",
            "auprc",
            "recall",
            "jaccard",
            "macro_f1",
        ]
        assert report.as_dict()["auroc"] is None

    def test_out_of_range(self):
        """Test that metrics outside their range are rejected."""
        with pytest.raises(ValidationError, match="acc outside"):
            MetricsReport(1.5, 0.0, None, None, 0.5, 0.25, 0.5)
        with pytest.raises(ValidationError, match="mcc outside"):
            MetricsReport(0.5, -2.0, None, None, 0.5, 0.25, 0.5)
