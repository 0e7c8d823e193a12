"""Seeded end-to-end training experiments.

These train several small models and take minutes; run them with
``pytest -m slow``.
"""

import numpy as np
import pytest

from tri_branch_fusion.explain import CamBranch, CamTarget, grad_cam_3d
from tri_branch_fusion.inference import Predictor
from tri_branch_fusion.models import (
    CaseArrays,
    LabelStrategy,
    LossWeights,
    SplitData,
)
from tri_branch_fusion.network import TnfModel
from tri_branch_fusion.synth import SyntheticGenerator, as_split_data
from tri_branch_fusion.training import TrainConfig, Trainer

from .factories import small_model_config, small_synth_config

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
OCTANT = (slice(0, 4), slice(0, 4), slice(0, 4))


def train_config(seed, **overrides):
    settings = dict(
        epochs=6,
        batch_size=8,
        lr_max=1e-3,
        lr_min=1e-4,
        seed=seed,
        group_size=8,
        group_min_positive=2,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def octant_cases(n, seed):
    """Volumes whose positives carry a bright block in the first octant."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.normal(size=(n, 1, 8, 8, 8))
    images[labels == 1, 0, :4, :4, :4] += 3.0
    return CaseArrays(
        case_ids=np.arange(n, dtype=np.int64),
        images=images.astype(np.float32),
        tabular=rng.normal(size=(n, 12)).astype(np.float32),
        slice_labels=np.repeat(labels[:, None], 8, axis=1),
        volume_labels=labels.astype(np.int64),
    )


class TestEnsembleDirection:
    """Test that the ensemble is no worse than its branches."""

    def run_seed(self, seed):
        splits = SyntheticGenerator(
            small_synth_config(n_cases=240, seed=seed)
        ).generate()
        data = as_split_data(splits)

        tnf = TnfModel(small_model_config(), seed=seed)
        result = Trainer(
            tnf, train_config(seed, pretrain_image_epochs=3)
        ).fit(data)
        reports = Predictor(result.model, group_size=8).evaluate(data.test)

        fusion_only = TnfModel(small_model_config(), seed=seed)
        Trainer(
            fusion_only,
            train_config(seed, loss_weights=LossWeights(0.0, 0.0, 1.0)),
        ).fit(data)
        plain = Predictor(fusion_only, group_size=8).evaluate(data.test)

        ensemble = reports["ensemble"].acc
        branches = [reports[v].acc for v in ("image", "tabular", "fusion")]
        tuned_image = Predictor(result.model, group_size=8).evaluate(
            data.val
        )["image"]
        return (
            all(ensemble >= acc - 0.01 for acc in branches)
            and any(ensemble > acc for acc in branches),
            ensemble >= plain["fusion"].acc,
            tuned_image.acc >= result.pretrain_metrics["image"].acc - 0.01,
        )

    def test_majority_of_seeds(self):
        """Test each directional claim holds on at least 4 of 5 seeds."""
        outcomes = np.array([self.run_seed(seed) for seed in SEEDS])
        passed = outcomes.sum(axis=0)
        assert passed[0] >= 4, f"ensemble vs branches: {passed[0]}/5"
        assert passed[1] >= 4, f"ensemble vs plain fusion: {passed[1]}/5"
        assert passed[2] >= 4, f"image branch after fusion: {passed[2]}/5"


class TestGradCamLocality:
    """Test that image heatmaps concentrate on the signal."""

    def mass_in_octant(self, seed):
        data = SplitData(
            train=octant_cases(80, seed), val=octant_cases(20, seed + 100)
        )
        model = TnfModel(small_model_config(), seed=seed)
        config = train_config(
            seed,
            epochs=8,
            label_strategy=LabelStrategy.CONSISTENT,
            loss_weights=LossWeights(1.0, 0.0, 0.0),
        )
        trained = Trainer(model, config).fit(data).model
        target = CamTarget(CamBranch.IMAGE, class_index=1)
        fractions = [
            grad_cam_3d(
                trained, data.val.images[i], data.val.tabular[i], target
            ).mass_fraction(OCTANT)
            for i in np.flatnonzero(data.val.volume_labels == 1)
        ]
        return float(np.mean(fractions))

    def test_heatmap_mass_in_signal_octant(self):
        """Test at least 60% of the mass is in the octant on 4 of 5 seeds."""
        fractions = [self.mass_in_octant(seed) for seed in SEEDS]
        hits = sum(fraction >= 0.6 for fraction in fractions)
        assert hits >= 4, f"octant mass fractions: {fractions}"
