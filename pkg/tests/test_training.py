"""Tests for branch pretraining and the tri-branch training loop."""

import numpy as np
import pytest

from tri_branch_fusion.errors import (
    ConfigurationError,
    ContractError,
    NonFiniteError,
    TrainingDivergedError,
)
from tri_branch_fusion.models import LabelStrategy, LossWeights, SplitData
from tri_branch_fusion.network import TnfModel
from tri_branch_fusion.training import (
    EpochRecord,
    TrainConfig,
    Trainer,
    _batches,
    _count_batches,
    select_best_epoch,
)

from .factories import tiny_cases, tiny_model_config


def tiny_split(inconsistent=False):
    return SplitData(
        train=tiny_cases(12, seed=0, inconsistent=inconsistent),
        val=tiny_cases(6, seed=1),
    )


def tiny_train_config(**overrides):
    settings = dict(
        epochs=2,
        batch_size=4,
        lr_max=1e-3,
        lr_min=1e-4,
        group_size=4,
        group_min_positive=2,
        seed=7,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrainConfig:
    """Test cases for training configuration validation."""

    def test_defaults(self):
        """Test the default schedule and loss weights."""
        config = TrainConfig()
        assert config.lr_min == 1e-5
        assert config.loss_weights == LossWeights(0.1, 0.1, 0.8)
        assert config.label_strategy is LabelStrategy.LABEL_MASKING

    def test_strategy_from_string(self):
        """Test that the label strategy may be given by value."""
        config = TrainConfig(label_strategy="consistent")
        assert config.label_strategy is LabelStrategy.CONSISTENT

    def test_selection_needs_pretraining(self):
        """Test that selection without a pretrained image branch fails."""
        with pytest.raises(ConfigurationError, match="pretrain_image_epochs"):
            TrainConfig(label_strategy=LabelStrategy.MAX_LIKELIHOOD_SELECTION)

    def test_contrastive_needs_pairs(self):
        """Test that the contrastive loss needs batches of two."""
        with pytest.raises(ConfigurationError, match="batch_size"):
            TrainConfig(clip_enabled=True, batch_size=1)

    @pytest.mark.parametrize(
        "overrides",
        [{"epochs": 0}, {"lr_min": 1.0}, {"theta": 0.0}, {"clip_tau": 0.0}],
    )
    def test_invalid_values(self, overrides):
        """Test that out-of-range settings are rejected."""
        with pytest.raises(ConfigurationError):
            TrainConfig(**overrides)


class TestBatching:
    """Test cases for mini-batch planning."""

    def test_every_row_once(self):
        """Test that an epoch visits each row exactly once."""
        rows = np.concatenate(list(_batches(10, 3, np.random.default_rng(0))))
        assert sorted(rows.tolist()) == list(range(10))

    def test_short_tail_is_merged(self):
        """Test that a tail below the minimum joins the previous batch."""
        sizes = [len(b) for b in _batches(9, 4, np.random.default_rng(0), 2)]
        assert sizes == [4, 5]
        assert _count_batches(9, 4, 2) == 2

    def test_count_matches_batches(self):
        """Test that the planned step count matches the iterator."""
        for n in range(1, 20):
            planned = _count_batches(n, 4, 2)
            actual = len(list(_batches(n, 4, np.random.default_rng(n), 2)))
            assert planned == actual

    def test_select_best_epoch_prefers_earliest(self):
        """Test that ties go to the earliest epoch."""
        history = [
            EpochRecord(1, 1e-3, 0.9, 0.5, 0.0),
            EpochRecord(2, 1e-3, 0.8, 0.7, 0.4),
            EpochRecord(3, 1e-4, 0.7, 0.7, 0.4),
        ]
        assert select_best_epoch(history).epoch == 2

    def test_select_best_epoch_empty(self):
        """Test that an empty history is a contract error."""
        with pytest.raises(ContractError, match="Empty"):
            select_best_epoch([])


class TestTrainer:
    """Test cases for Trainer.fit."""

    def test_fit_records_every_epoch(self):
        """Test history, schedule start and best-epoch bookkeeping."""
        model = TnfModel(tiny_model_config(), seed=0)
        result = Trainer(model, tiny_train_config()).fit(tiny_split())
        assert [r.epoch for r in result.history] == [1, 2]
        assert result.history[0].lr == pytest.approx(1e-3)
        assert result.history[1].lr < result.history[0].lr
        best = max(result.history, key=lambda r: r.val_acc)
        assert result.best_val_acc == best.val_acc
        assert all(np.isfinite(r.train_loss) for r in result.history)

    def test_fit_is_seeded(self):
        """Test that equal seeds reproduce the loss history."""
        runs = [
            Trainer(
                TnfModel(tiny_model_config(), seed=0), tiny_train_config()
            ).fit(tiny_split())
            for _ in range(2)
        ]
        assert [r.train_loss for r in runs[0].history] == [
            r.train_loss for r in runs[1].history
        ]

    def test_best_weights_are_restored(self):
        """Test that the returned model carries the best epoch's weights."""
        snapshots = {}

        def hook(epoch, model, optimizer, val_acc):
            snapshots[epoch] = model.state_dict()

        model = TnfModel(tiny_model_config(), seed=0)
        config = tiny_train_config(epochs=3, checkpoint_every=1)
        result = Trainer(model, config, on_checkpoint=hook).fit(tiny_split())
        best = snapshots[result.best_epoch]
        final = result.model.state_dict()
        assert all(np.array_equal(best[k], final[k]) for k in final)

    def test_checkpoint_hook_cadence(self):
        """Test that the hook fires every checkpoint_every epochs."""
        calls = []
        model = TnfModel(tiny_model_config(), seed=0)
        config = tiny_train_config(epochs=4, checkpoint_every=2)
        Trainer(
            model, config, on_checkpoint=lambda e, m, o, a: calls.append(e)
        ).fit(tiny_split())
        assert calls == [2, 4]

    def test_label_masking_freezes_fusion_on_inconsistent_data(self):
        """Test that fusion weights never move when no row is consistent."""
        model = TnfModel(tiny_model_config(), seed=0)
        before = {
            name: param.data.copy()
            for name, param in model.fusion.named_parameters()
        }
        image_before = model.image_encoder.head.weight.data.copy()
        Trainer(model, tiny_train_config()).fit(tiny_split(True))
        for name, param in model.fusion.named_parameters():
            np.testing.assert_array_equal(param.data, before[name])
        assert not np.array_equal(
            model.image_encoder.head.weight.data, image_before
        )

    def test_consistent_strategy_trains_fusion(self):
        """Test that the consistent strategy updates the fusion head."""
        model = TnfModel(tiny_model_config(), seed=0)
        before = model.fusion.head.weight.data.copy()
        config = tiny_train_config(label_strategy=LabelStrategy.CONSISTENT)
        Trainer(model, config).fit(tiny_split(True))
        assert not np.array_equal(model.fusion.head.weight.data, before)

    def test_max_likelihood_selection_with_pretraining(self):
        """Test selection training after a pretrained image branch."""
        model = TnfModel(tiny_model_config(), seed=0)
        config = tiny_train_config(
            label_strategy=LabelStrategy.MAX_LIKELIHOOD_SELECTION,
            pretrain_image_epochs=1,
            pretrain_tabular_epochs=1,
        )
        result = Trainer(model, config).fit(tiny_split())
        assert set(result.pretrain_metrics) == {"image", "tabular"}
        assert len(result.history) == 2

    def test_pretraining_touches_one_branch(self):
        """Test that tabular pretraining leaves the image branch alone."""
        model = TnfModel(tiny_model_config(), seed=0)
        trainer = Trainer(model, tiny_train_config())
        image_before = model.image_encoder.state_dict()
        tab_before = model.tabular_encoder.head.weight.data.copy()
        trainer._pretrain(tiny_split().train, "tabular", 1)
        after = model.image_encoder.state_dict()
        assert all(np.array_equal(image_before[k], after[k]) for k in after)
        assert not np.array_equal(
            model.tabular_encoder.head.weight.data, tab_before
        )

    def test_contrastive_fine_tuning(self):
        """Test training with the contrastive objective."""
        model = TnfModel(tiny_model_config(fusion=None, clip_dim=4), seed=0)
        config = tiny_train_config(
            clip_enabled=True, loss_weights=LossWeights(0.5, 0.5, 0.2)
        )
        result = Trainer(model, config).fit(tiny_split())
        assert all(np.isfinite(r.train_loss) for r in result.history)

    def test_contrastive_rejects_fusion_model(self):
        """Test that contrastive fine-tuning needs a fusion-less model."""
        model = TnfModel(tiny_model_config(clip_dim=4), seed=0)
        with pytest.raises(ConfigurationError, match="fusion-less"):
            Trainer(model, tiny_train_config(clip_enabled=True))

    def test_contrastive_needs_projection(self):
        """Test that contrastive fine-tuning needs clip_dim."""
        model = TnfModel(tiny_model_config(fusion=None), seed=0)
        with pytest.raises(ConfigurationError, match="clip_dim"):
            Trainer(model, tiny_train_config(clip_enabled=True))

    def test_divergence_is_reported(self, monkeypatch):
        """Test that a non-finite loss stops training with its position."""
        model = TnfModel(tiny_model_config(), seed=0)
        trainer = Trainer(model, tiny_train_config())

        def explode(view, rows):
            raise NonFiniteError("Non-finite values produced by 'exp'")

        monkeypatch.setattr(trainer, "_batch_loss", explode)
        with pytest.raises(TrainingDivergedError, match="epoch 1, step 1"):
            trainer.fit(tiny_split())
