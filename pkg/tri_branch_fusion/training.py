"""Branch pretraining and tri-branch training loop."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    NonFiniteError,
    TrainingDivergedError,
)
from .functional import softmax_cross_entropy
from .inference import Predictor
from .losses import (
    DEFAULT_TAU,
    clip_finetune_loss,
    label_masked_loss,
    tnf_loss,
)
from .models import (
    CaseArrays,
    LabelStrategy,
    LossWeights,
    MetricsReport,
    SplitData,
)
from .network import TnfModel
from .optim import AdamW, CosineSchedule
from .selection import (
    AIR_VALUE,
    ImageBranchScorer,
    TrainingView,
    build_group_view,
)
from .tensor import Tensor

CheckpointHook = Callable[[int, TnfModel, AdamW, float], None]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, loss setup and grouping parameters."""

    epochs: int = 10
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    label_strategy: LabelStrategy = LabelStrategy.LABEL_MASKING
    clip_enabled: bool = False
    clip_tau: float = DEFAULT_TAU
    checkpoint_every: int = 0
    pretrain_image_epochs: int = 0
    pretrain_tabular_epochs: int = 0
    pretrain_lr: float = 1e-3
    group_size: int = 8
    pad_value: float = AIR_VALUE
    group_min_positive: int = 4
    theta: float = 0.5

    def __post_init__(self) -> None:
        """Validate the training configuration after initialization."""
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.clip_enabled and self.batch_size < 2:
            raise ConfigurationError(
                "batch_size must be >= 2 when the contrastive loss is enabled"
            )
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ConfigurationError("Need 0 <= lr_min <= lr_max")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.clip_tau <= 0:
            raise ConfigurationError("clip_tau must be > 0")
        if min(self.pretrain_image_epochs, self.pretrain_tabular_epochs) < 0:
            raise ConfigurationError("Pretraining epochs must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        if self.group_size < 1 or self.group_min_positive < 1:
            raise ConfigurationError(
                "group_size and group_min_positive must be >= 1"
            )
        if not 0.0 < self.theta < 1.0:
            raise ConfigurationError("theta must be in (0, 1)")
        strategy = LabelStrategy(self.label_strategy)
        object.__setattr__(self, "label_strategy", strategy)
        if (
            strategy is LabelStrategy.MAX_LIKELIHOOD_SELECTION
            and self.pretrain_image_epochs < 1
        ):
            raise ConfigurationError(
                "Maximum likelihood selection needs a pretrained image "
                "branch: set pretrain_image_epochs >= 1"
            )


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    val_mcc: float


@dataclass
class TrainingResult:
    """Trained model (best validation weights loaded) and its history."""

    model: TnfModel
    history: List[EpochRecord]
    best_epoch: int
    best_val_acc: float
    optimizer: AdamW
    pretrain_metrics: Dict[str, MetricsReport] = field(default_factory=dict)


def select_best_epoch(history: List[EpochRecord]) -> EpochRecord:
    """Highest validation accuracy; the earliest epoch wins ties."""
    if not history:
        raise ContractError("Empty training history")
    best = history[0]
    for record in history[1:]:
        if record.val_acc > best.val_acc:
            best = record
    return best


def _count_batches(n: int, batch_size: int, min_size: int = 1) -> int:
    count = math.ceil(n / batch_size)
    if count > 1 and n - (count - 1) * batch_size < min_size:
        count -= 1
    return count


def _batches(
    n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1
) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    yield from chunks


class Trainer:
    """Fits a TnfModel under one label strategy and loss."""

    def __init__(
        self,
        model: TnfModel,
        config: TrainConfig,
        on_checkpoint: Optional[CheckpointHook] = None,
    ) -> None:
        self.model = model
        self.config = config
        self.on_checkpoint = on_checkpoint
        self.logger = logging.getLogger(__name__)
        self.rng = np.random.default_rng(config.seed)
        if config.clip_enabled:
            if model.has_fusion:
                raise ConfigurationError(
                    "Contrastive fine-tuning uses a fusion-less model "
                    "(model.fusion: none)"
                )
            if model.clip_image is None:
                raise ConfigurationError(
                    "Contrastive fine-tuning needs model.clip_dim"
                )

    def predictor(self) -> Predictor:
        return Predictor(
            self.model,
            theta=self.config.theta,
            group_size=self.config.group_size,
            pad_value=self.config.pad_value,
        )

    def fit(self, data: SplitData) -> TrainingResult:
        """Pretrain branches if asked, then run tri-branch training.

        The weights of the epoch with the best validation accuracy are
        loaded into the model before returning.
        """
        cfg = self.config
        pretrain_metrics: Dict[str, MetricsReport] = {}
        if cfg.pretrain_image_epochs:
            self._pretrain(data.train, "image", cfg.pretrain_image_epochs)
            pretrain_metrics["image"] = self._validate(data.val)["image"]
        if cfg.pretrain_tabular_epochs:
            self._pretrain(data.train, "tabular", cfg.pretrain_tabular_epochs)
            pretrain_metrics["tabular"] = self._validate(data.val)["tabular"]
        for branch, report in pretrain_metrics.items():
            self.logger.info(
                f"Pretrained {branch} branch: val ACC {report.acc:.4f}"
            )

        scorer = None
        if cfg.label_strategy is LabelStrategy.MAX_LIKELIHOOD_SELECTION:
            scorer = ImageBranchScorer(self.model)
        view = build_group_view(
            data.train,
            cfg.label_strategy,
            cfg.group_size,
            cfg.pad_value,
            cfg.group_min_positive,
            scorer,
        )
        min_size = 2 if cfg.clip_enabled else 1
        steps_per_epoch = _count_batches(len(view), cfg.batch_size, min_size)
        optimizer = AdamW(
            self.model,
            CosineSchedule(
                cfg.epochs * steps_per_epoch, cfg.lr_max, cfg.lr_min
            ),
            weight_decay=cfg.weight_decay,
        )
        self.logger.info(
            f"Training on {len(view)} rows ({cfg.label_strategy.value}), "
            f"{steps_per_epoch} steps per epoch for {cfg.epochs} epochs"
        )

        history: List[EpochRecord] = []
        best_state = self.model.state_dict()
        best_acc = -math.inf
        for epoch in range(1, cfg.epochs + 1):
            lr = optimizer.state.current_lr
            losses = []
            for step, rows in enumerate(
                _batches(len(view), cfg.batch_size, self.rng, min_size), 1
            ):
                losses.append(self._step(view, rows, optimizer, epoch, step))
            reports = self._validate(data.val)
            ensemble = reports["ensemble"]
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=float(np.mean(losses)),
                val_acc=ensemble.acc,
                val_mcc=ensemble.mcc,
            )
            history.append(record)
            self.logger.info(
                f"Epoch {epoch}/{cfg.epochs}: loss {record.train_loss:.4f}, "
                f"val ACC {record.val_acc:.4f}, val MCC {record.val_mcc:.4f}"
            )
            if record.val_acc > best_acc:
                best_acc = record.val_acc
                best_state = self.model.state_dict()
            if (
                self.on_checkpoint is not None
                and cfg.checkpoint_every
                and epoch % cfg.checkpoint_every == 0
            ):
                self.on_checkpoint(
                    epoch, self.model, optimizer, record.val_acc
                )

        best = select_best_epoch(history)
        self.model.load_state_dict(best_state)
        self.logger.info(
            f"Best epoch {best.epoch} with val ACC {best.val_acc:.4f}"
        )
        return TrainingResult(
            model=self.model,
            history=history,
            best_epoch=best.epoch,
            best_val_acc=best.val_acc,
            optimizer=optimizer,
            pretrain_metrics=pretrain_metrics,
        )

    def _validate(self, cases: CaseArrays) -> Dict[str, MetricsReport]:
        return self.predictor().evaluate(cases)

    def _batch_loss(self, view: TrainingView, rows: np.ndarray) -> Tensor:
        cfg = self.config
        y_i = view.image_labels[rows]
        y_t = view.tabular_labels[rows]
        out = self.model(Tensor(view.images[rows]), Tensor(view.tabular[rows]))
        assert out.image is not None and out.tabular is not None
        if cfg.clip_enabled:
            f_i, f_t = self.model.clip_features(out)
            return clip_finetune_loss(
                out.image.logits,
                out.tabular.logits,
                f_i,
                f_t,
                y_i,
                cfg.loss_weights,
                cfg.clip_tau,
                y_t=y_t,
            )
        logits_f = None if out.fused is None else out.fused.logits
        if cfg.label_strategy is LabelStrategy.LABEL_MASKING:
            return label_masked_loss(
                out.image.logits,
                out.tabular.logits,
                logits_f,
                y_i,
                y_t,
                cfg.loss_weights,
            )
        return tnf_loss(
            out.image.logits,
            out.tabular.logits,
            logits_f,
            y_i,
            y_t,
            y_i,
            cfg.loss_weights,
        )

    def _step(
        self,
        view: TrainingView,
        rows: np.ndarray,
        optimizer: AdamW,
        epoch: int,
        step: int,
    ) -> float:
        optimizer.zero_grad()
        try:
            loss = self._batch_loss(view, rows)
            loss.backward()
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"Training diverged at epoch {epoch}, step {step}: {e}"
            ) from e
        lr = optimizer.step()
        self.logger.debug(
            f"epoch {epoch} step {step}: loss {loss.item():.5f}, lr {lr:.3e}"
        )
        return loss.item()

    def _pretrain(self, cases: CaseArrays, branch: str, epochs: int) -> None:
        """Train one encoder alone with its own cosine schedule.

        The image branch learns from every group with its group label; the
        tabular branch from every case with its volume label.
        """
        cfg = self.config
        if branch == "image":
            view = build_group_view(
                cases,
                LabelStrategy.LABEL_MASKING,
                cfg.group_size,
                cfg.pad_value,
                cfg.group_min_positive,
            )
            inputs, labels = view.images, view.image_labels
        else:
            inputs = cases.tabular
            labels = cases.volume_labels.astype(np.int64)
        n = len(labels)
        steps = epochs * math.ceil(n / cfg.batch_size)
        optimizer = AdamW(
            self.model,
            CosineSchedule(steps, cfg.pretrain_lr, cfg.lr_min),
            weight_decay=cfg.weight_decay,
        )
        for epoch in range(1, epochs + 1):
            losses = []
            for step, rows in enumerate(
                _batches(n, cfg.batch_size, self.rng), 1
            ):
                optimizer.zero_grad()
                try:
                    if branch == "image":
                        out = self.model.image_encoder(Tensor(inputs[rows]))
                    else:
                        out = self.model.tabular_encoder(Tensor(inputs[rows]))
                    loss = softmax_cross_entropy(out.logits, labels[rows])
                    loss.backward()
                except NonFiniteError as e:
                    raise TrainingDivergedError(
                        f"{branch} pretraining diverged at epoch {epoch}, "
                        f"step {step}: {e}"
                    ) from e
                optimizer.step()
                losses.append(loss.item())
            self.logger.info(
                f"Pretrain {branch} epoch {epoch}/{epochs}: "
                f"loss {float(np.mean(losses)):.4f}"
            )
