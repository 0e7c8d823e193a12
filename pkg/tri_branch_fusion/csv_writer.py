"""CSV exports for training logs, metrics, predictions and attributions."""

import io
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, TextIO, Union

import numpy as np
import pandas as pd

from .errors import DataError
from .explain import AttributionReport
from .models import MetricsReport, PredictionSet
from .synth import InconsistencyTable
from .training import EpochRecord

Target = Union[str, Path, TextIO]


class ReportWriter:
    """Writer for exporting run artifacts to CSV format."""

    EPOCH_HEADERS = ["epoch", "lr", "train_loss", "val_acc", "val_mcc"]
    METRIC_HEADERS = [
        "view",
        "acc",
        "mcc",
        "auroc",
        "auprc",
        "recall",
        "jaccard",
        "macro_f1",
    ]
    ATTRIBUTION_HEADERS = ["attribute", "phi", "rank"]

    def __init__(self, float_format: str = "%.10g") -> None:
        self.float_format = float_format
        self.logger = logging.getLogger(__name__)

    def _write(self, frame: pd.DataFrame, output: Target) -> None:
        if isinstance(output, (str, Path)):
            try:
                Path(output).parent.mkdir(parents=True, exist_ok=True)
                frame.to_csv(
                    output, index=False, float_format=self.float_format
                )
            except OSError as e:
                raise DataError(f"Cannot write {output}: {e}") from e
            self.logger.debug(f"Wrote {len(frame)} rows to {output}")
        else:
            frame.to_csv(output, index=False, float_format=self.float_format)

    def epochs_frame(self, history: Sequence[EpochRecord]) -> pd.DataFrame:
        return pd.DataFrame(
            [asdict(record) for record in history],
            columns=self.EPOCH_HEADERS,
        )

    def metrics_frame(
        self, reports: Mapping[str, MetricsReport]
    ) -> pd.DataFrame:
        rows = [
            {"view": view, **report.as_dict()}
            for view, report in reports.items()
        ]
        return pd.DataFrame(rows, columns=self.METRIC_HEADERS)

    def predictions_frame(self, predictions: PredictionSet) -> pd.DataFrame:
        """One row per case with its label, decision and class scores."""
        n = len(predictions)
        case_ids = (
            predictions.case_ids
            if predictions.case_ids is not None
            else np.arange(n)
        )
        frame = pd.DataFrame(
            {
                "case_id": np.asarray(case_ids, dtype=np.int64),
                "label": predictions.labels,
                "predicted": predictions.predicted,
            }
        )
        for k in range(predictions.num_classes):
            frame[f"score_{k}"] = predictions.scores[:, k]
        return frame

    def points_frame(
        self, points: Sequence[Sequence[float]], columns: List[str]
    ) -> pd.DataFrame:
        return pd.DataFrame([list(p) for p in points], columns=columns)

    def attribution_frame(
        self,
        report: AttributionReport,
        names: Optional[Sequence[str]] = None,
    ) -> pd.DataFrame:
        rank = {attr: i + 1 for i, attr in enumerate(report.ranking)}
        labels = (
            list(names)
            if names is not None
            else [str(i) for i in range(report.n_attr)]
        )
        frame = pd.DataFrame(
            {
                "attribute": labels,
                "phi": report.phi,
                "rank": [rank[i] for i in range(report.n_attr)],
            },
            columns=self.ATTRIBUTION_HEADERS,
        )
        return frame.sort_values("rank", kind="stable")

    def write_epochs(
        self, history: Sequence[EpochRecord], output: Target
    ) -> None:
        self._write(self.epochs_frame(history), output)

    def write_metrics(
        self, reports: Mapping[str, MetricsReport], output: Target
    ) -> None:
        self._write(self.metrics_frame(reports), output)

    def write_predictions(
        self, predictions: PredictionSet, output: Target
    ) -> None:
        self._write(self.predictions_frame(predictions), output)

    def write_curves(
        self, report: MetricsReport, roc_output: Target, pr_output: Target
    ) -> None:
        """Write ROC (fpr, tpr) and precision-recall (recall, precision)."""
        self._write(
            self.points_frame(report.roc_points, ["fpr", "tpr"]), roc_output
        )
        self._write(
            self.points_frame(report.pr_points, ["recall", "precision"]),
            pr_output,
        )

    def write_attribution(
        self,
        report: AttributionReport,
        output: Target,
        names: Optional[Sequence[str]] = None,
    ) -> None:
        self._write(self.attribution_frame(report, names), output)

    def write_inconsistency(
        self, table: InconsistencyTable, output: Target
    ) -> None:
        self._write(table.to_frame(), output)

    def metrics_to_text(self, reports: Mapping[str, MetricsReport]) -> str:
        """Flat ``view.metric=value`` lines, ``na`` for undefined values."""
        lines = []
        for view, report in reports.items():
            for name, value in report.as_dict().items():
                shown = "na" if value is None else f"{value:.10g}"
                lines.append(f"{view}.{name}={shown}")
        return "\n".join(lines) + "\n"

    def metrics_to_csv_string(
        self, reports: Mapping[str, MetricsReport]
    ) -> str:
        output = io.StringIO()
        self.write_metrics(reports, output)
        return output.getvalue()

    def predictions_to_csv_string(self, predictions: PredictionSet) -> str:
        output = io.StringIO()
        self.write_predictions(predictions, output)
        return output.getvalue()


def write_all_metrics(
    writer: ReportWriter,
    reports: Dict[str, MetricsReport],
    out_dir: Union[str, Path],
    prefix: str = "metrics",
) -> List[Path]:
    """Write the per-view CSV and the flat text summary into ``out_dir``."""
    out = Path(out_dir)
    csv_path = out / f"{prefix}.csv"
    text_path = out / f"{prefix}.txt"
    writer.write_metrics(reports, csv_path)
    try:
        text_path.write_text(writer.metrics_to_text(reports), encoding="utf-8")
    except OSError as e:
        raise DataError(f"Cannot write {text_path}: {e}") from e
    return [csv_path, text_path]
