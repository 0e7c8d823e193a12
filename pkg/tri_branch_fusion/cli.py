"""Command-line interface for tri-branch neural fusion runs."""

import functools
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, TypeVar

import click

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, load_run_config
from .csv_writer import ReportWriter, write_all_metrics
from .dataset_io import load_dataset, load_split_data
from .errors import ConfigurationError, DataError, TnfError
from .explain import (
    CamBranch,
    CamTarget,
    TabularAccuracyValue,
    grad_cam_3d,
    select_top_k,
    shapley_importance,
)
from .inference import Modality, Predictor
from .models import CaseArrays, MetricsReport
from .network import TnfModel
from .optim import AdamW
from .selection import ImageBranchScorer, group_volume, max_likelihood_select
from .synth import (
    SyntheticGenerator,
    as_split_data,
    gen_synthetic,
    inconsistency_stats,
)
from .training import Trainer

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

SPLITS = ("train", "val", "test")
VIEWS = Predictor.VIEWS

F = TypeVar("F", bound=Callable[..., Any])


def setup_logging(debug: bool = False) -> None:
    """Set up logging configuration.

    Args:
        debug: Whether to enable debug logging
    """
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )


def _fail(error: BaseException, code: int, debug: bool) -> None:
    if debug:
        traceback.print_exception(error)
    click.echo(f"Error: {error}", err=True)
    sys.exit(code)


def reports_errors(command: F) -> F:
    """Map package errors to exit codes and print them to stderr."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        debug = bool((click.get_current_context().obj or {}).get("debug"))
        logger = logging.getLogger(__name__)
        try:
            return command(*args, **kwargs)
        except ConfigurationError as e:
            logger.error(f"Configuration error: {e}")
            _fail(e, EXIT_CONFIG, debug)
        except DataError as e:
            logger.error(f"Data error: {e}")
            _fail(e, EXIT_DATA, debug)
        except TnfError as e:
            logger.error(f"{type(e).__name__}: {e}")
            _fail(e, EXIT_ERROR, debug)
        except Exception as e:
            logger.error(f"Unexpected error: {e}")
            _fail(e, EXIT_ERROR, debug)

    return wrapper  # type: ignore[return-value]


def _load_cases(run: RunConfig, split: str) -> CaseArrays:
    if run.data.path is not None:
        splits = load_dataset(run.data.path)
    else:
        assert run.data.synth is not None
        splits = SyntheticGenerator(run.data.synth).generate()
    if split not in splits:
        raise DataError(f"Dataset has no {split!r} split")
    return splits[split]


def _load_model(run: RunConfig, checkpoint_path: Path) -> TnfModel:
    return restore_model(load_checkpoint(checkpoint_path), run.model)


def _output_dir(run: RunConfig, out: Optional[Path]) -> Path:
    target = out if out is not None else run.output_dir()
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create {target}: {e}") from e
    return target


def _predictor(run: RunConfig, model: TnfModel) -> Predictor:
    return Predictor(
        model,
        theta=run.eval.theta,
        group_size=run.train.group_size,
        pad_value=run.train.pad_value,
    )


config_option = click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(path_type=Path, dir_okay=False),
    help="YAML run configuration (defaults apply when omitted).",
)
out_option = click.option(
    "-o",
    "--out",
    type=click.Path(path_type=Path, file_okay=False),
    help="Output directory (default: output.dir or $TNF_OUTPUT_ROOT).",
)
checkpoint_option = click.option(
    "--checkpoint",
    type=click.Path(path_type=Path, dir_okay=False),
    required=True,
    help="Checkpoint written by the train command.",
)
split_option = click.option(
    "--split",
    type=click.Choice(SPLITS),
    default="test",
    show_default=True,
    help="Dataset split to use.",
)
drop_option = click.option(
    "--drop-modality",
    type=click.Choice([m.value for m in Modality]),
    default=None,
    help="Evaluate as if this input modality were missing.",
)


@click.group()
@click.option(
    "-d",
    "--debug",
    is_flag=True,
    help="Print debug information during execution.",
)
@click.version_option(version="0.1.0")
@click.pass_context
def main(ctx: click.Context, debug: bool = False) -> None:
    """Train and evaluate tri-branch image/tabular fusion models.

    Examples:
        tnf gen-data -o data/
        tnf train -c run.yaml -o runs/mmtm
        tnf eval -c run.yaml --checkpoint runs/mmtm/model.tnfc
    """
    setup_logging(debug)
    ctx.ensure_object(dict)
    ctx.obj["debug"] = debug


@main.command("gen-data")
@config_option
@out_option
@reports_errors
def gen_data(config_path: Optional[Path], out: Optional[Path]) -> None:
    """Generate a synthetic dataset and its manifest."""
    run = load_run_config(config_path)
    if run.data.synth is None:
        raise ConfigurationError("gen-data needs data.synth settings")
    target = _output_dir(run, out)
    manifest = gen_synthetic(run.data.synth, target)
    splits = load_dataset(target)
    table = inconsistency_stats(
        splits["train"], run.train.group_size, run.train.group_min_positive
    )
    ReportWriter().write_inconsistency(table, target / "inconsistency.csv")
    run.dump_resolved(target)
    counts = ", ".join(f"{k}={v.count}" for k, v in manifest.splits.items())
    click.echo(f"Dataset written to {target} ({counts})")


@main.command()
@config_option
@out_option
@reports_errors
def train(config_path: Optional[Path], out: Optional[Path]) -> None:
    """Train a TNF model and write its checkpoint and epoch log."""
    logger = logging.getLogger(__name__)
    run = load_run_config(config_path)
    target = _output_dir(run, out)
    run.dump_resolved(target)
    if run.data.path is not None:
        data = load_split_data(run.data.path)
    else:
        assert run.data.synth is not None
        data = as_split_data(SyntheticGenerator(run.data.synth).generate())
    model = TnfModel(run.model, seed=run.train.seed)

    def on_checkpoint(
        epoch: int, model: TnfModel, optimizer: AdamW, val_acc: float
    ) -> None:
        save_checkpoint(
            target / f"checkpoint_epoch{epoch:03d}.tnfc",
            model,
            optimizer,
            val_acc,
            epoch,
        )

    result = Trainer(model, run.train_config(), on_checkpoint).fit(data)
    writer = ReportWriter()
    writer.write_epochs(result.history, target / "epochs.csv")
    if result.pretrain_metrics:
        writer.write_metrics(
            result.pretrain_metrics, target / "pretrain_metrics.csv"
        )
    save_checkpoint(
        target / "model.tnfc",
        result.model,
        result.optimizer,
        result.best_val_acc,
        result.best_epoch,
    )
    logger.info("Training completed successfully")
    click.echo(
        f"Best epoch {result.best_epoch}: val ACC "
        f"{result.best_val_acc:.4f}; checkpoint at {target / 'model.tnfc'}"
    )


@main.command("eval")
@config_option
@checkpoint_option
@split_option
@drop_option
@out_option
@reports_errors
def evaluate(
    config_path: Optional[Path],
    checkpoint: Path,
    split: str,
    drop_modality: Optional[str],
    out: Optional[Path],
) -> None:
    """Compute metrics per branch and for the ensemble."""
    run = load_run_config(config_path)
    model = _load_model(run, checkpoint)
    cases = _load_cases(run, split)
    drop = None if drop_modality is None else Modality(drop_modality)
    reports = _predictor(run, model).evaluate(cases, drop)
    target = _output_dir(run, out)
    prefix = f"metrics_{split}" + (f"_no_{drop.value}" if drop else "")
    writer = ReportWriter()
    write_all_metrics(writer, reports, target, prefix)
    click.echo(writer.metrics_to_text(reports), nl=False)


@main.command()
@config_option
@checkpoint_option
@split_option
@drop_option
@click.option(
    "--view",
    type=click.Choice(VIEWS),
    default="ensemble",
    show_default=True,
    help="Which output to report.",
)
@click.option(
    "-f",
    "--file",
    type=click.Path(path_type=Path, dir_okay=False),
    help="Save predictions to this CSV file instead of printing them.",
)
@reports_errors
def infer(
    config_path: Optional[Path],
    checkpoint: Path,
    split: str,
    drop_modality: Optional[str],
    view: str,
    file: Optional[Path],
) -> None:
    """Write per-case predictions of one view."""
    run = load_run_config(config_path)
    model = _load_model(run, checkpoint)
    cases = _load_cases(run, split)
    drop = None if drop_modality is None else Modality(drop_modality)
    predictions = _predictor(run, model).predict(cases, drop)
    if view not in predictions:
        raise ConfigurationError(
            f"View {view!r} is unavailable; available: "
            f"{', '.join(predictions)}"
        )
    writer = ReportWriter()
    if file:
        writer.write_predictions(predictions[view], file)
        click.echo(f"Predictions saved to {file}")
    else:
        click.echo(writer.predictions_to_csv_string(predictions[view]))


@main.command()
@config_option
@checkpoint_option
@split_option
@click.option("--case", "case_index", type=int, default=0, show_default=True)
@click.option(
    "--branch",
    type=click.Choice([b.value for b in CamBranch]),
    default="image",
    show_default=True,
)
@click.option("--class-index", type=int, default=1, show_default=True)
@click.option(
    "--layer",
    type=int,
    default=-1,
    show_default=True,
    help="Conv stage to explain (negative counts from the last).",
)
@out_option
@reports_errors
def gradcam(
    config_path: Optional[Path],
    checkpoint: Path,
    split: str,
    case_index: int,
    branch: str,
    class_index: int,
    layer: int,
    out: Optional[Path],
) -> None:
    """Write a Grad-CAM heatmap of the most positive slice group of a case."""
    run = load_run_config(config_path)
    model = _load_model(run, checkpoint)
    cases = _load_cases(run, split)
    if not 0 <= case_index < len(cases):
        raise ConfigurationError(
            f"--case must be in [0, {len(cases)}), got {case_index}"
        )
    grouping = group_volume(
        cases.images[case_index], run.train.group_size, run.train.pad_value
    )
    group, slab = max_likelihood_select(grouping, ImageBranchScorer(model))
    heatmap = grad_cam_3d(
        model,
        slab,
        cases.tabular[case_index],
        CamTarget(CamBranch(branch), class_index),
        layer,
    )
    target = _output_dir(run, out)
    case_id = int(cases.case_ids[case_index])
    header = heatmap.write(target / f"gradcam_case{case_id}_group{group}.raw")
    click.echo(f"Heatmap written with header {header}")


def _parse_attributes(text: Optional[str]) -> Optional[Tuple[int, ...]]:
    if text is None:
        return None
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigurationError(
            f"--attributes must be comma-separated integers: {text!r}"
        ) from e


@main.command()
@config_option
@checkpoint_option
@click.option(
    "--split",
    type=click.Choice(SPLITS),
    default="val",
    show_default=True,
    help="Split whose accuracy defines the attribute game.",
)
@click.option(
    "--attributes",
    type=str,
    default=None,
    help="Comma-separated attribute ids to attribute (default: all).",
)
@click.option("--top-k", type=int, default=None, help="Report the k best.")
@out_option
@reports_errors
def shapley(
    config_path: Optional[Path],
    checkpoint: Path,
    split: str,
    attributes: Optional[str],
    top_k: Optional[int],
    out: Optional[Path],
) -> None:
    """Exact Shapley importance of tabular attributes."""
    run = load_run_config(config_path)
    model = _load_model(run, checkpoint)
    train_cases = _load_cases(run, "train")
    cases = _load_cases(run, split)
    value = TabularAccuracyValue(
        model,
        train_cases.tabular,
        cases.tabular,
        cases.volume_labels,
        run.eval.theta,
        players=_parse_attributes(attributes),
    )
    report = shapley_importance(
        value, value.n_attr, description=f"tabular accuracy on {split}"
    )
    names = [str(p) for p in value.players]
    target = _output_dir(run, out)
    ReportWriter().write_attribution(report, target / "shapley.csv", names)
    if top_k is not None:
        best = [names[i] for i in select_top_k(report, top_k)]
        click.echo(f"Top {top_k} attributes: {', '.join(best)}")
    click.echo(
        f"Attribution over {value.n_attr} attributes "
        f"({value.evaluations} evaluations) written to {target}"
    )


@main.command()
@config_option
@checkpoint_option
@split_option
@click.option(
    "--view",
    type=click.Choice(VIEWS),
    default="ensemble",
    show_default=True,
)
@drop_option
@out_option
@reports_errors
def roc(
    config_path: Optional[Path],
    checkpoint: Path,
    split: str,
    view: str,
    drop_modality: Optional[str],
    out: Optional[Path],
) -> None:
    """Write ROC and precision-recall curve points of one view."""
    run = load_run_config(config_path)
    model = _load_model(run, checkpoint)
    cases = _load_cases(run, split)
    drop = None if drop_modality is None else Modality(drop_modality)
    predictor = _predictor(run, model)
    reports: Dict[str, MetricsReport] = predictor.evaluate(cases, drop)
    if view not in reports:
        raise ConfigurationError(f"View {view!r} is unavailable")
    target = _output_dir(run, out)
    ReportWriter().write_curves(
        reports[view], target / f"roc_{view}.csv", target / f"pr_{view}.csv"
    )
    click.echo(f"Curve points for {view} written to {target}")


if __name__ == "__main__":
    main()
