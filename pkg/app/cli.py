"""
Command line entrypoint: `python -m app.cli <command>`.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or IO failure.
"""
import asyncio
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import click
from pydantic import ValidationError

from app.errors import InvalidInputError
from app.models import PipelineConfig, RunReport
from app.services.pipeline import PipelineService
from app.storage.engine import ArtifactEngine
from app.storage.repository import ArtifactRepository

logger = logging.getLogger(__name__)

EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _absolute(path: Optional[str]) -> Optional[Path]:
    return Path(path).resolve() if path is not None else None


async def _load_config(path: Optional[Path], overrides: Dict[str, Any]) -> PipelineConfig:
    base = {}
    if path is not None:
        repo = ArtifactRepository(ArtifactEngine(root=path.parent))
        base = (await repo.load_config(str(path))).model_dump()
    base.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.model_validate(base)


def _summary(report: RunReport) -> Dict[str, Any]:
    summary: Dict[str, Any] = {"command": report.command, "timing_s": round(report.timing_s, 3)}
    if report.cells:
        summary["cells"] = [
            {"sigma_phi_sq": c.sigma_phi_sq, "sigma_theta_sq": c.sigma_theta_sq,
             "macro_f1_mean": c.macro_f1_mean, "macro_f1_std": c.macro_f1_std}
            for c in report.cells
        ]
    if report.metrics is not None:
        summary["accuracy"] = report.metrics.accuracy
        summary["macro_f1"] = report.metrics.macro_f1
    summary["artifacts"] = len(report.digests)
    return summary


def _run(ctx: click.Context, command: str, overrides: Dict[str, Any], call) -> None:
    """Build config and service, run `call(service)`, translate failures into exit codes."""
    options = ctx.obj

    async def main() -> RunReport:
        cfg = await _load_config(options["config"], {**options["overrides"], **overrides})
        service = PipelineService(ArtifactRepository(ArtifactEngine(root=cfg.out_dir)), cfg)
        logger.info(f"Running {command} with seed {cfg.seed}, writing to {cfg.out_dir}")
        return await call(service)

    try:
        report = asyncio.run(main())
    except (ValidationError, InvalidInputError) as e:
        logger.error(f"{command} rejected its input: {e}")
        click.echo(f"error: {e}", err=True)
        ctx.exit(EXIT_INVALID)
    except Exception as e:
        logger.exception(f"{command} failed")
        click.echo(f"error: {e}", err=True)
        ctx.exit(EXIT_RUNTIME)
    else:
        click.echo(json.dumps(_summary(report), indent=2))


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON or YAML pipeline config.")
@click.option("--seed", type=int, help="Override the config seed.")
@click.option("--jobs", type=int, help="Concurrent work units.")
@click.option("--out-dir", type=click.Path(file_okay=False), help="Directory for all outputs.")
@click.pass_context
def cli(ctx: click.Context, config_path, seed, jobs, out_dir):
    """One-shot sleep posture learning."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    ctx.obj = {
        "config": _absolute(config_path),
        "overrides": {"seed": seed, "jobs": jobs, "out_dir": _absolute(out_dir)},
    }


@cli.command()
@click.option("--imu", is_flag=True, help="Also write synthetic IMU logs for the four modules.")
@click.pass_context
def simulate(ctx, imu):
    """Canonical postures, a keyframed BVH sequence and optional IMU logs."""
    _run(ctx, "simulate", {}, lambda s: s.simulate(imu=imu))


@cli.command("run-virtual")
@click.option("--no-augment", is_flag=True, help="Train on the replicated shot only.")
@click.option("--bvh", type=click.Path(dir_okay=False), help="Sequence to take shots from.")
@click.pass_context
def run_virtual(ctx, no_augment, bvh):
    """Augmentation grid experiment on virtual postures."""
    _run(ctx, "run-virtual", {"no_augment": no_augment or None, "bvh_path": _absolute(bvh)},
         lambda s: s.run_virtual())


@cli.command("run-wearable")
@click.option("--no-augment", is_flag=True, help="Train on the full raw training recordings.")
@click.option("--sessions", type=click.Path(dir_okay=False), help="Sessions manifest; synthesized when omitted.")
@click.pass_context
def run_wearable(ctx, no_augment, sessions):
    """One-shot experiment on fused wearable sessions."""
    _run(ctx, "run-wearable", {"no_augment": no_augment or None, "sessions_path": _absolute(sessions)},
         lambda s: s.run_wearable())


@cli.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--output", default="orientations.csv", show_default=True)
@click.pass_context
def fuse(ctx, paths, output):
    """Fuse one session's IMU logs into joint orientations."""
    _run(ctx, "fuse", {}, lambda s: s.fuse([_absolute(p) for p in paths], output))


@cli.command()
@click.option("--sigma-phi-sq", type=float, required=True, help="Axis variance, deg^2.")
@click.option("--sigma-theta-sq", type=float, required=True, help="Angle variance, deg^2.")
@click.option("--count", type=int, default=500, show_default=True, help="Rows per class.")
@click.option("--name", default="dataset", show_default=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="train", show_default=True)
@click.pass_context
def augment(ctx, sigma_phi_sq, sigma_theta_sq, count, name, split):
    """Augment the virtual posture dictionary into a labelled dataset."""
    _run(ctx, "augment", {}, lambda s: s.augment(sigma_phi_sq, sigma_theta_sq, count, name, split))


@cli.command()
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--model-id", default="model", show_default=True)
@click.pass_context
def train(ctx, dataset, model_id):
    """Tune and train a classifier on a dataset CSV."""
    _run(ctx, "train", {}, lambda s: s.train(str(_absolute(dataset)), model_id))


@cli.command()
@click.argument("model")
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--output", default="predictions.csv", show_default=True)
@click.pass_context
def predict(ctx, model, dataset, output):
    """Predict labels for every row of a dataset CSV."""
    _run(ctx, "predict", {}, lambda s: s.predict(model, str(_absolute(dataset)), output))


@cli.command()
@click.argument("model")
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.pass_context
def evaluate(ctx, model, dataset):
    """Accuracy, macro-F1 and confusion of a model on a labelled dataset."""
    _run(ctx, "evaluate", {}, lambda s: s.evaluate(model, str(_absolute(dataset))))


@cli.command()
@click.argument("train_dataset", type=click.Path(dir_okay=False))
@click.argument("test_dataset", type=click.Path(dir_okay=False))
@click.pass_context
def similarity(ctx, train_dataset, test_dataset):
    """Class-by-class mean similarity matrices."""
    _run(ctx, "similarity", {},
         lambda s: s.similarity(str(_absolute(train_dataset)), str(_absolute(test_dataset))))


@cli.command("export-features")
@click.argument("train_dataset", type=click.Path(dir_okay=False))
@click.argument("test_dataset", required=False, type=click.Path(dir_okay=False))
@click.option("--output", default="features.csv", show_default=True)
@click.pass_context
def export_features(ctx, train_dataset, test_dataset, output):
    """Labelled feature rows with a split column, for external embedding tools."""
    test = str(_absolute(test_dataset)) if test_dataset else None
    _run(ctx, "export-features", {}, lambda s: s.export_features(str(_absolute(train_dataset)), test, output))


if __name__ == "__main__":
    cli()
