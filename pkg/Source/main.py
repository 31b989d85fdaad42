#!/usr/bin/env python3
"""
Command-line entry point for InfoVAE-Med3D experiments.

Every subcommand is a thin wrapper over ExperimentPipeline:
1. Load configuration (JSON or YAML, optional)
2. Run one pipeline step
3. Report results as rich tables

Exit codes: 0 success, 2 validation error, 3 numeric failure. On failure the
files a command was creating are removed.
"""

import logging
import shutil
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TypeVar

import click
from rich.console import Console

from .config import ExperimentConfig, default_seed, load_config
from .console import StatusIndicator, TableReporter
from .errors import NumericFailure, ValidationError
from .pipeline import PROJECTION_TARGETS, TARGETS, ExperimentPipeline
from .vae3d import preset_names

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

T = TypeVar("T")


class CliState:
    """Shared console objects for one invocation."""

    def __init__(self, spinner: bool = True):
        self.console = Console()
        self.err_console = Console(stderr=True)
        self.status = StatusIndicator(self.console, spinner=spinner)
        self.errors = StatusIndicator(self.err_console, spinner=False)
        self.tables = TableReporter(self.console)

    def run(self, title: str, outputs: Sequence[Path], action: Callable[[], T], status_type: str = "processing") -> T:
        """Run `action`; on failure remove outputs it created and exit non-zero."""
        fresh = [p for p in outputs if not p.exists()]
        self.status.start_operation(title, status_type)
        try:
            result = action()
        except (ValidationError, NumericFailure, OSError) as exc:
            _remove(fresh)
            code = EXIT_NUMERIC if isinstance(exc, NumericFailure) else EXIT_VALIDATION
            self.status.complete_operation(f"{title} failed", "error")
            self.errors.show_error(_one_line(exc))
            raise click.exceptions.Exit(code)
        except BaseException:
            _remove(fresh)
            raise
        self.status.complete_operation(title)
        return result


def _one_line(exc: BaseException) -> str:
    text = str(exc) or exc.__class__.__name__
    return " ".join(text.split())


def _remove(paths: Sequence[Path]) -> None:
    for path in paths:
        if path.is_dir():
            shutil.rmtree(path, ignore_errors=True)
        elif path.exists():
            path.unlink()


def _config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig(seed=default_seed())
    return load_config(path)


def _load(state: CliState, path: Optional[str]) -> ExperimentConfig:
    return state.run("Loading configuration", [], lambda: _config(path))


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
@click.option("--no-spinner", is_flag=True, help="Plain status lines instead of a spinner.")
@click.pass_context
def cli(ctx: click.Context, verbose: bool, no_spinner: bool) -> None:
    """InfoVAE-Med3D: 3-D encoder-decoder experiments on phantom cohorts."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    ctx.obj = CliState(spinner=not no_spinner)


@cli.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def gen_data(state: CliState, config_path: str) -> None:
    """Generate a phantom cohort, its manifest and generator spec."""
    cfg = _load(state, config_path)
    root = cfg.data.root
    outputs = [root] if not root.exists() else [root / "volumes", root / "manifest.csv", root / "generator_spec.yaml"]
    records = state.run(f"Generating cohort in {root}", outputs, ExperimentPipeline(cfg).generate_data, "generating")
    state.tables.display_table(
        state.tables.create_summary_table(
            {"sessions": len(records), "subjects": len({r.subject_id for r in records}), "manifest": str(root / "manifest.csv")},
            title="Cohort",
        )
    )


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Defaults to INFOVAE_SEED or 0.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def split(state: CliState, manifest: str, seed: Optional[int], out_dir: Optional[str]) -> None:
    """Subject-grouped 8:1:1 split into three manifests."""
    source = Path(manifest)
    target_dir = Path(out_dir) if out_dir else source.parent
    outputs = [target_dir / f"{source.stem}_{n}{source.suffix}" for n in ("train", "val", "test")]
    pipeline = ExperimentPipeline(ExperimentConfig())
    resolved_seed = seed if seed is not None else state.run("Resolving seed", [], default_seed)
    paths = state.run("Splitting manifest", outputs, lambda: pipeline.split(source, resolved_seed, target_dir))
    state.tables.display_table([{"split": k, "manifest": str(v)} for k, v in paths.items()], title="Splits")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--preset", "preset_name", type=click.Choice(preset_names()), default=None)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_obj
def train(state: CliState, config_path: str, preset_name: Optional[str], manifest: Optional[str]) -> None:
    """Train the encoder-decoder; writes a checkpoint and a loss log."""
    cfg = _load(state, config_path)
    checkpoint = cfg.outputs.resolved("checkpoint", "model.lvw")
    loss_log = cfg.outputs.resolved("loss_log", "loss_log.csv")
    pipeline = ExperimentPipeline(cfg)
    result = state.run(
        "Training",
        [checkpoint, loss_log],
        lambda: pipeline.train(Path(manifest) if manifest else None, preset_name, checkpoint, loss_log),
        "training",
    )
    last = result.history[-1]
    state.tables.display_table(
        [{"iteration": last.iteration, "rec": last.rec, "kl": last.kl, "mmd": last.mmd, "total": last.total}],
        title="Final loss",
    )


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def embed(state: CliState, checkpoint: str, manifest: str, output: str) -> None:
    """Posterior-mean latent codes, one row per session."""
    pipeline = ExperimentPipeline(ExperimentConfig())
    out = Path(output)
    z = state.run("Embedding", [out], lambda: pipeline.embed(Path(checkpoint), Path(manifest), out), "evaluating")
    state.status.show_info(f"{z.shape[0]} rows x {z.shape[1]} latent dimensions -> {out}", "writing")


@cli.command("eval-recon")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.option("--window", type=int, default=7, show_default=True, help="SSIM window extent (odd).")
@click.pass_obj
def eval_recon(state: CliState, checkpoint: str, manifest: str, output: str, window: int) -> None:
    """PSNR/SSIM of mean-path reconstructions."""
    pipeline = ExperimentPipeline(ExperimentConfig())
    out = Path(output)
    report = state.run(
        "Evaluating reconstructions",
        [out],
        lambda: pipeline.eval_recon(Path(checkpoint), Path(manifest), out, window),
        "evaluating",
    )
    state.tables.display_table(
        state.tables.create_summary_table(
            {"volumes": len(report.rows), "mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim},
            title="Reconstruction",
        )
    )


@cli.command()
@click.option("--latents", required=True, type=click.Path(exists=True, dir_okay=False), help="Training-split latents.")
@click.option("--test-latents", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False), help="Labels for every latent row.")
@click.option("--target", required=True, type=click.Choice(TARGETS))
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def regress(
    state: CliState, latents: str, test_latents: str, manifest: str, target: str, output: str, config_path: Optional[str]
) -> None:
    """Grid-searched SVR on training latents, scored on the test latents."""
    pipeline = ExperimentPipeline(_load(state, config_path))
    out = Path(output)
    report = state.run(
        f"Regressing {target}",
        [out],
        lambda: pipeline.regress(Path(latents), Path(test_latents), Path(manifest), target, out),
        "evaluating",
    )
    state.tables.display_table(
        [{"kernel": r.config.kernel, "c": r.config.c, "mean_mae": r.mean_mae} for r in report.cv_rows],
        title="Cross-validation",
    )
    state.tables.display_table(
        [{
            "target": target, "kernel": report.best.kernel, "c": report.best.c,
            "mae": report.scores.mae, "r2": report.scores.r2, "rmse": report.scores.rmse,
        }],
        title="Held-out",
    )


@cli.command()
@click.option("--latents", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", required=True, type=click.Choice(["pca", "pls"]))
@click.option("--target", type=click.Choice(PROJECTION_TARGETS), default="age", show_default=True)
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def project(
    state: CliState, latents: str, manifest: str, method: str, target: str, output: str, config_path: Optional[str]
) -> None:
    """2-D PCA or PLS coordinates with labels."""
    pipeline = ExperimentPipeline(_load(state, config_path))
    out = Path(output)
    result = state.run(
        f"Projecting with {method}",
        [out],
        lambda: pipeline.project(Path(latents), Path(manifest), method, target, out),
        "evaluating",
    )
    summary = {
        "method": method,
        "target": target,
        "variance_1": float(result.projection.explained_variance[0]),
        "variance_2": float(result.projection.explained_variance[1]),
        "degenerate": result.projection.degenerate,
        "spearman_comp1": result.spearman,
    }
    state.tables.display_table(state.tables.create_summary_table(summary, title="Projection"))


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--presets", required=True, help="Comma-separated preset names.")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def compare(state: CliState, config_path: str, presets: str, output: Optional[str]) -> None:
    """Train several presets on one split and tabulate reconstruction and age regression."""
    cfg = _load(state, config_path)
    names: List[str] = [p.strip() for p in presets.split(",") if p.strip()]
    unknown = [n for n in names if n not in preset_names()]
    if not names or unknown:
        state.errors.show_error(f"unknown presets {unknown}; expected names from {preset_names()}")
        raise click.exceptions.Exit(EXIT_VALIDATION)
    out = Path(output) if output else cfg.outputs.resolved("reports", "reports") / "comparison.csv"
    workdir = out.parent / "compare"
    rows = state.run(
        "Comparing presets",
        [out, workdir],
        lambda: ExperimentPipeline(cfg).compare(names, out, workdir),
        "training",
    )
    state.tables.display_table([vars(r) for r in rows], title="Preset comparison")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    try:
        code = cli.main(args=argv, prog_name="infovae-med3d", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
