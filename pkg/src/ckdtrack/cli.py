"""Command-line interface.

Every command takes an optional TOML settings file. Any setting can be overridden
with its dotted name, e.g. ``--elim.keep_ratio 0.5``, and the most common ones have
their own flags. Errors are reported as a single line, with a nonzero exit code.
"""
__all__ = ["main"]

from functools import wraps
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Text, Tuple

import click

from ckdtrack.errors import CKDError

FLAG_KEYS = {
    "seed": "seed",
    "synthetic": "data.synthetic",
    "output_dir": "output_dir",
    "variant": "train.variant",
    "mask_ratio": "train.mask_ratio",
    "steps": "train.steps",
    "dataset": "data.test_root",
    "elim": "elim.mode",
    "keep_ratio": "elim.keep_ratio",
}
"""Settings set by the named flags."""

CONTEXT = dict(ignore_unknown_options=True, help_option_names=["-h", "--help"])


def parse_arguments(args: Sequence[Text]) -> Tuple[Optional[Text], Dict[Text, Text]]:
    """Settings file and dotted-key overrides from the free command-line arguments.

    >>> from ckdtrack.cli import parse_arguments
    >>> parse_arguments(["run.toml", "--elim.keep_ratio", "0.5", "--train.steps=10"])
    ('run.toml', {'elim.keep_ratio': '0.5', 'train.steps': '10'})
    """
    settings = None
    overrides = {}
    args = list(args)
    while args:
        token = args.pop(0)
        if not token.startswith("-"):
            if settings is not None:
                raise click.UsageError(f"Unexpected argument {token}")
            settings = token
            continue
        key, _, value = token[2:].partition("=")
        if not token.startswith("--") or "." not in key:
            raise click.UsageError(f"No such option: {token}")
        if not value:
            if not args:
                raise click.UsageError(f"Missing value for --{key}")
            value = args.pop(0)
        overrides[key] = value
    return settings, overrides


def load_config(args: Sequence[Text], **flags: Any):
    """Settings file, then dotted overrides, then named flags."""
    from ckdtrack.readers.toml import read_settings

    settings, overrides = parse_arguments(args)
    overrides.update(
        {FLAG_KEYS[k]: v for k, v in flags.items() if k in FLAG_KEYS and v is not None}
    )
    config = read_settings(settings, overrides=overrides)
    getLogger("ckdtrack").setLevel(config.log_level)
    return config


def one_line_errors(function):
    """Turns library errors into click exceptions, i.e. one line and exit code 1."""

    @wraps(function)
    def decorated(*args, **kwargs):
        try:
            return function(*args, **kwargs)
        except (CKDError, IOError) as error:
            message = " ".join(str(error).split())
            raise click.ClickException(f"{type(error).__name__}: {message}")

    return decorated


def common_options(function):
    """Options shared by every command."""
    options = [
        click.argument("args", nargs=-1, type=click.UNPROCESSED),
        click.option("--seed", type=int, help="Seed of the run."),
        click.option(
            "--synthetic",
            flag_value=True,
            default=None,
            help="Use the synthetic benchmark.",
        ),
        click.option(
            "--output", "output_dir", type=click.Path(), help="Output directory."
        ),
        click.option(
            "--overwrite", is_flag=True, help="Overwrite existing output files."
        ),
    ]
    for option in reversed(options):
        function = option(function)
    return function


@click.group(context_settings=dict(help_option_names=["-h", "--help"]))
def main():
    """Coupled knowledge distillation for RGB-thermal tracking.

    Commands accept an optional .toml settings file, and any setting as a dotted
    option, e.g. --elim.keep_ratio 0.5.
    """


@main.command(context_settings=CONTEXT)
@common_options
@click.option("--variant", help="Ablation variant.")
@click.option("--mask-ratio", type=float, help="Mask ratio.")
@click.option("--steps", type=int, help="Number of training steps.")
@one_line_errors
def train(args, overwrite, **flags):
    """Trains a model, writing a checkpoint, the losses and the resolved settings."""
    from ckdtrack.outputs.losslog import LossLog
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import Trainer, save_checkpoint

    config = load_config(args, **flags)
    output = Path(config.output_dir)
    checkpoint = output / "model.pt"
    if checkpoint.exists() and not overwrite:
        raise IOError(f"File {checkpoint} already exists and --overwrite not given")

    sequences = read_sequences(config, "train")
    trainer = Trainer(config)
    with LossLog() as log:
        trainer.fit(sequences)
    log.save(output / "losses.csv", overwrite=overwrite)
    _write_snapshot(config, output / "settings.toml")
    save_checkpoint(trainer.model, checkpoint)


@main.command(name="eval", context_settings=CONTEXT)
@common_options
@click.option(
    "--checkpoint", type=click.Path(dir_okay=False), help="Trained model to evaluate."
)
@click.option("--dataset", help="Directory of test sequences.")
@click.option("--tau", type=float, default=20, show_default=True, help="PR threshold.")
@click.option("--elim", help="Elimination mode: none, ce, mce, ce_rgb_only.")
@click.option("--keep-ratio", type=float, help="Fraction of search tokens kept.")
@click.option("--echo", is_flag=True, help="Echo the ground truth (harness check).")
@one_line_errors
def evaluate(args, overwrite, checkpoint, tau, echo, **flags):
    """Evaluates a checkpoint on the test sequences, writing metrics.json."""
    from ckdtrack.evaluation import EchoTracker
    from ckdtrack.evaluation import evaluate as run_evaluation
    from ckdtrack.readers import read_sequences

    if flags.get("dataset") is not None:
        flags["synthetic"] = False
    config = load_config(args, **flags)
    if echo:
        tracker = EchoTracker()
    elif checkpoint is None:
        raise click.UsageError("--checkpoint is required unless --echo is given")
    else:
        tracker = _tracker(config, checkpoint)

    report = run_evaluation(tracker, read_sequences(config, "test"), tau=tau)
    getLogger(__name__).info(
        f"PR@{tau:g} {report.pr:.4f}, NPR {report.npr:.4f}, SR {report.sr:.4f}"
    )
    _save(report.to_dict(), config, "metrics.json", overwrite)


@main.command(context_settings=CONTEXT)
@common_options
@click.option(
    "--variants", default="baseline,ckd", show_default=True, help="Comma-separated."
)
@click.option("--mask-ratios", help="Comma-separated, for variants with masking.")
@click.option("--elims", help="Comma-separated elimination modes.")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated.")
@click.option("--steps", type=int, help="Steps per training run.")
@click.option("--tau", type=float, default=20, show_default=True, help="PR threshold.")
@one_line_errors
def ablate(args, overwrite, variants, mask_ratios, elims, seeds, tau, **flags):
    """Trains and evaluates variants, writing one row per run to ablation.csv."""

    config = load_config(args, **flags)
    table = run_ablation(
        config,
        variants=_split(variants),
        mask_ratios=[float(r) for r in _split(mask_ratios)] or None,
        elims=_split(elims) or None,
        seeds=[int(s) for s in _split(seeds)],
        tau=tau,
    )
    _save(table, config, "ablation.csv", overwrite)


@main.command(name="gap-report", context_settings=CONTEXT)
@common_options
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    help="Trained model. Defaults to a freshly initialized one.",
)
@click.option("--samples", default=32, show_default=True, help="Number of samples.")
@one_line_errors
def gap_report(args, overwrite, checkpoint, samples, **flags):
    """Writes the style statistics of the two students to gap_report.csv."""
    from dataclasses import replace

    from ckdtrack.backbone import FourBranchModel
    from ckdtrack.evaluation import gap_report as compute_gap_report
    from ckdtrack.evaluation import style_distance
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import load_checkpoint

    config = load_config(args, **flags)
    if checkpoint is None:
        model = FourBranchModel.build(config.model, seed=config.seed)
    else:
        model = load_checkpoint(checkpoint)
        config = replace(config, crop=_model_crop(config.crop, model))
    batch = gap_samples(read_sequences(config, "test"), config, samples)
    report = compute_gap_report(model, batch, config.distill.epsilon)
    getLogger(__name__).info(f"Style distance: {style_distance(report):.6f}")
    _save(report, config, "gap_report.csv", overwrite)


def _split(values: Optional[Text]) -> List[Text]:
    return [v.strip() for v in (values or "").split(",") if v.strip()]


def _write_snapshot(config, path: Path) -> None:
    from ckdtrack.readers.toml import resolved_snapshot

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(resolved_snapshot(config))


def _save(data, config, filename: Text, overwrite: bool) -> Path:
    """Saves to the output directory with the sink matching the file suffix."""
    from ckdtrack.outputs.sinks import factory

    path = Path(config.output_dir) / filename
    return factory(filename)(data, path, overwrite=overwrite)


def _model_crop(crop, model):
    """Crop settings with the template and search sizes the model was built for."""
    from dataclasses import replace

    return replace(
        crop,
        template_size=model.config.template_size,
        search_size=model.config.search_size,
    )


def _tracker(config, checkpoint):
    from ckdtrack.evaluation import CKDTracker
    from ckdtrack.train import load_checkpoint

    model = load_checkpoint(checkpoint)
    elim = config.elim if config.elim.mode != "none" else None
    return CKDTracker(model, _model_crop(config.crop, model), elim)


def gap_samples(sequences, config, count: int):
    """Deterministic samples: each frame searched around its own ground truth."""
    from itertools import islice

    from ckdtrack.sequences import collate, make_sample

    pairs = (
        make_sample(sequence[k], sequence[0], sequence[k].gt, config.crop)
        for k in range(1, max(len(s) for s in sequences))
        for sequence in sequences
        if k < len(sequence)
    )
    return collate(list(islice(pairs, count)))


def run_ablation(
    config,
    variants: Sequence[Text],
    seeds: Sequence[int],
    mask_ratios: Optional[Sequence[float]] = None,
    elims: Optional[Sequence[Text]] = None,
    tau: float = 20,
):
    """One row per variant, mask ratio (variants with masking only), seed and
    elimination mode.

    Each variant and seed is trained once, then evaluated with every elimination
    mode. Distillation columns are empty for terms a variant does not train.
    """
    import pandas as pd

    from ckdtrack.evaluation import CKDTracker, evaluate
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import Trainer
    from ckdtrack.variants import get_variant

    mask_ratios = list(mask_ratios or [config.train.mask_ratio])
    elims = list(elims or [config.elim.mode])
    train_sequences = read_sequences(config, "train")
    test_sequences = read_sequences(config, "test")

    rows = []
    for name in variants:
        variant = get_variant(name)
        for ratio in mask_ratios if variant.masking else [0.0]:
            for seed in seeds:
                run = config.replace(
                    **{
                        "seed": seed,
                        "train.variant": variant.name,
                        "train.mask_ratio": ratio,
                    }
                )
                trainer = Trainer(run)
                final = trainer.fit(train_sequences)[-1]
                for mode in elims:
                    elim = None
                    if mode != "none":
                        elim = run.replace(**{"elim.mode": mode}).elim
                    report = evaluate(
                        CKDTracker(trainer.model, run.crop, elim), test_sequences, tau
                    )
                    rows.append(
                        {
                            "variant": variant.name,
                            "mask_ratio": ratio,
                            "elim": mode,
                            "seed": seed,
                            "pr": report.pr,
                            "npr": report.npr,
                            "sr": report.sr,
                            "final_task": final.task,
                            "final_cd": final.cd if variant.content else None,
                            "final_sd": final.sd if variant.style else None,
                            "final_fd": final.fd if variant.feature else None,
                        }
                    )
    return pd.DataFrame(rows)
