"""Command line interface for coloc-retrieval."""

import click
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Tuple

import numpy as np

from .core.config_manager import ConfigManager
from .core.corpus import (
    Corpus,
    generate_corpus,
    load_corpus,
    save_corpus,
    split,
)
from .core.coloc import (
    build_localization_space,
    threshold_mask,
    token_saliency,
    upsample_map,
)
from .core.encoders import ColocModel, ParseMode, encode_image, encode_tokens
from .core.errors import ColocError, ConfigurationError
from .core.evaluator import (
    Direction,
    activation_baseline,
    center_baseline,
    pointing_accuracy,
    random_baseline,
    recall_over_folds,
    span_maps,
    untrained_baseline,
    write_pointing_report,
)
from .core.trainer import (
    load_checkpoint,
    save_checkpoint,
    train,
)
from .utils.netpbm import write_pbm, write_pgm, write_ppm
from .utils.selfcheck import run_selfcheck


# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_RUNTIME = 2

SPLITS = ("train", "val", "test", "all")


class ColocGroup(click.Group):
    """Click group whose usage errors exit with status 1."""

    def main(self, *args: Any, **kwargs: Any) -> Any:
        kwargs["standalone_mode"] = False
        try:
            return super().main(*args, **kwargs)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)


def _abort(action: str, error: Exception) -> NoReturn:
    """Report ``error`` on stderr and exit with its status code."""
    logger.debug(f"{action} failed", exc_info=True)
    click.echo(f"Error {action}: {error}", err=True)
    if isinstance(error, ConfigurationError):
        sys.exit(EXIT_USAGE)
    sys.exit(EXIT_RUNTIME)


def _int_list(
    ctx: click.Context, param: click.Parameter, value: Optional[str]
) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        numbers = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers: {value}")
    if not numbers or min(numbers) < 1:
        raise click.BadParameter(f"expected positive integers: {value}")
    return numbers


def _config(ctx: click.Context, **overrides: Any) -> ConfigManager:
    return ConfigManager(ctx.obj["config_path"], overrides)


def _load_parts(config: ConfigManager, directory: Path) -> Dict[str, Corpus]:
    """Load a corpus and its split, seeded by the corpus seed."""
    corpus = load_corpus(directory, n_max=config.get("n_max"))
    train_part, val_part, test_part = split(
        corpus, config.get_split(), corpus.seed
    )
    return {
        "train": train_part,
        "val": val_part,
        "test": test_part,
        "all": corpus,
    }


def _fold_size(config: ConfigManager, corpus: Corpus) -> int:
    return min(config.get("fold_size"), len(corpus))


@click.group(cls=ColocGroup)
@click.option(
    "--config",
    "-c",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="YAML configuration file",
)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.pass_context
def cli(ctx: click.Context, config: Optional[Path], verbose: bool) -> None:
    """coloc-retrieval - Co-localization from cross-modal retrieval."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config


@cli.command("gen-corpus")
@click.option(
    "--out",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory",
)
@click.option("--images", type=click.IntRange(min=1), help="Image count")
@click.option("--seed", type=click.IntRange(min=0), help="Generator seed")
@click.option("--image-size", type=click.IntRange(min=8), help="Side length")
@click.option("--objects-max", type=click.IntRange(1, 4), help="Max objects")
@click.option("--phrases-target", type=float, help="Mean phrases/caption")
@click.option("--duplicate-fraction", type=float, help="Duplicate rate")
@click.option("--captions", type=click.IntRange(1, 5), help="Per image")
@click.option("--workers", type=click.IntRange(min=1), help="Worker threads")
@click.pass_context
def gen_corpus(
    ctx: click.Context,
    out: Path,
    images: Optional[int],
    seed: Optional[int],
    image_size: Optional[int],
    objects_max: Optional[int],
    phrases_target: Optional[float],
    duplicate_fraction: Optional[float],
    captions: Optional[int],
    workers: Optional[int],
) -> None:
    """Generate a synthetic grounded-caption corpus."""
    try:
        config = _config(
            ctx,
            images=images,
            seed=seed,
            image_size=image_size,
            objects_max=objects_max,
            phrases_target=phrases_target,
            duplicate_fraction=duplicate_fraction,
            captions_per_image=captions,
            workers=workers,
        )
        corpus = generate_corpus(
            config.get("images"),
            config.get("seed"),
            config.get_corpus_stats(),
            max_workers=config.get("workers"),
        )
        manifest = save_corpus(corpus, out)
    except Exception as e:
        _abort("generating corpus", e)

    click.echo(f"Corpus written to {out}")
    for key in ("images", "captions", "vocab_size", "annotations_sha256"):
        click.echo(f"  {key}: {manifest[key]}")


@cli.command("train")
@click.option(
    "--corpus",
    "corpus_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Corpus directory",
)
@click.option(
    "--out",
    required=True,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Checkpoint file to write",
)
@click.option("--loss", type=click.Choice(["npair", "triplet"]))
@click.option("--epochs", type=click.IntRange(min=0))
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--lr", type=float, help="Learning rate")
@click.option("--momentum", type=float)
@click.option("--margin", type=float, help="Triplet margin")
@click.option("--batch", type=click.IntRange(min=2), help="Batch size")
@click.option("--mining", type=click.Choice(["hardest", "random"]))
@click.option("--checkpoint-every", type=click.IntRange(min=0))
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Continue from a checkpoint",
)
@click.option(
    "--validate", is_flag=True, help="Score the validation split per epoch"
)
@click.pass_context
def train_command(
    ctx: click.Context,
    corpus_dir: Path,
    out: Path,
    loss: Optional[str],
    epochs: Optional[int],
    seed: Optional[int],
    lr: Optional[float],
    momentum: Optional[float],
    margin: Optional[float],
    batch: Optional[int],
    mining: Optional[str],
    checkpoint_every: Optional[int],
    resume: Optional[Path],
    validate: bool,
) -> None:
    """Train both encoders with SGD and momentum."""
    try:
        config = _config(
            ctx,
            loss=loss,
            epochs=epochs,
            seed=seed,
            learning_rate=lr,
            momentum=momentum,
            margin=margin,
            batch_size=batch,
            mining=mining,
            checkpoint_every=checkpoint_every,
        )
        cfg = config.get_train_config()
        parts = _load_parts(config, corpus_dir)
        train_part = parts["train"]
        val_part = parts["val"] if validate else None
        size = train_part.stats.image_size
        dims = config.get_encoder_dims(len(train_part.vocab), (size, size))
        state = load_checkpoint(resume) if resume else None

        out.parent.mkdir(parents=True, exist_ok=True)
        metrics_path = out.parent / "metrics.tsv"
        if state is None:
            metrics_path.write_text("", encoding="utf-8")

        click.echo(
            f"Training {cfg.loss_kind} on {len(train_part)} images"
            f" for {cfg.epochs} epochs (seed {cfg.seed})"
        )
        result = train(
            cfg,
            train_part,
            dims=dims,
            state=state,
            val_corpus=val_part,
            metrics_path=metrics_path,
            checkpoint_dir=out.parent,
        )
        save_checkpoint(result.state, out)
    except Exception as e:
        _abort("training", e)

    if result.metrics:
        first, last = result.metrics[0], result.metrics[-1]
        click.echo(
            f"Epoch {first.epoch} loss {first.mean_loss:.4f},"
            f" epoch {last.epoch} loss {last.mean_loss:.4f}"
        )
    click.echo(f"Checkpoint written to {out}")


@cli.command("eval")
@click.option(
    "--ckpt",
    required=True,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Checkpoint to evaluate",
)
@click.option(
    "--corpus",
    "corpus_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--split", "part", type=click.Choice(SPLITS), default="test")
@click.option(
    "--task", type=click.Choice(["pointing", "retrieval"]), required=True
)
@click.option("--parse-mode", type=click.Choice(["word", "phrase"]))
@click.option("--k", "k_list", callback=_int_list, help="e.g. 1,5,10")
@click.option(
    "--report",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Per-query report file",
)
@click.option("--workers", type=click.IntRange(min=1))
@click.pass_context
def eval_command(
    ctx: click.Context,
    ckpt: Path,
    corpus_dir: Path,
    part: str,
    task: str,
    parse_mode: Optional[str],
    k_list: Optional[List[int]],
    report: Optional[Path],
    workers: Optional[int],
) -> None:
    """Run the pointing game or Recall@K on a corpus split."""
    try:
        config = _config(
            ctx, parse_mode=parse_mode, k_list=k_list, workers=workers
        )
        model = load_checkpoint(ckpt).model
        corpus = _load_parts(config, corpus_dir)[part]
        if task == "pointing":
            lines = _eval_pointing(config, model, corpus, report)
        else:
            lines = _eval_retrieval(config, model, corpus, report)
    except Exception as e:
        _abort("evaluating", e)

    for line in lines:
        click.echo(line)


def _eval_pointing(
    config: ConfigManager,
    model: ColocModel,
    corpus: Corpus,
    report: Optional[Path],
) -> List[str]:
    mode = config.get_parse_mode()
    result = pointing_accuracy(model, corpus, mode, config.get("workers"))
    if report is not None:
        write_pointing_report(report, result)
    return [
        "task\tmode\thits\tqueries\taccuracy",
        f"pointing\t{mode.value}\t{int(result.hits)}\t{result.total}"
        f"\t{result.accuracy:.4f}",
    ]


def _eval_retrieval(
    config: ConfigManager,
    model: ColocModel,
    corpus: Corpus,
    report: Optional[Path],
) -> List[str]:
    ks = config.get_k_list()
    lines = ["direction\t" + "\t".join(f"R@{k}" for k in ks)]
    ranks: List[Tuple[Direction, List[int]]] = []
    for direction in Direction:
        result = recall_over_folds(
            model,
            corpus,
            fold_size=_fold_size(config, corpus),
            n_folds=config.get("n_folds"),
            k_list=ks,
            direction=direction,
            max_workers=config.get("workers"),
        )
        values = "\t".join(f"{result.recalls[k]:.4f}" for k in ks)
        lines.append(f"{direction.value}\t{values}")
        ranks.append((direction, result.ranks))
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
        with open(report, "w", encoding="utf-8", newline="\n") as f:
            for direction, direction_ranks in ranks:
                for query, rank in enumerate(direction_ranks):
                    f.write(f"{direction.value}\t{query}\t{rank}\n")
    return lines


@cli.command("render")
@click.option(
    "--ckpt",
    required=True,
    type=click.Path(dir_okay=False, path_type=Path),
)
@click.option(
    "--corpus",
    "corpus_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--caption-id", required=True, help="Caption to render")
@click.option(
    "--out",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
)
@click.option("--mask-quantile", type=float, help="Mask threshold quantile")
@click.option("--parse-mode", type=click.Choice(["word", "phrase"]))
@click.option("--per-token", is_flag=True, help="Also write token maps")
@click.option("--overlay", is_flag=True, help="Also write PPM overlays")
@click.pass_context
def render(
    ctx: click.Context,
    ckpt: Path,
    corpus_dir: Path,
    caption_id: str,
    out: Path,
    mask_quantile: Optional[float],
    parse_mode: Optional[str],
    per_token: bool,
    overlay: bool,
) -> None:
    """Write saliency heatmaps (PGM) and masks (PBM) for one caption."""
    try:
        config = _config(
            ctx, mask_quantile=mask_quantile, parse_mode=parse_mode
        )
        model = load_checkpoint(ckpt).model
        corpus = load_corpus(corpus_dir, n_max=config.get("n_max"))
        try:
            record, caption = corpus.find_caption(caption_id)
        except KeyError:
            raise ColocError(f"Unknown caption id: {caption_id}") from None

        scene = record.scene
        grid = encode_image(scene.image, model.image)
        maps = span_maps(
            model,
            grid,
            caption,
            config.get_parse_mode(),
            scene.height,
            scene.width,
        )
        written: List[Path] = []
        for index, saliency in enumerate(maps):
            mask = threshold_mask(saliency, config.get("mask_quantile"))
            stem = out / f"{caption_id}_{index}"
            assert saliency.upsampled is not None
            written.append(
                write_pgm(stem.with_suffix(".pgm"), saliency.upsampled)
            )
            written.append(write_pbm(stem.with_suffix(".pbm"), mask.mask))
            if overlay:
                written.append(
                    write_ppm(stem.with_suffix(".ppm"), scene.image, mask.mask)
                )
            logger.info(
                f"Span {index}: mask of {mask.cardinality} pixels"
                f" (threshold {mask.threshold:.4f})"
            )
        if per_token:
            toks = encode_tokens(
                caption.token_ids, [], ParseMode.WORD, model.text
            )
            space = build_localization_space(grid, toks)
            for d in range(space.n_valid):
                token_map = upsample_map(
                    token_saliency(space, d), scene.height, scene.width
                )
                assert token_map.upsampled is not None
                written.append(
                    write_pgm(
                        out / f"{caption_id}_t{d}.pgm", token_map.upsampled
                    )
                )
    except Exception as e:
        _abort("rendering", e)

    click.echo(f"Wrote {len(written)} file(s) to {out}:")
    for path in written:
        click.echo(f"  - {path.name}")


@cli.command("selfcheck")
@click.option("--points", type=click.IntRange(min=1), default=10)
@click.option("--instances", type=click.IntRange(min=1), default=100)
@click.option("--seed", type=click.IntRange(min=0), default=0)
def selfcheck(points: int, instances: int, seed: int) -> None:
    """Verify every backward rule and the score/loss oracles."""
    try:
        report = run_selfcheck(points=points, instances=instances, seed=seed)
    except Exception as e:
        _abort("running selfcheck", e)

    for result in report.results:
        click.echo(result.to_line())
    click.echo(f"max grad-check error: {report.max_grad_error:.3e}")
    if not report.passed:
        names = ", ".join(r.name for r in report.failed)
        click.echo(f"Failed checks: {names}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo("All checks passed")


@cli.command("baselines")
@click.option(
    "--corpus",
    "corpus_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--split", "part", type=click.Choice(SPLITS), default="test")
@click.option(
    "--ckpt",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Trained checkpoint for the activation baseline",
)
@click.option("--trials", type=click.IntRange(min=1))
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--workers", type=click.IntRange(min=1))
@click.pass_context
def baselines(
    ctx: click.Context,
    corpus_dir: Path,
    part: str,
    ckpt: Optional[Path],
    trials: Optional[int],
    seed: Optional[int],
    workers: Optional[int],
) -> None:
    """Report random, center, activation and untrained pointing rates."""
    try:
        config = _config(ctx, trials=trials, seed=seed, workers=workers)
        corpus = _load_parts(config, corpus_dir)[part]
        rng = np.random.default_rng(config.get("seed"))
        results = [
            random_baseline(corpus, config.get("trials"), rng),
            center_baseline(corpus),
        ]
        if ckpt is not None:
            model = load_checkpoint(ckpt).model
            results.append(
                activation_baseline(model, corpus, config.get("workers"))
            )
            dims = model.dims
        else:
            size = corpus.stats.image_size
            dims = config.get_encoder_dims(len(corpus.vocab), (size, size))
        results.append(
            untrained_baseline(
                corpus,
                dims,
                config.get("seed"),
                config.get("init_scheme"),
                config.get("workers"),
            )
        )
    except Exception as e:
        _abort("computing baselines", e)

    click.echo("baseline\taccuracy\tstderr")
    for result in results:
        click.echo(
            f"{result.label}\t{result.accuracy:.4f}\t{result.stderr:.4f}"
        )


@cli.command("compare-losses")
@click.option(
    "--corpus",
    "corpus_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
)
@click.option("--epochs", type=click.IntRange(min=0))
@click.option(
    "--seeds", callback=_int_list, default="1,2,3", help="e.g. 1,2,3"
)
@click.option("--workers", type=click.IntRange(min=1))
@click.pass_context
def compare_losses(
    ctx: click.Context,
    corpus_dir: Path,
    epochs: Optional[int],
    seeds: List[int],
    workers: Optional[int],
) -> None:
    """Train N-pair and triplet models per seed and compare them."""
    rows: List[Dict[str, Any]] = []
    try:
        config = _config(ctx, epochs=epochs, workers=workers)
        parts = _load_parts(config, corpus_dir)
        train_part, test_part = parts["train"], parts["test"]
        size = train_part.stats.image_size
        dims = config.get_encoder_dims(len(train_part.vocab), (size, size))
        base = config.get_train_config()
        for seed in seeds:
            for loss_kind in ("npair", "triplet"):
                cfg = replace(base, seed=seed, loss_kind=loss_kind)
                click.echo(f"Training {loss_kind} with seed {seed}...")
                model = train(cfg, train_part, dims=dims).state.model
                pointing = pointing_accuracy(
                    model, test_part, max_workers=config.get("workers")
                )
                recall = recall_over_folds(
                    model,
                    test_part,
                    fold_size=_fold_size(config, test_part),
                    n_folds=1,
                    k_list=[1],
                    max_workers=config.get("workers"),
                )
                rows.append(
                    {
                        "seed": seed,
                        "loss": loss_kind,
                        "pointing": pointing.accuracy,
                        "recall": recall.recalls[1],
                    }
                )
    except Exception as e:
        _abort("comparing losses", e)

    click.echo("seed\tloss\tpointing\tR@1")
    for row in rows:
        click.echo(
            f"{row['seed']}\t{row['loss']}\t{row['pointing']:.4f}"
            f"\t{row['recall']:.4f}"
        )
    wins = sum(
        1
        for seed in seeds
        if _pointing(rows, seed, "npair") >= _pointing(rows, seed, "triplet")
    )
    verdict = "holds" if 2 * wins > len(seeds) else "does not hold"
    click.echo(
        f"npair >= triplet on {wins}/{len(seeds)} seed(s): majority {verdict}"
    )


def _pointing(rows: List[Dict[str, Any]], seed: int, loss: str) -> float:
    for row in rows:
        if row["seed"] == seed and row["loss"] == loss:
            return float(row["pointing"])
    raise KeyError((seed, loss))


def main() -> None:
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
