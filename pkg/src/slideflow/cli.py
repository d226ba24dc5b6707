"""Command-line entry point: synth, train, predict, eval, ablate, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. ``SLIDEFLOW_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from .config import ConfigError, RunConfig, parse_overrides
from .data_io import (
    SlideData,
    check_gene_names,
    checksum64,
    export_csv,
    load_slide,
    save_slide,
    slide_to_bytes,
    synth_slide,
)
from .denoiser import Denoiser, load_checkpoint, save_checkpoint
from .errors import ContractError, DataError, NumericError, ShapeError, SlideflowError
from .evaluation import evaluate_slide, hvg_count
from .flow import fit, sample

log = logging.getLogger("slideflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SIDECAR = "effective_config.txt"
MANIFEST = "manifest.tsv"


class UsageError(SlideflowError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------------------


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _slide_paths(entries: Sequence[str]) -> list[Path]:
    """Expand directories (manifest order, else sorted ``*.slb``) into files."""
    out = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            manifest = p / MANIFEST
            if manifest.exists():
                with manifest.open() as fh:
                    out += [p / row["file"] for row in csv.DictReader(fh, delimiter="\t")]
            else:
                out += sorted(p.glob("*.slb"))
        else:
            out.append(p)
    return out


def _load(path: Path) -> SlideData:
    try:
        return load_slide(path)
    except FileNotFoundError:
        raise DataError(f"slide file not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read slide {path}: {exc.strerror}") from None
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _load_many(entries: Sequence[str], what: str) -> list[SlideData]:
    paths = _slide_paths(entries)
    if not paths:
        raise DataError(f"no {what} slides given (set paths.{what})")
    return [_load(p) for p in paths]


def _load_model(path: str):
    if not path:
        raise UsageError("paths.checkpoint is not set")
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _check_fit(model: Denoiser, slide: SlideData) -> None:
    bad = []
    if slide.d_in != model.config.d_in:
        bad.append(f"d_in (slide {slide.d_in}, checkpoint {model.config.d_in})")
    if slide.n_genes != model.config.n_genes:
        bad.append(f"n_genes (slide {slide.n_genes}, checkpoint {model.config.n_genes})")
    if bad:
        raise ShapeError(f"slide {slide.id!r} does not match the checkpoint: " + ", ".join(bad))


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t" if path.suffix == ".tsv" else ",")
        w.writerow(header)
        w.writerows(rows)
    return path


def _train(cfg: RunConfig, train: list[SlideData], val: list[SlideData], prior: str | None = None):
    first = train[0]
    for s in train[1:] + val:
        check_gene_names(first.gene_names, s.gene_names)
    if not val:
        log.warning("no validation slides given; early stopping scores the training slides")
        val = train
    model = Denoiser(cfg.denoiser(first.n_genes, first.d_in))
    log.info("denoiser with %d parameters", model.n_params)
    return fit(train, val, model, cfg.flow(prior=prior))


# -- commands ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    rows = []
    for r in range(cfg["synth.replicates"]):
        seed = cfg["seed"] + r
        slide = synth_slide(cfg.synth(seed))
        name = f"slide_{r:03d}.slb"
        data = slide_to_bytes(slide)
        (out / name).write_bytes(data)
        rows.append([slide.id, name, seed, slide.n_spots, slide.n_genes, slide.d_in, f"{checksum64(data):016x}"])
    _write_rows(out / MANIFEST, ["id", "file", "seed", "n_spots", "n_genes", "d_in", "checksum"], rows)


def cmd_train(cfg: RunConfig, out: Path) -> None:
    train = _load_many(cfg["paths.train"], "train")
    val = _load_many(cfg["paths.val"], "val") if cfg["paths.val"] else []
    best, report = _train(cfg, train, val)
    save_checkpoint(best, out / "model.sfck", meta={"best_epoch": report.best_epoch, "prior": cfg["flow.prior"]})
    report.write_csv(out / "train_report.csv")


def cmd_predict(cfg: RunConfig, out: Path) -> None:
    model, _ = _load_model(cfg["paths.checkpoint"])
    if not cfg["paths.slide"]:
        raise UsageError("paths.slide is not set")
    slide = _load(Path(cfg["paths.slide"]))
    _check_fit(model, slide)
    pred = sample(slide.coords, slide.features, model, cfg.flow(), np.random.default_rng(cfg["seed"]))
    result = SlideData(slide.id + "_pred", slide.coords, slide.features, pred, slide.gene_names, normalized=True)
    if cfg["predict.format"] == "csv":
        export_csv(result, out / "predictions.csv")
    elif cfg["predict.format"] == "slb":
        save_slide(result, out / "predictions.slb")
    else:
        raise ConfigError(f"predict.format must be slb or csv, got {cfg['predict.format']!r}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    if not cfg["paths.predictions"] or not cfg["paths.truth"]:
        raise UsageError("paths.predictions and paths.truth must both be set")
    pred = _load(Path(cfg["paths.predictions"]))
    truth = _load(Path(cfg["paths.truth"]))
    check_gene_names(truth.gene_names, pred.gene_names)
    if pred.n_spots != truth.n_spots:
        raise DataError(f"predictions have {pred.n_spots} spots, truth has {truth.n_spots}")
    n = hvg_count(truth.n_genes, cfg["eval.n_hvg"])
    if n < cfg["eval.n_hvg"]:
        log.warning("only %d genes available; evaluating all of them instead of %d", n, cfg["eval.n_hvg"])
    report = evaluate_slide(pred.expression, truth, n)
    report.write_csv(out / "eval_report.csv")


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    train = _load_many(cfg["paths.train"], "train")
    val = _load_many(cfg["paths.val"], "val") if cfg["paths.val"] else []
    test = _load_many(cfg["paths.test"], "test")
    rows = []
    for prior in cfg["ablate.priors"]:
        model, _ = _train(cfg, train, val, prior=prior)
        for steps in cfg["ablate.steps"]:
            flow_cfg = cfg.flow(prior=prior, steps=steps)
            scores = []
            for slide in test:
                _check_fit(model, slide)
                pred = sample(slide.coords, slide.features, model, flow_cfg, np.random.default_rng(cfg["seed"]))
                scores.append(evaluate_slide(pred, slide, hvg_count(slide.n_genes, cfg["eval.n_hvg"])).mean)
            rows.append([prior, steps, repr(float(np.mean(scores)))])
    _write_rows(out / "ablation.csv", ["prior", "steps", "mean_pearson"], rows)


def cmd_bench(cfg: RunConfig, out: Path) -> None:
    model = Denoiser(cfg.denoiser(cfg["synth.n_genes"], cfg["synth.d_in"]))
    flow_cfg = cfg.flow()
    rows = bench_mod.scaling_benchmark(
        model, cfg["bench.spot_counts"], cfg["bench.repeats"], flow_cfg, seed=cfg["seed"], threads=cfg["threads"]
    )
    bench_mod.write_bench_csv(rows, out / "bench.csv")
    bench_mod.write_bench_svg(rows, out / "bench.svg")
    # timing-free record of what was computed, for reproducibility checks
    digests = []
    for n in cfg["bench.spot_counts"]:
        slide = bench_mod.bench_slide(model, n, cfg["seed"])
        pred = sample(slide.coords, slide.features, model, flow_cfg, np.random.default_rng(cfg["seed"]))
        digests.append([n, f"{checksum64(pred.tobytes()):016x}"])
    _write_rows(out / "bench_outputs.tsv", ["n_spots", "prediction_checksum"], digests)


HELP = {
    "synth": "generate replicate synthetic slides",
    "train": "train a denoiser with flow matching",
    "predict": "sample expression for a slide from a checkpoint",
    "eval": "score predictions against measured expression",
    "ablate": "sweep refinement steps and priors",
    "bench": "time and memory scaling of inference",
}

COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slideflow", description="Spatial flow-matching expression models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--threads", type=int, help="BLAS thread limit (default 1)")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument("--prior", choices=["zinb", "gaussian", "zero"], help="prior distribution")
        p.add_argument("--steps", type=int, help="refinement steps for sampling")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.update(parse_overrides(args.set))
    flags = {
        "seed": args.seed,
        "threads": args.threads,
        "flow.prior": args.prior,
        "flow.steps": args.steps,
        "paths.out": args.out,
    }
    for key, value in flags.items():
        if value is not None:
            cfg.set(key, value)
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _setup_logging() -> None:
    level = os.environ.get("SLIDEFLOW_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = _prepare_out(Path(cfg["paths.out"]), args.force)
        cfg.write(out / SIDECAR)
        with threadpool_limits(limits=cfg["threads"]):
            COMMANDS[args.command](cfg, out)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ShapeError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (UsageError, ConfigError, ContractError) as exc:
        log.error("usage error: %s", exc)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
