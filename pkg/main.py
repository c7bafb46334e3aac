"""
forgesem - CLI Interface
Generate a synthetic forgery corpus, train both decoupling stages, evaluate
cross-method generalization and inspect filters and saliency.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from src import __version__
from src.config import CliConfig, ConfigError, build_config, load_config
from src.corpus import (
    REAL_METHOD,
    CorpusError,
    CorpusManifest,
    PairLoader,
    gen_corpus,
    import_images,
    load_image,
)
from src.evaluation import (
    MetricError,
    emit_report,
    grad_cam,
    load_report,
    print_report,
    reconstruction_error,
    run_protocol,
    write_heatmap,
)
from src.filters import AhfKernel, ahf_init, ahf_project, freq_response, input_highpass, write_freq_response
from src.gradcore import ContractViolation, NumericFailure, seed_everything
from src.losses import FAKE, REAL
from src.model import PreconditionError, Stage1Model
from src.trainer import (
    Checkpoint,
    CheckpointError,
    build_stage1,
    build_stage2,
    load_checkpoint,
    train_stage1,
    train_stage2,
)
from src.utils import configure_logging, format_auc, unknown_name_message

logger = logging.getLogger(__name__)

console = Console()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

DEFAULT_OUT = "output"

# commands that read an existing corpus
CORPUS_COMMANDS = ("train", "eval", "saliency")


def print_banner():
    """Print application banner."""
    banner = f"""
[bold cyan]forgesem v{__version__}[/bold cyan]
Forgery-semantics decoupling for generalizable fake-image detection
    """
    console.print(Panel(banner, border_style="cyan"))


def print_summary(command: str, payload: Dict) -> None:
    """Print the machine-readable one-line JSON summary."""
    line = json.dumps({"command": command, "status": "ok", **payload}, sort_keys=True)
    console.print(line, markup=False, highlight=False, soft_wrap=True)


def _spinner() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
        transient=True,
    )


def _epoch_progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total} epochs"),
        console=console,
        transient=True,
    )


def _load_manifest(path: str) -> CorpusManifest:
    manifest = CorpusManifest.load(path)
    console.print(f"[green]Loaded corpus with {len(manifest.records)} records from {path}[/green]")
    return manifest


def _fit_to_corpus(cfg: CliConfig, manifest: CorpusManifest) -> CliConfig:
    """Match the image size and the method checks to a loaded corpus."""
    size = manifest.image_size
    if cfg.train.model.image_size != size:
        logger.info(f"Using corpus image size {size}")
        cfg.corpus = replace(cfg.corpus, image_size=size)
        cfg.train = replace(cfg.train, model=replace(cfg.train.model, image_size=size))
        cfg.validate(check_methods=False)
    return cfg.check_methods(manifest.methods)


def _train(stage: int, cfg: CliConfig, manifest: CorpusManifest, out_dir: Path,
           stage1: Optional[Checkpoint] = None) -> Checkpoint:
    console.print(f"\n[bold]Training stage {stage}...[/bold]")
    with _epoch_progress() as progress:
        task = progress.add_task(f"Stage {stage}", total=cfg.train.epochs)

        def advance(epoch: int, means: Dict[str, float]) -> None:
            progress.update(task, advance=1, description=f"Stage {stage} total={means.get('total', 0.0):.4f}")

        if stage == 1:
            ckpt = train_stage1(cfg.train, manifest, out_dir=str(out_dir), on_epoch=advance)
        else:
            ckpt = train_stage2(cfg.train, manifest, stage1, out_dir=str(out_dir), on_epoch=advance)
    console.print(f"[green]Stage {stage} finished after {ckpt.step} steps[/green]")
    return ckpt


def cmd_gen_corpus(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    out_dir = Path(args.out or Path(DEFAULT_OUT) / "corpus")
    console.print("\n[bold]Building corpus...[/bold]")
    with _spinner() as progress:
        task = progress.add_task("Writing images...", total=None)
        if args.import_dir:
            manifest = import_images(args.import_dir, cfg.corpus.image_size, cfg.corpus.seed,
                                     cfg.corpus.split_fractions)
            cfg.check_methods(manifest.methods)
            for record in manifest.records:
                record.path = str((Path(args.import_dir) / record.path).resolve())
            manifest.root = out_dir
            manifest.save()
        else:
            manifest = gen_corpus(cfg.corpus, str(out_dir), workers=args.workers)
        progress.update(task, completed=True)

    reals = sum(1 for r in manifest.records if r.y == REAL)
    console.print(f"[green]Wrote manifest with {reals} real and {len(manifest.records) - reals} "
                  f"fake records to {out_dir}[/green]")
    if manifest.skipped:
        console.print(f"[yellow]{manifest.skipped} file(s) skipped during import[/yellow]")
    return {"out": str(out_dir), "records": len(manifest.records), "skipped": manifest.skipped}


def cmd_train(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    out_dir = Path(args.out or DEFAULT_OUT)
    stage1 = load_checkpoint(args.stage1_ckpt, expected_stage=1) if args.stage == 2 else None
    manifest = _load_manifest(args.corpus)
    cfg = _fit_to_corpus(cfg, manifest)
    ckpt = _train(args.stage, cfg, manifest, out_dir, stage1)
    return {
        "stage": args.stage,
        "checkpoint": str(out_dir / f"stage{args.stage}.fsck"),
        "steps": ckpt.step,
        "config_hash": ckpt.config["config_hash"],
    }


def cmd_eval(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    out_dir = Path(args.out or DEFAULT_OUT)
    stage1 = load_checkpoint(args.stage1_ckpt, expected_stage=1)
    stage2 = load_checkpoint(args.stage2_ckpt, expected_stage=2)
    manifests = {"train": _load_manifest(args.corpus)}
    cfg = _fit_to_corpus(cfg, manifests["train"])
    if args.held_out_corpus:
        manifests["held_out"] = _load_manifest(args.held_out_corpus)

    console.print("\n[bold]Evaluating...[/bold]")
    with _spinner() as progress:
        task = progress.add_task("Scoring images...", total=None)
        report = run_protocol(stage1, stage2, manifests, split=cfg.eval.split, batch_size=cfg.eval.batch_size)
        progress.update(task, completed=True)
    paths = emit_report(report, str(out_dir), cfg.eval.formats)
    print_report(report, console)
    return {
        "out": str(out_dir),
        "files": [p.name for p in paths],
        "held_out_auc": {d: report.held_out(d) for d in ("fc", "fa")},
    }


def _find_kernel(model: torch.nn.Module, name: Optional[str]) -> AhfKernel:
    kernels = {n: m for n, m in model.named_modules() if isinstance(m, AhfKernel)}
    if not kernels:
        raise ConfigError("Checkpoint has no AHF kernels (trained with --no-highfreq or --no-rgb?)")
    if name is None:
        return next(iter(kernels.values()))
    if name not in kernels:
        raise ConfigError(unknown_name_message("AHF kernel", name, kernels))
    return kernels[name]


def cmd_freq_response(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    out_path = Path(args.out or DEFAULT_OUT) / "freq_response.csv"
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        model = build_stage1(ckpt) if ckpt.stage == 1 else build_stage2(ckpt)
        kernel = _find_kernel(model, args.kernel)
    else:
        model_cfg = cfg.train.model
        kernel = ahf_project(ahf_init(model_cfg.kernel_size, model_cfg.sigma, channels=3))
    grid = freq_response(kernel, args.channel, args.n)
    write_freq_response(grid, str(out_path))
    console.print(f"[green]Wrote {args.n}x{args.n} magnitude grid to {out_path}[/green]")
    return {"out": str(out_path), "n": args.n, "dc": float(grid[0, 0])}


def cmd_saliency(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    out_dir = Path(args.out or DEFAULT_OUT) / "saliency"
    stage2 = load_checkpoint(args.stage2_ckpt, expected_stage=2)
    manifest = _load_manifest(args.corpus)
    cfg = _fit_to_corpus(cfg, manifest)
    model = build_stage2(stage2)
    highpass = input_highpass(3, model.config.kernel_size, stage2.train_config.sigma)

    records = [r for r in manifest.select(split=cfg.eval.split) if r.y == FAKE][: cfg.eval.cam_images]
    written = []
    for record in records:
        image = torch.from_numpy(load_image(manifest.resolve(record), manifest.image_size))
        heatmap = grad_cam(model, image.to(torch.get_default_dtype()), args.target_class,
                           cfg.eval.cam_layer, highpass)
        written.append(write_heatmap(heatmap, str(out_dir / f"{Path(record.path).stem}_cam.png")))
    console.print(f"[green]Wrote {len(written)} Grad-CAM heatmap(s) to {out_dir}[/green]")
    return {"out": str(out_dir), "images": len(written), "layer": cfg.eval.cam_layer}


def cmd_report(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    report = load_report(args.report)
    print_report(report, console)
    payload = {"entries": len(report.entries)}
    if args.out:
        payload["files"] = [p.name for p in emit_report(report, args.out, cfg.eval.formats)]
    return payload


def _held_out_batch(manifest: CorpusManifest, cfg: CliConfig, stage1: Checkpoint):
    """All test fakes of held-out methods paired with as many test reals."""
    held = [m for m in manifest.methods if m not in (cfg.train.train_methods or [])]
    test = manifest.select(split="test", methods=held or manifest.methods)
    fakes = [r for r in test if r.y == FAKE]
    reals = [r for r in test if r.method == REAL_METHOD]
    count = min(len(fakes), len(reals))
    if count == 0:
        return None
    trained = stage1.train_config
    highpass = input_highpass(3, trained.model.kernel_size, trained.sigma)
    loader = PairLoader(manifest, 2, cfg.train.seed, highpass, split="test", methods=held or None)
    return loader.batch(fakes[:count], reals[:count])


def cmd_run_experiment(cfg: CliConfig, args: argparse.Namespace) -> Dict:
    out_dir = Path(args.out or DEFAULT_OUT)
    corpus_dir = out_dir / "corpus"

    console.print("\n[bold]Generating corpus...[/bold]")
    with _spinner() as progress:
        task = progress.add_task("Writing images...", total=None)
        manifest = gen_corpus(cfg.corpus, str(corpus_dir), workers=args.workers)
        progress.update(task, completed=True)
    console.print(f"[green]Generated {len(manifest.records)} images[/green]")

    stage1 = _train(1, cfg, manifest, out_dir)
    stage2 = _train(2, cfg, manifest, out_dir, stage1)

    console.print("\n[bold]Evaluating...[/bold]")
    report = run_protocol(stage1, stage2, {"train": manifest}, split=cfg.eval.split,
                          batch_size=cfg.eval.batch_size)
    emit_report(report, str(out_dir), cfg.eval.formats)
    print_report(report, console)

    summary = {
        "out": str(out_dir),
        "hold_out": cfg.eval.hold_out,
        "held_out_auc": {d: report.held_out(d) for d in ("fc", "fa")},
        "intra_auc": {e.method: e.auc for e in report.get("fc", split=cfg.eval.split)},
    }
    batch = _held_out_batch(manifest, cfg, stage1)
    if batch is not None:
        trained = reconstruction_error(build_stage1(stage1), batch)
        seed_everything(cfg.train.seed)
        untrained = reconstruction_error(Stage1Model(stage1.model_config), batch)
        summary["recon_l1"] = {"trained": trained, "untrained": untrained}
        console.print(f"Held-out self-reconstruction L1: {trained:.4f} (untrained {untrained:.4f})")

    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for detector, value in summary["held_out_auc"].items():
        console.print(f"Held-out AUC ({detector}): {format_auc(value)}")
    return summary


COMMANDS: Dict[str, Callable[[CliConfig, argparse.Namespace], Dict]] = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "freq-response": cmd_freq_response,
    "saliency": cmd_saliency,
    "report": cmd_report,
    "run-experiment": cmd_run_experiment,
}


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='FILE', help='TOML or JSON config file')
    common.add_argument('--seed', type=int, help='Seed for corpus generation and training')
    common.add_argument('--out', metavar='DIR', help=f'Output directory (default: {DEFAULT_OUT})')
    common.add_argument('--corpus', metavar='DIR', help='Corpus directory or manifest.json')
    common.add_argument('--image-size', type=int, metavar='N', help='Image side length')
    common.add_argument('--epochs', type=int, metavar='N', help='Epochs per training stage')
    common.add_argument('--hold-out', metavar='METHOD', help='Forgery method excluded from training')
    common.add_argument('--no-rgb', action='store_true', help='Ablation: high-frequency stream only')
    common.add_argument('--no-highfreq', action='store_true', help='Ablation: drop the high-frequency stream')
    common.add_argument('--no-mhfe', action='store_true', help='Ablation: single-scale high-frequency extraction')
    common.add_argument('--no-mhff', action='store_true', help='Ablation: add instead of Pag fusion')
    common.add_argument('-v', '--verbose', action='store_true', help='Enable verbose output (info logging)')
    return common


def build_parser():
    """Build the argument parser; returns (parser, {command: subparser})."""
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Forgery-semantics decoupling: corpus, training, evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the synthetic corpus
  python main.py gen-corpus --seed 7 --out output/corpus

  # Train both stages, holding out one method
  python main.py train --stage 1 --corpus output/corpus --hold-out splice_hue --out output
  python main.py train --stage 2 --corpus output/corpus --hold-out splice_hue \\
      --stage1-ckpt output/stage1.fsck --out output

  # Evaluate and inspect
  python main.py eval --corpus output/corpus --stage1-ckpt output/stage1.fsck \\
      --stage2-ckpt output/stage2.fsck --out output
  python main.py saliency --corpus output/corpus --stage2-ckpt output/stage2.fsck

  # Everything in one go
  python main.py run-experiment --seed 0 --hold-out splice_hue --out output/exp
        """
    )
    parser.add_argument('--version', action='version', version=f'forgesem v{__version__}')
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers = {}

    p = sub.add_parser("gen-corpus", parents=[common], help="Generate (or import) a corpus")
    p.add_argument('--n-real', type=int, metavar='N', help='Number of real images')
    p.add_argument('--n-fake', type=int, metavar='N', help='Fake images per method')
    p.add_argument('--methods', nargs='+', metavar='METHOD', help='Forgery methods to generate')
    p.add_argument('--format', choices=['png', 'bin'], help='Image file format')
    p.add_argument('--import-dir', metavar='DIR', help='Import <label>/<method>/*.png instead of generating')
    p.add_argument('--workers', type=int, default=1, metavar='N', help='Generation threads')
    subparsers["gen-corpus"] = p

    p = sub.add_parser("train", parents=[common], help="Train stage 1 or stage 2")
    p.add_argument('--stage', type=int, choices=[1, 2], required=True, help='Training stage')
    p.add_argument('--stage1-ckpt', metavar='FILE', help='Stage-1 checkpoint (required for --stage 2)')
    p.add_argument('--lr', type=float, help='SGD learning rate')
    p.add_argument('--batch-size', type=int, metavar='N', help='Even batch size (half real, half fake)')
    p.add_argument('--unfreeze', action='store_true', help='Fine-tune the embedded forgery branch in stage 2')
    subparsers["train"] = p

    p = sub.add_parser("eval", parents=[common], help="Intra- and cross-method AUC")
    p.add_argument('--stage1-ckpt', metavar='FILE', required=True, help='Stage-1 checkpoint')
    p.add_argument('--stage2-ckpt', metavar='FILE', required=True, help='Stage-2 checkpoint')
    p.add_argument('--held-out-corpus', metavar='DIR', help='Separate corpus for the held-out methods')
    p.add_argument('--split', choices=['train', 'val', 'test'], help='Split to evaluate')
    p.add_argument('--formats', nargs='+', choices=['csv', 'json', 'svg'], help='Report formats')
    subparsers["eval"] = p

    p = sub.add_parser("freq-response", parents=[common], help="DFT magnitude of an AHF kernel")
    p.add_argument('--ckpt', metavar='FILE', help='Checkpoint to read the kernel from (default: fresh kernel)')
    p.add_argument('--kernel', metavar='NAME', help='Module name of the AHF kernel')
    p.add_argument('--channel', type=int, default=0, help='Kernel channel')
    p.add_argument('-n', type=int, default=16, help='DFT grid size')
    subparsers["freq-response"] = p

    p = sub.add_parser("saliency", parents=[common], help="Grad-CAM heatmaps for Detector3")
    p.add_argument('--stage2-ckpt', metavar='FILE', required=True, help='Stage-2 checkpoint')
    p.add_argument('--layer', metavar='NAME', help='Convolution layer to explain')
    p.add_argument('--count', type=int, metavar='N', help='Number of fake images')
    p.add_argument('--target-class', type=int, default=FAKE, choices=[FAKE, REAL], help='0 fake, 1 real')
    subparsers["saliency"] = p

    p = sub.add_parser("report", parents=[common], help="Print (and re-emit) a saved report")
    p.add_argument('--report', metavar='PATH', required=True, help='report.json or its directory')
    p.add_argument('--formats', nargs='+', choices=['csv', 'json', 'svg'], help='Report formats')
    subparsers["report"] = p

    p = sub.add_parser("run-experiment", parents=[common], help="gen-corpus, both stages, eval, report")
    p.add_argument('--n-real', type=int, metavar='N', help='Number of real images')
    p.add_argument('--n-fake', type=int, metavar='N', help='Fake images per method')
    p.add_argument('--lr', type=float, help='SGD learning rate')
    p.add_argument('--batch-size', type=int, metavar='N', help='Even batch size')
    p.add_argument('--workers', type=int, default=1, metavar='N', help='Generation threads')
    subparsers["run-experiment"] = p

    return parser, subparsers


def _overrides(args: argparse.Namespace) -> Dict:
    def flag(name: str):
        return getattr(args, name, None)

    overrides = {
        "corpus.seed": args.seed,
        "train.seed": args.seed,
        "corpus.image_size": args.image_size,
        "model.image_size": args.image_size,
        "train.epochs": args.epochs,
        "eval.hold_out": args.hold_out,
        "corpus.n_real": flag("n_real"),
        "corpus.n_fake_per_method": flag("n_fake"),
        "corpus.methods": flag("methods"),
        "corpus.image_format": flag("format"),
        "train.lr": flag("lr"),
        "train.batch_size": flag("batch_size"),
        "eval.split": flag("split"),
        "eval.formats": flag("formats"),
        "eval.cam_layer": flag("layer"),
        "eval.cam_images": flag("count"),
    }
    if args.no_rgb:
        overrides["model.use_rgb"] = False
    if args.no_highfreq:
        overrides["model.use_highfreq"] = False
    if args.no_mhfe:
        overrides["model.use_mhfe"] = False
    if args.no_mhff:
        overrides["model.use_mhff"] = False
    if flag("unfreeze"):
        overrides["train.freeze_embedded"] = False
    return overrides


def _check_flags(args: argparse.Namespace, sub: argparse.ArgumentParser) -> None:
    """Flag combinations argparse cannot express; exits 2 with usage."""
    if args.command == "train" and args.stage == 2 and not args.stage1_ckpt:
        sub.error("--stage1-ckpt is required for --stage 2")
    if args.command in ("train", "eval", "saliency") and not args.corpus:
        sub.error("--corpus is required")


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv, validate the merged config, dispatch one subcommand.

    Returns:
        0 success, 1 unexpected error or interrupt, 2 usage/config error,
        3 IO error, 4 numeric failure
    """
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage()
            return EXIT_USAGE
        _check_flags(args, subparsers[args.command])
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging("info" if args.verbose else None)

    try:
        # corpus-reading commands check methods once the manifest is loaded
        check_methods = args.command not in CORPUS_COMMANDS and not getattr(args, "import_dir", None)
        cfg = build_config(load_config(args.config), _overrides(args), check_methods=check_methods)
        summary = COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractViolation, PreconditionError, MetricError) as e:
        console.print(f"\n[red]Error: {e}[/red]")
        return EXIT_USAGE
    except NumericFailure as e:
        console.print(f"\n[red]Numeric failure: {e}[/red]")
        return EXIT_NUMERIC
    except (OSError, CheckpointError, CorpusError) as e:
        console.print(f"\n[red]IO error: {e}[/red]")
        return EXIT_IO
    except KeyboardInterrupt:
        console.print("\n[yellow]Operation cancelled by user[/yellow]")
        return EXIT_FAILURE
    except Exception as e:
        console.print(f"\n[red]Unexpected error: {e}[/red]")
        if args.verbose:
            console.print_exception()
        return EXIT_FAILURE

    print_summary(args.command, summary)
    return EXIT_OK


def main():
    """Main entry point for CLI."""
    print_banner()
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
