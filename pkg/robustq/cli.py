"""Command-line interface: train, attack, analyze, prune, verify and data."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.status import Status
from rich.table import Table

from . import __version__
from .attacks import METHODS, run_attack
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, resolve
from .data import SYNTHETIC_KINDS, DatasetHandle, gen_synthetic, load_mnist_dir
from .errors import RobustQError
from .nets import build_network, forward
from .quantizer import VARIANTS
from .records import MetricsRow, write_manifest
from .robust_train import LOSS_VARIANTS, TrainingSession, evaluate
from .sparsity import prune_channels, sparsity_report
from .theory import FAMILIES, verify_prop1, verify_prop2

logger = logging.getLogger(__name__)
console = Console()


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:.2f}%"


def configure_logging(verbose: bool, debug: bool) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=debug)],
        force=True,
    )


def load_datasets(cfg: RunConfig) -> Tuple[DatasetHandle, DatasetHandle]:
    """Train and test handles: MNIST-format files when a directory is given, else synthetic."""
    if cfg.data_dir:
        return (load_mnist_dir(Path(cfg.data_dir), "train", cfg.dataset),
                load_mnist_dir(Path(cfg.data_dir), "test", cfg.dataset))
    train = gen_synthetic(cfg.synthetic, cfg.synthetic_n, cfg.synthetic_noise, cfg.seed, "train")
    test = gen_synthetic(cfg.synthetic, max(cfg.synthetic_n // 4, 1), cfg.synthetic_noise, cfg.seed + 1, "test")
    return train, test


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args: argparse.Namespace) -> dict:
    skip = {"command", "config", "verbose", "debug", "handler", "checkpoint", "resume", "method",
            "weights", "prop", "trials", "verify_loss", "family", "dim", "export", "output", "check"}
    return {key: value for key, value in vars(args).items() if key not in skip}


def _epoch_line(row: MetricsRow) -> None:
    console.print(
        f"[cyan]epoch {row.epoch:>3}[/cyan]  loss {row.loss:.4f}  N {_fmt(row.N)}  "
        f"A1 {_fmt(row.A1)}  A2 {_fmt(row.A2)}  M_t {row.M_t:.4f}  "
        f"sparsity {_fmt(row.weight_sparsity)}/{_fmt(row.channel_sparsity)}  [dim]{row.seconds:.1f}s[/dim]"
    )


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg)
    train, test = load_datasets(cfg)
    train_cfg = cfg.train_config()
    if args.resume:
        ckpt = load_checkpoint(Path(args.resume))
        if ckpt.config_digest and ckpt.config_digest != cfg.digest():
            logger.warning("resuming with a configuration that differs from the checkpoint's")
        session = TrainingSession.resume(ckpt, train_cfg, config_record=cfg.as_dict(), config_digest=cfg.digest())
        console.print(f"[green]Resuming from epoch {session.epoch}[/green]")
    else:
        num_classes = max(train.num_classes, test.num_classes, 2)
        mean, std = float(train.images.mean()), float(train.images.std()) or 1.0
        spec = cfg.network_spec(train.input_shape, num_classes, mean, std)
        net = build_network(spec, cfg.seed)
        session = TrainingSession.start(net, train_cfg, config_record=cfg.as_dict(), config_digest=cfg.digest())

    console.print(Panel(
        f"[bold]{session.net!r}[/bold]\n"
        f"data: {train.name} ({len(train)} train / {len(test)} test)\n"
        f"quantization: {cfg.quant_variant} ({cfg.quant_algorithm}), loss: {cfg.loss} "
        f"(alpha={cfg.alpha}, beta={cfg.beta}), epochs: {cfg.epochs}",
        title="robustq train",
        border_style="cyan",
    ))
    session.run(train, test, out_dir, on_epoch=_epoch_line)

    if session.last_table is not None:
        table = Table(title="Final accuracy")
        for column in ("N", "A1 (FGSM)", "A2 (IFGSM)", "A3 (C&W)"):
            table.add_column(column, justify="right")
        t = session.last_table
        table.add_row(_fmt(t.natural), _fmt(t.fgsm), _fmt(t.ifgsm), _fmt(t.cw))
        console.print(table)
    console.print(f"[dim]bound M = {session.trace.M:.4f}[/dim]")
    write_manifest(out_dir, "train", cfg.as_dict(), cfg.seed, [out_dir / "metrics.csv", out_dir / "final.ckpt"])
    return 0


def _accuracy(net, data: DatasetHandle, method: str, cfg: RunConfig, rng: np.random.Generator,
              batch_size: int = 256) -> float:
    attack_cfg = cfg.attack_config()
    correct = 0
    for x, y in data.batches(batch_size):
        x_adv = run_attack(net, x, y, method, attack_cfg, rng)
        correct += int(np.sum(forward(net, x_adv, mode="eval").data.argmax(axis=1) == y))
    return correct / len(data)


def cmd_attack(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg)
    ckpt = load_checkpoint(Path(args.checkpoint))
    net = ckpt.network()
    if args.weights == "float":
        if ckpt.quant is None:
            raise RobustQError("checkpoint has no shadow weights")
        net = ckpt.quant.shadow_network(net)
    _, test = load_datasets(cfg)
    test = test.subset(cfg.eval_limit)
    methods = [m for m in METHODS if m != "pgd"] if args.method == "all" else [args.method]

    with Status("[dim]Running attacks...[/dim]", console=console):
        suite = [m for m in methods if m in ("fgsm", "ifgsm", "cw")]
        table_result = evaluate(net, test, suite, cfg.attack_config(), workers=cfg.workers)
        results = {"natural": table_result.natural}
        results.update({m: getattr(table_result, m) for m in suite})
        if "pgd" in methods:
            results["pgd"] = _accuracy(net, test, "pgd", cfg, np.random.default_rng(cfg.seed))

    table = Table(title=f"Accuracy under attack ({args.weights} weights, eps={cfg.eps})")
    table.add_column("Attack", style="cyan")
    table.add_column("Accuracy", justify="right")
    for name, value in results.items():
        table.add_row(name, _fmt(value))
    console.print(table)
    path = out_dir / "attack.json"
    path.write_text(json.dumps({"weights": args.weights, "eps": cfg.eps, "accuracy": results}, indent=2) + "\n")
    write_manifest(out_dir, "attack", cfg.as_dict(), cfg.seed, [path])
    return 0


def cmd_analyze(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg)
    ckpt = load_checkpoint(Path(args.checkpoint))
    net = ckpt.network()
    report = sparsity_report(net, ckpt.quant.w if ckpt.quant is not None else None)

    table = Table(title="Sparsity per conv layer")
    for column in ("Layer", "Weights", "Zero %", "Channels", "Zero ch.", "Prunable", "mean|u|", "mean|w|"):
        table.add_column(column, justify="right" if column != "Layer" else "left")
    sparsity_path = out_dir / "sparsity.csv"
    with sparsity_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["layer", "weights", "zeros", "channels", "zero_channels", "prunable_channels",
                         "mean_abs_u", "mean_abs_w", "mean_channel_density"])
        for layer in report.layers:
            mean_w = "" if layer.mean_abs_w is None else repr(layer.mean_abs_w)
            writer.writerow([layer.name, layer.weights, layer.zeros, layer.channels, layer.zero_channels,
                             layer.prunable_channels, repr(layer.mean_abs_u), mean_w,
                             repr(float(layer.channel_density.mean()))])
            table.add_row(layer.name, str(layer.weights), _fmt(layer.weight_sparsity), str(layer.channels),
                          str(layer.zero_channels), str(layer.prunable_channels), f"{layer.mean_abs_u:.4f}",
                          "-" if layer.mean_abs_w is None else f"{layer.mean_abs_w:.4f}")
    console.print(table)

    bound_path = out_dir / "bound.csv"
    with bound_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "M_t", "M"])
        for epoch, (m_t, running) in enumerate(zip(ckpt.trace.values, ckpt.trace.running), start=1):
            writer.writerow([epoch, repr(m_t), repr(float(running))])

    console.print(Panel(
        f"weight sparsity: {_fmt(report.weight_sparsity)} ({report.zero_weights} of {report.total_weights})\n"
        f"channel sparsity: {_fmt(report.channel_sparsity)} ({report.zero_channels} of {report.total_channels}; "
        f"{report.prunable_channels} prunable, {report.masked_channels} masked-only)\n"
        f"mean density of non-sparse channels: {_fmt(report.nonsparse_density)}\n"
        f"bound M over {len(ckpt.trace.values)} epochs: {ckpt.trace.M:.4f} "
        f"(ensemble size {ckpt.spec.ensemble})",
        title="Summary",
        border_style="green",
    ))
    write_manifest(out_dir, "analyze", cfg.as_dict(), cfg.seed, [sparsity_path, bound_path])
    return 0


def cmd_prune(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg)
    ckpt = load_checkpoint(Path(args.checkpoint))
    net = ckpt.network()
    pruned, report = prune_channels(net)

    rng = np.random.default_rng(cfg.seed)
    inputs = rng.uniform(0.0, 1.0, size=(args.check,) + net.spec.input_shape)
    difference = float(np.max(np.abs(forward(net, inputs, mode="eval").data
                                     - forward(pruned, inputs, mode="eval").data)))
    if difference != 0.0:
        logger.error(f"pruned logits differ by {difference:.3e}")

    quant = ckpt.quant
    if quant is not None:
        quant = replace(quant, w=report.slice_arrays(quant.w), u=report.slice_arrays(quant.u))
    output = Path(args.output) if args.output else out_dir / "pruned.ckpt"
    save_checkpoint(output, Checkpoint.from_network(
        pruned, quant=quant, trace=ckpt.trace, config=ckpt.config,
        config_digest=ckpt.config_digest, epoch=ckpt.epoch,
    ))
    console.print(Panel(
        f"removed channels: {report.prunable_count}\nmasked channels: {report.masked_count}\n"
        f"weights: {report.weights_before} -> {report.weights_after}\n"
        f"max logit difference on {args.check} random inputs: {difference}",
        title="Channel pruning",
        border_style="green" if difference == 0.0 else "red",
    ))
    write_manifest(out_dir, "prune", cfg.as_dict(), cfg.seed, [output])
    return 0 if difference == 0.0 else 1


def cmd_verify(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg)
    family = list(FAMILIES) if args.family == "all" else args.family
    labelled = []
    with Status("[dim]Running proposition trials...[/dim]", console=console):
        if args.prop == 1:
            labelled.append(("0-1 loss", verify_prop1(family=family, trials=args.trials, seed=cfg.seed,
                                                      dim=args.dim)))
        else:
            losses = ["hinge", "sigmoid", "logistic"] if args.verify_loss == "all" else [args.verify_loss]
            for loss in losses:
                labelled.append((loss, verify_prop2(family=family, loss=loss, trials=args.trials,
                                                    seed=cfg.seed, dim=args.dim)))

    reports = [report for _, report in labelled]
    ok = all(r.passed for r in reports)
    lines = [
        f"{label}: {r.trials} trials, {r.violations} violations, non-empty E in {r.e_nonempty}"
        for label, r in labelled
    ]
    console.print(Panel("\n".join(lines), title=f"Proposition {args.prop}: {'PASS' if ok else 'FAIL'}",
                        border_style="green" if ok else "red"))
    path = out_dir / f"verify-prop{args.prop}.json"
    path.write_text(json.dumps([
        {"proposition": r.proposition, "trials": r.trials, "violations": r.violations,
         "e_nonempty": r.e_nonempty, "passed": r.passed, "witness": r.witness, "aggregates": r.aggregates}
        for r in reports
    ], indent=2, default=float) + "\n")
    write_manifest(out_dir, "verify", cfg.as_dict(), cfg.seed, [path])
    return 0 if ok else 1


def cmd_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg)
    artifacts = []
    table = Table(title="Datasets")
    for column in ("Split", "Name", "Samples", "Shape", "Classes"):
        table.add_column(column)
    for handle in load_datasets(cfg):
        histogram = ", ".join(f"{c}:{n}" for c, n in enumerate(handle.class_histogram()))
        table.add_row(handle.split, handle.name, str(len(handle)), "x".join(map(str, handle.input_shape)), histogram)
        if args.export:
            artifacts.append(handle.save_npz(out_dir / f"{handle.name}-{handle.split}.npz"))
    console.print(table)
    write_manifest(out_dir, "data", cfg.as_dict(), cfg.seed, artifacts)
    return 0


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("data")
    group.add_argument("--data-dir", dest="data_dir", help="Directory with MNIST-format IDX files")
    group.add_argument("--dataset", help="Dataset name recorded with the IDX data (mnist, fmnist)")
    group.add_argument("--synthetic", choices=SYNTHETIC_KINDS, help="Synthetic set used without --data-dir")
    group.add_argument("--synthetic-n", dest="synthetic_n", type=int, help="Synthetic training samples")
    group.add_argument("--synthetic-noise", dest="synthetic_noise", type=float, help="Synthetic noise level")
    group.add_argument("--eval-limit", dest="eval_limit", type=int, help="Evaluate on the first N test samples")
    group.add_argument("--workers", type=int, help="Evaluation threads")


def _add_attack_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("attacks")
    group.add_argument("--eps", type=float, help="l-infinity budget (default 0.031)")
    group.add_argument("--alpha", dest="attack_alpha", type=float, help="IFGSM step (default 1/255)")
    group.add_argument("--iters", dest="attack_iters", type=int, help="IFGSM iterations (default 20)")
    group.add_argument("--cw-lr", dest="cw_lr", type=float, help="C&W step size (default 0.0006)")
    group.add_argument("--cw-iters", dest="cw_iters", type=int, help="C&W iterations (default 50)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Random seed (default 0)")
    common.add_argument("--config", type=Path, help="key=value configuration file")
    common.add_argument("--out-dir", dest="out_dir", help="Directory for outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="Log progress")
    common.add_argument("--debug", action="store_true", help="Log debugging detail")

    parser = argparse.ArgumentParser(prog="robustq", description="Robust quantized network training")
    parser.add_argument("--version", action="version", version=f"robustq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="Train a quantized network")
    _add_data_args(train)
    _add_attack_args(train)
    net = train.add_argument_group("network")
    net.add_argument("--arch", choices=("resnet", "mlp"))
    net.add_argument("--blocks", type=_int_list, help="Blocks per stage, e.g. 1,1,1")
    net.add_argument("--widths", type=_int_list, help="Widths per stage, e.g. 8,16,32")
    net.add_argument("--ensemble", type=int, help="Ensemble members")
    net.add_argument("--noise-std", dest="noise_std", type=float, help="Residual noise std (default 0.1)")
    net.add_argument("--normalize", action="store_const", const=True, help="Normalize inputs inside the network")
    quant = train.add_argument_group("quantization")
    quant.add_argument("--quant", dest="quant_variant", choices=VARIANTS)
    quant.add_argument("--algorithm", dest="quant_algorithm", choices=("br", "bc"))
    quant.add_argument("--rho", type=float, help="Relaxation growth per mini-batch (default 1.02)")
    quant.add_argument("--cutoff", type=int, help="Epoch switching to plain projection (default 80%%)")
    quant.add_argument("--ternary-method", dest="ternary_method", choices=("exact", "threshold"))
    objective = train.add_argument_group("objective")
    objective.add_argument("--loss", choices=LOSS_VARIANTS)
    objective.add_argument("--loss-alpha", dest="alpha", type=float, help="Natural loss weight")
    objective.add_argument("--beta", type=float, help="Robust loss weight")
    objective.add_argument("--pgd-iters", dest="pgd_iters", type=int)
    optim = train.add_argument_group("optimization")
    optim.add_argument("--epochs", type=int)
    optim.add_argument("--batch-size", dest="batch_size", type=int)
    optim.add_argument("--lr", type=float)
    optim.add_argument("--milestones", type=_int_list, help="LR decay epochs, e.g. 10,15")
    optim.add_argument("--train-limit", dest="train_limit", type=int)
    optim.add_argument("--eval-every", dest="eval_every", type=int)
    optim.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    optim.add_argument("--eval-cw", dest="eval_cw", action="store_const", const=True)
    train.add_argument("--resume", help="Checkpoint to continue from")
    train.set_defaults(handler=cmd_train)

    attack = sub.add_parser("attack", parents=[common], help="Evaluate a checkpoint under attack")
    attack.add_argument("--checkpoint", required=True)
    attack.add_argument("--method", choices=METHODS + ("all",), default="all")
    attack.add_argument("--weights", choices=("quantized", "float"), default="quantized")
    _add_data_args(attack)
    _add_attack_args(attack)
    attack.set_defaults(handler=cmd_attack)

    analyze = sub.add_parser("analyze", parents=[common], help="Sparsity and bound report of a checkpoint")
    analyze.add_argument("--checkpoint", required=True)
    analyze.set_defaults(handler=cmd_analyze)

    prune = sub.add_parser("prune", parents=[common], help="Remove zero channels from a checkpoint")
    prune.add_argument("--checkpoint", required=True)
    prune.add_argument("--output", help="Pruned checkpoint path (default OUT_DIR/pruned.ckpt)")
    prune.add_argument("--check", type=int, default=100, help="Random inputs used to confirm equal logits")
    prune.set_defaults(handler=cmd_prune)

    verify = sub.add_parser("verify", parents=[common], help="Brute-force the trade-off loss propositions")
    verify.add_argument("--prop", type=int, choices=(1, 2), required=True)
    verify.add_argument("--trials", type=int, default=1000)
    verify.add_argument("--loss", dest="verify_loss", choices=("hinge", "sigmoid", "logistic", "all"),
                        default="all")
    verify.add_argument("--family", choices=FAMILIES + ("all",), default="affine")
    verify.add_argument("--dim", type=int, choices=(1, 2), default=1)
    verify.set_defaults(handler=cmd_verify)

    data = sub.add_parser("data", parents=[common], help="Summarize or export a dataset")
    _add_data_args(data)
    data.add_argument("--export", action="store_true", help="Write the splits as .npz files")
    data.set_defaults(handler=cmd_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.debug)
    try:
        cfg = resolve(args.config, _overrides(args))
        return args.handler(args, cfg)
    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted[/yellow]")
        return 130
    except (RobustQError, OSError, IndexError) as e:
        logger.error(f"{args.command} failed: {e}")
        console.print(f"[red]❌ Error: {e}[/red]")
        return 1


if __name__ == "__main__":
    sys.exit(main())
