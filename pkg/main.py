#!/usr/bin/env python3
"""
CondenseNetV2 SFR - Main Entry Point

Command-line interface for training, compiling and analysing CondenseNetV2 networks.
"""

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent))

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    print("⚠️  python-dotenv not installed. Please run: pip install python-dotenv")

from config.settings import RunSpec, configure_logging, get_config, load_run_spec, log_file_for
from src.analysis import GRANULARITIES, REDUCTIONS, ablation_sweep, connectivity, export_heatmap
from src.checkpoint import load_checkpoint, load_plan, save_checkpoint, save_plan
from src.compiler import compile_network, plan_cost, verify_equivalence
from src.condensenet import Network, build_network, cost_report, reference_values
from src.datasets import open_source
from src.exceptions import ConfigError
from src.trainer import evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _add_config_args(parser: argparse.ArgumentParser, required: bool = True) -> None:
    source = parser.add_mutually_exclusive_group(required=required)
    source.add_argument('--config', help='Network or run config file (.json, .yaml, .yml)')
    source.add_argument('--preset', help='Network preset (e.g. cnv2-a, toy) or run preset (e.g. desk_learning)')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override a run-config value; may repeat')


class CLI:
    """Command Line Interface for CondenseNetV2 SFR."""

    def __init__(self):
        """Initialize the CLI."""
        self.config_manager = get_config()
        self._log_handler = None

    def create_parser(self) -> argparse.ArgumentParser:
        """Create the argument parser."""

        parser = argparse.ArgumentParser(
            prog='cnv2',
            description="CondenseNetV2 with sparse feature reactivation",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  python main.py flops --preset cnv2-a                       # Deployed cost vs published values
  python main.py train --preset desk_learning --output runs/toy   # Train the toy network
  python main.py verify-equivalence --checkpoint runs/toy/checkpoint.cnv2
  python main.py compile --checkpoint runs/toy/checkpoint.cnv2 --fold-bn
  python main.py eval --plan runs/toy/plan.cnv2 --preset desk_learning
  python main.py connectivity --checkpoint runs/toy/checkpoint.cnv2 --granularity per_layer
  python main.py sweep --preset cnv2-cifar --axis G --values 1 2 4 8
            """
        )
        parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')

        subparsers = parser.add_subparsers(dest='command', help='Available commands')

        # Train command
        train_parser = subparsers.add_parser('train', help='Train with staged sparsification')
        _add_config_args(train_parser)
        train_parser.add_argument('--output', help='Run directory (default: CNV2_OUTPUT_DIR/<network name>)')
        train_parser.add_argument('--seed', type=int, help='Seed for weights, batching and synthetic data')
        train_parser.add_argument('--epochs', type=int, help='Override training.epochs')

        # Eval command
        eval_parser = subparsers.add_parser('eval', help='Evaluate a checkpoint or compiled plan')
        model = eval_parser.add_mutually_exclusive_group(required=True)
        model.add_argument('--checkpoint', help='Training-form checkpoint')
        model.add_argument('--plan', help='Compiled plan')
        _add_config_args(eval_parser, required=False)
        eval_parser.add_argument('--batch-size', type=int, default=64, help='Evaluation batch size')
        eval_parser.add_argument('--threads', type=int, help='Worker threads for plans (capped by CNV2_THREADS)')

        # Compile command
        compile_parser = subparsers.add_parser('compile', help='Convert a trained checkpoint to an inference plan')
        compile_parser.add_argument('--checkpoint', required=True, help='Fully sparsified checkpoint')
        compile_parser.add_argument('--output', help='Plan path (default: plan.cnv2 next to the checkpoint)')
        compile_parser.add_argument('--fold-bn', action='store_true', help='Fold BN scales into convolutions')
        compile_parser.add_argument('--verify', action='store_true', help='Check logits against the checkpoint')

        # Verify-equivalence command
        verify_parser = subparsers.add_parser('verify-equivalence',
                                              help='Compare training-form and compiled logits')
        verify_parser.add_argument('--checkpoint', required=True, help='Fully sparsified checkpoint')
        verify_parser.add_argument('--batches', type=int, default=4, help='Random input batches')
        verify_parser.add_argument('--tolerance', type=float, default=1e-4, help='Max allowed abs logit diff')
        verify_parser.add_argument('--fold-bn', action='store_true', help='Verify the BN-folded plan')

        # FLOPs command
        flops_parser = subparsers.add_parser('flops', help='Report FLOPs and parameters')
        _add_config_args(flops_parser)
        flops_parser.add_argument('--training-form', action='store_true',
                                  help='Count the dense training-form network instead of the deployed one')
        flops_parser.add_argument('--csv', help='Also write the per-kind breakdown as CSV')

        # Connectivity command
        conn_parser = subparsers.add_parser('connectivity', help='Export connection-strength heatmaps')
        model = conn_parser.add_mutually_exclusive_group(required=True)
        model.add_argument('--checkpoint', help='Checkpoint to analyse')
        model.add_argument('--config', help='Network config to build fresh')
        model.add_argument('--preset', help='Network preset to build fresh')
        conn_parser.add_argument('--granularity', choices=GRANULARITIES, default='per_group')
        conn_parser.add_argument('--reduction', choices=REDUCTIONS, default='mean')
        conn_parser.add_argument('--output', help='Output base path (default: CNV2_OUTPUT_DIR/connectivity)')
        conn_parser.set_defaults(overrides=[])

        # Sweep command
        sweep_parser = subparsers.add_parser('sweep', help='Sparse-factor / group-number ablation')
        _add_config_args(sweep_parser)
        sweep_parser.add_argument('--axis', choices=['S', 'G'], required=True, help='Swept hyper-parameter')
        sweep_parser.add_argument('--values', type=int, nargs='+', required=True, help='Values to sweep')
        sweep_parser.add_argument('--epochs', type=int, default=0, help='Training epochs per value (0: cost only)')
        sweep_parser.add_argument('--output', help='CSV path (default: CNV2_OUTPUT_DIR/sweep_<axis>.csv)')
        sweep_parser.add_argument('--threads', type=int, help='Worker processes (capped by CNV2_THREADS)')

        return parser

    def _spec(self, args, command: str, output: Optional[str] = None, seed: Optional[int] = None) -> RunSpec:
        return load_run_spec(command, getattr(args, 'config', None), getattr(args, 'preset', None),
                             output, seed, getattr(args, 'overrides', []))

    def cmd_train(self, args) -> int:
        """Handle train command."""
        overrides = list(args.overrides)
        if args.epochs is not None:
            overrides.append(f"training.epochs={args.epochs}")
        args.overrides = overrides
        spec = self._spec(args, 'train', args.output, args.seed)
        if args.output is None:
            spec.output_dir = spec.output_dir / spec.network.name
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        self._attach_log_file(spec.output_dir)

        print(f"🚀 Training {spec.network.name} for {spec.training.epochs} epochs...")
        source = open_source(spec.default_dataset(), seed=spec.seed)
        if spec.training.workers > 0:
            spec.training.workers = self.config_manager.worker_count(spec.training.workers)
        net = build_network(spec.network, seed=spec.seed)

        try:
            result = train(net, spec.training, source, metrics_path=spec.output_dir / "metrics.csv")
        except KeyboardInterrupt:
            print("\n⏹️  Training interrupted; nothing saved")
            return EXIT_FAILURE

        checkpoint = save_checkpoint(net, spec.output_dir / "checkpoint.cnv2",
                                     extra={"epochs": spec.training.epochs, "seed": spec.seed})
        config_copy = spec.output_dir / "config.json"
        config_copy.write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")

        final = result.final
        print(f"\n✅ Training finished")
        print(f"   Loss: {final.loss:.4f}")
        print(f"   Accuracy: {final.acc:.2%}")
        print(f"   Live SFR weights: {final.live_sfr:,}")
        print(f"   Live LGC weights: {final.live_lgc:,}")
        print(f"   Fully sparsified: {'Yes' if net.fully_sparsified else 'No'}")
        print(f"\n📁 Metrics: {result.metrics_path}")
        print(f"💾 Checkpoint: {checkpoint}")
        print(f"📝 Config: {config_copy}")
        return EXIT_OK

    def cmd_eval(self, args) -> int:
        """Handle eval command."""
        model = load_plan(args.plan) if args.plan else load_checkpoint(args.checkpoint)
        network_config = model.config
        if args.config or args.preset:
            dataset = self._spec(args, 'eval').default_dataset()
        else:
            dataset = RunSpec('eval', None, Path('.'), self.config_manager.runtime.seed,
                              network_config).default_dataset()
        source = open_source(dataset, seed=self.config_manager.runtime.seed)

        threads = self.config_manager.worker_count(args.threads)
        loss, acc = evaluate(model, source, batch_size=args.batch_size, threads=threads)

        kind = "plan" if args.plan else "checkpoint"
        print(f"\n📊 Evaluation ({kind}: {network_config.name})")
        print(f"   Samples: {len(source):,} ({source.kind})")
        print(f"   Loss: {loss:.4f}")
        print(f"   Accuracy: {acc:.2%}")
        return EXIT_OK

    def cmd_compile(self, args) -> int:
        """Handle compile command."""
        net = load_checkpoint(args.checkpoint)
        plan = compile_network(net, fold=args.fold_bn)
        output = Path(args.output) if args.output else Path(args.checkpoint).with_name("plan.cnv2")
        save_plan(plan, output)

        report = plan_cost(plan)
        print(f"\n⚙️  Compiled {net.config.name}")
        print(f"   FLOPs: {report.flops:,}")
        print(f"   Params: {report.params:,}")
        print(f"   BN folded: {'Yes' if args.fold_bn else 'No'}")
        if args.verify:
            diff = verify_equivalence(net, plan)
            print(f"   Max logit diff: {diff:.3e}")
        print(f"💾 Plan: {output}")
        return EXIT_OK

    def cmd_verify_equivalence(self, args) -> int:
        """Handle verify-equivalence command."""
        net = load_checkpoint(args.checkpoint)
        plan = compile_network(net, fold=args.fold_bn)
        diff = verify_equivalence(net, plan, batches=args.batches, seed=self.config_manager.runtime.seed)

        if diff <= args.tolerance:
            print(f"✅ Equivalent: max abs logit diff {diff:.3e} <= {args.tolerance:g}")
            return EXIT_OK
        print(f"❌ Mismatch: max abs logit diff {diff:.3e} > {args.tolerance:g}")
        return EXIT_FAILURE

    def cmd_flops(self, args) -> int:
        """Handle flops command."""
        spec = self._spec(args, 'flops')
        net = Network(spec.network)
        report = cost_report(net, deployed=not args.training_form)
        reference = reference_values().get(spec.network.name)

        form = "training form" if args.training_form else "deployed"
        print(f"\n🧮 {spec.network.name} ({form}, {spec.network.input_resolution}px)")
        print(f"   {'kind':<8}{'FLOPs':>16}{'params':>14}")
        for kind in report.flops_by_kind:
            print(f"   {kind:<8}{report.flops_by_kind[kind]:>16,}{report.params_by_kind[kind]:>14,}")
        print(f"   {'total':<8}{report.flops:>16,}{report.params:>14,}")
        if reference:
            print(f"   {'ref':<8}{reference['flops']:>16,}{reference['params']:>14,}")
            print(f"   ({reference.get('source', 'published')})")

        if args.csv:
            path = Path(args.csv)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["kind", "flops", "params"])
                for kind in report.flops_by_kind:
                    writer.writerow([kind, report.flops_by_kind[kind], report.params_by_kind[kind]])
                writer.writerow(["total", report.flops, report.params])
                if reference:
                    writer.writerow(["reference", reference["flops"], reference["params"]])
            print(f"📁 CSV: {path}")
        return EXIT_OK

    def cmd_connectivity(self, args) -> int:
        """Handle connectivity command."""
        if args.checkpoint:
            net = load_checkpoint(args.checkpoint)
        else:
            net = build_network(self._spec(args, 'connectivity').network, seed=self.config_manager.runtime.seed)
        matrix = connectivity(net, granularity=args.granularity, reduction=args.reduction)
        output = args.output or str(Path(self.config_manager.output.output_directory) / "connectivity")
        paths = export_heatmap(matrix, output)

        rows, cols = matrix.shape
        print(f"\n🗺️  Connectivity of {net.config.name} ({args.granularity}, {args.reduction})")
        print(f"   Sources: {rows}  Targets: {cols}  Pruned cells: {int(matrix.pruned.sum())}")
        for kind, path in paths.items():
            print(f"📁 {kind}: {path}")
        return EXIT_OK

    def cmd_sweep(self, args) -> int:
        """Handle sweep command."""
        spec = self._spec(args, 'sweep')
        output = Path(args.output) if args.output else Path(
            self.config_manager.output.output_directory) / f"sweep_{args.axis}.csv"
        source = open_source(spec.dataset, seed=spec.seed) if (args.epochs > 0 and spec.dataset) else None
        threads = self.config_manager.worker_count(args.threads)

        rows = ablation_sweep(spec.network, args.axis, args.values, epochs=args.epochs,
                              train_config=spec.training, source=source, output=output, threads=threads)

        print(f"\n📊 Sweep over {args.axis} for {spec.network.name}")
        print(f"   {args.axis:>4}{'FLOPs':>16}{'params':>14}{'SFR FLOPs':>14}{'metric':>10}")
        for row in rows:
            metric = "-" if math.isnan(row.metric) else f"{row.metric:.4f}"
            print(f"   {row.value:>4}{row.flops:>16,}{row.params:>14,}{row.sfr_flops:>14,}{metric:>10}")
        print(f"📁 CSV: {output}")
        return EXIT_OK

    def _attach_log_file(self, output_dir: Path) -> None:
        if self.config_manager.output.log_to_file:
            level = logging.getLogger().level or logging.INFO
            self._log_handler = configure_logging(level, log_file_for(output_dir))

    def _detach_log_file(self) -> None:
        if self._log_handler is not None:
            logging.getLogger().removeHandler(self._log_handler)
            self._log_handler.close()
            self._log_handler = None

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Run the CLI and return the process exit code."""
        parser = self.create_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE

        if not args.command:
            parser.print_help()
            return EXIT_USAGE

        level = 'DEBUG' if args.verbose else self.config_manager.output.log_level
        configure_logging(level)

        command_map = {
            'train': self.cmd_train,
            'eval': self.cmd_eval,
            'compile': self.cmd_compile,
            'verify-equivalence': self.cmd_verify_equivalence,
            'flops': self.cmd_flops,
            'connectivity': self.cmd_connectivity,
            'sweep': self.cmd_sweep,
        }

        try:
            return command_map[args.command](args)
        except ConfigError as e:
            print(f"❌ Configuration error: {e}")
            return EXIT_CONFIG
        except KeyboardInterrupt:
            print("\n⏹️  Interrupted")
            return EXIT_FAILURE
        except Exception as e:
            print(f"❌ {args.command} failed: {e}")
            logger.debug("Failure details", exc_info=True)
            return EXIT_FAILURE
        finally:
            self._detach_log_file()


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point for the console scripts; returns the exit code."""
    return CLI().run(argv)


cli_main = main


if __name__ == "__main__":
    sys.exit(main())
