"""`cola` command line: train, ablate, count, gradcheck and bench"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

from ....config.presets import get_preset, toy_arch
from ....config.profiles import PROFILES, apply_profile
from ...components import app_logger
from ...components.accounting import (
    count_params,
    flops_forward,
    matched_lora_rank,
    report_delta,
    wallclock_bench,
)
from ...components.custom_exceptions import (
    ConfigurationError,
    NumericError,
    VerificationError,
)
from ...components.dualenc import randomize_adapters, save_checkpoint, set_lambdas
from ...components.harness import (
    build_task_model,
    export_lambda,
    gen_dataset,
    gradcheck_suite,
    save_jsonl,
    train,
)
from ...utils.component_names import (
    BENCH_FILE,
    CHECKPOINT_FILE,
    DATASET_FILE,
    EXIT_CONFIG_ERROR,
    EXIT_NUMERIC_ABORT,
    EXIT_OK,
    EXIT_VERIFICATION_FAILED,
    FLOPS_FILE,
    GRADCHECK_FILE,
    LAMBDA_TRACE_FILE,
    METRICS_FILE,
    PARAMS_FILE,
    TIMING_FILE,
)
from ...utils.definitions import (
    AdapterConfig,
    AdapterMode,
    ExperimentConfig,
    PropagationStrategy,
)
from ...utils.helpers import write_json
from .experiment_config import load_experiment

DEFAULT_CONFIG = Path(__file__).resolve().parents[3] / "fixtures" / "xor_default.json"
BACKBONE_TOKENS = 197
GRADCHECK_SAMPLES = 4

SHARING_AXIS = (
    AdapterMode.FULLY_SHARED,
    AdapterMode.SHARED_A,
    AdapterMode.SHARED_B,
    AdapterMode.COLA,
)


def echo(payload: dict) -> None:
    """Prints the fully resolved configuration before a command runs"""
    text = json.dumps(payload, indent=2, sort_keys=True)
    app_logger.info("Resolved configuration: %s", json.dumps(payload, sort_keys=True))
    print(text)


def resolve_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """File, then profile, then command-line overrides"""
    experiment = load_experiment(args.config)

    profile = args.profile or experiment.profile
    if profile:
        experiment = apply_profile(experiment, profile)

    adapter_changes = {}
    if args.rank is not None:
        adapter_changes.update(rank=args.rank, inter_rank=None)
    if args.lambda_init is not None:
        adapter_changes["lambda_init"] = args.lambda_init
    if adapter_changes:
        experiment = replace(experiment, adapter=replace(experiment.adapter, **adapter_changes))
    if args.seed is not None:
        experiment = replace(experiment, run=replace(experiment.run, seed=args.seed))
    if args.strategy is not None:
        experiment = replace(experiment, strategy=PropagationStrategy(args.strategy))
    if args.mode is not None:
        experiment = replace(experiment, mode=AdapterMode(args.mode))
    if args.output_dir is not None:
        experiment = replace(experiment, output_dir=args.output_dir)
    return experiment


def _train_variant(experiment: ExperimentConfig, lambda_zero: bool = False):
    dataset = gen_dataset(experiment.task, seed=experiment.run.seed)
    task_model = build_task_model(experiment)
    if lambda_zero:
        set_lambdas(task_model.model, 0.0, freeze=True)
    return dataset, train(task_model, dataset, experiment.run)


def cmd_train(args: argparse.Namespace) -> int:
    experiment = resolve_experiment(args)
    echo({"command": "train", "config": experiment.to_dict()})

    dataset, (task_model, metrics, trace) = _train_variant(experiment, args.lambda_zero)
    output = Path(experiment.output_dir)
    write_json(output / METRICS_FILE, metrics.to_dict())
    write_json(output / TIMING_FILE, metrics.timing_dict())
    export_lambda(trace, output / LAMBDA_TRACE_FILE, allow_empty=True)
    save_checkpoint(task_model.model, str(output / CHECKPOINT_FILE), extra=task_model.head.state())
    write_json(
        output / PARAMS_FILE,
        count_params(toy_arch(experiment), experiment.adapter_config).to_dict(),
    )
    if args.save_dataset:
        save_jsonl(dataset, output / DATASET_FILE)

    print(f"test accuracy: {metrics.test_accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    experiment = resolve_experiment(args)
    echo({"command": "ablate", "axis": args.axis, "lambda_zero": args.lambda_zero, "config": experiment.to_dict()})

    if args.axis == "sharing":
        variants = [(mode.value, replace(experiment, mode=mode)) for mode in SHARING_AXIS]
    else:
        variants = [
            (strategy.value, replace(experiment, strategy=strategy)) for strategy in PropagationStrategy
        ]

    arch = toy_arch(experiment)
    rows = []
    for name, variant in variants:
        _, (_, metrics, _) = _train_variant(variant, args.lambda_zero)
        params = count_params(arch, variant.adapter_config).adapter_total
        rows.append({"variant": name, "test_accuracy": metrics.test_accuracy, "adapter_params": params})

    width = max(len("variant"), *(len(r["variant"]) for r in rows))
    print(f"{'variant'.ljust(width)}  {'test acc':>8}  {'adapter params':>14}")
    for row in rows:
        print(f"{row['variant'].ljust(width)}  {row['test_accuracy']:>8.4f}  {row['adapter_params']:>14,}")
    write_json(Path(experiment.output_dir) / f"ablation_{args.axis}.json", {"axis": args.axis, "rows": rows})
    return EXIT_OK


def _parse_delta(value: str) -> tuple[AdapterMode, int]:
    try:
        mode, rank = value.split(":")
        return AdapterMode(mode), int(rank)
    except ValueError:
        raise ConfigurationError(f"--delta expects mode:rank (e.g. lora:16), got '{value}'") from None


def cmd_count(args: argparse.Namespace) -> int:
    arch = get_preset(args.preset)
    base = ExperimentConfig().adapter if args.preset == "toy" else AdapterConfig()
    mode = AdapterMode(args.mode)
    rank = args.rank if args.rank is not None else base.rank
    delta = _parse_delta(args.delta) if args.delta else None
    echo(
        {
            "command": "count",
            "preset": arch.name,
            "mode": mode.value,
            "rank": rank,
            "delta": args.delta,
            "adapter": base.to_dict(),
        }
    )

    report = count_params(arch, base, mode, rank)
    print(report.to_table(millions=args.millions))
    payload = report.to_dict()

    if mode is AdapterMode.COLA:
        print(f"parameter-matched LoRA rank: {matched_lora_rank(arch, base, rank)}")

    if delta is not None:
        other = count_params(arch, base, delta[0], delta[1])
        difference = report_delta(report, other)
        print(
            f"delta {mode.value}:{rank} - {delta[0].value}:{delta[1]} = "
            f"{difference:,} ({difference / 1e6:.3f}M)"
        )
        payload["delta"] = {"against": args.delta, "params": difference}

    if args.output_dir:
        write_json(Path(args.output_dir) / PARAMS_FILE, payload)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    experiment = resolve_experiment(args)
    experiment = replace(experiment, run=replace(experiment.run, dtype="float64"))
    echo({"command": "gradcheck", "config": experiment.to_dict()})

    seed = experiment.run.seed
    task_model = build_task_model(experiment)
    randomize_adapters(task_model.model, seed)
    split = gen_dataset(experiment.task, GRADCHECK_SAMPLES, 1, 1, seed=seed).train

    report = gradcheck_suite(task_model, (split.tokens_m, split.tokens_c, split.labels), seed=seed)
    print(report.to_table())
    write_json(Path(experiment.output_dir) / GRADCHECK_FILE, report.to_dict())
    if not report.passed:
        raise VerificationError(
            f"Gradient check failed for {', '.join(report.failed)}", failed=report.failed
        )
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    experiment = resolve_experiment(args)
    echo({"command": "bench", "preset": args.preset, "tokens": args.tokens, "config": experiment.to_dict()})

    arch = get_preset(args.preset)
    base = experiment.adapter if args.preset == "toy" else AdapterConfig()
    lora = flops_forward(arch, base, args.tokens, args.tokens, AdapterMode.LORA_ONLY)
    cola = flops_forward(arch, base, args.tokens, args.tokens, AdapterMode.COLA, experiment.strategy)
    print(lora.to_table())
    print(cola.to_table())
    ratio = cola.flops / lora.flops
    print(f"CoLA/LoRA GFLOPs ratio at r={base.rank}: {ratio:.4f}")
    write_json(
        Path(experiment.output_dir) / FLOPS_FILE,
        {"lora": lora.to_dict(), "cola": cola.to_dict(), "ratio": ratio},
    )

    task = experiment.task
    split = gen_dataset(task, experiment.run.batch_size, 1, 1, seed=experiment.run.seed).train
    bench = wallclock_bench(
        experiment.encoder_config(task.vocab_size_m),
        experiment.encoder_config(task.vocab_size_c),
        experiment.adapter,
        split.tokens_m,
        split.tokens_c,
        repetitions=args.repetitions,
        seed=experiment.run.seed,
        strategy=experiment.strategy,
    )
    print(bench.to_table())
    write_json(Path(experiment.output_dir) / BENCH_FILE, bench.to_dict())
    return EXIT_OK


def _experiment_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "config", nargs="?", default=str(DEFAULT_CONFIG), help="Experiment JSON file"
    )
    parser.add_argument("--seed", type=int, help="Overrides run.seed")
    parser.add_argument(
        "--strategy", choices=[s.value for s in PropagationStrategy], help="Propagation strategy"
    )
    parser.add_argument("--mode", choices=[m.value for m in AdapterMode], help="Adapter mode")
    parser.add_argument("--rank", type=int, help="Rank of both pathways")
    parser.add_argument("--lambda-init", dest="lambda_init", type=float, help="Initial gate value")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="Training profile")
    parser.add_argument("--output-dir", dest="output_dir", help="Overrides output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cola", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Train one configuration")
    _experiment_arguments(train_parser)
    train_parser.add_argument("--lambda-zero", dest="lambda_zero", action="store_true", help="Freeze every gate at 0")
    train_parser.add_argument("--save-dataset", dest="save_dataset", action="store_true", help="Write dataset.jsonl")
    train_parser.set_defaults(handler=cmd_train)

    ablate_parser = subparsers.add_parser("ablate", help="Train every variant along one axis")
    _experiment_arguments(ablate_parser)
    ablate_parser.add_argument("--axis", choices=["sharing", "propagation"], required=True)
    ablate_parser.add_argument("--lambda-zero", dest="lambda_zero", action="store_true", help="Freeze every gate at 0")
    ablate_parser.set_defaults(handler=cmd_ablate)

    count_parser = subparsers.add_parser("count", help="Print trainable-parameter accounting")
    count_parser.add_argument("--preset", default="vitb-bertb", help="vitb-bertb, dinob-sslam or toy")
    count_parser.add_argument("--mode", default=AdapterMode.COLA.value, choices=[m.value for m in AdapterMode])
    count_parser.add_argument("--rank", type=int)
    count_parser.add_argument("--delta", help="Also print the difference against mode:rank")
    count_parser.add_argument("--millions", action="store_true", help="Counts in millions")
    count_parser.add_argument("--output-dir", dest="output_dir", help="Write params.json here")
    count_parser.set_defaults(handler=cmd_count)

    gradcheck_parser = subparsers.add_parser("gradcheck", help="Finite-difference gradient check")
    _experiment_arguments(gradcheck_parser)
    gradcheck_parser.set_defaults(handler=cmd_gradcheck)

    bench_parser = subparsers.add_parser("bench", help="FLOPs and wall-clock comparison")
    _experiment_arguments(bench_parser)
    bench_parser.add_argument("--preset", default="vitb-bertb", help="Architecture for the FLOPs report")
    bench_parser.add_argument("--tokens", type=int, default=BACKBONE_TOKENS, help="Tokens per sequence")
    bench_parser.add_argument("--repetitions", type=int, default=5)
    bench_parser.set_defaults(handler=cmd_bench)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Runs one command and maps failures onto the documented exit codes"""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigurationError as error:
        print(f"configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NumericError as error:
        print(f"numeric abort at {error.node}: {error}", file=sys.stderr)
        return EXIT_NUMERIC_ABORT
    except VerificationError as error:
        print(f"verification failed: {', '.join(error.failed)}", file=sys.stderr)
        return EXIT_VERIFICATION_FAILED


if __name__ == "__main__":
    sys.exit(main())
