# cli/pedalign_cli.py

import argparse
import json
import logging
import os
import sys

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from backend.errors import ConfigError, IoFailure, PedalignError, SchemaError
from backend.losses import ALGOS
from backend.metrics import (evaluate_policy, load_predictions, metrics_report, plot_beta_sweep,
                             plot_round_curves, ppl_frame, ppl_gap_report, render_comparison_table,
                             render_ppl_table, render_round_table, comparison_frame)
from backend.pipeline import (STAGES, SWEEP_COLUMNS, build_probes, policy_settings, round_cap, run_pipeline,
                              split_spec, sweep_beta, sweep_frame, train_config, vocab_texts)
from backend.policy import load_policy, new_policy_for, save_policy
from backend.prefgen import (DEFAULT_MISALIGNED_TEMPLATE, SplitSpec, build_preference_pairs,
                             load_solution_bank, pair_from_record, pair_to_record,
                             perturb_stream, probe_from_record, probe_to_record, split_dataset)
from backend.schema import (conversation_to_record, dataset_stats, read_conversations,
                            validate_action_ordering)
from backend.trainer import evaluate_objective, lhp_train, sft_examples, sft_train
from utils.config import apply_overrides, load_config, save_config
from utils.io_excel import read_report_table, write_report_table
from utils.io_json import dumps_record, read_json, read_jsonl, write_json, write_jsonl
from utils.logger import get_logger, setup_logger

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_IO = 2


def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a JSON config file (default: $PEDALIGN_CONFIG or data/app_config.json)")
    common.add_argument("--seed", type=int, help="Seed for splitting, training and the noisy annotator")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_true", default=True,
                      help="Abort on the first malformed corpus line (default)")
    mode.add_argument("--lenient", dest="strict", action="store_false",
                      help="Count and skip malformed corpus lines")
    common.add_argument("--algo", choices=ALGOS, help="Preference objective")
    common.add_argument("--beta", type=float, help="KL-penalty strength")
    common.add_argument("--out", help="Output file or directory")
    common.add_argument("--save-config", help="Write the effective config (file merged with flags) as JSON")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose output")
    common.add_argument("--quiet", "-q", action="store_true", help="Suppress all output except errors")
    common.add_argument("--log-file", help="Path to log file")
    return common


def parse_args(argv=None):
    """Parse command line arguments."""
    common = _common_options()
    parser = argparse.ArgumentParser(description="pedalign - pedagogical alignment of tutor policies")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    validate_parser = subparsers.add_parser("validate", parents=[common],
                                            help="Check a corpus against the schema and the action-ordering rules")
    validate_parser.add_argument("corpus", help="Conversation file (one conversation per line)")

    stats_parser = subparsers.add_parser("stats", parents=[common], help="Print corpus statistics as JSON")
    stats_parser.add_argument("corpus", help="Conversation file")

    split_parser = subparsers.add_parser("split", parents=[common], help="Split a corpus into SFT/LHP/test partitions")
    split_parser.add_argument("corpus", help="Conversation file")
    split_parser.add_argument("--sizes", type=int, nargs=3, metavar=("N_SFT", "N_LHP", "N_TEST"),
                              help="Partition sizes (default from config)")

    pairs_parser = subparsers.add_parser("build-pairs", parents=[common],
                                         help="Build preference pairs from a tutor stream and an SFT-tutor stream")
    pairs_parser.add_argument("tutor_stream", help="Reference tutor conversations (chosen side)")
    pairs_parser.add_argument("sft_stream", nargs="?",
                              help="SFT tutor conversations (rejected side); omitted = noisy annotator")
    pairs_parser.add_argument("--solution-bank", help="Subproblem -> answer JSON for direct-answer replies")
    pairs_parser.add_argument("--flip-prob", type=float, help="Noisy annotator per-field flip probability")

    probes_parser = subparsers.add_parser("build-probes", parents=[common],
                                          help="Build aligned/misaligned perplexity probes")
    probes_parser.add_argument("corpus", help="Conversation file")
    probes_parser.add_argument("--solution-bank", required=True, help="Subproblem -> answer JSON")
    probes_parser.add_argument("--split", choices=("sft", "lhp", "test"),
                               help="Only use conversations of this partition (needs --splits)")
    probes_parser.add_argument("--splits", help="splits.json written by the split or pipeline command")

    sft_parser = subparsers.add_parser("sft-train", parents=[common], help="Supervised fine-tuning of a fresh policy")
    sft_parser.add_argument("corpus", help="Conversation file with gold tutor turns")
    sft_parser.add_argument("--solution-bank", help="Adds the direct-answer replies to the vocab")

    lhp_parser = subparsers.add_parser("lhp-train", parents=[common], help="Preference optimization (DPO/IPO/KTO)")
    lhp_parser.add_argument("pairs", help="Preference pair file")
    lhp_parser.add_argument("--init", required=True, help="Policy checkpoint to start from")
    lhp_parser.add_argument("--reference", help="Frozen reference checkpoint (default: --init)")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Per-field accuracy, macro-F1 and round curves")
    eval_parser.add_argument("corpus", nargs="?", help="Conversation file with gold tutor turns")
    source = eval_parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--policy", action="append", metavar="[NAME=]CHECKPOINT",
                        help="Policy checkpoint to evaluate (repeatable)")
    source.add_argument("--predictions", help="Prediction file to score instead of a policy")
    eval_parser.add_argument("--report", help="Write the comparison table (.xlsx, .csv or .json)")
    eval_parser.add_argument("--plot", help="Save accuracy-by-round curves as PNG")

    ppl_parser = subparsers.add_parser("ppl", parents=[common], help="Perplexity of aligned vs misaligned replies")
    ppl_parser.add_argument("probes", help="Probe file")
    ppl_parser.add_argument("--policy", action="append", required=True, metavar="[NAME=]CHECKPOINT",
                            help="Policy checkpoint (repeatable)")
    ppl_parser.add_argument("--report", help="Write the perplexity table (.xlsx, .csv or .json)")

    sweep_parser = subparsers.add_parser("sweep-beta", parents=[common], help="Train and score one policy per (algo, beta)")
    sweep_parser.add_argument("--betas", type=float, nargs="+", help="Betas to try (default from config)")
    sweep_parser.add_argument("--algos", choices=ALGOS, nargs="+", help="Algorithms to try (default from config)")
    sweep_parser.add_argument("--report", help="Write the sweep table (.xlsx, .csv or .json)")
    sweep_parser.add_argument("--plot", help="Save accuracy against beta as PNG")
    sweep_parser.add_argument("--from-report", help="Reuse a sweep table written by --report instead of training")

    pipeline_parser = subparsers.add_parser("pipeline", parents=[common], help="Run every stage end to end")
    pipeline_parser.add_argument("--corpus", help="Conversation file (default from config)")
    pipeline_parser.add_argument("--rejected-source", help="noisy, policy, sft_stream (paths.sft_stream) or a path to an SFT-tutor corpus")
    pipeline_parser.add_argument("--resume", action="store_true", help="Reuse checkpoints and pairs already in --out")
    pipeline_parser.add_argument("--stop-after", choices=STAGES, help="Stop after this stage")

    return parser.parse_args(argv)


def _config(args, **extra):
    """Config file merged with the flags; flags win."""
    config = apply_overrides(load_config(args.config), seed=args.seed, algo=args.algo, beta=args.beta, **extra)
    if args.save_config:
        save_config(config, args.save_config)
        get_logger(__name__).info(f"Saved effective config to {args.save_config}")
    return config


def _named_checkpoints(values):
    named = []
    for value in values:
        name, sep, path = value.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(value))[0], value
        named.append((name, path))
    return named


def _require_out(args):
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return args.out


def execute_validate_command(args, logger):
    """Execute the validate command."""
    convs, stats = read_conversations(args.corpus, strict=args.strict)
    n_violations = 0
    for conv in convs:
        report = validate_action_ordering(conv)
        for v in report.violations:
            print(f"{conv.id} turn {v.turn}: {v.rule}: {v.message}")
        n_violations += len(report.violations)

    summary = dataset_stats(convs)
    print(f"{stats.parsed} conversations, {stats.skipped} skipped, {n_violations} violations")
    print(f"QA pairs: {summary.n_qa_pairs}, mean rounds: {summary.mean_rounds:.2f}, "
          f"mean words: {summary.mean_words:.1f}")
    if args.strict:
        return EXIT_OK if n_violations == 0 else EXIT_DOMAIN
    if n_violations:
        logger.warning(f"{n_violations} ordering violations (lenient mode)")
    return EXIT_OK if convs else EXIT_DOMAIN


def execute_stats_command(args, logger):
    convs, stats = read_conversations(args.corpus, strict=args.strict)
    record = dataset_stats(convs).to_record()
    record["skipped"] = stats.skipped
    print(dumps_record(record))
    return EXIT_OK


def execute_split_command(args, logger):
    """Execute the split command: writes splits.json and one file per partition."""
    config = _config(args)
    spec = split_spec(config)
    if args.sizes:
        spec = SplitSpec(spec.seed, *args.sizes)
    out_dir = args.out or config["paths"]["out_dir"]
    convs, _ = read_conversations(args.corpus, strict=args.strict)
    parts = dict(zip(("sft", "lhp", "test"), split_dataset(convs, spec)))
    for name, part in parts.items():
        write_jsonl([conversation_to_record(c) for c in part], os.path.join(out_dir, f"{name}.jsonl"))
    write_json({
        "seed": spec.seed,
        "sizes": {"sft": spec.n_sft, "lhp": spec.n_lhp, "test": spec.n_test},
        "discarded": len(convs) - spec.total,
        **{name: [c.id for c in part] for name, part in parts.items()},
    }, os.path.join(out_dir, "splits.json"))
    print(f"sft={spec.n_sft} lhp={spec.n_lhp} test={spec.n_test} discarded={len(convs) - spec.total}")
    return EXIT_OK


def execute_build_pairs_command(args, logger):
    """Execute the build-pairs command."""
    config = _config(args)
    out = _require_out(args)
    tutor, _ = read_conversations(args.tutor_stream, strict=args.strict)
    if args.sft_stream:
        sft, _ = read_conversations(args.sft_stream, strict=args.strict)
    else:
        prefgen = config["prefgen"]
        bank = load_solution_bank(args.solution_bank) if args.solution_bank else {}
        flip_prob = prefgen["flip_prob"] if args.flip_prob is None else args.flip_prob
        logger.info(f"No SFT stream given: noisy annotator with flip probability {flip_prob}")
        sft = perturb_stream(tutor, flip_prob, prefgen["seed"], bank,
                             prefgen.get("misaligned_template") or DEFAULT_MISALIGNED_TEMPLATE)
    pairs = build_preference_pairs(tutor, sft)
    write_jsonl([pair_to_record(p) for p in pairs], out)
    print(f"{len(pairs)} preference pairs")
    return EXIT_OK


def _conversation_filter(args):
    if not args.split:
        return None
    if not args.splits:
        raise ConfigError("--split needs --splits")
    splits = read_json(args.splits)
    if args.split not in splits:
        raise ConfigError(f"{args.splits} has no '{args.split}' partition")
    return set(splits[args.split])


def execute_build_probes_command(args, logger):
    config = _config(args)
    out = _require_out(args)
    convs, _ = read_conversations(args.corpus, strict=args.strict)
    wanted = _conversation_filter(args)
    if wanted is not None:
        convs = [c for c in convs if c.id in wanted]
    probes = build_probes(convs, load_solution_bank(args.solution_bank),
                          config["prefgen"].get("misaligned_template") or DEFAULT_MISALIGNED_TEMPLATE)
    write_jsonl([probe_to_record(p) for p in probes], out)
    print(f"{len(probes)} probes from {len(convs)} conversations")
    return EXIT_OK


def execute_sft_train_command(args, logger):
    config = _config(args)
    out = _require_out(args)
    convs, _ = read_conversations(args.corpus, strict=args.strict)
    bank = load_solution_bank(args.solution_bank) if args.solution_bank else {}
    template = config["prefgen"].get("misaligned_template") or DEFAULT_MISALIGNED_TEMPLATE
    base = new_policy_for(vocab_texts(convs, bank, template), *policy_settings(config))
    policy, curve = sft_train(base, sft_examples(convs), train_config(config, "sft"))
    save_policy(policy, out)
    print(dumps_record({"loss_curve": curve}))
    return EXIT_OK


def execute_lhp_train_command(args, logger):
    config = _config(args)
    out = _require_out(args)
    cfg = train_config(config, "lhp")
    rows = read_jsonl(args.pairs)
    pairs = []
    for line_no, obj, error in rows:
        if error:
            raise IoFailure(f"{args.pairs} line {line_no}: {error}")
        pairs.append(pair_from_record(obj))
    start = load_policy(args.init)
    reference = load_policy(args.reference) if args.reference else start.copy()
    policy, curve = lhp_train(start, reference, pairs, cfg)
    save_policy(policy, out)
    after = evaluate_objective(policy, reference, pairs, cfg.algo, cfg.beta, cfg.lambda_d, cfg.lambda_u)
    print(dumps_record({"margin_curve": curve, "objective": after.to_record()}))
    return EXIT_OK


def execute_eval_command(args, logger):
    """Execute the eval command."""
    config = _config(args)
    cap = round_cap(config)
    reports = {}
    if args.predictions:
        reports["predictions"] = metrics_report(load_predictions(args.predictions), cap)
        if reports["predictions"].n_unparseable:
            logger.warning(f"{reports['predictions'].n_unparseable} unparseable predictions scored as wrong")
    else:
        if not args.corpus:
            raise ConfigError("eval with --policy needs a corpus")
        convs, _ = read_conversations(args.corpus, strict=args.strict)
        for name, path in _named_checkpoints(args.policy):
            reports[name] = metrics_report(evaluate_policy(load_policy(path), convs), cap)

    print(render_comparison_table(reports, baseline=next(iter(reports))))
    print()
    print(render_round_table({name: report.rounds for name, report in reports.items()}))
    if args.report:
        write_report_table(comparison_frame(reports, baseline=next(iter(reports))), args.report)
    if args.plot:
        plot_round_curves({name: report.rounds for name, report in reports.items()}, args.plot)
    return EXIT_OK


def execute_ppl_command(args, logger):
    probes = []
    for line_no, obj, error in read_jsonl(args.probes):
        if error:
            raise IoFailure(f"{args.probes} line {line_no}: {error}")
        probes.append(probe_from_record(obj))
    tables = {name: ppl_gap_report(probes, load_policy(path)) for name, path in _named_checkpoints(args.policy)}
    print(render_ppl_table(tables))
    if args.report:
        write_report_table(ppl_frame(tables), args.report, sheet_name="Perplexity")
    return EXIT_OK


def execute_sweep_command(args, logger):
    if args.from_report:
        frame = read_report_table(args.from_report, sheet_name="Sweep")
        missing = [column for column in SWEEP_COLUMNS if column not in frame.columns]
        if missing:
            raise SchemaError(f"{args.from_report} is not a sweep table, missing: {', '.join(missing)}")
        frame = frame[SWEEP_COLUMNS]
    else:
        config = _config(args, betas=args.betas, algos=args.algos, out=args.out)
        frame = sweep_frame(sweep_beta(config, strict=args.strict))
    print(frame.to_string(index=False))
    if args.report:
        write_report_table(frame, args.report, sheet_name="Sweep")
    if args.plot:
        plot_beta_sweep(frame, args.plot)
    return EXIT_OK


def execute_pipeline_command(args, logger):
    config = _config(args, out=args.out, corpus=args.corpus, rejected_source=args.rejected_source)
    result = run_pipeline(config, strict=args.strict, resume=args.resume, stop_after=args.stop_after)
    if result.stopped_after:
        print(f"Stopped after stage '{result.stopped_after}'")
    if result.metrics:
        print(render_comparison_table(result.metrics))
    if result.perplexity:
        print()
        print(render_ppl_table(result.perplexity))
    print(json.dumps(result.artifacts, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "validate": execute_validate_command,
    "stats": execute_stats_command,
    "split": execute_split_command,
    "build-pairs": execute_build_pairs_command,
    "build-probes": execute_build_probes_command,
    "sft-train": execute_sft_train_command,
    "lhp-train": execute_lhp_train_command,
    "eval": execute_eval_command,
    "ppl": execute_ppl_command,
    "sweep-beta": execute_sweep_command,
    "pipeline": execute_pipeline_command,
}


def main(argv=None):
    """Main entry point for the CLI. Returns the exit code."""
    args = parse_args(argv)
    if not args.command:
        print("Run with --help for usage information", file=sys.stderr)
        return EXIT_DOMAIN

    # Set up logging
    log_level = logging.DEBUG if args.verbose else logging.INFO
    if args.quiet:
        log_level = logging.ERROR
    logger = setup_logger(args.log_file, console_level=log_level)
    logger.info(f"Starting pedalign with command: {args.command}")

    try:
        return COMMANDS[args.command](args, logger)
    except (IoFailure, ConfigError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_IO
    except PedalignError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_DOMAIN
    except OSError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_IO
    except ValueError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
