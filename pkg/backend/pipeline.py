# backend/pipeline.py

"""
End-to-end alignment run: split -> SFT -> rejected stream -> preference
pairs -> LHP -> probes -> evaluation -> report, plus the beta sweep.

Every artifact is written atomically under the run's output directory.
"""

import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import pandas as pd

from backend.errors import ConfigError, PedalignError
from backend.losses import ALGOS, check_beta
from backend.metrics import (MetricsReport, PplTable, evaluate_policy, metrics_report,
                             ppl_gap_report)
from backend.policy import corpus_texts, load_policy, new_policy_for, save_policy
from backend.prefgen import (DEFAULT_MISALIGNED_TEMPLATE, SplitSpec, build_misaligned_probes,
                             build_preference_pairs, load_solution_bank, pair_from_record,
                             pair_to_record, perturb_stream, probe_to_record,
                             render_misaligned_utterance, split_dataset)
from backend.schema import (conversation_to_record, dataset_stats, read_conversations,
                            validate_action_ordering)
from backend.trainer import (TrainConfig, annotate_stream, evaluate_objective, lhp_train,
                             sft_examples, sft_train)
from utils.config import require_section
from utils.io_json import read_jsonl, write_json, write_jsonl
from utils.logger import get_logger

logger = get_logger(__name__)

SPLITS_FILE = "splits.json"
SFT_POLICY_FILE = "sft_policy.json"
REJECTED_FILE = "rejected_stream.jsonl"
PAIRS_FILE = "pairs.jsonl"
LHP_POLICY_FILE = "lhp_policy.json"
PROBES_FILE = "probes.jsonl"
REPORT_FILE = "report.json"

ARTIFACTS = (SPLITS_FILE, SFT_POLICY_FILE, REJECTED_FILE, PAIRS_FILE, LHP_POLICY_FILE, PROBES_FILE, REPORT_FILE)
STAGES = ("split", "sft", "rejected", "pairs", "lhp", "probes", "eval")


# --- typed config access ---------------------------------------------------------

def train_config(config, section):
    """TrainConfig from the "sft" or "lhp" config section."""
    try:
        return TrainConfig.from_section(require_section(config, section))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [{section}] settings: {e}") from e


def split_spec(config):
    section = require_section(config, "split")
    try:
        return SplitSpec(int(section["seed"]), int(section["n_sft"]), int(section["n_lhp"]), int(section["n_test"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [split] settings: {e}") from e


def policy_settings(config):
    """(n_buckets, hash_seed, min_freq) from the "policy" config section."""
    section = require_section(config, "policy")
    try:
        n_buckets, hash_seed, min_freq = int(section["n_buckets"]), int(section["hash_seed"]), int(section["min_freq"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [policy] settings: {e}") from e
    if n_buckets < 1 or min_freq < 1:
        raise ConfigError("Invalid [policy] settings: n_buckets and min_freq must be >= 1")
    return n_buckets, hash_seed, min_freq


def round_cap(config):
    try:
        return int(require_section(config, "metrics")["round_cap"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [metrics] settings: {e}") from e


def sweep_grid(config):
    """
    (algos, betas) requested for a sweep.

    Raises:
        InvalidBeta: a beta <= 0
        ConfigError: empty lists or unknown algorithm
    """
    section = require_section(config, "sweep")
    betas = list(section.get("betas") or [])
    algos = list(section.get("algos") or [])
    if not betas:
        raise ConfigError("Beta sweep needs at least one beta")
    if not algos:
        raise ConfigError("Beta sweep needs at least one algorithm")
    for algo in algos:
        if algo not in ALGOS:
            raise ConfigError(f"Unknown algorithm in sweep: {algo}")
    return sorted(set(algos)), sorted({check_beta(b) for b in betas})


# --- run state ---------------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    metrics: Dict[str, MetricsReport] = field(default_factory=dict)
    perplexity: Dict[str, PplTable] = field(default_factory=dict)
    stopped_after: Optional[str] = None


@dataclass
class PreparedRun:
    """Everything up to and including the preference pairs."""
    sft: list
    lhp: list
    test: list
    solution_bank: dict
    template: str
    base_policy: object
    sft_policy: object
    sft_curve: List[float]
    pairs: list = field(default_factory=list)
    rejected: list = field(default_factory=list)


@contextmanager
def stage(name):
    """Log a stage's start and, on failure, its name and cause."""
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except (PedalignError, OSError) as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise
    logger.debug(f"Stage '{name}' finished")


def _artifact(out_dir, name):
    return os.path.join(out_dir, name)


def vocab_texts(convs, solution_bank, template):
    """Reply texts the vocab covers: the corpus replies and every direct-answer rendering."""
    texts = corpus_texts(convs)
    texts.extend(render_misaligned_utterance(answer, template) for _, answer in sorted(solution_bank.items()))
    return texts


def _load_corpus(config, strict):
    paths = require_section(config, "paths")
    if not paths.get("corpus"):
        raise ConfigError("No corpus path configured")
    convs, _ = read_conversations(paths["corpus"], strict=strict)
    bank = load_solution_bank(paths["solution_bank"]) if paths.get("solution_bank") else {}
    return convs, bank


def _rejected_stream(config, lhp, sft_policy, bank, template, strict):
    prefgen = require_section(config, "prefgen")
    source = prefgen.get("rejected_source") or "noisy"
    if source == "noisy":
        return perturb_stream(lhp, float(prefgen["flip_prob"]), int(prefgen["seed"]), bank, template)
    if source == "policy":
        return annotate_stream(sft_policy, lhp)
    if source == "sft_stream":
        source = require_section(config, "paths").get("sft_stream")
        if not source:
            raise ConfigError("rejected_source 'sft_stream' needs paths.sft_stream")
    # anything else names a second tutor corpus
    wanted = {conv.id for conv in lhp}
    stream, _ = read_conversations(source, strict=strict)
    return [conv for conv in stream if conv.id in wanted]


def prepare_run(config, out_dir, strict=True, resume=False, write=True, stop_after=None):
    """
    Run the stages shared by the pipeline and the sweep: split, SFT, rejected stream, pairs.

    Args:
        stop_after: "split", "sft" or "rejected" to return before the later stages

    Returns:
        PreparedRun (pairs empty when the LHP split is empty or the run stopped early;
        policies None when it stopped after the split)
    """
    template = require_section(config, "prefgen").get("misaligned_template") or DEFAULT_MISALIGNED_TEMPLATE
    policy_args = policy_settings(config)

    with stage("split"):
        convs, bank = _load_corpus(config, strict)
        spec = split_spec(config)
        sft, lhp, test = split_dataset(convs, spec)
        if write:
            write_json({
                "seed": spec.seed,
                "sizes": {"sft": spec.n_sft, "lhp": spec.n_lhp, "test": spec.n_test},
                "discarded": len(convs) - spec.total,
                "sft": [c.id for c in sft],
                "lhp": [c.id for c in lhp],
                "test": [c.id for c in test],
            }, _artifact(out_dir, SPLITS_FILE))
    if stop_after == "split":
        return PreparedRun(sft, lhp, test, bank, template, None, None, [])

    with stage("sft"):
        base = new_policy_for(vocab_texts(sft + lhp, bank, template), *policy_args)
        checkpoint = _artifact(out_dir, SFT_POLICY_FILE)
        if resume and os.path.exists(checkpoint):
            logger.info(f"Resuming from {checkpoint}")
            sft_policy, sft_curve = load_policy(checkpoint), []
        else:
            sft_policy, sft_curve = sft_train(base, sft_examples(sft), train_config(config, "sft"))
            if write:
                save_policy(sft_policy, checkpoint)

    run = PreparedRun(sft, lhp, test, bank, template, base, sft_policy, sft_curve)
    if not lhp or stop_after == "sft":
        return run

    with stage("rejected"):
        run.rejected = _rejected_stream(config, lhp, sft_policy, bank, template, strict)
        if write:
            write_jsonl([conversation_to_record(c) for c in run.rejected], _artifact(out_dir, REJECTED_FILE))
    if stop_after == "rejected":
        return run

    with stage("pairs"):
        pairs_path = _artifact(out_dir, PAIRS_FILE)
        if resume and os.path.exists(pairs_path):
            run.pairs = [pair_from_record(obj) for _, obj, _ in read_jsonl(pairs_path)]
        else:
            run.pairs = build_preference_pairs(lhp, run.rejected)
            if write:
                write_jsonl([pair_to_record(p) for p in run.pairs], pairs_path)
        logger.info(f"{len(run.pairs)} preference pairs from {len(lhp)} conversations")
    return run


def lhp_start(run: PreparedRun, config):
    """(initial policy, frozen reference) for preference training."""
    init_from_sft = bool(require_section(config, "lhp").get("init_from_sft", True))
    start = run.sft_policy if init_from_sft else run.base_policy
    return start, start.copy()


def build_probes(convs, solution_bank, template=DEFAULT_MISALIGNED_TEMPLATE):
    """Probes for every ordering-valid conversation; invalid ones are skipped with a warning."""
    probes = []
    for conv in sorted(convs, key=lambda c: c.id):
        if not validate_action_ordering(conv).is_valid:
            logger.warning(f"Skipping {conv.id} for probes: action ordering violated")
            continue
        probes.extend(build_misaligned_probes(conv, solution_bank, template))
    return probes


def run_pipeline(config, strict=True, resume=False, stop_after=None):
    """
    Run every stage and write the seven artifacts.

    Args:
        config: merged run configuration
        strict: abort on the first malformed corpus line
        resume: reuse the SFT checkpoint, pair file and LHP checkpoint when present
        stop_after: optional stage name to stop after

    Returns:
        PipelineResult
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"Unknown stage: {stop_after} (expected one of {', '.join(STAGES)})")
    out_dir = require_section(config, "paths")["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    result = PipelineResult(out_dir)

    run = prepare_run(config, out_dir, strict=strict, resume=resume, stop_after=stop_after)
    result.artifacts["splits"] = _artifact(out_dir, SPLITS_FILE)
    if stop_after == "split":
        result.stopped_after = stop_after
        return result
    result.artifacts["sft_policy"] = _artifact(out_dir, SFT_POLICY_FILE)

    if not run.lhp:
        logger.warning("LHP split is empty (n_lhp = 0): stopping after SFT")
        result.stopped_after = "sft"
        return result
    if stop_after == "sft":
        result.stopped_after = stop_after
        return result
    result.artifacts["rejected_stream"] = _artifact(out_dir, REJECTED_FILE)
    if stop_after == "rejected":
        result.stopped_after = stop_after
        return result
    result.artifacts["pairs"] = _artifact(out_dir, PAIRS_FILE)
    if stop_after == "pairs":
        result.stopped_after = stop_after
        return result

    lhp_cfg = train_config(config, "lhp")
    with stage("lhp"):
        start, reference = lhp_start(run, config)
        checkpoint = _artifact(out_dir, LHP_POLICY_FILE)
        if resume and os.path.exists(checkpoint):
            lhp_policy, lhp_curve = load_policy(checkpoint), []
        else:
            lhp_policy, lhp_curve = lhp_train(start, reference, run.pairs, lhp_cfg)
            save_policy(lhp_policy, checkpoint)
        before = evaluate_objective(start, reference, run.pairs, lhp_cfg.algo, lhp_cfg.beta,
                                    lhp_cfg.lambda_d, lhp_cfg.lambda_u)
        after = evaluate_objective(lhp_policy, reference, run.pairs, lhp_cfg.algo, lhp_cfg.beta,
                                   lhp_cfg.lambda_d, lhp_cfg.lambda_u)
    result.artifacts["lhp_policy"] = checkpoint
    if stop_after == "lhp":
        result.stopped_after = stop_after
        return result

    with stage("probes"):
        probes = build_probes(run.test, run.solution_bank, run.template)
        write_jsonl([probe_to_record(p) for p in probes], _artifact(out_dir, PROBES_FILE))
    result.artifacts["probes"] = _artifact(out_dir, PROBES_FILE)
    if stop_after == "probes":
        result.stopped_after = stop_after
        return result

    variant = lhp_cfg.algo.upper()
    cap = round_cap(config)
    with stage("eval"):
        if run.test:
            result.metrics["SFT"] = metrics_report(evaluate_policy(run.sft_policy, run.test), cap)
            result.metrics[variant] = metrics_report(evaluate_policy(lhp_policy, run.test), cap)
        if probes:
            for name, policy in (("Base", run.base_policy), ("SFT", run.sft_policy), (variant, lhp_policy)):
                result.perplexity[name] = ppl_gap_report(probes, policy)

        result.report = {
            "dataset": {
                "sft": dataset_stats(run.sft).to_record(),
                "lhp": dataset_stats(run.lhp).to_record(),
                "test": dataset_stats(run.test).to_record(),
            },
            "sft": {"config": train_config(config, "sft").to_record(), "loss_curve": run.sft_curve},
            "lhp": {
                "config": lhp_cfg.to_record(),
                "init_from_sft": bool(require_section(config, "lhp").get("init_from_sft", True)),
                "margin_curve": lhp_curve,
                "objective_before": before.to_record(),
                "objective_after": after.to_record(),
            },
            "pairs": {"count": len(run.pairs), "rejected_source": require_section(config, "prefgen")["rejected_source"]},
            "probes": {"count": len(probes)},
            "metrics": {name: report.to_record() for name, report in result.metrics.items()},
            "perplexity": {name: table.to_record() for name, table in result.perplexity.items()},
        }
        write_json(result.report, _artifact(out_dir, REPORT_FILE))
    result.artifacts["report"] = _artifact(out_dir, REPORT_FILE)
    logger.info(f"Pipeline finished; artifacts in {out_dir}")
    return result


@dataclass(frozen=True)
class SweepRow:
    algo: str
    beta: float
    accuracy: float
    f1: float


def sweep_beta(config, strict=True):
    """
    Train one LHP policy per (algo, beta) from the same SFT checkpoint and score each on the test split.

    Returns:
        List of SweepRow sorted by algo then beta
    """
    algos, betas = sweep_grid(config)
    out_dir = require_section(config, "paths")["out_dir"]
    run = prepare_run(config, out_dir, strict=strict, write=False)
    if not run.pairs:
        raise ConfigError("Beta sweep needs a non-empty LHP split with preference pairs")
    if not run.test:
        raise ConfigError("Beta sweep needs a non-empty test split")

    base_cfg = train_config(config, "lhp")
    start, reference = lhp_start(run, config)
    cap = round_cap(config)
    rows = []
    for algo in algos:
        for beta in betas:
            with stage(f"sweep {algo} beta={beta}"):
                cfg = replace(base_cfg, algo=algo, beta=beta)
                policy, _ = lhp_train(start, reference, run.pairs, cfg)
                report = metrics_report(evaluate_policy(policy, run.test), cap)
                rows.append(SweepRow(algo, beta, report.accuracy.mean, report.f1.mean))
    return rows


SWEEP_COLUMNS = ["algo", "beta", "accuracy", "f1"]


def sweep_frame(rows):
    return pd.DataFrame([asdict(row) for row in rows], columns=SWEEP_COLUMNS)
