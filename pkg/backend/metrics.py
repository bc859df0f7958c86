# backend/metrics.py

"""
Pedagogical-alignment evaluation.

Per-field accuracy and macro-F1 over the three classification fields,
accuracy by conversation round, and perplexity of guidance vs
direct-solution replies.
"""

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, NamedTuple, Optional

import pandas as pd
from tabulate import tabulate

from backend.errors import EmptyInput, EmptyTokens, MalformedRecord, PositiveLogProb
from backend.prefgen import build_context
from backend.schema import EvalCode, SubproblemState, canonical_letter
from utils.io_json import read_jsonl
from utils.logger import get_logger

logger = get_logger(__name__)

FIELDS = ("evaluation", "action", "substate")
DEFAULT_ROUND_CAP = 8
PPL_BUCKETS = ("A1", "A2", "A4", "A5")

# Stands in for an unparseable prediction; never equal to a gold code
INVALID_LABEL = "<invalid>"


@dataclass(frozen=True)
class FieldPrediction:
    """Predicted and gold codes for one tutor turn. None marks an unparseable prediction."""
    conv_id: str
    turn: int
    gold_evaluation: str
    gold_action: int
    gold_substate: str
    pred_evaluation: Optional[str] = None
    pred_action: Optional[int] = None
    pred_substate: Optional[str] = None

    def __post_init__(self):
        if self.turn < 1:
            raise ValueError(f"round must be >= 1, got {self.turn}")

    @property
    def parsed(self):
        return not (self.pred_evaluation is None or self.pred_action is None or self.pred_substate is None)

    @classmethod
    def from_annotations(cls, conv_id, turn, pred, gold):
        return cls(conv_id, turn,
                   gold.evaluation.value, gold.action, gold.substate.value,
                   None if pred is None else pred.evaluation.value,
                   None if pred is None else pred.action,
                   None if pred is None else pred.substate.value)


class FieldScores(NamedTuple):
    evaluation: float
    action: float
    substate: float
    mean: float

    @classmethod
    def of(cls, evaluation, action, substate):
        return cls(evaluation, action, substate, (evaluation + action + substate) / 3.0)

    def to_record(self):
        return self._asdict()


class RoundPoint(NamedTuple):
    round: int
    accuracy: float
    n: int


@dataclass(frozen=True)
class PplTable:
    """Mean reply perplexity per action bucket; buckets without probes are absent."""
    means: Dict[str, float]
    counts: Dict[str, int]

    def gap(self, aligned, misaligned):
        """ppl(misaligned) - ppl(aligned), or None when either bucket is absent."""
        if aligned not in self.means or misaligned not in self.means:
            return None
        return self.means[misaligned] - self.means[aligned]

    def to_record(self):
        return {
            "means": dict(self.means),
            "counts": dict(self.counts),
            "gap_A1_A2": self.gap("A1", "A2"),
            "gap_A4_A5": self.gap("A4", "A5"),
        }


@dataclass(frozen=True)
class MetricsReport:
    accuracy: FieldScores
    f1: FieldScores
    n_examples: int
    n_unparseable: int = 0
    rounds: List[RoundPoint] = field(default_factory=list)

    @property
    def display_accuracy(self):
        return format_accuracy_cell(self.accuracy)

    @property
    def display_f1(self):
        return format_f1_cell(self.f1)

    def to_record(self):
        return {
            "accuracy": self.accuracy.to_record(),
            "f1": self.f1.to_record(),
            "n_examples": self.n_examples,
            "n_unparseable": self.n_unparseable,
            "rounds": [point._asdict() for point in self.rounds],
            "display": {"accuracy": self.display_accuracy, "f1": self.display_f1},
        }


# --- scoring -----------------------------------------------------------------

def predictions_frame(preds):
    """One row per prediction with string labels; unparseable predictions become INVALID_LABEL."""
    rows = []
    for p in preds:
        row = {"conv_id": p.conv_id, "turn": p.turn}
        for name in FIELDS:
            pred = getattr(p, f"pred_{name}")
            row[f"gold_{name}"] = str(getattr(p, f"gold_{name}"))
            row[f"pred_{name}"] = INVALID_LABEL if pred is None else str(pred)
        rows.append(row)
    return pd.DataFrame(rows, columns=["conv_id", "turn"] + [f"{kind}_{name}" for name in FIELDS
                                                             for kind in ("gold", "pred")])


def _require(preds):
    if not preds:
        raise EmptyInput("no predictions to score")
    return predictions_frame(preds)


def field_accuracy(preds) -> FieldScores:
    """Per-field fraction of exact code matches and their mean."""
    df = _require(preds)
    n = len(df)
    hits = [int((df[f"pred_{name}"] == df[f"gold_{name}"]).sum()) for name in FIELDS]
    return FieldScores.of(*(h / n for h in hits))


def _macro_f1_column(gold: pd.Series, pred: pd.Series):
    confusion = pd.crosstab(gold, pred)
    gold_totals = confusion.sum(axis=1)
    pred_totals = confusion.sum(axis=0)
    scores = []
    for label in sorted(gold.unique()):
        tp = int(confusion.at[label, label]) if label in confusion.columns else 0
        predicted = int(pred_totals[label]) if label in pred_totals.index else 0
        scores.append(2.0 * tp / (int(gold_totals[label]) + predicted))
    return sum(scores) / len(scores)


def macro_f1(preds) -> FieldScores:
    """
    Per-field macro F1 over the classes present in gold, and their mean.
    """
    df = _require(preds)
    return FieldScores.of(*(_macro_f1_column(df[f"gold_{name}"], df[f"pred_{name}"]) for name in FIELDS))


def multi_round_curve(preds, cap=DEFAULT_ROUND_CAP) -> List[RoundPoint]:
    """
    Mean three-field accuracy per conversation round.

    Rounds past cap are pooled into the cap round; empty rounds are omitted.
    """
    if cap < 1:
        raise ValueError("round cap must be >= 1")
    df = _require(preds)
    df["round"] = df["turn"].clip(upper=cap)
    df["score"] = sum((df[f"pred_{name}"] == df[f"gold_{name}"]).astype(int) for name in FIELDS) / 3.0
    grouped = df.groupby("round")["score"].agg(["mean", "count"]).sort_index()
    return [RoundPoint(int(r), float(row["mean"]), int(row["count"])) for r, row in grouped.iterrows()]


def metrics_report(preds, cap=DEFAULT_ROUND_CAP) -> MetricsReport:
    return MetricsReport(
        accuracy=field_accuracy(preds),
        f1=macro_f1(preds),
        n_examples=len(preds),
        n_unparseable=sum(1 for p in preds if not p.parsed),
        rounds=multi_round_curve(preds, cap),
    )


def evaluate_policy(policy, convs):
    """Predict every turn of each conversation under the gold history."""
    preds = []
    for conv in sorted(convs, key=lambda c: c.id):
        for turn in conv.turns:
            predicted = policy.annotate(build_context(conv, turn.index))
            preds.append(FieldPrediction.from_annotations(conv.id, turn.index, predicted, turn.tutor))
    return preds


# --- perplexity ----------------------------------------------------------------

def perplexity(token_logprobs):
    """exp of the mean per-token negative log-likelihood."""
    values = [float(x) for x in token_logprobs]
    if not values:
        raise EmptyTokens("perplexity needs at least one token")
    for value in values:
        if not math.isfinite(value):
            raise ValueError(f"token log-probability must be finite, got {value}")
        if value > 0:
            raise PositiveLogProb(value)
    return math.exp(-math.fsum(values) / len(values))


def probe_perplexities(probes, policy):
    """(bucket, perplexity) for both replies of every probe, in probe order."""
    rows = []
    for probe in probes:
        rows.append((f"A{probe.aligned.action}", perplexity(policy.token_logprobs(probe.aligned))))
        rows.append((f"A{probe.misaligned.action}", perplexity(policy.token_logprobs(probe.misaligned))))
    return rows


def ppl_gap_report(probes, policy) -> PplTable:
    """Mean reply perplexity of aligned (A1/A4) and misaligned (A2/A5) replies."""
    if not probes:
        raise EmptyInput("no probes to score")
    df = pd.DataFrame(probe_perplexities(probes, policy), columns=["bucket", "ppl"])
    grouped = df.groupby("bucket")["ppl"].agg(["mean", "count"])
    means = {b: float(grouped.at[b, "mean"]) for b in PPL_BUCKETS if b in grouped.index}
    counts = {b: int(grouped.at[b, "count"]) for b in PPL_BUCKETS if b in grouped.index}
    return PplTable(means, counts)


# --- external predictions ------------------------------------------------------

def _field(obj, *names):
    for name in names:
        if name in obj:
            return obj[name]
    raise KeyError(names[0])


def _parse_codes(obj):
    """(evaluation, action, substate) from a prediction/gold object; raises on anything invalid."""
    if not isinstance(obj, dict):
        raise TypeError("codes must be an object")
    evaluation = EvalCode(canonical_letter(_field(obj, "eval", "evaluation", "Evaluation of Student Response",
                                                   "Eval of Student Response"))).value
    raw_action = _field(obj, "action", "Action Based on Evaluation", "Action Based on Eval")
    if isinstance(raw_action, bool):
        raise TypeError("boolean is not an action code")
    action = int(str(raw_action).strip())
    if not 1 <= action <= 12:
        raise ValueError(f"action {action} outside 1..12")
    substate = SubproblemState(canonical_letter(_field(obj, "substate", "Subproblem State"))).value
    return evaluation, action, substate


def load_predictions(file_path):
    """
    Read a prediction file.

    Lines are {conv_id, turn, pred: {eval, action, substate}, gold: {...}}.
    An unreadable pred scores as wrong on all three fields; a bad gold or
    an undecodable line is a MalformedRecord.
    """
    preds = []
    for line_no, obj, error in read_jsonl(file_path):
        if error:
            raise MalformedRecord(line_no, error)
        try:
            gold = _parse_codes(obj["gold"])
            conv_id, turn = str(obj["conv_id"]), int(obj["turn"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(line_no, f"bad gold record: {e}") from None
        try:
            pred = _parse_codes(obj.get("pred"))
        except (KeyError, TypeError, ValueError):
            logger.debug(f"Line {line_no}: unparseable prediction")
            pred = (None, None, None)
        preds.append(FieldPrediction(conv_id, turn, *gold, *pred))
    logger.info(f"Loaded {len(preds)} predictions from {file_path}")
    return preds


def prediction_to_record(p: FieldPrediction):
    pred = None
    if p.parsed:
        pred = {"eval": p.pred_evaluation, "action": p.pred_action, "substate": p.pred_substate}
    return {
        "conv_id": p.conv_id,
        "turn": p.turn,
        "pred": pred,
        "gold": {"eval": p.gold_evaluation, "action": p.gold_action, "substate": p.gold_substate},
    }


# --- display ---------------------------------------------------------------------

def _round_half_up(value, places):
    return str(Decimal(repr(value)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def format_accuracy(value):
    """Percent, nearest integer; halves round up."""
    return _round_half_up(value * 100, 0)


def format_f1(value):
    return _round_half_up(value, 2)


def format_accuracy_cell(scores: FieldScores):
    """'77 (74, 74, 84)': mean then per-field accuracy, in percent."""
    parts = ", ".join(format_accuracy(v) for v in scores[:3])
    return f"{format_accuracy(scores.mean)} ({parts})"


def format_f1_cell(scores: FieldScores):
    parts = ", ".join(format_f1(v) for v in scores[:3])
    return f"{format_f1(scores.mean)} ({parts})"


def comparison_frame(reports: Dict[str, MetricsReport], baseline="SFT"):
    """Raw scores per variant, with the mean-accuracy gain over the baseline in points."""
    base = reports.get(baseline)
    rows = []
    for variant, report in reports.items():
        row = {"variant": variant}
        for name in FIELDS + ("mean",):
            row[f"acc_{name}"] = getattr(report.accuracy, name)
            row[f"f1_{name}"] = getattr(report.f1, name)
        row["gain_vs_" + baseline] = None if base is None else (report.accuracy.mean - base.accuracy.mean) * 100
        rows.append(row)
    return pd.DataFrame(rows)


def render_comparison_table(reports: Dict[str, MetricsReport], baseline="SFT"):
    """Acc and F1 rows, one column per variant, plus a gain row against the baseline."""
    variants = list(reports)
    base = reports.get(baseline)
    rows = [
        ["Acc"] + [reports[v].display_accuracy for v in variants],
        ["F1"] + [reports[v].display_f1 for v in variants],
    ]
    if base is not None:
        rows.append([f"Gain vs {baseline}"] + [
            f"{(reports[v].accuracy.mean - base.accuracy.mean) * 100:+.1f}" for v in variants])
    return tabulate(rows, headers=["Metric"] + variants, tablefmt="github")


def ppl_frame(tables: Dict[str, PplTable]):
    rows = []
    for variant, table in tables.items():
        row = {"variant": variant}
        for bucket in PPL_BUCKETS:
            row[bucket] = table.means.get(bucket)
        row["gap_A1_A2"] = table.gap("A1", "A2")
        row["gap_A4_A5"] = table.gap("A4", "A5")
        rows.append(row)
    return pd.DataFrame(rows)


def render_ppl_table(tables: Dict[str, PplTable]):
    def cell(value):
        return "-" if value is None else f"{value:.2f}"

    rows = [[variant] + [cell(table.means.get(b)) for b in PPL_BUCKETS]
            + [cell(table.gap("A1", "A2")), cell(table.gap("A4", "A5"))]
            for variant, table in tables.items()]
    return tabulate(rows, headers=["Model"] + list(PPL_BUCKETS) + ["A2-A1", "A5-A4"], tablefmt="github")


def render_round_table(curves: Dict[str, List[RoundPoint]]):
    rounds = sorted({point.round for curve in curves.values() for point in curve})
    rows = []
    for variant, curve in curves.items():
        by_round = {point.round: point.accuracy for point in curve}
        rows.append([variant] + [format_accuracy(by_round[r]) if r in by_round else "-" for r in rounds])
    return tabulate(rows, headers=["Model"] + [str(r) for r in rounds], tablefmt="github")


# --- plots -----------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_round_curves(curves: Dict[str, List[RoundPoint]], file_path):
    """Accuracy by conversation round, one line per variant, saved as PNG."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for variant, curve in curves.items():
        ax.plot([p.round for p in curve], [p.accuracy * 100 for p in curve], marker="o", label=variant)
    ax.set_xlabel("Conversation round")
    ax.set_ylabel("Mean accuracy (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(file_path, dpi=100)
    plt.close(fig)
    logger.info(f"Saved round curves to {file_path}")


def plot_beta_sweep(sweep: pd.DataFrame, file_path):
    """Mean accuracy against beta, one line per algorithm."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for algo, rows in sweep.groupby("algo", sort=True):
        rows = rows.sort_values("beta")
        ax.plot(rows["beta"], rows["accuracy"] * 100, marker="o", label=algo.upper())
    ax.set_xlabel("beta")
    ax.set_ylabel("Mean accuracy (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(file_path, dpi=100)
    plt.close(fig)
    logger.info(f"Saved beta sweep plot to {file_path}")
