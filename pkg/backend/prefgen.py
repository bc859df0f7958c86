# backend/prefgen.py

"""
Preference data construction.

Pairs come from two tutor streams over the same conversations: wherever the
(evaluation, action, subproblem state) signatures of the two tutors differ,
the reference tutor's turn is chosen and the other tutor's turn is rejected.
Perplexity probes pair the first guidance turn (action 1 or 4) with a
synthesized direct-solution turn (action 2 or 5).
"""

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Tuple

import numpy as np
from jinja2 import Environment, StrictUndefined
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from backend.errors import (InsufficientCorpus, MisalignedStreams, MissingSolution,
                            SchemaError, TurnOutOfRange)
from backend.schema import (ACTION_CODES, EVAL_CODES, SUBSTATE_CODES, Conversation,
                            ConversationTurn, EvalCode, SubproblemState, TutorAnnotation,
                            annotation_to_record, parse_turn_annotation)
from utils.io_json import read_json
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_MISALIGNED_TEMPLATE = "The answer to this part is: {{ answer }}. Let's move on."

_jinja = Environment(undefined=StrictUndefined, autoescape=False, keep_trailing_newline=False)


class Signature(NamedTuple):
    evaluation: EvalCode
    action: int
    substate: SubproblemState


class Context(BaseModel):
    """Conversation history the tutor's turn-t reply conditions on."""

    model_config = ConfigDict(frozen=True)

    question: str
    student_utterances: Tuple[str, ...]
    tutor_annotations: Tuple[TutorAnnotation, ...]

    @model_validator(mode="after")
    def _one_more_student_turn(self):
        if len(self.student_utterances) != len(self.tutor_annotations) + 1:
            raise ValueError("context needs exactly one more student utterance than tutor turns")
        return self

    @property
    def turn(self):
        return len(self.student_utterances)

    @property
    def last_student_utterance(self):
        return self.student_utterances[-1]

    @property
    def last_tutor_action(self):
        if not self.tutor_annotations:
            return None
        return self.tutor_annotations[-1].action


class PreferencePair(BaseModel):
    model_config = ConfigDict(frozen=True)

    context: Context
    chosen: TutorAnnotation
    rejected: TutorAnnotation
    source_conversation: str
    turn: int

    @model_validator(mode="after")
    def _signatures_differ(self):
        if pedagogical_signature(self.chosen) == pedagogical_signature(self.rejected):
            raise ValueError("chosen and rejected share a signature")
        return self


class ProbeKind(str, Enum):
    A1_VS_A2 = "A1vsA2"
    A4_VS_A5 = "A4vsA5"


_PROBE_KIND_BY_ACTION = {1: ProbeKind.A1_VS_A2, 4: ProbeKind.A4_VS_A5}


class PerplexityProbe(BaseModel):
    model_config = ConfigDict(frozen=True)

    context: Context
    aligned: TutorAnnotation
    misaligned: TutorAnnotation
    probe_kind: ProbeKind
    source_conversation: str
    turn: int

    @model_validator(mode="after")
    def _misaligned_is_next_action(self):
        if self.aligned.action not in _PROBE_KIND_BY_ACTION:
            raise ValueError("aligned action must be 1 or 4")
        if self.misaligned.action != self.aligned.action + 1:
            raise ValueError("misaligned action must be aligned action + 1")
        if _PROBE_KIND_BY_ACTION[self.aligned.action] is not self.probe_kind:
            raise ValueError("probe kind does not match aligned action")
        return self


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    n_sft: int
    n_lhp: int
    n_test: int

    @property
    def total(self):
        return self.n_sft + self.n_lhp + self.n_test


def build_context(conv: Conversation, t: int):
    """
    History for the tutor's reply at turn t (1-based).

    Contains the question, student utterances 1..t and tutor turns 1..t-1.
    """
    n_turns = len(conv.turns)
    if not 1 <= t <= n_turns:
        raise TurnOutOfRange(t, n_turns)
    turns = conv.turns[:t]
    return Context(
        question=conv.question,
        student_utterances=tuple(turn.student_utterance for turn in turns),
        tutor_annotations=tuple(turn.tutor for turn in turns[:-1]),
    )


def pedagogical_signature(ann: TutorAnnotation):
    """The three fields that decide chosen vs rejected; text is ignored."""
    return Signature(ann.evaluation, ann.action, ann.substate)


def _check_aligned(tutor_conv, sft_conv):
    if len(tutor_conv.turns) != len(sft_conv.turns):
        raise MisalignedStreams(
            f"{tutor_conv.id}: {len(tutor_conv.turns)} tutor turns vs {len(sft_conv.turns)} SFT turns")
    if tutor_conv.question != sft_conv.question:
        raise MisalignedStreams(f"{tutor_conv.id}: questions differ")
    for a, b in zip(tutor_conv.turns, sft_conv.turns):
        if a.student_utterance != b.student_utterance:
            raise MisalignedStreams(f"{tutor_conv.id}: student utterance differs at turn {a.index}")


def build_preference_pairs(tutor_stream, sft_stream):
    """
    Build the preference dataset from two tutor streams over the same conversations.

    Args:
        tutor_stream: Conversations answered by the reference tutor (chosen side)
        sft_stream: The same conversations answered by the SFT tutor (rejected side)

    Returns:
        List of PreferencePair ordered by (conversation id, turn)

    Raises:
        MisalignedStreams: ids, turn counts, questions or student turns disagree
    """
    sft_by_id = {conv.id: conv for conv in sft_stream}
    tutor_ids = {conv.id for conv in tutor_stream}
    if len(sft_by_id) != len(sft_stream) or len(tutor_ids) != len(tutor_stream):
        raise MisalignedStreams("duplicate conversation ids")
    if tutor_ids != set(sft_by_id):
        missing = sorted(tutor_ids ^ set(sft_by_id))
        raise MisalignedStreams(f"conversation ids differ between streams: {missing[:5]}")

    pairs = []
    for tutor_conv in sorted(tutor_stream, key=lambda c: c.id):
        sft_conv = sft_by_id[tutor_conv.id]
        _check_aligned(tutor_conv, sft_conv)
        for tutor_turn, sft_turn in zip(tutor_conv.turns, sft_conv.turns):
            if pedagogical_signature(tutor_turn.tutor) == pedagogical_signature(sft_turn.tutor):
                continue
            pairs.append(PreferencePair(
                context=build_context(tutor_conv, tutor_turn.index),
                chosen=tutor_turn.tutor,
                rejected=sft_turn.tutor,
                source_conversation=tutor_conv.id,
                turn=tutor_turn.index,
            ))
    logger.info(f"Built {len(pairs)} preference pairs from {len(tutor_stream)} conversations")
    return pairs


def render_misaligned_utterance(answer, template=DEFAULT_MISALIGNED_TEMPLATE):
    """Direct-solution reply stating the answer outright."""
    return _jinja.from_string(template).render(answer=answer)


def build_misaligned_probes(conv: Conversation, solution_bank, template=DEFAULT_MISALIGNED_TEMPLATE):
    """
    Probes for the first action-1 turn and the first action-4 turn of a conversation.

    The misaligned side keeps the aligned turn's evaluation, state and
    subproblem, takes action + 1 and states the subproblem's answer.

    Raises:
        MissingSolution: the bank has no answer for a probed subproblem
    """
    probes = []
    for wanted in (1, 4):
        turn = next((t for t in conv.turns if t.tutor.action == wanted), None)
        if turn is None:
            continue
        aligned = turn.tutor
        if aligned.subproblem not in solution_bank:
            raise MissingSolution(aligned.subproblem)
        misaligned = aligned.with_changes(
            action=wanted + 1,
            utterance=render_misaligned_utterance(solution_bank[aligned.subproblem], template))
        probes.append(PerplexityProbe(
            context=build_context(conv, turn.index),
            aligned=aligned,
            misaligned=misaligned,
            probe_kind=_PROBE_KIND_BY_ACTION[wanted],
            source_conversation=conv.id,
            turn=turn.index,
        ))
    return sorted(probes, key=lambda p: p.turn)


def split_dataset(convs, spec: SplitSpec):
    """
    Shuffle under spec.seed and cut into SFT, LHP and test partitions.

    Conversations are ordered by id before shuffling so the result does not
    depend on input order. Leftovers are discarded.

    Returns:
        Tuple of (sft, lhp, test) lists

    Raises:
        InsufficientCorpus: fewer conversations than the split needs
        SchemaError: two conversations share an id
    """
    if min(spec.n_sft, spec.n_lhp, spec.n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if spec.total > len(convs):
        raise InsufficientCorpus(spec.total, len(convs))
    duplicates = sorted(conv_id for conv_id, count in Counter(c.id for c in convs).items() if count > 1)
    if duplicates:
        raise SchemaError(f"duplicate conversation ids: {', '.join(duplicates[:5])}")

    ordered = sorted(convs, key=lambda c: c.id)
    order = np.random.default_rng(spec.seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in order]

    sft = shuffled[:spec.n_sft]
    lhp = shuffled[spec.n_sft:spec.n_sft + spec.n_lhp]
    test = shuffled[spec.n_sft + spec.n_lhp:spec.total]
    discarded = len(convs) - spec.total
    logger.info(f"Split {len(convs)} conversations into {len(sft)}/{len(lhp)}/{len(test)}, {discarded} discarded")
    return sft, lhp, test


def _other_code(rng, codes, current):
    choices = [code for code in codes if code != current]
    return choices[int(rng.integers(len(choices)))]


def perturb_annotation(ann: TutorAnnotation, rng, flip_prob, solution_bank=None,
                       template=DEFAULT_MISALIGNED_TEMPLATE):
    """
    Noisy copy of a tutor turn: each signature field flips with probability flip_prob.

    Action flips move guidance actions to their direct counterpart (1->2, 4->5)
    and any other action to a different code. A flip to 2 or 5 restates the
    utterance as the direct answer when the bank knows the subproblem.
    """
    changes = {}
    if rng.random() < flip_prob:
        changes["evaluation"] = _other_code(rng, EVAL_CODES, ann.evaluation.value)
    if rng.random() < flip_prob:
        if ann.action in (1, 4):
            action = ann.action + 1
        else:
            action = _other_code(rng, ACTION_CODES, ann.action)
        changes["action"] = action
        if action in (2, 5) and solution_bank and ann.subproblem in solution_bank:
            changes["utterance"] = render_misaligned_utterance(solution_bank[ann.subproblem], template)
    if rng.random() < flip_prob:
        changes["substate"] = _other_code(rng, SUBSTATE_CODES, ann.substate.value)
    if not changes:
        return ann
    return ann.with_changes(**changes)


def perturb_stream(convs, flip_prob=0.3, seed=0, solution_bank=None, template=DEFAULT_MISALIGNED_TEMPLATE):
    """
    Stand-in SFT tutor: the same conversations with noisy tutor turns.

    Student turns are untouched, so the result aligns with the input stream.
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {flip_prob}")
    rng = np.random.default_rng(seed)
    noisy = []
    for conv in sorted(convs, key=lambda c: c.id):
        turns = tuple(
            ConversationTurn(index=turn.index, student_utterance=turn.student_utterance,
                             tutor=perturb_annotation(turn.tutor, rng, flip_prob, solution_bank, template))
            for turn in conv.turns)
        noisy.append(Conversation(id=conv.id, question=conv.question, turns=turns))
    return noisy


def load_solution_bank(file_path):
    """Read a JSON object mapping subproblem text to its answer text."""
    bank = read_json(file_path)
    if not isinstance(bank, dict) or not all(isinstance(v, str) for v in bank.values()):
        raise SchemaError(f"Solution bank {file_path} must map subproblem text to answer text")
    return bank


# --- records -----------------------------------------------------------------

def context_to_record(ctx: Context):
    return {
        "question": ctx.question,
        "students": list(ctx.student_utterances),
        "tutors": [annotation_to_record(ann) for ann in ctx.tutor_annotations],
    }


def context_from_record(record):
    try:
        return Context(
            question=record["question"],
            student_utterances=tuple(record["students"]),
            tutor_annotations=tuple(parse_turn_annotation(raw) for raw in record["tutors"]),
        )
    except (KeyError, TypeError, ValidationError) as e:
        raise SchemaError(f"Invalid context record: {e}") from None


def pair_to_record(pair: PreferencePair):
    return {
        "context": context_to_record(pair.context),
        "chosen": annotation_to_record(pair.chosen),
        "rejected": annotation_to_record(pair.rejected),
        "conv_id": pair.source_conversation,
        "turn": pair.turn,
    }


def pair_from_record(record):
    try:
        return PreferencePair(
            context=context_from_record(record["context"]),
            chosen=parse_turn_annotation(record["chosen"]),
            rejected=parse_turn_annotation(record["rejected"]),
            source_conversation=str(record["conv_id"]),
            turn=int(record["turn"]),
        )
    except (KeyError, TypeError, ValidationError) as e:
        raise SchemaError(f"Invalid preference pair record: {e}") from None


def probe_to_record(probe: PerplexityProbe):
    return {
        "context": context_to_record(probe.context),
        "aligned": annotation_to_record(probe.aligned),
        "misaligned": annotation_to_record(probe.misaligned),
        "probe_kind": probe.probe_kind.value,
        "conv_id": probe.source_conversation,
        "turn": probe.turn,
    }


def probe_from_record(record):
    try:
        return PerplexityProbe(
            context=context_from_record(record["context"]),
            aligned=parse_turn_annotation(record["aligned"]),
            misaligned=parse_turn_annotation(record["misaligned"]),
            probe_kind=ProbeKind(record["probe_kind"]),
            source_conversation=str(record["conv_id"]),
            turn=int(record["turn"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(f"Invalid probe record: {e}") from None
