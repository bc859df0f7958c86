# backend/schema.py

"""
Structured tutor-conversation format: parsing, serialization and the
pedagogical ordering checks.

Tutor turns carry five fields. Input accepts the long field names and the
short "Eval"/"Action Based on Eval" spellings; output always uses the long
names.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, List, Tuple

from pydantic import (AliasChoices, BaseModel, ConfigDict, Field, ValidationError,
                      field_serializer, field_validator, model_validator)
from pydantic_core import PydanticCustomError

from backend.errors import (MalformedRecord, MissingField, NonObjectInput, SchemaError,
                            UnknownCode)
from utils.io_json import read_jsonl
from utils.logger import get_logger

logger = get_logger(__name__)

EVAL_FIELD = "Evaluation of Student Response"
ACTION_FIELD = "Action Based on Evaluation"
SUBSTATE_FIELD = "Subproblem State"
SUBPROBLEM_FIELD = "Subproblem"
UTTERANCE_FIELD = "Tutorbot"

TUTOR_FIELDS = (EVAL_FIELD, ACTION_FIELD, SUBSTATE_FIELD, SUBPROBLEM_FIELD, UTTERANCE_FIELD)

# Every accepted spelling -> long name, used to report errors
_FIELD_NAMES = {
    "evaluation": EVAL_FIELD,
    EVAL_FIELD: EVAL_FIELD,
    "Eval of Student Response": EVAL_FIELD,
    "action": ACTION_FIELD,
    ACTION_FIELD: ACTION_FIELD,
    "Action Based on Eval": ACTION_FIELD,
    "substate": SUBSTATE_FIELD,
    SUBSTATE_FIELD: SUBSTATE_FIELD,
    "subproblem": SUBPROBLEM_FIELD,
    SUBPROBLEM_FIELD: SUBPROBLEM_FIELD,
    "utterance": UTTERANCE_FIELD,
    UTTERANCE_FIELD: UTTERANCE_FIELD,
}

MIN_ACTION = 1
MAX_ACTION = 12


class EvalCode(str, Enum):
    """Evaluation of the student's response."""
    INCORRECT = "a"
    CORRECT = "b"
    PARTIALLY_CORRECT = "c"
    AMBIGUOUS = "d"
    OFF_TOPIC = "e"
    INQUIRY = "f"
    NOT_APPLICABLE = "g"


class SubproblemState(str, Enum):
    W = "w"
    SOLVING = "x"
    FINISHED_MOVING_ON = "y"
    Z = "z"


ActionCode = Annotated[int, Field(ge=MIN_ACTION, le=MAX_ACTION)]

EVAL_CODES = tuple(code.value for code in EvalCode)
ACTION_CODES = tuple(range(MIN_ACTION, MAX_ACTION + 1))
SUBSTATE_CODES = tuple(code.value for code in SubproblemState)

GUIDANCE_ACTIONS = frozenset({1, 4})
DIRECT_ACTIONS = frozenset({2, 5})


def canonical_letter(value):
    if isinstance(value, str):
        return value.strip().lower()
    return value


class TutorAnnotation(BaseModel):
    """One tutor turn: the three classification fields, the subproblem and the reply."""

    model_config = ConfigDict(frozen=True, extra='ignore')

    evaluation: EvalCode = Field(
        validation_alias=AliasChoices(EVAL_FIELD, "Eval of Student Response", "evaluation"),
        serialization_alias=EVAL_FIELD)
    action: ActionCode = Field(
        validation_alias=AliasChoices(ACTION_FIELD, "Action Based on Eval", "action"),
        serialization_alias=ACTION_FIELD)
    substate: SubproblemState = Field(
        validation_alias=AliasChoices(SUBSTATE_FIELD, "substate"),
        serialization_alias=SUBSTATE_FIELD)
    subproblem: str = Field(
        validation_alias=AliasChoices(SUBPROBLEM_FIELD, "subproblem"),
        serialization_alias=SUBPROBLEM_FIELD)
    utterance: str = Field(
        min_length=1,
        validation_alias=AliasChoices(UTTERANCE_FIELD, "utterance"),
        serialization_alias=UTTERANCE_FIELD)

    @field_validator("evaluation", "substate", mode="before")
    @classmethod
    def _lower_codes(cls, value):
        return canonical_letter(value)

    @field_validator("utterance")
    @classmethod
    def _non_blank_utterance(cls, value):
        if not value.strip():
            raise PydanticCustomError("blank_text", "reply has no text")
        return value

    @field_validator("action", mode="before")
    @classmethod
    def _numeric_action(cls, value):
        if isinstance(value, bool):
            raise ValueError("boolean is not an action code")
        if isinstance(value, str):
            return value.strip()
        return value

    @field_serializer("evaluation", "substate")
    def _emit_letter(self, value):
        return value.value

    @field_serializer("action")
    def _emit_action(self, value):
        return str(value)

    @property
    def action_group(self):
        """'guidance' for actions 1/4, 'direct' for 2/5, 'other' otherwise."""
        return action_group(self.action)

    def with_changes(self, **changes):
        """Copy with some fields replaced (validated)."""
        data = self.model_dump()
        data.update(changes)
        return TutorAnnotation.model_validate(data)


def action_group(action):
    if action in GUIDANCE_ACTIONS:
        return "guidance"
    if action in DIRECT_ACTIONS:
        return "direct"
    return "other"


class ConversationTurn(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=1)
    student_utterance: str
    tutor: TutorAnnotation


class Conversation(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    question: str
    turns: Tuple[ConversationTurn, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def _consecutive_turns(self):
        for position, turn in enumerate(self.turns, 1):
            if turn.index != position:
                raise ValueError(f"turn indices must run 1..n, got {turn.index} at position {position}")
        return self

    @property
    def actions(self):
        return [turn.tutor.action for turn in self.turns]


@dataclass(frozen=True)
class Violation:
    turn: int
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    conversation_id: str
    violations: Tuple[Violation, ...] = ()

    @property
    def is_valid(self):
        return not self.violations


@dataclass
class ParseStats:
    total: int = 0
    parsed: int = 0
    skipped: int = 0
    errors: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class DatasetStats:
    n_conversations: int
    n_qa_pairs: int
    mean_rounds: float
    mean_words: float

    def to_record(self):
        return {
            "conversations": self.n_conversations,
            "qa_pairs": self.n_qa_pairs,
            "mean_rounds": self.mean_rounds,
            "mean_words": self.mean_words,
        }


def _schema_error_from(exc: ValidationError):
    """Translate the first pydantic error into MissingField / UnknownCode."""
    err = exc.errors()[0]
    loc = err["loc"][0] if err["loc"] else ""
    name = _FIELD_NAMES.get(loc, str(loc))
    if err["type"] in ("missing", "string_too_short", "blank_text"):
        return MissingField(name)
    if name in (EVAL_FIELD, ACTION_FIELD, SUBSTATE_FIELD):
        return UnknownCode(name, err.get("input"))
    return SchemaError(f"{name}: {err['msg']}")


def parse_turn_annotation(raw):
    """
    Parse one tutor turn from a key/value object.

    Args:
        raw: Mapping in long-name or short-name form

    Returns:
        TutorAnnotation with canonical codes

    Raises:
        NonObjectInput, MissingField, UnknownCode
    """
    if not isinstance(raw, Mapping):
        raise NonObjectInput(raw)
    try:
        return TutorAnnotation.model_validate(dict(raw))
    except ValidationError as e:
        raise _schema_error_from(e) from None


def annotation_to_record(ann: TutorAnnotation):
    """Serialize an annotation with the long field names, all values as strings."""
    return ann.model_dump(by_alias=True)


def parse_conversation_record(obj):
    """Build a Conversation from one decoded line of a conversation file."""
    if not isinstance(obj, Mapping):
        raise NonObjectInput(obj)
    for key in ("id", "question", "turns"):
        if key not in obj:
            raise MissingField(key)
    for key in ("id", "question"):
        if not isinstance(obj[key], str):
            raise SchemaError(f"{key} must be text")
    raw_turns = obj["turns"]
    if not isinstance(raw_turns, list) or not raw_turns:
        raise SchemaError("turns must be a non-empty list")

    turns = []
    for position, raw_turn in enumerate(raw_turns, 1):
        if not isinstance(raw_turn, Mapping):
            raise NonObjectInput(raw_turn)
        if "student" not in raw_turn:
            raise MissingField("student")
        if "tutor" not in raw_turn:
            raise MissingField("tutor")
        student = raw_turn["student"]
        if not isinstance(student, str):
            raise SchemaError(f"turn {position}: student must be text")
        turns.append(ConversationTurn(index=position, student_utterance=student,
                                      tutor=parse_turn_annotation(raw_turn["tutor"])))
    try:
        return Conversation(id=obj["id"], question=obj["question"], turns=tuple(turns))
    except ValidationError as e:
        raise SchemaError(str(e)) from None


def conversation_to_record(conv: Conversation):
    return {
        "id": conv.id,
        "question": conv.question,
        "turns": [{"student": turn.student_utterance, "tutor": annotation_to_record(turn.tutor)}
                  for turn in conv.turns],
    }


def parse_conversation_stream(rows, strict=True):
    """
    Parse decoded conversation lines.

    Args:
        rows: Iterable of (line number, decoded object or None, decode error or None),
              as produced by utils.io_json.read_jsonl
        strict: Abort on the first malformed line instead of counting and skipping it

    Returns:
        Tuple of (list of Conversation in input order, ParseStats)
    """
    conversations = []
    stats = ParseStats()
    for line_no, obj, decode_error in rows:
        stats.total += 1
        try:
            if decode_error:
                raise MalformedRecord(line_no, decode_error)
            conversations.append(parse_conversation_record(obj))
            stats.parsed += 1
        except SchemaError as e:
            if strict:
                if isinstance(e, MalformedRecord):
                    raise
                raise MalformedRecord(line_no, str(e)) from e
            stats.skipped += 1
            stats.errors.append(f"line {line_no}: {e}")
            logger.warning(f"Skipping line {line_no}: {e}")
    return conversations, stats


def read_conversations(file_path, strict=True):
    """Read a conversation file (one conversation per line)."""
    conversations, stats = parse_conversation_stream(read_jsonl(file_path), strict=strict)
    logger.info(f"Parsed {stats.parsed} conversations from {file_path} ({stats.skipped} skipped)")
    return conversations, stats


def validate_action_ordering(conv: Conversation):
    """
    Check that a direct-solution action never comes before its guidance action.

    Action 2 needs an earlier action 1; action 5 needs an earlier action 4.
    """
    violations = []
    seen = set()
    for turn in conv.turns:
        action = turn.tutor.action
        if action == 2 and 1 not in seen:
            violations.append(Violation(turn.index, "action2-before-action1",
                                        "Action 2 (give solution) with no earlier Action 1 (hint)"))
        elif action == 5 and 4 not in seen:
            violations.append(Violation(turn.index, "action5-before-action4",
                                        "Action 5 (give solution) with no earlier Action 4 (hint)"))
        seen.add(action)
    return ValidationReport(conv.id, tuple(violations))


def count_words(text):
    return len(text.split())


def dataset_stats(convs):
    """
    Corpus statistics: conversations, QA pairs (one per turn), mean rounds and words.

    Words cover the question, student utterances and tutor replies.
    """
    n_convs = len(convs)
    if n_convs == 0:
        return DatasetStats(0, 0, 0.0, 0.0)
    n_turns = sum(len(conv.turns) for conv in convs)
    n_words = 0
    for conv in convs:
        n_words += count_words(conv.question)
        for turn in conv.turns:
            n_words += count_words(turn.student_utterance) + count_words(turn.tutor.utterance)
    return DatasetStats(n_convs, n_turns, n_turns / n_convs, n_words / n_convs)
