# tests/support.py

"""
Shared builders and fixture paths for the test modules.
"""

import os
import sys

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from backend.schema import Conversation, ConversationTurn, TutorAnnotation
from utils.config import apply_overrides, load_config, merge_config

DATA_DIR = os.path.join(ROOT_DIR, "data")
FIXTURE_CONFIG = os.path.join(DATA_DIR, "app_config.json")
FIXTURE_CORPUS = os.path.join(DATA_DIR, "fixture_conversations.jsonl")
FIXTURE_SFT_STREAM = os.path.join(DATA_DIR, "fixture_sft_stream.jsonl")
FIXTURE_SOLUTIONS = os.path.join(DATA_DIR, "fixture_solutions.json")

# Counts of the bundled fixture
FIXTURE_CONVERSATIONS = 40
FIXTURE_TURNS = 199
FIXTURE_DIVERGENT_TURNS = 69
FIXTURE_PROBES = 52

UTTERANCES = {
    1: "Here is a hint: start by writing down what the question gives you.",
    2: "The answer to this part is: 6 dollars. Let's move on.",
    3: "Let's break the problem into smaller parts. What do we need to find first?",
    4: "Not quite. Check your calculation again step by step.",
    5: "The answer to this part is: 6 dollars. Let's move on.",
    6: "Well done, that part is correct. Let's look at the next part.",
    7: "Great work, you solved the whole problem.",
}


def make_annotation(action=3, evaluation="g", substate="x", subproblem="What is the cost of 3 apples?",
                    utterance=None):
    return TutorAnnotation.model_validate({
        "Evaluation of Student Response": evaluation,
        "Action Based on Evaluation": str(action),
        "Subproblem State": substate,
        "Subproblem": subproblem,
        "Tutorbot": utterance or UTTERANCES.get(action, "Let us keep going."),
    })


def make_conversation(conv_id, actions, question="Sam buys 3 apples. How much does Sam spend?",
                      subproblem="What is the cost of 3 apples?"):
    turns = tuple(
        ConversationTurn(index=i, student_utterance=f"Student message {i}.",
                         tutor=make_annotation(action, subproblem=subproblem))
        for i, action in enumerate(actions, 1))
    return Conversation(id=conv_id, question=question, turns=turns)


def fixture_config(out_dir, **sections):
    """The bundled fixture config writing into out_dir, with optional section updates."""
    config = load_config(FIXTURE_CONFIG)
    config = apply_overrides(config, out=out_dir)
    return merge_config(config, sections)
