# backend/policy.py

"""
A small trainable tutor policy with exact log-probabilities.

The policy factorizes an annotation into three classification heads indexed
by a hashed context bucket, plus a bigram model over the reply tokens that is
conditioned on the action group (guidance 1/4, direct 2/5, other).
"""

import hashlib
from collections import Counter

import numpy as np

from backend.errors import IoFailure, SchemaError
from backend.schema import (ACTION_CODES, EVAL_CODES, SUBSTATE_CODES, TutorAnnotation,
                            action_group)
from utils.io_json import read_json, write_json
from utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "pedalign-policy"
CHECKPOINT_VERSION = 1

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
RESERVED_TOKENS = (BOS, EOS, UNK)

ACTION_GROUPS = ("guidance", "direct", "other")
MAX_DECODE_TOKENS = 64

PARAM_NAMES = ("eval_head", "action_head", "substate_head", "token_model")


def tokenize(text):
    """Lowercase whitespace tokenization."""
    return text.lower().split()


def build_vocab(texts, min_freq=1):
    """
    Token -> index map. Reserved tokens come first, then corpus tokens sorted
    alphabetically so the map does not depend on text order.
    """
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    tokens = sorted(tok for tok, n in counts.items() if n >= min_freq and tok not in RESERVED_TOKENS)
    return {tok: i for i, tok in enumerate(RESERVED_TOKENS + tuple(tokens))}


def featurize_context(ctx, n_buckets, seed=0):
    """
    Bucket index for a context: hash of the last student utterance tokens and
    the last tutor action, modulo n_buckets.
    """
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    last_action = ctx.last_tutor_action
    key = f"{seed}|{' '.join(tokenize(ctx.last_student_utterance))}|{'-' if last_action is None else last_action}"
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % n_buckets


def log_softmax(row):
    shifted = row - np.max(row)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax(row):
    shifted = np.exp(row - np.max(row))
    return shifted / np.sum(shifted)


class ToyTutorPolicy:
    """
    Factorized tutor policy.

    Attributes:
        vocab: token -> index, reserved tokens first
        n_buckets: number of hashed context buckets
        hash_seed: salt for the context hash
        eval_head, action_head, substate_head: [n_buckets x n_codes] logits
        token_model: [3 action groups x vocab x vocab] bigram logits
    """

    def __init__(self, vocab, n_buckets=64, hash_seed=0, weights=None):
        for tok in RESERVED_TOKENS:
            if tok not in vocab:
                raise ValueError(f"vocab must contain {tok}")
        if n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        self.vocab = dict(vocab)
        self.inverse_vocab = {i: tok for tok, i in self.vocab.items()}
        self.n_buckets = int(n_buckets)
        self.hash_seed = int(hash_seed)
        v = len(self.vocab)
        shapes = {
            "eval_head": (self.n_buckets, len(EVAL_CODES)),
            "action_head": (self.n_buckets, len(ACTION_CODES)),
            "substate_head": (self.n_buckets, len(SUBSTATE_CODES)),
            "token_model": (len(ACTION_GROUPS), v, v),
        }
        weights = weights or {}
        for name in PARAM_NAMES:
            array = np.array(weights[name], dtype=np.float64) if name in weights else np.zeros(shapes[name])
            if array.shape != shapes[name]:
                raise ValueError(f"{name} has shape {array.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(array)):
                raise ValueError(f"{name} contains non-finite weights")
            setattr(self, name, array)

    # --- parameters ---------------------------------------------------------

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def zero_grads(self):
        return {name: np.zeros_like(getattr(self, name)) for name in PARAM_NAMES}

    def copy(self):
        return ToyTutorPolicy(self.vocab, self.n_buckets, self.hash_seed,
                              {name: getattr(self, name).copy() for name in PARAM_NAMES})

    # --- scoring ------------------------------------------------------------

    def bucket(self, ctx):
        return featurize_context(ctx, self.n_buckets, self.hash_seed)

    def token_ids(self, text):
        unk = self.vocab[UNK]
        return [self.vocab.get(tok, unk) for tok in tokenize(text)]

    def _transitions(self, utterance):
        ids = [self.vocab[BOS]] + self.token_ids(utterance) + [self.vocab[EOS]]
        return list(zip(ids[:-1], ids[1:]))

    def _code_indices(self, ann):
        return (EVAL_CODES.index(ann.evaluation.value),
                ACTION_CODES.index(ann.action),
                SUBSTATE_CODES.index(ann.substate.value))

    def classification_logprob(self, ctx, ann):
        b = self.bucket(ctx)
        i_eval, i_action, i_sub = self._code_indices(ann)
        return float(log_softmax(self.eval_head[b])[i_eval]
                     + log_softmax(self.action_head[b])[i_action]
                     + log_softmax(self.substate_head[b])[i_sub])

    def token_logprobs(self, ann):
        """Per-token log-probabilities of the reply, end-of-reply transition included."""
        g = ACTION_GROUPS.index(action_group(ann.action))
        return [float(log_softmax(self.token_model[g, prev])[nxt]) for prev, nxt in self._transitions(ann.utterance)]

    def annotation_logprob(self, ctx, ann):
        """log p(eval) + log p(action) + log p(substate) + sum of reply token log-probs."""
        return self.classification_logprob(ctx, ann) + float(np.sum(self.token_logprobs(ann)))

    def accumulate_logprob_grad(self, ctx, ann, weight, grads):
        """
        Add weight * d annotation_logprob / d params into grads.

        Returns:
            The annotation log-probability
        """
        b = self.bucket(ctx)
        total = 0.0
        for name, index in zip(("eval_head", "action_head", "substate_head"), self._code_indices(ann)):
            row = getattr(self, name)[b]
            probs = softmax(row)
            total += float(np.log(probs[index]))
            grads[name][b] -= weight * probs
            grads[name][b, index] += weight

        g = ACTION_GROUPS.index(action_group(ann.action))
        for prev, nxt in self._transitions(ann.utterance):
            logp = log_softmax(self.token_model[g, prev])
            total += float(logp[nxt])
            grads["token_model"][g, prev] -= weight * np.exp(logp)
            grads["token_model"][g, prev, nxt] += weight
        return total

    # --- decoding -----------------------------------------------------------

    def decode_utterance(self, action):
        """Greedy reply for an action's group, at most MAX_DECODE_TOKENS tokens."""
        g = ACTION_GROUPS.index(action_group(action))
        bos, eos = self.vocab[BOS], self.vocab[EOS]
        prev = bos
        tokens = []
        while len(tokens) < MAX_DECODE_TOKENS:
            row = self.token_model[g, prev].copy()
            row[bos] = -np.inf
            if not tokens:
                row[eos] = -np.inf
            nxt = int(np.argmax(row))
            if nxt == eos:
                break
            tokens.append(self.inverse_vocab[nxt])
            prev = nxt
        return " ".join(tokens)

    def annotate(self, ctx):
        """
        Predict a tutor turn: argmax per head (ties go to the lowest code) and a
        greedily decoded reply.
        """
        b = self.bucket(ctx)
        action = ACTION_CODES[int(np.argmax(self.action_head[b]))]
        subproblem = ctx.tutor_annotations[-1].subproblem if ctx.tutor_annotations else ctx.question
        return TutorAnnotation(
            evaluation=EVAL_CODES[int(np.argmax(self.eval_head[b]))],
            action=action,
            substate=SUBSTATE_CODES[int(np.argmax(self.substate_head[b]))],
            subproblem=subproblem,
            utterance=self.decode_utterance(action),
        )

    # --- checkpoints --------------------------------------------------------

    def to_record(self):
        record = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "n_buckets": self.n_buckets,
            "hash_seed": self.hash_seed,
            "vocab": [self.inverse_vocab[i] for i in range(len(self.vocab))],
        }
        for name in PARAM_NAMES:
            record[name] = getattr(self, name).tolist()
        return record

    @classmethod
    def from_record(cls, record):
        if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
            raise SchemaError("Not a policy checkpoint")
        if record.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(f"Unsupported checkpoint version: {record.get('version')}")
        try:
            vocab = {tok: i for i, tok in enumerate(record["vocab"])}
            weights = {name: record[name] for name in PARAM_NAMES}
            return cls(vocab, record["n_buckets"], record["hash_seed"], weights)
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"Invalid policy checkpoint: {e}") from None


def annotation_logprob(policy, ctx, ann):
    return policy.annotation_logprob(ctx, ann)


def annotate(policy, ctx):
    return policy.annotate(ctx)


def new_policy_for(texts, n_buckets=64, hash_seed=0, min_freq=1):
    """Uniform policy with a vocab built from the given texts."""
    return ToyTutorPolicy(build_vocab(texts, min_freq), n_buckets, hash_seed)


def corpus_texts(convs):
    """Every reply text of a corpus, for vocab building."""
    return [turn.tutor.utterance for conv in convs for turn in conv.turns]


def save_policy(policy, file_path):
    write_json(policy.to_record(), file_path, indent=None)
    logger.info(f"Saved policy checkpoint to {file_path}")


def load_policy(file_path):
    record = read_json(file_path)
    try:
        policy = ToyTutorPolicy.from_record(record)
    except SchemaError as e:
        raise IoFailure(f"{file_path}: {e}") from e
    logger.info(f"Loaded policy checkpoint from {file_path}")
    return policy
