"""Dialogue data model, keyword label derivation, synthetic corpus and batching.

A sample is a multi-turn context plus the user's own self-contained rewrite of
the final turn.  Context turns are flattened into one token sequence joined by
``<SEP>``; every flattened token gets a category label:

* ``K`` (key word): the token reappears in the rewrite,
* ``E`` (separator): the token is ``<SEP>``,
* ``N`` (normal): anything else.

Matching is exact, case-sensitive surface match on whitespace tokens.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

PAD, UNK, SOS, EOS, SEP = "<PAD>", "<UNK>", "<SOS>", "<EOS>", "<SEP>"
RESERVED_TOKENS = (PAD, UNK, SOS, EOS, SEP)
PAD_ID, UNK_ID, SOS_ID, EOS_ID, SEP_ID = range(5)


class CategoryLabel(IntEnum):
    """Token categories. START exists only for CRF transition bookkeeping and
    never appears in a label sequence handed to callers."""

    K = 0
    E = 1
    N = 2
    START = 3


EMITTABLE_LABELS = (CategoryLabel.K, CategoryLabel.E, CategoryLabel.N)


@dataclass
class DialogueSample:
    """Context turns plus the target rewrite, all pre-tokenized."""

    context_turns: list[list[str]]
    target: list[str]

    def __post_init__(self):
        if len(self.context_turns) < 1:
            raise ValueError("sample needs at least one context turn")
        for turn in self.context_turns:
            if not turn:
                raise ValueError("empty context turn")
            if SEP in turn:
                raise ValueError(f"context turn contains reserved token {SEP}")
        if not self.target:
            raise ValueError("empty target")
        if SEP in self.target:
            raise ValueError(f"target contains reserved token {SEP}")


@dataclass
class LabeledSample:
    """Flattened, id-encoded sample ready for batching."""

    input_ids: list[int]
    labels: list[CategoryLabel]
    target_ids: list[int]

    def __post_init__(self):
        if len(self.labels) != len(self.input_ids):
            raise ValueError("labels and input_ids must have equal length")
        for tid, lab in zip(self.input_ids, self.labels):
            if (lab == CategoryLabel.E) != (tid == SEP_ID):
                raise ValueError("label E must coincide exactly with <SEP> positions")
            if tid in (PAD_ID, SOS_ID, EOS_ID):
                raise ValueError("input_ids must not contain <PAD>/<SOS>/<EOS>")
        if not self.target_ids or self.target_ids[-1] != EOS_ID:
            raise ValueError("target_ids must end with <EOS>")


class Vocab:
    """Bidirectional token <-> id map with fixed reserved ids 0..4."""

    def __init__(self, tokens: list[str]):
        """`tokens` is the full id-ordered token list, reserved entries first."""
        if list(tokens[:5]) != list(RESERVED_TOKENS):
            raise ValueError("vocab must start with the reserved tokens in fixed order")
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._id_to_token == other._id_to_token

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise IndexError(f"token id {idx} out of range")
        return self._id_to_token[idx]

    def tokens(self) -> list[str]:
        return list(self._id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.token_of(i) for i in ids]


def build_vocab(samples: list[DialogueSample], min_count: int = 1) -> Vocab:
    """Frequency-filtered vocab over all context and target tokens.

    Ids are deterministic: reserved first, then tokens by descending corpus
    frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not samples:
        raise ValueError("empty corpus")
    counts: Counter[str] = Counter()
    for s in samples:
        for turn in s.context_turns:
            counts.update(turn)
        counts.update(s.target)
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED_TOKENS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED_TOKENS) + kept)


def flatten_tokens(sample: DialogueSample) -> list[str]:
    """Context turns joined by a single <SEP> token."""
    out: list[str] = []
    for i, turn in enumerate(sample.context_turns):
        if i:
            out.append(SEP)
        out.extend(turn)
    return out


def derive_labels(sample: DialogueSample) -> list[CategoryLabel]:
    """Per-token category for the flattened input.

    E for <SEP>, K when the surface token occurs anywhere in the target,
    N otherwise.  Total on valid samples.
    """
    target_set = set(sample.target)
    labels = []
    for tok in flatten_tokens(sample):
        if tok == SEP:
            labels.append(CategoryLabel.E)
        elif tok in target_set:
            labels.append(CategoryLabel.K)
        else:
            labels.append(CategoryLabel.N)
    return labels


def flatten(sample: DialogueSample, vocab: Vocab) -> LabeledSample:
    """Encode a sample: flattened input ids, derived labels, target ids + <EOS>."""
    return LabeledSample(
        input_ids=vocab.encode(flatten_tokens(sample)),
        labels=derive_labels(sample),
        target_ids=vocab.encode(sample.target) + [EOS_ID],
    )


# --- synthetic corpus ---------------------------------------------------------

ENTITIES = [
    ["iphone"], ["laptop"], ["camera"], ["printer"], ["monitor"], ["keyboard"],
    ["router"], ["tablet"], ["speaker"], ["drone"], ["projector"], ["headphones"],
    ["microwave"], ["dishwasher"], ["doorbell"], ["smart", "watch"],
    ["air", "fryer"], ["coffee", "maker"], ["vacuum", "cleaner"],
    ["game", "console"], ["power", "bank"], ["desk", "lamp"],
    ["electric", "kettle"], ["washing", "machine"],
]

ATTRIBUTES = [
    "price", "weight", "size", "color", "battery", "warranty",
    "brand", "rating", "capacity", "voltage",
]

FIRST_TURN_TEMPLATES = [
    ("what", "is", "the", "{attr}", "of", "{entity}"),
    ("tell", "me", "the", "{attr}", "of", "the", "{entity}"),
    ("how", "much", "is", "the", "{attr}", "of", "{entity}"),
]

FOLLOWUP_TEMPLATES = [
    ("what", "about", "the", "{attr}"),
    ("what", "about", "{attr}"),
    ("and", "its", "{attr}"),
    ("how", "about", "the", "{attr}"),
    ("and", "the", "{attr}"),
    ("tell", "me", "its", "{attr}"),
]

TARGET_TEMPLATE = ("what", "is", "the", "{attr}", "of", "{entity}")


def _fill(template, attr: str, entity: list[str]) -> list[str]:
    out: list[str] = []
    for tok in template:
        if tok == "{attr}":
            out.append(attr)
        elif tok == "{entity}":
            out.extend(entity)
        else:
            out.append(tok)
    return out


def generate_synthetic_corpus(seed: int, count: int) -> list[DialogueSample]:
    """Entity/attribute dialogues with ellipsis and coreference.

    Turn 1 asks about one attribute of an entity; one or two elliptical
    follow-ups switch attributes without naming the entity; the target is the
    fully spelled-out final question.  Deterministic in `seed`.  Every sample
    yields at least one K and one N label under `derive_labels`.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = random.Random(seed)
    samples = []
    for _ in range(count):
        entity = rng.choice(ENTITIES)
        n_follow = 2 if rng.random() < 0.25 else 1
        attrs = rng.sample(ATTRIBUTES, k=1 + n_follow)
        turns = [_fill(rng.choice(FIRST_TURN_TEMPLATES), attrs[0], entity)]
        for a in attrs[1:]:
            turns.append(_fill(rng.choice(FOLLOWUP_TEMPLATES), a, entity))
        target = _fill(TARGET_TEMPLATE, attrs[-1], entity)
        samples.append(DialogueSample(context_turns=turns, target=target))
    return samples


# --- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Padded id matrices plus true lengths; masks derive from lengths alone."""

    input_ids: np.ndarray  # (B, S) int64, <PAD>-padded
    src_lengths: np.ndarray  # (B,)
    labels: np.ndarray  # (B, S) int64, N-padded; positions >= length are masked
    target_ids: np.ndarray  # (B, T) int64, <PAD>-padded
    tgt_lengths: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    def src_mask(self) -> np.ndarray:
        """(B, S) bool, True at real input positions."""
        return np.arange(self.input_ids.shape[1])[None, :] < self.src_lengths[:, None]

    def tgt_mask(self) -> np.ndarray:
        return np.arange(self.target_ids.shape[1])[None, :] < self.tgt_lengths[:, None]


def _pad_batch(samples: list[LabeledSample]) -> Batch:
    src_lens = np.array([len(s.input_ids) for s in samples], dtype=np.int64)
    tgt_lens = np.array([len(s.target_ids) for s in samples], dtype=np.int64)
    bsz, smax, tmax = len(samples), int(src_lens.max()), int(tgt_lens.max())
    inp = np.full((bsz, smax), PAD_ID, dtype=np.int64)
    lab = np.full((bsz, smax), int(CategoryLabel.N), dtype=np.int64)
    tgt = np.full((bsz, tmax), PAD_ID, dtype=np.int64)
    for i, s in enumerate(samples):
        inp[i, : src_lens[i]] = s.input_ids
        lab[i, : src_lens[i]] = [int(l) for l in s.labels]
        tgt[i, : tgt_lens[i]] = s.target_ids
    return Batch(inp, src_lens, lab, tgt, tgt_lens)


def make_batches(
    samples: list[LabeledSample], batch_size: int, shuffle_seed: int | None = None
) -> list[Batch]:
    """Partition samples into <=batch_size batches; optional deterministic shuffle."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(samples)
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)
    return [
        _pad_batch(order[i : i + batch_size]) for i in range(0, len(order), batch_size)
    ]


# --- dataset file format --------------------------------------------------------
#
# One sample per line, two TAB-separated fields: context turns joined by
# " <SEP> " (tokens space-separated), then the target tokens.  Lines starting
# with '#' are comments; blank lines are skipped.

TURN_JOINER = f" {SEP} "


def _parse_turns(text: str, where: str) -> list[list[str]]:
    turns = []
    for part in text.split(TURN_JOINER):
        tokens = part.split()
        if not tokens:
            raise ValueError(f"{where}: empty turn")
        turns.append(tokens)
    return turns


def parse_context_line(line: str) -> list[list[str]]:
    """Parse the context field syntax (used by batch rewriting input)."""
    field1 = line.split("\t")[0]
    return _parse_turns(field1, "context")


def format_sample(sample: DialogueSample) -> str:
    context = TURN_JOINER.join(" ".join(turn) for turn in sample.context_turns)
    return f"{context}\t{' '.join(sample.target)}"


def save_dataset(samples: list[DialogueSample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(format_sample(s) + "\n")


def load_dataset(path) -> list[DialogueSample]:
    """Parse a dataset file; malformed lines raise with their line number."""
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(
                    f"{path}: line {lineno}: expected 2 TAB-separated fields, got {len(fields)}"
                )
            try:
                turns = _parse_turns(fields[0], "context")
                target = fields[1].split()
                sample = DialogueSample(context_turns=turns, target=target)
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from e
            samples.append(sample)
    return samples
