"""Toy corpus handling: whitespace tokenizer, fixed-length packing, MLM masking."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .losses import IGNORE_INDEX

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def first_regular_id(self) -> int:
        return len(RESERVED)

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != self.pad_id)

    def to_json(self) -> str:
        return json.dumps(list(self.tokens), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(tuple(json.loads(text)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Reserved tokens, then corpus tokens by frequency (desc) then lexicographically."""
    if max_size < len(RESERVED) + 1:
        raise DataError(f"max_size {max_size} leaves no room after {len(RESERVED)} reserved tokens")
    counts = Counter(t for line in corpus for t in tokenize(line) if t not in RESERVED)
    if not counts:
        raise DataError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(RESERVED + tuple(t for t, _ in ranked[: max_size - len(RESERVED)]))


def pack_sequences(lines: Iterable[str], vocab: Vocabulary, seq_len: int) -> np.ndarray:
    """Concatenate all lines and cut into ``seq_len`` windows; the tail is padded."""
    ids = [i for line in lines for i in vocab.encode(line)]
    if not ids:
        raise DataError("empty corpus")
    n = -(-len(ids) // seq_len)
    out = np.full((n, seq_len), vocab.pad_id, dtype=np.int64)
    out.reshape(-1)[: len(ids)] = ids
    return out


@dataclass
class MLMBatch:
    token_ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray


def make_mlm_batch(sequences: np.ndarray, vocab: Vocabulary, mask_prob: float,
                   rng: np.random.Generator) -> MLMBatch:
    """BERT corruption: pick ~``mask_prob`` of real tokens, 80/10/10 mask/random/keep.

    Every sequence gets at least one selected position.
    """
    if not 0.0 < mask_prob < 1.0:
        raise DataError("mask_prob must be in (0, 1)")
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    pad = seqs != vocab.pad_id
    if not pad.any(axis=1).all():
        raise DataError("sequence consisting only of padding")
    select = (rng.random(seqs.shape) < mask_prob) & pad
    for b in np.nonzero(~select.any(axis=1))[0]:
        real = np.nonzero(pad[b])[0]
        select[b, real[rng.integers(real.size)]] = True
    labels = np.where(select, seqs, IGNORE_INDEX)
    action = rng.random(seqs.shape)
    corrupted = seqs.copy()
    corrupted[select & (action < 0.8)] = vocab.mask_id
    rand_pos = select & (action >= 0.8) & (action < 0.9)
    corrupted[rand_pos] = rng.integers(vocab.first_regular_id, len(vocab), size=int(rand_pos.sum()))
    return MLMBatch(corrupted, pad, labels)


@dataclass
class Corpus:
    """Packed train/held-out windows over a fixed vocabulary."""

    vocab: Vocabulary
    train: np.ndarray
    heldout: np.ndarray

    @classmethod
    def from_lines(cls, lines: list[str], vocab_size: int, seq_len: int,
                   heldout_fraction: float = 0.1) -> "Corpus":
        lines = [ln for ln in lines if ln.strip()]
        if not lines:
            raise DataError("empty corpus")
        vocab = build_vocab(lines, vocab_size)
        windows = pack_sequences(lines, vocab, seq_len)
        n_held = max(1, int(round(heldout_fraction * len(windows))))
        if len(windows) - n_held < 1:
            raise DataError("corpus too small for a train/held-out split")
        return cls(vocab, windows[:-n_held], windows[-n_held:])

    @classmethod
    def from_file(cls, path, vocab_size: int, seq_len: int, heldout_fraction: float = 0.1) -> "Corpus":
        p = Path(path)
        if not p.is_file():
            raise DataError(f"corpus file not found: {p}")
        return cls.from_lines(p.read_text(encoding="utf-8").splitlines(), vocab_size, seq_len, heldout_fraction)

    def batches(self, batch_size: int, mask_prob: float, seed: int) -> Iterator[MLMBatch]:
        """Endless shuffled training batches, deterministic in ``seed``."""
        rng = np.random.default_rng([seed, 17])
        n = len(self.train)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
                idx = order[start:start + batch_size]
                yield make_mlm_batch(self.train[idx], self.vocab, mask_prob, rng)

    def heldout_batches(self, batch_size: int, mask_prob: float, seed: int = 0) -> list[MLMBatch]:
        """Fixed corrupted held-out batches, identical across calls with the same seed."""
        rng = np.random.default_rng([seed, 29])
        return [make_mlm_batch(self.heldout[i:i + batch_size], self.vocab, mask_prob, rng)
                for i in range(0, len(self.heldout), batch_size)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_NOUNS = {
    "animal": ["cat", "dog", "bird", "fox", "horse", "rabbit", "mouse", "wolf", "bear", "owl"],
    "person": ["teacher", "farmer", "doctor", "child", "pilot", "baker", "student", "singer", "judge", "nurse"],
    "thing": ["book", "stone", "lamp", "box", "cup", "ball", "key", "coat", "map", "bell"],
    "place": ["garden", "forest", "river", "market", "school", "village", "valley", "harbor", "tower", "field"],
}
_ADJ = {
    "animal": ["small", "quick", "hungry", "wild", "sleepy"],
    "person": ["tall", "kind", "busy", "young", "quiet"],
    "thing": ["red", "heavy", "old", "round", "shiny"],
    "place": ["green", "dark", "busy", "quiet", "distant"],
}
_VERBS = {
    ("animal", "thing"): ["chases", "finds", "carries", "hides"],
    ("person", "thing"): ["buys", "reads", "holds", "paints"],
    ("person", "animal"): ["feeds", "watches", "follows", "calls"],
    ("animal", "animal"): ["chases", "watches", "follows", "hears"],
}
_PLACE_VERBS = {"animal": ["sleeps", "runs", "hunts"], "person": ["works", "walks", "waits"]}
_PLURAL = {"mouse": "mice", "wolf": "wolves", "child": "children", "box": "boxes", "harbor": "harbors"}


def _plural(noun: str) -> str:
    return _PLURAL.get(noun, noun + "s")


_VERB_PLURAL = {"chases": "chase", "carries": "carry", "hides": "hide", "watches": "watch"}


def _verb_plural(verb: str) -> str:
    return _VERB_PLURAL.get(verb, verb[:-1])


def synthetic_corpus(num_sentences: int = 4000, seed: int = 0) -> list[str]:
    """Sentences from a small typed grammar with number agreement.

    Subject/verb agreement and selectional restrictions give a masked LM
    something context-dependent to learn.
    """
    rng = np.random.default_rng(seed)
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    lines = []
    for _ in range(num_sentences):
        plural = rng.random() < 0.35
        if rng.random() < 0.7:
            subj_t, obj_t = pick(list(_VERBS))
            verb = pick(_VERBS[(subj_t, obj_t)])
            tail = ["the", pick(_ADJ[obj_t]), pick(_NOUNS[obj_t])] if rng.random() < 0.5 else ["the", pick(_NOUNS[obj_t])]
        else:
            subj_t = pick(["animal", "person"])
            verb = pick(_PLACE_VERBS[subj_t])
            tail = ["in", "the", pick(_NOUNS["place"])]
            if rng.random() < 0.4:
                tail[2:2] = [pick(_ADJ["place"])]
        noun = pick(_NOUNS[subj_t])
        det = pick(["the", "some", "two"]) if plural else pick(["the", "a", "one"])
        subj = [det] + ([pick(_ADJ[subj_t])] if rng.random() < 0.4 else []) + [_plural(noun) if plural else noun]
        v = _verb_plural(verb) if plural else verb
        lines.append(" ".join(subj + [v] + tail + ["."]))
    return lines
