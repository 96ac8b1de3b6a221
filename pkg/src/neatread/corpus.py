"""Corpus ingestion: vocabulary, windowing, embeddings and cloze QA records."""

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

OOV = "<oov>"
SKIPPED = "<skip>"
BOS = "<s>"
EOS = "</s>"
RESERVED = (OOV, SKIPPED, BOS, EOS)

ENTITY_PREFIX = "@entity"
PLACEHOLDER = "@placeholder"
CLIP_LENGTH = 500
DEFAULT_WINDOW = 50


class EmptyCorpusError(ValueError):
    pass


class MalformedRecordError(ValueError):
    def __init__(self, index, message):
        super().__init__(f"record {index}: {message}")
        self.index = index


class Vocabulary:
    """Token/id map keeping the ``capacity`` most frequent tokens.

    Reserved symbols occupy the first ids.  By default they do not count
    against ``capacity``; pass ``reserved_in_capacity=True`` to make them.
    Ties at the cut-off go to the token seen first in the stream.
    """

    def __init__(self, tokens, counts, capacity, total, reserved=RESERVED):
        self.capacity = capacity
        self.token_of = list(reserved) + list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.token_of)}
        self.counts = dict(counts)
        self.total = total
        self.reserved = tuple(reserved)

    @property
    def oov_id(self):
        return self.id_of[OOV]

    @property
    def skip_id(self):
        return self.id_of[SKIPPED]

    @property
    def bos_id(self):
        return self.id_of[BOS]

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token):
        return token in self.id_of

    def lookup(self, token):
        return self.id_of.get(token, self.oov_id)

    def encode(self, tokens):
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)

    def decode(self, ids):
        return [self.token_of[int(i)] for i in ids]

    def count(self, token):
        """Corpus count; unseen and excluded tokens share the OOV mass."""
        if token in self.counts and token not in self.reserved:
            return self.counts[token]
        return self.counts.get(OOV, 0)

    def log_frequency(self, token):
        c = self.count(token)
        return math.log(c / self.total) if c > 0 else float("-inf")

    def to_json(self):
        return {"capacity": self.capacity, "total": self.total,
                "reserved": list(self.reserved),
                "tokens": self.token_of[len(self.reserved):],
                "counts": self.counts}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["tokens"], doc["counts"], doc["capacity"], doc["total"],
                   reserved=tuple(doc["reserved"]))


def build_vocab(tokens, capacity, reserved_in_capacity=False):
    if capacity < 1:
        raise ValueError("vocabulary capacity must be at least 1")
    counts = Counter()
    first_seen = {}
    for pos, tok in enumerate(tokens):
        counts[tok] += 1
        first_seen.setdefault(tok, pos)
    if not counts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty stream")
    ranked = sorted((t for t in counts if t not in RESERVED),
                    key=lambda t: (-counts[t], first_seen[t]))
    keep = capacity - len(RESERVED) if reserved_in_capacity else capacity
    kept = ranked[:max(keep, 0)]
    kept_set = set(kept)
    stored = {t: counts[t] for t in kept}
    stored[OOV] = sum(c for t, c in counts.items() if t not in kept_set)
    return Vocabulary(kept, stored, capacity, sum(counts.values()))


@dataclass
class TokenWindow:
    ids: np.ndarray
    offsets: list

    def __len__(self):
        return len(self.ids)


def window_split(doc_ids, width=DEFAULT_WINDOW, doc=0):
    """Non-overlapping windows of exactly ``width`` tokens; the remainder is dropped."""
    if width < 2:
        raise ValueError("window width must be at least 2")
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    windows = []
    for start in range(0, len(doc_ids) - width + 1, width):
        windows.append(TokenWindow(doc_ids[start:start + width].copy(),
                                   [(doc, start + k) for k in range(width)]))
    return windows


def read_text_corpus(path):
    """Whitespace-tokenized documents.

    A directory yields one document per file (sorted by name); a single file
    is split into documents at blank lines.
    """
    if os.path.isdir(path):
        docs = []
        for name in sorted(os.listdir(path)):
            with open(os.path.join(path, name), encoding="utf-8") as fh:
                toks = fh.read().split()
            if toks:
                docs.append(toks)
        return docs
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    docs = []
    for block in text.split("\n\n"):
        toks = block.split()
        if toks:
            docs.append(toks)
    return docs


class EmbeddingStore:
    def __init__(self, matrix, trainable=True):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.trainable = trainable

    @property
    def dim(self):
        return self.matrix.shape[1]

    @classmethod
    def random(cls, n_rows, dim, rng, scale=0.1, trainable=True):
        return cls(rng.uniform(-scale, scale, size=(n_rows, dim)), trainable)

    def __getitem__(self, ids):
        return self.matrix[ids]


def load_text_embeddings(path, vocab, dim, rng, scale=0.1):
    """Fixed vectors from ``token v1 ... vD`` lines; missing tokens get seeded random rows."""
    matrix = rng.uniform(-scale, scale, size=(len(vocab), dim))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            if parts[0] in vocab.id_of:
                matrix[vocab.id_of[parts[0]]] = [float(v) for v in parts[1:]]
    return EmbeddingStore(matrix, trainable=False)


def is_entity(token):
    return token.startswith(ENTITY_PREFIX)


@dataclass
class QAExample:
    text: list
    question: list
    answer: str
    entity_flags: np.ndarray = None
    answer_flags: np.ndarray = None
    entity_names: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.entity_flags is None:
            self.entity_flags = np.array([is_entity(t) for t in self.text], dtype=bool)
        if self.answer_flags is None:
            self.answer_flags = np.array([t == self.answer for t in self.text], dtype=bool)


def make_example(index, text, question, answer, entities=None, clip=CLIP_LENGTH):
    if question.count(PLACEHOLDER) != 1:
        raise MalformedRecordError(index, f"question must contain exactly one {PLACEHOLDER}")
    if not is_entity(answer):
        raise MalformedRecordError(index, f"answer {answer!r} is not an entity marker")
    if entities is not None and answer not in entities:
        raise MalformedRecordError(index, f"answer {answer!r} missing from the entity map")
    return QAExample(list(text[:clip]), list(question), answer,
                     entity_names=dict(entities or {}))


def parse_deepmind_record(content, index=0, clip=CLIP_LENGTH):
    """Parse one ``.question`` file: URL, text, question, answer, entity map."""
    blocks = [b.strip() for b in content.strip().split("\n\n")]
    if len(blocks) < 4:
        raise MalformedRecordError(index, "expected URL, text, question and answer sections")
    text = blocks[1].split()
    question = blocks[2].split()
    answer = blocks[3].strip()
    entities = {}
    if len(blocks) > 4:
        for line in "\n".join(blocks[4:]).splitlines():
            if ":" in line:
                key, name = line.split(":", 1)
                entities[key.strip()] = name.strip()
    return make_example(index, text, question, answer, entities or None, clip)


def load_qa_triples(path, clip=CLIP_LENGTH):
    """Load cloze records from a ``.jsonl`` file, a ``.question`` file or a directory of them."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".question"))
        out = []
        for k, name in enumerate(names):
            with open(os.path.join(path, name), encoding="utf-8") as fh:
                out.append(parse_deepmind_record(fh.read(), k, clip))
        return out
    if path.endswith(".jsonl"):
        out = []
        with open(path, encoding="utf-8") as fh:
            for k, line in enumerate(l for l in fh if l.strip()):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRecordError(k, f"bad JSON: {exc}") from exc
                text = rec["text"].split() if isinstance(rec["text"], str) else rec["text"]
                question = rec["question"].split() if isinstance(rec["question"], str) else rec["question"]
                ents = rec.get("entities")
                if isinstance(ents, list):
                    ents = {e: e for e in ents}
                out.append(make_example(k, text, question, rec["answer"], ents, clip))
        return out
    with open(path, encoding="utf-8") as fh:
        return [parse_deepmind_record(fh.read(), 0, clip)]


def write_qa_jsonl(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"text": " ".join(ex.text), "question": " ".join(ex.question),
                                 "answer": ex.answer,
                                 "entities": ex.entity_names or sorted(set(
                                     t for t in ex.text if is_entity(t)) | {ex.answer})},
                                sort_keys=True) + "\n")


@dataclass
class EncodedQA:
    """Id-level view of a QA example set."""
    text_ids: list
    question_ids: list
    answers: np.ndarray
    in_question: list
    entity_index: dict


def entity_inventory(examples):
    """Every entity marker seen in the split, in first-seen order."""
    seen = {}
    for ex in examples:
        for t in list(ex.text) + [ex.answer] + list(ex.entity_names):
            if is_entity(t):
                seen.setdefault(t, len(seen))
    return seen


def encode_qa(examples, vocab, entity_index):
    text_ids, q_ids, answers, in_q = [], [], [], []
    for k, ex in enumerate(examples):
        if ex.answer not in entity_index:
            raise MalformedRecordError(k, f"answer {ex.answer!r} outside the entity inventory")
        text_ids.append(vocab.encode(ex.text))
        q_ids.append(vocab.encode(ex.question))
        answers.append(entity_index[ex.answer])
        qset = set(t for t in ex.question if t != PLACEHOLDER)
        in_q.append(np.array([t in qset for t in ex.text], dtype=np.float64))
    return EncodedQA(text_ids, q_ids, np.array(answers, dtype=np.int64), in_q, entity_index)
