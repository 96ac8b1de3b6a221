"""Synthetic corpora for desk-scale training and tests.

The generators are deterministic given their rng.  Word inventories are
fixed pseudo-words built from a private seed so vocabularies are stable
across runs regardless of the caller's rng.
"""

import numpy as np

from .corpus import ENTITY_PREFIX, PLACEHOLDER, QAExample

_LETTERS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"

FUNCTION_WORDS = {
    "DET": ["the", "a"],
    "ADP": ["of", "in"],
    "CONJ": ["and"],
    "PRT": ["to"],
    "PRON": ["it"],
}

TEMPLATES = [
    ["DET", "NOUN", "VERB", "DET", "ADJ", "NOUN", "."],
    ["DET", "ADJ", "NOUN", "VERB", "ADP", "DET", "NOUN", "."],
    ["PRON", "VERB", "DET", "NOUN", "CONJ", "DET", "NOUN", "."],
    ["DET", "NOUN", "ADV", "VERB", "PRT", "VERB", "DET", "NOUN", "."],
]


def pseudo_words(n, min_len, max_len, seed):
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    while len(out) < n:
        length = int(rng.integers(min_len, max_len + 1))
        w = "".join(_LETTERS[rng.integers(len(_LETTERS))] if k % 2 == 0
                    else _VOWELS[rng.integers(len(_VOWELS))] for k in range(length))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def content_lexicon(n_noun=24, n_verb=12, n_adj=10, n_adv=6):
    words = pseudo_words(n_noun + n_verb + n_adj + n_adv, 4, 9, seed=7)
    lex, k = {}, 0
    for tag, n in (("NOUN", n_noun), ("VERB", n_verb), ("ADJ", n_adj), ("ADV", n_adv)):
        lex[tag] = words[k:k + n]
        k += n
    return lex


def grammar_corpus(n_docs, doc_len, rng, lexicon=None):
    """Documents of template sentences; returns ``(docs, tags)`` token/tag lists.

    Function words come from tiny closed classes and content words from
    larger open classes, so function words are cheap to predict.
    """
    lex = dict(FUNCTION_WORDS)
    lex.update(lexicon or content_lexicon())
    lex["."] = ["."]
    docs, tags = [], []
    for _ in range(n_docs):
        toks, tg = [], []
        while len(toks) < doc_len:
            for tag in TEMPLATES[rng.integers(len(TEMPLATES))]:
                words = lex[tag]
                toks.append(words[rng.integers(len(words))])
                tg.append(tag)
        docs.append(toks[:doc_len])
        tags.append(tg[:doc_len])
    return docs, tags


def deterministic_language(n_docs, doc_len, n_types, rng):
    """Each token is a fixed function of its predecessor (a random cycle)."""
    words = pseudo_words(n_types, 3, 6, seed=11)
    nxt = rng.permutation(n_types)
    docs = []
    for _ in range(n_docs):
        w = int(rng.integers(n_types))
        doc = []
        for _ in range(doc_len):
            doc.append(words[w])
            w = int(nxt[w])
        docs.append(doc)
    return docs


def cloze_corpus(n_examples, rng, text_len=16, n_pairs=3, n_keywords=10,
                 n_entities=10, n_fillers=30):
    """Toy cloze task: the answer is the entity that follows the question keyword.

    Each text holds ``n_pairs`` (keyword, entity) bigrams with distinct
    keywords and entities, padded with filler words.
    """
    keywords = pseudo_words(n_keywords, 5, 7, seed=21)
    fillers = pseudo_words(n_fillers + n_keywords, 2, 4, seed=23)
    fillers = [f for f in fillers if f not in keywords][:n_fillers]
    entities = [f"{ENTITY_PREFIX}{k}" for k in range(n_entities)]
    if 2 * n_pairs > text_len:
        raise ValueError("text too short for the requested number of pairs")
    out = []
    for _ in range(n_examples):
        kws = rng.choice(n_keywords, size=n_pairs, replace=False)
        ents = rng.choice(n_entities, size=n_pairs, replace=False)
        # choose pair start slots so pairs never overlap
        free = text_len - 2 * n_pairs
        gaps = np.sort(rng.choice(free + n_pairs, size=n_pairs, replace=False))
        starts = [int(gaps[k]) + k for k in range(n_pairs)]
        text = [fillers[rng.integers(n_fillers)] for _ in range(text_len)]
        for k, s in enumerate(starts):
            text[s] = keywords[kws[k]]
            text[s + 1] = entities[ents[k]]
        target = int(rng.integers(n_pairs))
        question = [PLACEHOLDER, keywords[kws[target]]]
        names = {e: e for e in entities}
        out.append(QAExample(text, question, entities[ents[target]], entity_names=names))
    return out
