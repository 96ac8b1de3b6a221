import itertools

import numpy as np
import pytest

from neatread import attnpolicy, corpus, neatlm, neatqa, synth


def all_fixations(n):
    return np.array(list(itertools.product([0.0, 1.0], repeat=n)))


def enumerated_s1_objective(model, net, window, alpha, entropy_weight):
    """E[L + alpha*|omega| - gamma*sum H] by summing over all 2^N fixation sequences."""
    omegas = all_fixations(len(window))
    wins = np.repeat(np.asarray(window)[None], len(omegas), axis=0)
    ro = attnpolicy.rollout(model, net, wins, omega=omegas)
    probs = np.exp(ro.log_prob)
    cost = attnpolicy.window_costs(model, wins, ro) + alpha * omegas.sum(axis=1)
    ent = attnpolicy.bernoulli_entropy(ro.probs, ro.logits).sum(axis=1)
    return float(probs @ (cost - entropy_weight * ent)), probs, ro


def enumerated_qa_objective(attn, head, data, k, condition, alpha, gamma):
    """E[NLL + alpha*rate - gamma*mean entropy] over every fixation sequence of example k."""
    T = len(data.enc.text_ids[k])
    omegas = all_fixations(T)
    batch = data.batch(np.full(len(omegas), k))
    ro = neatqa.qa_rollout(attn, head.emb, batch, condition, omega=omegas)
    probs = np.exp(ro.log_prob())
    t = head.predict(batch, ro.omega)
    nll = -np.log(t[np.arange(len(omegas)), batch.answers])
    H = neatqa.bernoulli_entropy(ro.probs, ro.logits).sum(axis=1)
    J = probs @ (nll + alpha * ro.probs.sum(axis=1) / T - gamma * H / T)
    return float(J), probs, ro, nll, batch


def enumerated_gradient(objective, params, eps=1e-6):
    """Central differences of an exactly enumerated objective, flattened like policy_gradient."""
    out = []
    for name in params:
        p = params[name]
        flat = p.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = objective()
            flat[j] = old - eps
            down = objective()
            flat[j] = old
            out.append((up - down) / (2 * eps))
    return np.array(out)


def tiny_s1(seed=0, vocab=6, emb=3, hidden=3):
    rng = np.random.default_rng(seed)
    model = neatlm.Study1Model(vocab, emb, hidden, skip_id=1, bos_id=2, rng=rng, init_scale=0.5)
    model.embeddings_trainable = False
    net = attnpolicy.AttentionNetS1(emb, hidden, rng, scale=0.5)
    return model, net


@pytest.fixture
def tiny_model():
    return tiny_s1()


@pytest.fixture(scope="session")
def toy_grammar():
    rng = np.random.default_rng(0)
    docs, tags = synth.grammar_corpus(40, 100, rng)
    vocab = corpus.build_vocab([t for d in docs for t in d], 200)
    windows = np.array([w.ids for k, d in enumerate(docs)
                        for w in corpus.window_split(vocab.encode(d), 10, k)])
    return vocab, windows, docs, tags


@pytest.fixture(scope="session")
def trained_toy_lm(toy_grammar):
    vocab, windows, _, _ = toy_grammar
    model = neatlm.Study1Model(len(vocab), 8, 16, vocab.skip_id, vocab.bos_id,
                               rng=np.random.default_rng(1))
    history = neatlm.train_phase1(model, windows[:360], 0.6, 10, np.random.default_rng(2),
                                  learning_rate=1.0, heldout=windows[360:])
    return model, history, windows[360:]


def tiny_qa(seed=0, n_examples=6, hidden=3, emb=3, text_len=6):
    """Small cloze set, head and policy with unsaturated weights for gradient checks."""
    rng = np.random.default_rng(seed)
    ex = synth.cloze_corpus(n_examples, rng, text_len=text_len, n_pairs=2, n_keywords=3,
                            n_entities=3, n_fillers=3)
    vocab = corpus.build_vocab([t for e in ex for t in e.text + e.question], 50)
    data = neatqa.QAData(ex, vocab)
    E = rng.normal(size=(len(vocab), emb))
    head = neatqa.QAHead(E, data.n_entities, hidden, vocab.skip_id, rng)
    for p in head.params.values():
        p[...] = rng.uniform(-0.8, 0.8, size=p.shape)
    scaler = neatqa.fit_feature_scaler(data)
    attn = neatqa.QAAttention(emb, scaler, rng)
    for p in attn.params.values():
        p[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    return data, head, attn
