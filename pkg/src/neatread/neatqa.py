"""Question-answering variant: attentive-reader head plus a logistic fixation policy.

The head reads the (partially skipped) passage forwards and backwards,
encodes the question with a second bidirectional pair, pools passage
states with bilinear relevance weights and scores every entity of the
dataset.  The policy decides left to right whether each passage token is
fixated, using the token embedding and five features: position,
condition, their product, question overlap and a decayed running average
of question overlap over the fixated prefix.
"""

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import encode_qa, entity_inventory

log = logging.getLogger(__name__)

PREVIEW = -0.5
NO_PREVIEW = 0.5
CONDITIONS = {"preview": PREVIEW, "no_preview": NO_PREVIEW}
N_FEATURES = 5
FEAT_POS, FEAT_COND, FEAT_INTER, FEAT_QUESTION, FEAT_RUNAVG = range(N_FEATURES)
LOGIT_CLAMP = 30.0


def condition_name(code):
    return "preview" if code == PREVIEW else "no_preview"


# -- data -------------------------------------------------------------------

def pad(seqs, fill=0):
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for k, s in enumerate(seqs):
        ids[k, :len(s)] = s
        mask[k, :len(s)] = 1.0
    return ids, mask


@dataclass
class QABatch:
    text: np.ndarray          # (B, T) ids
    text_mask: np.ndarray     # (B, T)
    question: np.ndarray      # (B, Tq)
    question_mask: np.ndarray
    in_question: np.ndarray   # (B, T) 0/1
    answers: np.ndarray       # (B,)
    index: np.ndarray = None  # positions in the source dataset

    @property
    def lengths(self):
        return self.text_mask.sum(axis=1)


class QAData:
    """Encoded cloze examples with length-bucketed batching."""

    def __init__(self, examples, vocab, entity_index=None):
        self.examples = list(examples)
        self.vocab = vocab
        self.entity_index = entity_index or entity_inventory(self.examples)
        self.enc = encode_qa(self.examples, vocab, self.entity_index)

    def __len__(self):
        return len(self.examples)

    @property
    def n_entities(self):
        return len(self.entity_index)

    def subset(self, idx):
        out = QAData.__new__(QAData)
        out.examples = [self.examples[i] for i in idx]
        out.vocab = self.vocab
        out.entity_index = self.entity_index
        out.enc = encode_qa(out.examples, self.vocab, self.entity_index)
        return out

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        text, tmask = pad([self.enc.text_ids[i] for i in idx])
        q, qmask = pad([self.enc.question_ids[i] for i in idx])
        inq, _ = pad([self.enc.in_question[i] for i in idx])
        return QABatch(text, tmask, q, qmask, inq.astype(np.float64), self.enc.answers[idx], idx)

    def batches(self, batch_size, rng=None):
        """Batches of similar-length texts; batch order shuffled when ``rng`` is given."""
        lengths = np.array([len(t) for t in self.enc.text_ids])
        order = np.argsort(lengths, kind="stable")
        if rng is not None:
            # shuffle within equal lengths, then chunk
            jitter = rng.random(len(order))
            order = np.lexsort((jitter, lengths))
        chunks = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
        if rng is not None:
            chunks = [chunks[k] for k in rng.permutation(len(chunks))]
        for ch in chunks:
            yield self.batch(ch)


# -- task head --------------------------------------------------------------

class QAHead:
    def __init__(self, embeddings, n_entities, hidden_dim=128, skip_id=1, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        D = embeddings.shape[1]
        H = hidden_dim
        self.emb = np.asarray(embeddings, dtype=np.float64)
        self.hidden_dim = H
        self.n_entities = n_entities
        self.skip_id = skip_id
        g = nn.glorot_scale
        self.pf = nn.LstmCell(D, H, rng, scale=g(D + H, 4 * H))
        self.pb = nn.LstmCell(D, H, rng, scale=g(D + H, 4 * H))
        self.qf = nn.LstmCell(D, H, rng, scale=g(D + H, 4 * H))
        self.qb = nn.LstmCell(D, H, rng, scale=g(D + H, 4 * H))
        self.B = nn.uniform_init(rng, (2 * H, 2 * H), g(2 * H, 2 * H))
        self.C = nn.uniform_init(rng, (n_entities, 2 * H), g(2 * H, n_entities))

    @property
    def params(self):
        p = {}
        for name in ("pf", "pb", "qf", "qb"):
            p.update(getattr(self, name).params(name))
        p["B"] = self.B
        p["C"] = self.C
        return p

    def encode(self, batch, omega):
        """Passage states ``R`` (forward), ``q`` (backward) and question vector ``r``."""
        vis = np.where(np.asarray(omega) > 0, batch.text, self.skip_id)
        xs = self.emb[vis.T]
        mT = batch.text_mask.T
        R, _, tape_f = nn.run_lstm(self.pf, xs, mask=mT)
        Q, _, tape_b = nn.run_lstm(self.pb, xs, mask=mT, reverse=True)
        xq = self.emb[batch.question.T]
        mq = batch.question_mask.T
        _, (hf, _), tq_f = nn.run_lstm(self.qf, xq, mask=mq)
        _, (hb, _), tq_b = nn.run_lstm(self.qb, xq, mask=mq, reverse=True)
        r = np.concatenate([hf, hb], axis=1)
        return R, Q, r, (tape_f, tape_b, tq_f, tq_b)

    def answer_distribution(self, R, Q, r, mask):
        """Relevance-weighted pooling and entity softmax.

        Returns ``(t, beta, s, M)``: entity probabilities, normalized
        relevance weights, pooled vector and stacked states.
        """
        M = np.concatenate([R, Q], axis=-1)
        Br = r @ self.B
        scores = np.einsum("tbh,bh->bt", M, Br)
        scores = np.where(mask > 0, scores, -np.inf)
        beta = nn.softmax(scores, axis=1)
        s = np.einsum("bt,tbh->bh", beta, M)
        t = nn.softmax(s @ self.C.T, axis=1)
        return t, beta, s, M

    def forward(self, batch, omega):
        R, Q, r, tapes = self.encode(batch, omega)
        t, beta, s, M = self.answer_distribution(R, Q, r, batch.text_mask)
        return t, (R, Q, r, tapes, beta, s, M)

    def predict(self, batch, omega):
        return self.forward(batch, omega)[0]

    def loss_and_grads(self, batch, omega, weights=None):
        """Summed (or ``weights``-weighted) answer NLL and its gradients."""
        t, (R, Q, r, tapes, beta, s, M) = self.forward(batch, omega)
        Bn = len(batch.answers)
        rows = np.arange(Bn)
        losses = -np.log(np.maximum(t[rows, batch.answers], 1e-300))
        w = np.ones(Bn) if weights is None else weights
        dlogits = t.copy()
        dlogits[rows, batch.answers] -= 1.0
        dlogits *= w[:, None]
        dC = dlogits.T @ s
        ds = dlogits @ self.C
        dbeta = np.einsum("bh,tbh->bt", ds, M)
        dscores = beta * (dbeta - (beta * dbeta).sum(axis=1, keepdims=True))
        Br = r @ self.B
        dM = beta.T[..., None] * ds[None] + dscores.T[..., None] * Br[None]
        dBr = np.einsum("bt,tbh->bh", dscores, M)
        dB = r.T @ dBr
        dr = dBr @ self.B.T
        H = self.hidden_dim
        tape_f, tape_b, tq_f, tq_b = tapes
        _, _, _, dWpf, dbpf = nn.run_lstm_backward(self.pf, tape_f, dM[..., :H])
        _, _, _, dWpb, dbpb = nn.run_lstm_backward(self.pb, tape_b, dM[..., H:])
        zq = np.zeros((batch.question.shape[1], Bn, H))
        _, _, _, dWqf, dbqf = nn.run_lstm_backward(self.qf, tq_f, zq, dh_last=dr[:, :H])
        _, _, _, dWqb, dbqb = nn.run_lstm_backward(self.qb, tq_b, zq, dh_last=dr[:, H:])
        grads = {"pf.W": dWpf, "pf.b": dbpf, "pb.W": dWpb, "pb.b": dbpb,
                 "qf.W": dWqf, "qf.b": dbqf, "qb.W": dWqb, "qb.b": dbqb, "B": dB, "C": dC}
        return losses, grads, t


def is_correct(t, answers):
    """Answer entity strictly more probable than every other entity."""
    rows = np.arange(len(answers))
    pa = t[rows, answers]
    others = t.copy()
    others[rows, answers] = -np.inf
    return pa > others.max(axis=1)


def anneal_rate(epoch, epochs, start=1.0, end=0.6):
    """Linear fixation-rate schedule across head-training epochs."""
    if epochs <= 1:
        return end
    return start + (end - start) * epoch / (epochs - 1)


def train_qa_head(head, data, epochs, rng, learning_rate=0.5, momentum=0.9, batch_size=8,
                  clip=5.0, start_rate=1.0, end_rate=0.6, full_epochs=0):
    """Answer-NLL training under random skipping whose rate follows the anneal schedule.

    The first ``full_epochs`` epochs read every token; the remaining epochs
    anneal the fixation rate linearly from ``start_rate`` to ``end_rate``.
    """
    opt = nn.SGDMomentum(learning_rate, momentum)
    history = []
    anneal_epochs = epochs - full_epochs
    for epoch in range(epochs):
        rate = 1.0 if epoch < full_epochs else anneal_rate(epoch - full_epochs, anneal_epochs,
                                                           start_rate, end_rate)
        total, n = 0.0, 0
        for batch in data.batches(batch_size, rng):
            omega = (rng.random(batch.text.shape) < rate) * batch.text_mask
            losses, grads, _ = head.loss_and_grads(batch, omega)
            if not np.all(np.isfinite(losses)):
                raise nn.NumericError(f"non-finite answer loss in head epoch {epoch}")
            for g in grads.values():
                g /= len(losses)
            nn.clip_global_norm(grads, clip)
            opt.update(head.params, grads)
            total += float(losses.sum())
            n += len(losses)
        history.append({"epoch": epoch, "split": "train", "mean_loss": total / n,
                        "mean_fixation_rate": rate})
        log.info("qa head epoch %d rate %.2f loss %.3f", epoch, rate, total / n)
    return history


def full_attention_accuracy(head, data, batch_size=64):
    correct = np.zeros(len(data), dtype=bool)
    for batch in data.batches(batch_size):
        t = head.predict(batch, batch.text_mask)
        correct[batch.index] = is_correct(t, batch.answers)
    return correct


def filter_answerable(head, data, batch_size=64):
    """Indices of examples the head answers correctly when every token is fixated."""
    return np.flatnonzero(full_attention_accuracy(head, data, batch_size))


# -- attention policy -------------------------------------------------------

@dataclass
class FeatureScaler:
    """Per-feature centering and range scaling, estimated on training texts."""
    mean: np.ndarray
    range: np.ndarray

    def apply(self, raw):
        return (raw - self.mean) / self.range

    def to_dict(self):
        return {"mean": self.mean.tolist(), "range": self.range.tolist()}


def raw_features(length, in_question, condition, omega=None, decay=0.5):
    """Unscaled features (a)-(e) for one text, with the running average over ``omega``."""
    pos = np.arange(1, length + 1, dtype=np.float64)
    X = np.zeros((length, N_FEATURES))
    X[:, FEAT_POS] = pos
    X[:, FEAT_COND] = condition
    X[:, FEAT_INTER] = pos * condition
    X[:, FEAT_QUESTION] = in_question[:length]
    om = np.ones(length) if omega is None else np.asarray(omega, float)
    e = 0.0
    for i in range(length):
        X[i, FEAT_RUNAVG] = e
        e = decay * e + (1.0 - decay) * in_question[i] * om[i]
    return X


def fit_feature_scaler(data, decay=0.5):
    """Mean and range of raw features over both conditions with every token fixated."""
    rows = []
    for k in range(len(data)):
        n = len(data.enc.text_ids[k])
        for cond in (PREVIEW, NO_PREVIEW):
            rows.append(raw_features(n, data.enc.in_question[k], cond, decay=decay))
    X = np.concatenate(rows)
    rng_ = X.max(axis=0) - X.min(axis=0)
    rng_[rng_ == 0] = 1.0
    return FeatureScaler(X.mean(axis=0), rng_)


def qa_feature_vector(position, in_question, condition, omega_prefix, decay, scaler=None):
    """Scaled feature vector X_i for 1-based ``position`` given the decisions before it.

    In the No Preview condition the question features take the centered
    value zero.
    """
    i = position - 1
    raw = raw_features(i + 1, np.asarray(in_question, float),
                       condition, np.concatenate([np.asarray(omega_prefix, float), [0.0]]),
                       decay)[i]
    X = raw if scaler is None else scaler.apply(raw)
    if condition == NO_PREVIEW:
        X = X.copy()
        X[FEAT_QUESTION] = 0.0
        X[FEAT_RUNAVG] = 0.0
    return X


class QAAttention:
    """Logistic fixation score ``sigmoid(u + v.X + X^T A w)``.

    With ``v_on_embedding`` the linear term is ``v.w`` instead of ``v.X``.
    The feature (e) decay is ``sigmoid(kappa)``.
    """

    def __init__(self, emb_dim, scaler, rng=None, v_on_embedding=False, init_decay=0.5):
        self.emb_dim = emb_dim
        self.scaler = scaler
        self.v_on_embedding = v_on_embedding
        self.u = np.zeros(1)
        self.v = np.zeros(emb_dim if v_on_embedding else N_FEATURES)
        if rng is None:
            self.A = np.zeros((N_FEATURES, emb_dim))
        else:
            self.A = nn.uniform_init(rng, (N_FEATURES, emb_dim),
                                     nn.glorot_scale(N_FEATURES, emb_dim))
        self.kappa = np.array([np.log(init_decay / (1.0 - init_decay))])

    @property
    def params(self):
        return {"u": self.u, "v": self.v, "A": self.A, "kappa": self.kappa}

    @property
    def decay(self):
        return float(nn.sigmoid(self.kappa)[0])

    def score_logit(self, w_hat, X):
        lin = w_hat @ self.v if self.v_on_embedding else X @ self.v
        return self.u[0] + lin + np.einsum("...k,...k->...", X, w_hat @ self.A.T)


def qa_attention_score(attn, w_hat, X):
    return float(nn.sigmoid(np.clip(attn.score_logit(np.asarray(w_hat, float),
                                                     np.asarray(X, float)),
                                    -LOGIT_CLAMP, LOGIT_CLAMP)))


@dataclass
class QARollout:
    omega: np.ndarray        # (B, T), zero on padding
    probs: np.ndarray        # (B, T)
    logits: np.ndarray
    X: np.ndarray            # (B, T, 5) scaled, masked
    dXe_dkappa: np.ndarray   # (B, T)
    w_hat: np.ndarray        # (B, T, D)
    mask: np.ndarray
    condition: np.ndarray    # (B,)

    def log_prob(self):
        lp = np.where(self.omega > 0, nn.log_sigmoid(self.logits), nn.log_sigmoid(-self.logits))
        return (lp * self.mask).sum(axis=1)


def qa_rollout(attn, emb, batch, condition, rng=None, omega=None):
    """Sample (or replay) fixations left to right for a padded batch."""
    Bn, T = batch.text.shape
    condition = np.broadcast_to(np.asarray(condition, dtype=np.float64), (Bn,)).copy()
    preview = (condition == PREVIEW).astype(np.float64)
    w_hat = emb[batch.text]
    AW = w_hat @ attn.A.T
    decay = attn.decay
    sc = attn.scaler
    e = np.zeros(Bn)
    de = np.zeros(Bn)
    out = QARollout(np.zeros((Bn, T)), np.zeros((Bn, T)), np.zeros((Bn, T)),
                    np.zeros((Bn, T, N_FEATURES)), np.zeros((Bn, T)), w_hat,
                    batch.text_mask, condition)
    for i in range(T):
        pos = float(i + 1)
        raw = np.stack([np.full(Bn, pos), condition, pos * condition,
                        batch.in_question[:, i], e], axis=1)
        X = sc.apply(raw)
        X[:, FEAT_QUESTION] *= preview
        X[:, FEAT_RUNAVG] *= preview
        lg = np.clip(attn.u[0] + (w_hat[:, i] @ attn.v if attn.v_on_embedding else X @ attn.v)
                     + (X * AW[:, i]).sum(axis=1), -LOGIT_CLAMP, LOGIT_CLAMP)
        a = nn.sigmoid(lg)
        m = batch.text_mask[:, i]
        if omega is not None:
            om = np.asarray(omega, float)[:, i] * m
        else:
            om = (rng.random(Bn) < a).astype(np.float64) * m
        out.X[:, i] = X
        out.dXe_dkappa[:, i] = preview * de * decay * (1.0 - decay) / sc.range[FEAT_RUNAVG]
        out.logits[:, i] = lg
        out.probs[:, i] = a
        out.omega[:, i] = om
        dprime = batch.in_question[:, i] * om
        e_next = decay * e + (1.0 - decay) * dprime
        de = e + decay * de - dprime
        e = np.where(m > 0, e_next, e)
    return out


@dataclass
class QATradeoffConfig:
    alpha: float = 2.25
    entropy_weight: float = 0.1
    learning_rate: float = 0.001
    momentum: float = 0.95
    batch_size: int = 8
    clip: float = 5.0
    use_baseline: bool = True
    baseline_decay: float = 0.9
    exact_rate_gradient: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def qa_logit_coefficients(ro, answer_nll, cfg, baseline=0.0):
    """d(surrogate)/d(logit_i) whose expectation is the objective gradient.

    The score-function part carries the answer loss; the fixation-rate and
    entropy terms use their direct derivatives plus, when the policy is
    recurrent through feature (e), the score-function correction for the
    influence of earlier decisions on later probabilities.
    """
    a, lg, m = ro.probs, ro.logits, ro.mask
    N = m.sum(axis=1, keepdims=True)
    score = (ro.omega - a) * m
    H = bernoulli_entropy(a, lg) * m
    sig_d = a * (1.0 - a) * m
    adv = (answer_nll - baseline)[:, None]
    if cfg.exact_rate_gradient:
        later_a = np.cumsum((a * m)[:, ::-1], axis=1)[:, ::-1] - a * m
        later_H = np.cumsum(H[:, ::-1], axis=1)[:, ::-1] - H
        adv = adv + (cfg.alpha * later_a - cfg.entropy_weight * later_H) / N
    return score * adv + (cfg.alpha * sig_d + cfg.entropy_weight * lg * sig_d) / N


def bernoulli_entropy(a, logits):
    return np.logaddexp(0.0, logits) - a * logits


def qa_policy_gradient(attn, ro, coeffs):
    """Batch-mean gradient dict and per-sample flat gradients (B, n_params)."""
    c = coeffs * (np.abs(ro.logits) < LOGIT_CLAMP)
    du = c.sum(axis=1, keepdims=True)
    if attn.v_on_embedding:
        dv = np.einsum("bt,btd->bd", c, ro.w_hat)
    else:
        dv = np.einsum("bt,btk->bk", c, ro.X)
    dA = np.einsum("bt,btk,btd->bkd", c, ro.X, ro.w_hat)
    dlogit_dXe = np.einsum("btd,d->bt", ro.w_hat, attn.A[FEAT_RUNAVG])
    if not attn.v_on_embedding:
        dlogit_dXe = dlogit_dXe + attn.v[FEAT_RUNAVG]
    dk = (c * dlogit_dXe * ro.dXe_dkappa).sum(axis=1, keepdims=True)
    Bn = c.shape[0]
    per = np.concatenate([du, dv, dA.reshape(Bn, -1), dk], axis=1)
    grads = {"u": du.mean(axis=0), "v": dv.mean(axis=0), "A": dA.mean(axis=0),
             "kappa": dk.mean(axis=0)}
    return grads, per


def expected_objective_terms(ro, answer_nll, alpha, entropy_weight):
    """Per-example realized objective: answer NLL + alpha*rate - entropy bonus."""
    N = ro.mask.sum(axis=1)
    H = (bernoulli_entropy(ro.probs, ro.logits) * ro.mask).sum(axis=1)
    return answer_nll + alpha * ro.omega.sum(axis=1) / N - entropy_weight * H / N


class QAPolicyTrainer:
    def __init__(self, attn, head, cfg, rng):
        self.attn = attn
        self.head = head
        self.cfg = cfg
        self.rng = rng
        self.opt = nn.SGDMomentum(cfg.learning_rate, cfg.momentum)
        self.baseline = {PREVIEW: None, NO_PREVIEW: None}

    def step(self, batch):
        cfg = self.cfg
        Bn = len(batch.answers)
        cond = np.where(self.rng.random(Bn) < 0.5, PREVIEW, NO_PREVIEW)
        ro = qa_rollout(self.attn, self.head.emb, batch, cond, self.rng)
        t = self.head.predict(batch, ro.omega)
        nll = -np.log(np.maximum(t[np.arange(Bn), batch.answers], 1e-300))
        base = np.zeros(Bn)
        if cfg.use_baseline:
            for code in (PREVIEW, NO_PREVIEW):
                if self.baseline[code] is not None:
                    base[cond == code] = self.baseline[code]
        coeffs = qa_logit_coefficients(ro, nll, cfg, base)
        grads, _ = qa_policy_gradient(self.attn, ro, coeffs)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise nn.NumericError("non-finite attention update")
        nn.clip_global_norm(grads, cfg.clip)
        self.opt.update(self.attn.params, grads)
        if cfg.use_baseline:
            for code in (PREVIEW, NO_PREVIEW):
                sel = cond == code
                if sel.any():
                    mean = float(nll[sel].mean())
                    old = self.baseline[code]
                    self.baseline[code] = mean if old is None else (
                        cfg.baseline_decay * old + (1 - cfg.baseline_decay) * mean)
        rate = float(ro.omega.sum() / batch.text_mask.sum())
        return {"nll": float(nll.mean()), "rate": rate,
                "acc": float(is_correct(t, batch.answers).mean())}

    def train(self, data, epochs):
        history = []
        for epoch in range(epochs):
            stats = [self.step(b) for b in data.batches(self.cfg.batch_size, self.rng)]
            rec = {"epoch": epoch, "split": "train",
                   "mean_loss": float(np.mean([s["nll"] for s in stats])),
                   "mean_fixation_rate": float(np.mean([s["rate"] for s in stats])),
                   "accuracy": float(np.mean([s["acc"] for s in stats]))}
            history.append(rec)
            log.info("qa attention epoch %d rate %.3f acc %.3f", epoch,
                     rec["mean_fixation_rate"], rec["accuracy"])
        return history


def train_qa_attention(attn, head, data, cfg, rng, epochs):
    return QAPolicyTrainer(attn, head, cfg, rng).train(data, epochs)


def evaluate_policy(attn, head, data, condition, rng, samples=1, batch_size=64):
    """Mean sampled fixation rate, accuracy and per-example mean fixation probability."""
    fix, tok, correct, n = 0.0, 0.0, 0.0, 0
    for _ in range(samples):
        for batch in data.batches(batch_size):
            ro = qa_rollout(attn, head.emb, batch, condition, rng)
            t = head.predict(batch, ro.omega)
            fix += ro.omega.sum()
            tok += batch.text_mask.sum()
            correct += is_correct(t, batch.answers).sum()
            n += len(batch.answers)
    return {"fixation_rate": fix / tok, "accuracy": correct / n}


def random_skip_accuracy(head, data, rate, rng, samples=1, batch_size=64):
    correct, n = 0.0, 0
    for _ in range(samples):
        for batch in data.batches(batch_size):
            omega = (rng.random(batch.text.shape) < rate) * batch.text_mask
            correct += is_correct(head.predict(batch, omega), batch.answers).sum()
            n += len(batch.answers)
    return correct / n


def question_overlap_rate(attn, head, data, condition, rng, batch_size=64):
    """Mean fixation probability on tokens that occur in the question."""
    num, den = 0.0, 0.0
    for batch in data.batches(batch_size):
        ro = qa_rollout(attn, head.emb, batch, condition, rng)
        sel = batch.in_question * batch.text_mask
        num += (ro.probs * sel).sum()
        den += sel.sum()
    return num / den if den else float("nan")


# -- alpha sweeps -----------------------------------------------------------

@dataclass
class TradeoffPoint:
    alpha: float
    run: int
    condition: str
    fixation_rate: float
    accuracy: float
    error: str = field(default="")


def alpha_grid(start=0.0, stop=4.0, step=0.25):
    n = int(round((stop - start) / step))
    return [round(start + k * step, 10) for k in range(n + 1)]


def _sweep_cell(head, train_data, eval_data, alpha, ai, run, cfg, seed, epochs, scaler,
                eval_samples):
    rng = np.random.default_rng([seed, ai, run])
    run_cfg = QATradeoffConfig(**{**cfg.__dict__, "alpha": alpha})
    try:
        attn = QAAttention(head.emb.shape[1], scaler, rng)
        train_qa_attention(attn, head, train_data, run_cfg, rng, epochs)
        out = []
        for name, code in CONDITIONS.items():
            res = evaluate_policy(attn, head, eval_data, code, rng, eval_samples)
            out.append(TradeoffPoint(alpha, run, name, res["fixation_rate"], res["accuracy"]))
        return out
    except (nn.NumericError, FloatingPointError) as exc:
        return [TradeoffPoint(alpha, run, name, float("nan"), float("nan"), str(exc))
                for name in CONDITIONS]


def alpha_sweep(head, train_data, eval_data, grid, runs, cfg, seed, epochs,
                scaler=None, eval_samples=1, on_point=None, workers=1):
    """Train one policy per (alpha, run) and evaluate both conditions on held-out data.

    Every (alpha, run) uses its own rng stream derived from ``seed``, so the
    result does not depend on ``workers``; points come back in grid order.
    A failing run is recorded with NaN metrics and the sweep continues.
    """
    scaler = scaler or fit_feature_scaler(train_data)
    jobs = [(alpha, ai, run) for ai, alpha in enumerate(grid) for run in range(runs)]
    args = [(head, train_data, eval_data, alpha, ai, run, cfg, seed, epochs, scaler,
             eval_samples) for alpha, ai, run in jobs]
    points = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, *a) for a in args]
            for fut in futures:
                cell = fut.result()
                points.extend(cell)
                if on_point is not None:
                    on_point(cell)
    else:
        for a in args:
            cell = _sweep_cell(*a)
            points.extend(cell)
            if on_point is not None:
                on_point(cell)
    return points


def select_alpha(points, target_rate):
    """Alpha whose fixation rate (averaged over runs and conditions) is closest to target."""
    by_alpha = {}
    for p in points:
        if np.isfinite(p.fixation_rate):
            by_alpha.setdefault(p.alpha, []).append(p.fixation_rate)
    return min(sorted(by_alpha), key=lambda a: abs(np.mean(by_alpha[a]) - target_rate))


def write_sweep_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "run", "condition", "fixation_rate", "accuracy"])
        for p in points:
            w.writerow([repr(float(p.alpha)), p.run, p.condition,
                        repr(float(p.fixation_rate)), repr(float(p.accuracy))])
