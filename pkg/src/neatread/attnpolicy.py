"""Hard attention over a frozen reader/decoder, trained with REINFORCE.

At step ``i`` the policy sees the embedding of ``w_i`` (parafoveal
preview), the reader state ``h_{i-1}`` and ``log P_R(w_i)``, and fixates
with probability ``sigmoid(logit)``.  The cost of a fixation sequence is the
reader/decoder loss plus ``alpha`` per fixation; an entropy bonus on every
per-step Bernoulli keeps the policy exploring.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .neatlm import decoder_nll

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0


@dataclass
class TradeoffConfigS1:
    alpha: float = 5.0
    entropy_weight: float = 5.0
    learning_rate: float = 0.01
    momentum: float = 0.0
    clip: float = 5.0
    batch_size: int = 32
    baseline_lr: float = 0.05
    use_baseline: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


class AttentionNetS1:
    """One-layer feed-forward scorer over [embedding; h_prev; log P_R(w)]."""

    def __init__(self, emb_dim, hidden_dim, rng=None, scale=0.01):
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        n_in = emb_dim + hidden_dim + 1
        if rng is None:
            self.w = np.zeros(n_in)
        else:
            self.w = nn.uniform_init(rng, (n_in,), scale)
        self.b = np.zeros(1)

    @property
    def params(self):
        return {"attn.w": self.w, "attn.b": self.b}

    def logit(self, feats):
        return np.clip(feats @ self.w + self.b[0], -LOGIT_CLAMP, LOGIT_CLAMP)


def fixation_prob(net, w_hat, h_prev, p_r_of_token):
    """``P(omega_i = 1)`` for one token."""
    x = np.concatenate([np.asarray(w_hat, float), np.asarray(h_prev, float),
                        [np.log(p_r_of_token)]])
    return float(nn.sigmoid(net.logit(x)))


def bernoulli_entropy(a, logits):
    # H = log(1 + e^l) - a*l, stable for saturated probabilities
    return np.logaddexp(0.0, logits) - a * logits


@dataclass
class Rollout:
    omega: np.ndarray        # (B, N)
    probs: np.ndarray        # (B, N) P(omega_i = 1 | prefix)
    logits: np.ndarray       # (B, N)
    feats: np.ndarray        # (B, N, F)
    surprisal: np.ndarray    # (B, N) restricted surprisal
    final_state: tuple = field(repr=False, default=None)

    @property
    def log_prob(self):
        """log P(omega | w), per window."""
        return np.where(self.omega > 0, nn.log_sigmoid(self.logits),
                        nn.log_sigmoid(-self.logits)).sum(axis=1)


def rollout(model, net, windows, rng=None, omega=None):
    """Run reader and policy together over (B, N) windows.

    Fixations are sampled with ``rng`` unless ``omega`` forces them; either
    way the reported probabilities are those of the policy along the
    realized prefix.
    """
    windows = np.asarray(windows, dtype=np.int64)
    if windows.ndim == 1:
        windows = windows[None]
    B, N = windows.shape
    h, c = model.reader.zero_state(B)
    rows = np.arange(B)
    out_omega = np.zeros((B, N))
    probs = np.zeros((B, N))
    logits = np.zeros((B, N))
    feats = np.zeros((B, N, model.emb_dim + model.hidden_dim + 1))
    surp = np.zeros((B, N))
    for i in range(N):
        logp = nn.log_softmax(model.reader_out.forward(h))
        lp_tok = logp[rows, windows[:, i]]
        x = np.concatenate([model.emb[windows[:, i]], h, lp_tok[:, None]], axis=1)
        lg = net.logit(x)
        a = nn.sigmoid(lg)
        if omega is not None:
            om = np.asarray(omega, dtype=np.float64).reshape(B, N)[:, i]
        else:
            om = (rng.random(B) < a).astype(np.float64)
        feats[:, i] = x
        logits[:, i] = lg
        probs[:, i] = a
        out_omega[:, i] = om
        surp[:, i] = -lp_tok
        ids = np.where(om > 0, windows[:, i], model.skip_id)
        h, c, _ = nn.lstm_step(model.reader, h, c, model.emb[ids])
    return Rollout(out_omega, probs, logits, feats, surp, (h, c))


def window_costs(model, windows, ro):
    """Per-window task loss L(omega | w): restricted surprisal + reconstruction NLL."""
    windows = np.asarray(windows, dtype=np.int64).reshape(ro.omega.shape)
    h, c = ro.final_state
    dec = decoder_nll(model, windows, h, c).sum(axis=0)
    return ro.surprisal.sum(axis=1) + dec


def returns_to_go(ro, decoder_loss, alpha, entropy_weight):
    """Cost incurred at or after each decision, the part ``omega_i`` can influence."""
    H = bernoulli_entropy(ro.probs, ro.logits)
    later_surp = np.cumsum(ro.surprisal[:, ::-1], axis=1)[:, ::-1] - ro.surprisal
    later_ent = np.cumsum(H[:, ::-1], axis=1)[:, ::-1] - H
    fix_togo = np.cumsum(ro.omega[:, ::-1], axis=1)[:, ::-1]
    return alpha * fix_togo + later_surp + decoder_loss[:, None] - entropy_weight * later_ent


def logit_coefficients(ro, togo, baseline, entropy_weight):
    """d(surrogate)/d(logit_i) per sample, minimizing cost minus entropy bonus."""
    a = ro.probs
    score = ro.omega - a
    adv = togo - (0.0 if baseline is None else baseline)
    return score * adv + entropy_weight * ro.logits * a * (1.0 - a)


def policy_gradient(net, ro, coeffs):
    """Minibatch-mean gradient and the per-sample gradients (B, n_params)."""
    coeffs = coeffs * (np.abs(ro.logits) < LOGIT_CLAMP)
    per_w = np.einsum("bn,bnf->bf", coeffs, ro.feats)
    per_b = coeffs.sum(axis=1, keepdims=True)
    per_sample = np.concatenate([per_w, per_b], axis=1)
    grads = {"attn.w": per_w.mean(axis=0), "attn.b": per_b.mean(axis=0)}
    return grads, per_sample


class BaselineEstimator:
    """BiLSTM critic predicting the return-to-go at each position from the tokens."""

    def __init__(self, emb_dim, hidden_dim=20, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.fwd = nn.LstmCell(emb_dim, hidden_dim, rng, scale=0.1)
        self.bwd = nn.LstmCell(emb_dim, hidden_dim, rng, scale=0.1)
        self.out = nn.Dense(2 * hidden_dim, 1, rng, scale=0.1)

    @property
    def params(self):
        p = {}
        p.update(self.fwd.params("base.fwd"))
        p.update(self.bwd.params("base.bwd"))
        p.update(self.out.params("base.out"))
        return p

    def forward(self, emb, windows):
        xs = emb[np.asarray(windows).T]
        hs, tapes = nn.run_bilstm(self.fwd, self.bwd, xs)
        values = self.out.forward(hs)[..., 0].T
        return values, (hs, tapes)

    def loss_and_grads(self, emb, windows, targets):
        """Mean squared error against ``targets`` (B, N) and its gradients."""
        values, (hs, tapes) = self.forward(emb, windows)
        diff = values - targets
        n = diff.size
        loss = float(np.mean(diff ** 2))
        dv = (2.0 / n) * diff.T[..., None]
        dhs, dW, db = self.out.backward(hs, dv)
        _, (dWf, dbf), (dWb, dbb) = nn.run_bilstm_backward(self.fwd, self.bwd, tapes, dhs)
        grads = {"base.fwd.W": dWf, "base.fwd.b": dbf, "base.bwd.W": dWb, "base.bwd.b": dbb,
                 "base.out.W": dW, "base.out.b": db}
        return loss, grads


class PolicyTrainer:
    """REINFORCE for the attention net with reader and decoder frozen."""

    def __init__(self, model, net, cfg, rng, baseline=None):
        self.model = model
        self.net = net
        self.cfg = cfg
        self.rng = rng
        if baseline is None and cfg.use_baseline:
            baseline = BaselineEstimator(model.emb_dim, 20, rng)
        self.baseline = baseline
        self.opt = nn.SGDMomentum(cfg.learning_rate, cfg.momentum)
        self.base_opt = nn.SGDMomentum(cfg.baseline_lr, 0.9)

    def step(self, windows):
        cfg = self.cfg
        ro = rollout(self.model, self.net, windows, self.rng)
        dec = window_costs(self.model, windows, ro) - ro.surprisal.sum(axis=1)
        togo = returns_to_go(ro, dec, cfg.alpha, cfg.entropy_weight)
        bvals = None
        if self.baseline is not None:
            bvals, _ = self.baseline.forward(self.model.emb, windows)
        coeffs = logit_coefficients(ro, togo, bvals, cfg.entropy_weight)
        grads, _ = policy_gradient(self.net, ro, coeffs)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise nn.NumericError("non-finite policy gradient")
        nn.clip_global_norm(grads, cfg.clip)
        self.opt.update(self.net.params, grads)
        if self.baseline is not None:
            _, bgrads = self.baseline.loss_and_grads(self.model.emb, windows, togo)
            nn.clip_global_norm(bgrads, cfg.clip)
            self.base_opt.update(self.baseline.params, bgrads)
        cost = dec + ro.surprisal.sum(axis=1) + cfg.alpha * ro.omega.sum(axis=1)
        return {"mean_cost": float(cost.mean()), "fixation_rate": float(ro.omega.mean())}

    def train(self, windows, epochs):
        windows = np.asarray(windows, dtype=np.int64)
        history = []
        bs = self.cfg.batch_size
        for epoch in range(epochs):
            order = self.rng.permutation(len(windows))
            stats = [self.step(windows[order[s:s + bs]]) for s in range(0, len(windows), bs)]
            rec = {"epoch": epoch, "split": "train",
                   "mean_loss": float(np.mean([s["mean_cost"] for s in stats])),
                   "mean_fixation_rate": float(np.mean([s["fixation_rate"] for s in stats]))}
            history.append(rec)
            log.info("policy epoch %d cost %.3f rate %.3f", epoch, rec["mean_loss"],
                     rec["mean_fixation_rate"])
        return history


def mean_fixation_rate(model, net, windows, rng, samples=1):
    rates = []
    for _ in range(samples):
        ro = rollout(model, net, windows, rng)
        rates.append(ro.probs.mean())
    return float(np.mean(rates))


def simulate_fixation_probs(model, net, window, rng):
    """Sample one fixation sequence; return its per-step fixation probabilities and bits."""
    ro = rollout(model, net, np.asarray(window)[None], rng)
    return ro.probs[0], ro.omega[0]


def write_simulation_jsonl(records, path):
    """``records``: iterable of (doc, position, token, prob, sampled)."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc, pos, tok, prob, sampled in records:
            fh.write(json.dumps({"doc": doc, "position": int(pos), "token": tok,
                                 "prob": float(prob), "sampled": int(sampled)},
                                sort_keys=True) + "\n")
