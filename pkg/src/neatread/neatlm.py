"""Reader/decoder language model over partially visible input.

The reader is an LSTM that sees the embedding of a token when it is
fixated and a dedicated SKIPPED embedding otherwise.  At every step it
predicts the next token from its previous state.  The decoder is a second
LSTM initialized with the reader's final hidden and cell state and
teacher-forced on the gold prefix (starting from the BOS embedding) to
reconstruct the window.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


class Study1Model:
    def __init__(self, vocab_size, emb_dim=16, hidden_dim=32, skip_id=1, bos_id=2,
                 rng=None, init_scale=0.1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.skip_id = skip_id
        self.bos_id = bos_id
        self.emb = nn.uniform_init(rng, (vocab_size, emb_dim), init_scale)
        self.reader = nn.LstmCell(emb_dim, hidden_dim, rng, scale=init_scale)
        self.reader_out = nn.Dense(hidden_dim, vocab_size, rng, scale=init_scale)
        self.decoder = nn.LstmCell(emb_dim, hidden_dim, rng, scale=init_scale)
        self.decoder_out = nn.Dense(hidden_dim, vocab_size, rng, scale=init_scale)
        self.embeddings_trainable = True

    @property
    def params(self):
        p = {"emb": self.emb}
        p.update(self.reader.params("reader"))
        p.update(self.reader_out.params("reader_out"))
        p.update(self.decoder.params("decoder"))
        p.update(self.decoder_out.params("decoder_out"))
        return p

    def config(self):
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim,
                "hidden_dim": self.hidden_dim, "skip_id": self.skip_id, "bos_id": self.bos_id}

    def visible_ids(self, ids, omega):
        return np.where(np.asarray(omega) > 0, ids, self.skip_id)


@dataclass
class ReaderTrace:
    """Reader states ``h_0..h_N`` and next-word distributions.

    ``probs[i]`` is the reader's distribution for token ``i`` computed from
    ``states[i]``, i.e. from the visible prefix before token ``i``.
    Arrays carry a leading time axis and a batch axis.
    """
    states: np.ndarray
    cells: np.ndarray
    probs: np.ndarray
    omega: np.ndarray


def _as_batch(windows, omega):
    windows = np.asarray(windows, dtype=np.int64)
    omega = np.asarray(omega, dtype=np.float64)
    single = windows.ndim == 1
    if single:
        windows, omega = windows[None], omega[None]
    if windows.shape != omega.shape:
        raise nn.ShapeError(f"fixation sequence shape {omega.shape} != window shape {windows.shape}")
    return windows, omega, single


def _reader_forward(model, windows, omega):
    B, N = windows.shape
    xs = model.emb[model.visible_ids(windows, omega).T]
    hs_run, (hN, cN), tape = nn.run_lstm(model.reader, xs)
    states = np.concatenate([np.zeros((1, B, model.hidden_dim)), hs_run], axis=0)
    logits = model.reader_out.forward(states[:N])
    return states, (hN, cN), logits, tape, xs


def read_window(model, window, omega):
    windows, omega, _ = _as_batch(window, omega)
    states, _, logits, tape, _ = _reader_forward(model, windows, omega)
    cells = np.stack([np.zeros_like(states[0])] + [c[1] for c in tape[0]])
    return ReaderTrace(states, cells, nn.softmax(logits), omega.T.copy())


def restricted_surprisal(trace, window):
    """Per-token ``-log P_R(w_i | visible prefix)`` in nats, shape (N, B)."""
    window = np.asarray(window, dtype=np.int64)
    if window.ndim == 1:
        window = window[None]
    N, B = window.shape[1], window.shape[0]
    p = trace.probs[np.arange(N)[:, None], np.arange(B)[None, :], window.T]
    return -np.log(np.maximum(p, 1e-300))


def decoder_nll(model, windows, hN, cN, want_tape=False):
    """Per-position reconstruction NLL (N, B) given the reader's final state."""
    B, N = windows.shape
    prev = np.concatenate([np.full((B, 1), model.bos_id), windows[:, :-1]], axis=1)
    xs = model.emb[prev.T]
    ds, _, tape = nn.run_lstm(model.decoder, xs, h0=hN, c0=cN)
    logits = model.decoder_out.forward(ds)
    logp = nn.log_softmax(logits)
    nll = -np.take_along_axis(logp, windows.T[..., None], axis=-1)[..., 0]
    if want_tape:
        return nll, (prev, ds, logp, tape)
    return nll


def sequence_loss(model, windows, omega, want_grad=False):
    """Reader surprisal plus reconstruction NLL, summed per window.

    Returns per-window losses (B,), or ``(losses, grads)`` with gradients
    of the batch sum when ``want_grad`` is set.
    """
    windows, omega, single = _as_batch(windows, omega)
    B, N = windows.shape
    states, (hN, cN), r_logits, r_tape, _ = _reader_forward(model, windows, omega)
    r_logp = nn.log_softmax(r_logits)
    r_nll = -np.take_along_axis(r_logp, windows.T[..., None], axis=-1)[..., 0]
    d_nll, (prev, ds, d_logp, d_tape) = decoder_nll(model, windows, hN, cN, want_tape=True)
    losses = r_nll.sum(axis=0) + d_nll.sum(axis=0)
    if not want_grad:
        return losses[0] if single else losses

    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    onehot = np.zeros_like(d_logp)
    np.put_along_axis(onehot, windows.T[..., None], 1.0, axis=-1)

    dlog = np.exp(d_logp) - onehot
    dds, dW, db = model.decoder_out.backward(ds, dlog)
    grads["decoder_out.W"] += dW
    grads["decoder_out.b"] += db
    dxs, dhN, dcN, dW, db = nn.run_lstm_backward(model.decoder, d_tape, dds)
    grads["decoder.W"] += dW
    grads["decoder.b"] += db
    np.add.at(grads["emb"], prev.T, dxs)

    rlog = np.exp(r_logp) - onehot
    dstates, dW, db = model.reader_out.backward(states[:N], rlog)
    grads["reader_out.W"] += dW
    grads["reader_out.b"] += db
    dhs_run = np.zeros((N, B, model.hidden_dim))
    dhs_run[:N - 1] = dstates[1:]
    dxs, _, _, dW, db = nn.run_lstm_backward(model.reader, r_tape, dhs_run, dhN, dcN)
    grads["reader.W"] += dW
    grads["reader.b"] += db
    np.add.at(grads["emb"], model.visible_ids(windows, omega).T, dxs)
    if not model.embeddings_trainable:
        del grads["emb"]
    return losses, grads


def train_phase1(model, windows, p, epochs, rng, learning_rate=0.5, momentum=0.9,
                 batch_size=32, clip=5.0, heldout=None, log_path=None):
    """Minimize expected loss under i.i.d. Bernoulli(p) skip noise.

    A fresh fixation sequence is drawn for every window in every epoch.
    Gradients are averaged per token.  Embeddings are frozen on return.
    Returns the per-epoch history.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("skip-noise rate p must lie in (0, 1]")
    windows = np.asarray(windows, dtype=np.int64)
    M, N = windows.shape
    opt = nn.SGDMomentum(learning_rate, momentum)
    model.embeddings_trainable = True
    history = []
    held_omega = None
    if heldout is not None:
        heldout = np.asarray(heldout, dtype=np.int64)
        held_omega = (rng.random(heldout.shape) < p).astype(np.float64)
    for epoch in range(epochs):
        order = rng.permutation(M)
        total, ones = 0.0, 0.0
        for start in range(0, M, batch_size):
            batch = windows[order[start:start + batch_size]]
            omega = (rng.random(batch.shape) < p).astype(np.float64)
            losses, grads = sequence_loss(model, batch, omega, want_grad=True)
            if not np.all(np.isfinite(losses)):
                raise TrainingDivergence(
                    f"non-finite loss in epoch {epoch} at batch offset {start}; "
                    f"max |param| = {max(float(np.abs(v).max()) for v in model.params.values()):.3g}")
            scale = 1.0 / (len(batch) * N)
            for g in grads.values():
                g *= scale
            nn.clip_global_norm(grads, clip)
            opt.update(model.params, grads)
            total += float(losses.sum())
            ones += float(omega.sum())
        rec = {"epoch": epoch, "split": "train", "mean_loss": total / M,
               "mean_fixation_rate": ones / (M * N)}
        history.append(rec)
        if heldout is not None:
            losses = sequence_loss(model, heldout, held_omega)
            history.append({"epoch": epoch, "split": "heldout",
                            "mean_loss": float(np.mean(losses)),
                            "mean_fixation_rate": float(held_omega.mean())})
        log.info("phase1 epoch %d loss %.3f", epoch, rec["mean_loss"])
    model.embeddings_trainable = False
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return history

