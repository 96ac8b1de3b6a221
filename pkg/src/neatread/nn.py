"""Small numpy neural substrate with hand-derived gradients.

Everything is float64. Layers keep their weights in plain ndarrays so a
model can expose them as a flat ``{name: array}`` dict that the optimizer,
the gradient checker and the checkpoint writer all share.

LSTM gate layout is fixed: the packed weight matrix ``W`` has shape
``(input_dim + hidden_dim, 4 * hidden_dim)`` and its column blocks are, in
order, input gate, forget gate, candidate, output gate.  The input rows come
first, then the recurrent rows.
"""

import base64
import json

import numpy as np

DTYPE = np.float64
CHECKPOINT_FORMAT = "neatread-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return -np.logaddexp(0.0, -x)


def softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_xent(logits, target_id):
    """Softmax cross-entropy for one logit vector.

    Returns ``(probs, loss, grad_logits)`` where ``grad_logits`` is
    ``probs - onehot(target_id)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError("softmax_xent needs a nonempty 1-d logit vector")
    if not 0 <= target_id < logits.size:
        raise ShapeError(f"target id {target_id} out of range for {logits.size} classes")
    probs = softmax(logits)
    loss = -np.log(max(probs[target_id], 1e-300))
    grad = probs.copy()
    grad[target_id] -= 1.0
    return probs, float(loss), grad


def batch_xent(logits, targets):
    """Row-wise cross-entropy; returns (losses, grad_logits) for a (B, K) batch."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    losses = -logp[rows, targets]
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return losses, grad


def uniform_init(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


def glorot_scale(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class Dense:
    """Affine map ``y = x @ W + b``."""

    def __init__(self, input_dim, output_dim, rng=None, scale=None):
        self.input_dim = input_dim
        self.output_dim = output_dim
        if rng is None:
            self.W = np.zeros((input_dim, output_dim), dtype=DTYPE)
        else:
            s = glorot_scale(input_dim, output_dim) if scale is None else scale
            self.W = uniform_init(rng, (input_dim, output_dim), s)
        self.b = np.zeros(output_dim, dtype=DTYPE)

    def params(self, prefix):
        return {prefix + ".W": self.W, prefix + ".b": self.b}

    def forward(self, x):
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"dense expects last dim {self.input_dim}, got {x.shape[-1]}")
        return x @ self.W + self.b

    def backward(self, x, dy):
        """Returns (dx, dW, db) for inputs ``x`` of shape (..., in)."""
        x2 = x.reshape(-1, self.input_dim)
        dy2 = dy.reshape(-1, self.output_dim)
        return dy @ self.W.T, x2.T @ dy2, dy2.sum(axis=0)


class LstmCell:
    def __init__(self, input_dim, hidden_dim, rng=None, scale=None):
        if input_dim < 1 or hidden_dim < 1:
            raise ShapeError("LSTM dimensions must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        shape = (input_dim + hidden_dim, 4 * hidden_dim)
        if rng is None:
            self.W = np.zeros(shape, dtype=DTYPE)
        else:
            s = 1.0 / np.sqrt(hidden_dim) if scale is None else scale
            self.W = uniform_init(rng, shape, s)
        self.b = np.zeros(4 * hidden_dim, dtype=DTYPE)

    def params(self, prefix):
        return {prefix + ".W": self.W, prefix + ".b": self.b}

    def zero_state(self, batch):
        H = self.hidden_dim
        return np.zeros((batch, H), dtype=DTYPE), np.zeros((batch, H), dtype=DTYPE)


def lstm_step(cell, prev_h, prev_c, x):
    """One LSTM step. Accepts single vectors or (B, dim) batches.

    Returns ``(h, c, cache)``; the cache feeds :func:`lstm_step_backward`.
    """
    x = np.asarray(x, dtype=DTYPE)
    prev_h = np.asarray(prev_h, dtype=DTYPE)
    prev_c = np.asarray(prev_c, dtype=DTYPE)
    if x.shape[-1] != cell.input_dim:
        raise ShapeError(f"LSTM input has {x.shape[-1]} entries, expected {cell.input_dim}")
    if prev_h.shape[-1] != cell.hidden_dim or prev_c.shape[-1] != cell.hidden_dim:
        raise ShapeError(f"LSTM state must have {cell.hidden_dim} entries")
    H = cell.hidden_dim
    xh = np.concatenate([x, prev_h], axis=-1)
    z = xh @ cell.W + cell.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * prev_c + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, prev_c, i, f, g, o, tc)


def lstm_step_backward(cell, dh, dc, cache):
    """Backprop one step. Returns (dx, dprev_h, dprev_c, dW, db)."""
    xh, prev_c, i, f, g, o, tc = cache
    dc_total = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc_total * g * i * (1.0 - i),
        dc_total * prev_c * f * (1.0 - f),
        dc_total * i * (1.0 - g * g),
        dh * tc * o * (1.0 - o),
    ], axis=-1)
    dxh = dz @ cell.W.T
    xh2 = xh.reshape(-1, xh.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    dW = xh2.T @ dz2
    db = dz2.sum(axis=0)
    D = cell.input_dim
    return dxh[..., :D], dxh[..., D:], dc_total * f, dW, db


def run_lstm(cell, xs, h0=None, c0=None, mask=None, reverse=False):
    """Run a cell over a (T, B, D) sequence.

    ``mask`` is an optional (T, B) 0/1 array; masked steps carry the state
    through unchanged, which lets right-padded batches run in either
    direction.  Outputs are indexed by original position even when
    ``reverse`` is set.  Returns ``(hs, (h_last, c_last), tape)``.
    """
    T, B = xs.shape[0], xs.shape[1]
    h = np.zeros((B, cell.hidden_dim), dtype=DTYPE) if h0 is None else h0
    c = np.zeros((B, cell.hidden_dim), dtype=DTYPE) if c0 is None else c0
    hs = np.empty((T, B, cell.hidden_dim), dtype=DTYPE)
    caches = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h_new, c_new, cache = lstm_step(cell, h, c, xs[t])
        if mask is not None:
            m = mask[t][:, None]
            h_new = m * h_new + (1.0 - m) * h
            c_new = m * c_new + (1.0 - m) * c
        caches[t] = cache
        h, c = h_new, c_new
        hs[t] = h
    return hs, (h, c), (caches, mask, reverse)


def run_lstm_backward(cell, tape, dhs, dh_last=None, dc_last=None):
    """Backprop through :func:`run_lstm`.

    ``dhs`` holds loss gradients w.r.t. every emitted state.  Returns
    ``(dxs, dh0, dc0, dW, db)``.
    """
    caches, mask, reverse = tape
    T = len(caches)
    B = dhs.shape[1]
    H = cell.hidden_dim
    dh = np.zeros((B, H), dtype=DTYPE) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, H), dtype=DTYPE) if dc_last is None else dc_last.copy()
    dxs = np.zeros((T, B, cell.input_dim), dtype=DTYPE)
    dW = np.zeros_like(cell.W)
    db = np.zeros_like(cell.b)
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        dh = dh + dhs[t]
        if mask is not None:
            m = mask[t][:, None]
            dh_step, dc_step = m * dh, m * dc
            dh_pass, dc_pass = (1.0 - m) * dh, (1.0 - m) * dc
        else:
            dh_step, dc_step = dh, dc
            dh_pass = dc_pass = 0.0
        dx, dhp, dcp, dWt, dbt = lstm_step_backward(cell, dh_step, dc_step, caches[t])
        dxs[t] = dx
        dW += dWt
        db += dbt
        dh = dhp + dh_pass
        dc = dcp + dc_pass
    return dxs, dh, dc, dW, db


def run_bilstm(fwd, bwd, xs, mask=None):
    """Forward and backward passes over the same sequence, states concatenated."""
    hf, _, tape_f = run_lstm(fwd, xs, mask=mask)
    hb, _, tape_b = run_lstm(bwd, xs, mask=mask, reverse=True)
    return np.concatenate([hf, hb], axis=-1), (tape_f, tape_b)


def run_bilstm_backward(fwd, bwd, tapes, dhs):
    H = fwd.hidden_dim
    dxf, _, _, dWf, dbf = run_lstm_backward(fwd, tapes[0], dhs[..., :H])
    dxb, _, _, dWb, dbb = run_lstm_backward(bwd, tapes[1], dhs[..., H:])
    return dxf + dxb, (dWf, dbf), (dWb, dbb)


class SGDMomentum:
    """``v <- momentum * v + g``; ``p <- p - lr * v``, in place."""

    def __init__(self, learning_rate, momentum=0.0):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {}

    def update(self, params, grads):
        for name, g in grads.items():
            p = params[name]
            if p.shape != g.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v += g
            p -= self.learning_rate * v
        return params


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def finite_diff_check(loss_fn, params, epsilon=1e-5, n_samples=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed
    like ``params``.  Parameters are perturbed in place and restored.  With
    ``n_samples`` set, that many coordinates per array are checked at
    random; otherwise every coordinate is.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, p in params.items():
        if name not in grads:
            continue
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        g = grads[name].reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + epsilon
            lp, _ = loss_fn(params)
            flat[j] = old - epsilon
            lm, _ = loss_fn(params)
            flat[j] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{j}]")
            cd = (lp - lm) / (2.0 * epsilon)
            err = abs(g[j] - cd) / max(abs(g[j]), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, groups, meta=None):
    """Write ``{group: {name: array}}`` as JSON with base64 little-endian f64 payloads."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "meta": meta or {}, "groups": {}}
    for gname in sorted(groups):
        entries = {}
        for name in sorted(groups[gname]):
            arr = np.ascontiguousarray(groups[gname][name], dtype="<f8")
            entries[name] = {"shape": list(arr.shape),
                             "data": base64.b64encode(arr.tobytes()).decode("ascii")}
        doc["groups"][gname] = entries
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (groups, meta)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a neatread checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    groups = {}
    for gname, entries in doc["groups"].items():
        groups[gname] = {}
        for name, e in entries.items():
            raw = base64.b64decode(e["data"])
            groups[gname][name] = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(e["shape"])
    return groups, doc.get("meta", {})


def assign_params(target, source):
    """Copy arrays from ``source`` into the same-named arrays of ``target``."""
    for name, arr in source.items():
        if name not in target:
            raise KeyError(f"unknown parameter {name}")
        if target[name].shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape}, model {target[name].shape}")
        target[name][...] = arr
