"""Evaluation of simulated fixations against gold eye-movement data."""

import csv
import html
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq

from .nn import sigmoid

UNIVERSAL_TAGS = ("ADJ", "ADP", "ADV", "CONJ", "DET", "NOUN", "NUM", "PRON", "PRT", "VERB", "X")
CONTENT_TAGS = ("NOUN", "ADJ", "ADV", "VERB")
FUNCTION_TAGS = ("DET", "ADP", "CONJ", "PRT")

# reference figures for the full Dundee / DeepMind setting; not reproducible at desk scale
REFERENCE = {
    "perplexity": {"neat": 1.84, "random": 1.96, "per_word_rate": 1.68},
    "disc_eval": {"neat": (63.7, 70.4, 53.0), "random": (52.6, 62.1, 37.9),
                  "word_length": (68.4, 77.1, 49.0)},
    "conditional_ratio": {"human": 0.85, "neat": 0.81, "frequency": 0.91},
    "dev_fixation_rate": 0.621,
}

PROB_EPS = 1e-9


class EvaluationError(ValueError):
    pass


@dataclass
class MetricReport:
    accuracy: float
    f_fix: float
    f_skip: float
    fixation_rate: float
    perplexity: float = float("nan")

    def to_dict(self):
        # NaN (no probabilities given) becomes null so the JSON stays strict
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in asdict(self).items()}


def exclusion_mask(positions, window=50, edge=3, oov=None):
    """True for tokens kept in evaluation: not within ``edge`` of a window border, not OOV.

    ``positions`` are 0-based offsets within the window.
    """
    positions = np.asarray(positions)
    keep = (positions >= edge) & (positions < window - edge)
    if oov is not None:
        keep &= ~np.asarray(oov, dtype=bool)
    return keep


def fixation_perplexity(probs, gold):
    """exp of the mean Bernoulli NLL of gold fixation bits."""
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    gold = np.asarray(gold, dtype=np.float64)
    if probs.size == 0 or probs.shape != gold.shape:
        raise EvaluationError("perplexity needs nonempty aligned probabilities and gold bits")
    ll = gold * np.log(probs) + (1 - gold) * np.log1p(-probs)
    return float(np.exp(-ll.mean()))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def rescale_probs(probs, target_rate):
    """Shift every probability by a common constant in logit space so the mean hits ``target_rate``.

    The shift is monotone, so rank order survives.  All-equal inputs map to
    ``target_rate`` exactly.
    """
    if not 0.0 < target_rate < 1.0:
        raise EvaluationError("target rate must lie in (0, 1)")
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    if p.size == 0:
        raise EvaluationError("no probabilities to rescale")
    lg = _logit(p)
    if np.all(lg == lg[0]):
        return np.full(p.shape, float(target_rate))
    gap = lambda c: sigmoid(lg + c).mean() - target_rate
    lo, hi = -80.0, 80.0
    if gap(0.0) == 0.0:
        return sigmoid(lg)
    shift = brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return sigmoid(lg + shift)


def rescale_threshold(probs, target_rate):
    """Binary predictions: fixate where the rescaled probability is >= 0.5.

    Ties at exactly 0.5 count as fixations, so degenerate all-equal input
    fixates every token when the target is at least 0.5 and none otherwise.
    """
    return (rescale_probs(probs, target_rate) >= 0.5).astype(np.int64)


def _f1(tp, fp, fn):
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def fixation_metrics(pred, gold, probs=None):
    """Accuracy and class-wise F1 (percent) for fixation vs skip."""
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.size == 0 or pred.shape != gold.shape:
        raise EvaluationError("metrics need nonempty aligned predictions and gold")
    tp = int(((pred == 1) & (gold == 1)).sum())
    tn = int(((pred == 0) & (gold == 0)).sum())
    fp = int(((pred == 1) & (gold == 0)).sum())
    fn = int(((pred == 0) & (gold == 1)).sum())
    ppl = fixation_perplexity(probs, gold) if probs is not None else float("nan")
    return MetricReport(accuracy=100.0 * (tp + tn) / pred.size,
                        f_fix=100.0 * _f1(tp, fp, fn),
                        f_skip=100.0 * _f1(tn, fn, fp),
                        fixation_rate=float(pred.mean()),
                        perplexity=ppl)


class ThresholdPredictor:
    """Fixate iff score >= threshold (``direction='high'``) or <= threshold (``'low'``)."""

    def __init__(self, threshold, direction):
        self.threshold = threshold
        self.direction = direction

    def predict(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        if self.direction == "high":
            return (s >= self.threshold).astype(np.int64)
        return (s <= self.threshold).astype(np.int64)


def threshold_baseline(dev_scores, target_rate, direction="high"):
    """Pick the cut on dev scores whose fixation rate is closest to ``target_rate``.

    ``direction='high'`` fixates large scores (word length, surprisal);
    ``'low'`` fixates small scores (log frequency: frequent words are
    skipped).  Ties in rate distance go to the higher rate.
    """
    if direction not in ("high", "low"):
        raise ValueError("direction must be 'high' or 'low'")
    s = np.asarray(dev_scores, dtype=np.float64)
    signed = s if direction == "high" else -s
    cuts = np.unique(signed)
    best, best_key = None, None
    for c in list(cuts) + [np.inf]:
        rate = float((signed >= c).mean())
        key = (abs(rate - target_rate), -rate)
        if best_key is None or key < best_key:
            best, best_key = c, key
    threshold = best if direction == "high" else -best
    return ThresholdPredictor(threshold, direction)


def random_attention(n, rate, rng):
    return (rng.random(n) < rate).astype(np.int64)


def conditional_ratio(sequences):
    """P(omega_i = 1 | omega_{i-1} = 1) / P(omega_i = 1), from pooled bigram counts."""
    after_fix = fix_after_fix = second = n = 0
    for seq in sequences:
        s = np.asarray(seq, dtype=np.int64)
        if len(s) < 2:
            continue
        prev, cur = s[:-1], s[1:]
        after_fix += int(prev.sum())
        fix_after_fix += int((prev & cur).sum())
        second += int(cur.sum())
        n += len(cur)
    if n == 0 or after_fix == 0 or second == 0:
        raise EvaluationError("no qualifying bigrams for the conditional ratio")
    return (fix_after_fix / after_fix) / (second / n)


def pos_fixation_table(probs, tags):
    """Mean fixation probability and count per universal tag; '.' omitted, unknown tags as X."""
    acc = {}
    for p, t in zip(probs, tags):
        if t == ".":
            continue
        t = t if t in UNIVERSAL_TAGS else "X"
        s, c = acc.get(t, (0.0, 0))
        acc[t] = (s + float(p), c + 1)
    return {t: {"mean": s / c, "count": c} for t, (s, c) in sorted(acc.items())}


# -- heatmaps ---------------------------------------------------------------

BLUE = (0.0, 0.2, 1.0)
RED = (1.0, 0.2, 0.0)
EXCLUDED = (0.99, 0.99, 0.99)


def heat_color(prob, lower=0.0):
    """Blue (low) to red (high) through magenta; ``lower`` clamps the blue end."""
    x = (float(prob) - lower) / (1.0 - lower)
    x = min(max(x, 0.0), 1.0)
    return (min(1.0, 2 * x), 0.2, min(1.0, 2 - 2 * x))


def _css(rgb):
    return "rgb({},{},{})".format(*(int(round(255 * v)) for v in rgb))


def render_heatmap(tokens, probs, excluded=None, lower=0.0, title="fixation probabilities"):
    excluded = excluded if excluded is not None else [False] * len(tokens)
    spans = []
    for tok, p, ex in zip(tokens, probs, excluded):
        color = EXCLUDED if ex else heat_color(p, lower)
        tip = "excluded" if ex else f"{float(p):.3f}"
        spans.append(f'<span style="background:{_css(color)}" title="{tip}">'
                     f"{html.escape(tok)}</span>")
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            f"<title>{html.escape(title)}</title>\n"
            "<style>body{font-family:serif;line-height:1.9}"
            "span{padding:1px 3px;margin:1px}</style></head>\n<body>\n"
            + " ".join(spans) + "\n</body></html>\n")


def emit_heatmap(tokens, probs, path, excluded=None, lower=0.0):
    """Write a self-contained HTML heatmap; ``lower=0.3`` gives the QA-model variant."""
    if len(tokens) != len(probs):
        raise EvaluationError("tokens and probabilities are not aligned")
    doc = render_heatmap(tokens, probs, excluded, lower)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc)
    return path


# -- analysis tables --------------------------------------------------------

ANALYSIS_COLUMNS = ["doc", "position", "token", "LogWordFreq", "WordLength", "IsNamedEntity",
                    "IsCorrectAnswer", "PositionText", "SurprisalFull", "SurprisalRestricted",
                    "Condition", "FixationProb", "FirstFixation", "FirstPass", "TotalTime",
                    "Fixated"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def export_analysis_table(rows, path):
    """Write per-token predictors to CSV.

    ``rows`` is a list of dicts keyed by :data:`ANALYSIS_COLUMNS`; missing
    gold measures become empty cells.  Condition codes must be -0.5 or
    +0.5, and ``WordLength`` must match the surface token.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANALYSIS_COLUMNS)
        for k, row in enumerate(rows):
            tok = row.get("token")
            if tok is None or row.get("doc") is None or row.get("position") is None:
                raise EvaluationError(f"row {k}: missing doc/position/token")
            if row.get("WordLength") is not None and row["WordLength"] != len(tok):
                raise EvaluationError(f"row {k}: WordLength {row['WordLength']} != len({tok!r})")
            cond = row.get("Condition")
            if cond is not None and cond not in (-0.5, 0.5):
                raise EvaluationError(f"row {k}: condition code {cond} not in {{-0.5, +0.5}}")
            w.writerow([_fmt(row.get(c)) for c in ANALYSIS_COLUMNS])
    return path


def analysis_rows(docs, tokens, positions, vocab=None, full_surprisal=None,
                  restricted_surprisal=None, fixation_probs=None, condition=None,
                  gold=None, named_entity=None, correct_answer=None):
    """Assemble aligned per-token columns into rows for :func:`export_analysis_table`.

    Every provided sequence must match ``tokens`` in length.
    """
    n = len(tokens)
    cols = {"doc": docs, "position": positions, "SurprisalFull": full_surprisal,
            "SurprisalRestricted": restricted_surprisal, "FixationProb": fixation_probs,
            "IsNamedEntity": named_entity, "IsCorrectAnswer": correct_answer}
    for name, col in cols.items():
        if col is not None and len(col) != n:
            raise EvaluationError(f"column {name} has {len(col)} entries for {n} tokens; "
                                  f"first offending row {min(len(col), n)}")
    rows = []
    for k in range(n):
        tok = tokens[k]
        row = {"doc": docs[k], "position": int(positions[k]), "token": tok,
               "WordLength": len(tok), "PositionText": int(positions[k]) + 1}
        if vocab is not None:
            row["LogWordFreq"] = vocab.log_frequency(tok)
        for name in ("SurprisalFull", "SurprisalRestricted", "FixationProb",
                     "IsNamedEntity", "IsCorrectAnswer"):
            if cols[name] is not None:
                row[name] = cols[name][k]
        if condition is not None:
            row["Condition"] = condition if np.isscalar(condition) else condition[k]
        if gold is not None:
            g = gold.get((docs[k], int(positions[k])))
            if g is not None:
                row.update(g)
        rows.append(row)
    return rows


def read_gold_csv(path):
    """Gold fixations CSV: doc,position,token,fixated[,first_fixation,first_pass,total_time,excluded]."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append({"doc": row["doc"], "position": int(row["position"]),
                        "token": row["token"], "fixated": int(row["fixated"]),
                        "excluded": int(row.get("excluded") or 0)})
    return out


def evaluate_predictions(gold_rows, model_probs, dev_docs, vocab_counts=None, rng=None,
                         window=50, edge=3, surprisal=None):
    """Run the Study-1 evaluation suite over aligned gold rows and model probabilities.

    Dev documents set the target fixation rate and baseline thresholds;
    every metric is reported on the remaining (test) documents after the
    same exclusions are applied to model and gold.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    probs = np.asarray(model_probs, dtype=np.float64)
    if len(probs) != len(gold_rows):
        raise EvaluationError(f"{len(probs)} model probabilities for {len(gold_rows)} gold rows")
    pos = np.array([r["position"] % window for r in gold_rows])
    oov = np.array([bool(r.get("excluded")) for r in gold_rows])
    keep = exclusion_mask(pos, window, edge, oov)
    is_dev = np.array([r["doc"] in dev_docs for r in gold_rows])
    gold = np.array([r["fixated"] for r in gold_rows])
    tokens = [r["token"] for r in gold_rows]
    dev, test = keep & is_dev, keep & ~is_dev
    if not dev.any() or not test.any():
        raise EvaluationError("need kept tokens in both dev and test documents")
    target = float(gold[dev].mean())
    target = min(max(target, 1e-6), 1 - 1e-6)
    report = {"target_rate": target, "n_test": int(test.sum())}
    pred = rescale_threshold(probs[test], target)
    report["neat"] = fixation_metrics(pred, gold[test], probs[test]).to_dict()
    rnd = random_attention(int(test.sum()), target, rng)
    report["random"] = fixation_metrics(rnd, gold[test], np.full(int(test.sum()), target)).to_dict()
    lengths = np.array([len(t) for t in tokens], dtype=np.float64)
    lp = threshold_baseline(lengths[dev], target, "high")
    report["word_length"] = fixation_metrics(lp.predict(lengths[test]), gold[test]).to_dict()
    if vocab_counts is not None:
        total = sum(vocab_counts.values())
        lf = np.array([math.log(max(vocab_counts.get(t, 0), 0.5) / total) for t in tokens])
        fp = threshold_baseline(lf[dev], target, "low")
        report["word_frequency"] = fixation_metrics(fp.predict(lf[test]), gold[test]).to_dict()
    if surprisal is not None:
        surprisal = np.asarray(surprisal, dtype=np.float64)
        sp = threshold_baseline(surprisal[dev], target, "high")
        report["full_surprisal"] = fixation_metrics(sp.predict(surprisal[test]),
                                                    gold[test]).to_dict()
    return report
