"""Eye-tracking preprocessing: fixation pooling, region measures, vertical drift correction."""

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

log = logging.getLogger(__name__)

MERGE_BELOW_MS = 80.0
DELETE_BELOW_MS = 40.0
OFF_TEXT = -1


@dataclass(frozen=True)
class RawFixation:
    x: float
    y: float
    duration: float
    trial: str
    order: int

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"fixation {self.trial}/{self.order}: duration must be positive")


@dataclass(frozen=True)
class Region:
    word: int
    line: int
    x_start: float
    x_end: float

    def contains(self, x):
        return self.x_start <= x < self.x_end


@dataclass
class RegionMeasures:
    word: int
    first_fixation_ms: float = None
    first_pass_ms: float = None
    total_time_ms: float = None
    fixated_first_pass: bool = False


def _check_order(fixations):
    for a, b in zip(fixations, fixations[1:]):
        if a.trial == b.trial and b.order <= a.order:
            raise ValueError(f"trial {a.trial}: order must increase ({a.order} then {b.order})")


def pool_fixations(fixations, char_width):
    """Merge short fixations into a larger neighbour, then drop the very short ones.

    A fixation under 80 ms is folded into the longer of its temporal
    neighbours lying within ``char_width`` horizontally (durations summed,
    the larger fixation's position kept).  Fixations still under 40 ms are
    deleted.  Every merge conserves duration.
    """
    fixations = list(fixations)
    _check_order(fixations)
    out = []
    for trial in dict.fromkeys(f.trial for f in fixations):
        fx = [f for f in fixations if f.trial == trial]
        changed = True
        while changed:
            changed = False
            for k, f in enumerate(fx):
                if f.duration >= MERGE_BELOW_MS:
                    continue
                cands = [j for j in (k - 1, k + 1) if 0 <= j < len(fx)
                         and fx[j].duration > f.duration
                         and abs(fx[j].x - f.x) <= char_width]
                if not cands:
                    continue
                j = max(cands, key=lambda j: (fx[j].duration, -j))
                fx[j] = replace(fx[j], duration=fx[j].duration + f.duration)
                del fx[k]
                changed = True
                break
        out.extend(f for f in fx if f.duration >= DELETE_BELOW_MS)
    return out


def assign_regions(fixations, regions, line_ys, line_height):
    """Region index per fixation, or OFF_TEXT when it lies on no line or word."""
    out = []
    for f in fixations:
        line = nearest_line(f.y, line_ys, line_height)
        hit = OFF_TEXT
        if line is not None:
            for k, r in enumerate(regions):
                if r.line == line and r.contains(f.x):
                    hit = k
                    break
        out.append(hit)
    return out


def compute_measures(fixations, regions, assignment):
    """First fixation, first pass, total time and first-pass flag per region.

    ``assignment`` maps each fixation (in temporal order) to a region index
    or ``OFF_TEXT``.  Regions are ordered by reading order, so "beyond the
    region" means a larger index.  A region entered only after something
    beyond it was read has no first-pass measures.  Total time is left
    undefined when no fixation landed on the region.
    """
    if len(fixations) != len(assignment):
        raise ValueError("assignment does not match fixations")
    n_off = sum(1 for a in assignment if a == OFF_TEXT)
    if n_off:
        log.warning("%d fixation(s) not assignable to a region; counted off-text", n_off)
    out = [RegionMeasures(word=r.word) for r in regions]
    total = [0.0] * len(regions)
    furthest = -1
    k = 0
    while k < len(assignment):
        a = assignment[k]
        if a == OFF_TEXT:
            k += 1
            continue
        total[a] += fixations[k].duration
        m = out[a]
        if m.first_fixation_ms is None and not m.fixated_first_pass and furthest < a:
            m.first_fixation_ms = fixations[k].duration
            m.fixated_first_pass = True
            fp = fixations[k].duration
            j = k + 1
            while j < len(assignment) and assignment[j] == a:
                fp += fixations[j].duration
                total[a] += fixations[j].duration
                j += 1
            m.first_pass_ms = fp
            furthest = max(furthest, a)
            k = j
            continue
        furthest = max(furthest, a)
        k += 1
    for m, t in zip(out, total):
        m.total_time_ms = t if t > 0 else None
    return out


# -- drift correction -------------------------------------------------------

@dataclass
class DriftCoefficients:
    calibration: float = 1.0
    off_line: float = 1.0
    line_changes: float = 1.0
    within_line: float = 1.0
    outside: float = 1.0


@dataclass
class CalibrationGrid:
    """3x3 calibration targets: ``xs`` and ``ys`` are the column and row positions."""
    xs: tuple
    ys: tuple
    measured_dy: np.ndarray = None  # (3, 3) recorded-minus-true y, rows by ys; None means zeros


@dataclass
class DriftResult:
    fixations: list
    offsets: np.ndarray
    objective: float
    initial_objective: float
    converged: bool
    sweeps: int


def nearest_line(y, line_ys, line_height):
    d = np.abs(np.asarray(line_ys) - y)
    k = int(np.argmin(d))
    return k if d[k] <= 0.5 * line_height else None


def interpolate_offset(offsets, grid, x, y):
    """Bilinear interpolation of the 3x3 offset grid, constant beyond the outer points."""
    xs, ys = np.asarray(grid.xs, float), np.asarray(grid.ys, float)
    x = min(max(x, xs[0]), xs[-1])
    y = min(max(y, ys[0]), ys[-1])
    i = min(int(np.searchsorted(xs, x, side="right")) - 1, len(xs) - 2)
    j = min(int(np.searchsorted(ys, y, side="right")) - 1, len(ys) - 2)
    tx = (x - xs[i]) / (xs[i + 1] - xs[i])
    ty = (y - ys[j]) / (ys[j + 1] - ys[j])
    o = offsets
    return ((1 - tx) * (1 - ty) * o[j, i] + tx * (1 - ty) * o[j, i + 1]
            + (1 - tx) * ty * o[j + 1, i] + tx * ty * o[j + 1, i + 1])


def _weights(fixations, grid):
    """Per-fixation bilinear weights over the 9 grid points (n, 9)."""
    W = np.zeros((len(fixations), 9))
    for n, f in enumerate(fixations):
        for k in range(9):
            e = np.zeros(9)
            e[k] = 1.0
            W[n, k] = interpolate_offset(e.reshape(3, 3), grid, f.x, f.y)
    return W


def drift_objective(offsets, fixations, grid, line_ys, line_height, coef, weights=None):
    """Cost of correcting recorded ``y`` by subtracting interpolated ``offsets``."""
    offsets = np.asarray(offsets, float).reshape(3, 3)
    W = _weights(fixations, grid) if weights is None else weights
    y = np.array([f.y for f in fixations]) - W @ offsets.ravel()
    lys = np.asarray(line_ys, float)
    measured = np.zeros((3, 3)) if grid.measured_dy is None else np.asarray(grid.measured_dy)
    cal = float(np.sum((measured - offsets) ** 2))
    dist = np.abs(y[:, None] - lys[None, :])
    near = dist.argmin(axis=1)
    near_d = dist.min(axis=1)
    on_line = near_d <= 0.5 * line_height
    n_off = int((~on_line).sum())
    changes = int(np.sum(near[1:] != near[:-1])) if len(y) > 1 else 0
    within = float(np.sum(near_d[on_line] ** 2))
    above = np.maximum(lys[0] - 0.5 * line_height - y, 0.0)
    below = np.maximum(y - lys[-1] - 0.5 * line_height, 0.0)
    outside = float(np.sum(above ** 2 + below ** 2))
    return (coef.calibration * cal + coef.off_line * n_off ** 2
            + coef.line_changes * changes ** 2 + coef.within_line * within
            + coef.outside * outside)


def drift_correct(fixations, grid, line_ys, line_height, coef=None, max_sweeps=20, tol=1e-3):
    """Find nine vertical grid offsets minimizing the drift objective.

    Coordinate descent: each sweep first tries a common shift of all nine
    offsets, then each offset alone, with a bounded golden-section search
    (±2 line heights).  Because the counting terms are piecewise constant,
    a move is accepted only if it strictly lowers the objective, and among
    equal candidates the one with smaller magnitude wins.  Horizontal
    positions are never touched.
    """
    coef = DriftCoefficients() if coef is None else coef
    for name, v in vars(coef).items():
        if v < 0:
            raise ValueError(f"coefficient {name} must be nonnegative")
    fixations = list(fixations)
    if not fixations:
        return DriftResult([], np.zeros((3, 3)), 0.0, 0.0, True, 0)
    W = _weights(fixations, grid)
    bound = 2.0 * line_height
    f = lambda o: drift_objective(o, fixations, grid, line_ys, line_height, coef, W)
    off = np.zeros(9)
    best = f(off)
    start = best
    converged = False
    sweeps = 0
    directions = [np.ones(9)] + [np.eye(9)[k] for k in range(9)]
    for sweeps in range(1, max_sweeps + 1):
        before = best
        for d in directions:
            lo = -bound - off[d > 0].min()
            hi = bound - off[d > 0].max()
            line = lambda t: f(off + t * d)
            cands = [0.0]
            res = minimize_scalar(line, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-3 * line_height})
            cands.append(float(res.x))
            # coarse scan catches plateaus the local search misses
            cands.extend(np.linspace(lo, hi, 33))
            vals = [(line(t), abs(t), t) for t in cands]
            v, _, t = min(vals)
            if v < best:
                off = off + t * d
                best = v
        if before - best <= tol:
            converged = True
            break
    if not converged:
        log.warning("drift correction stopped after %d sweeps without converging", sweeps)
    offsets = off.reshape(3, 3)
    dy = W @ off
    corrected = [replace(fx, y=fx.y - float(s)) for fx, s in zip(fixations, dy)]
    return DriftResult(corrected, offsets, best, start, converged, sweeps)


# -- CSV I/O ----------------------------------------------------------------

def read_fixations_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [RawFixation(float(r["x"]), float(r["y"]), float(r["duration"]), r["trial"],
                            int(r["order"])) for r in csv.DictReader(fh)]


def write_fixations_csv(fixations, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "x", "y", "duration", "order"])
        for f in fixations:
            w.writerow([f.trial, repr(float(f.x)), repr(float(f.y)), repr(float(f.duration)),
                        f.order])


def read_regions_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [Region(int(r["word"]), int(r["line"]), float(r["x_start"]), float(r["x_end"]))
                for r in csv.DictReader(fh)]


def write_measures_csv(measures, path, trial=""):
    def cell(v):
        return "" if v is None else repr(float(v))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "word", "first_fixation", "first_pass", "total_time", "fixated"])
        for m in measures:
            w.writerow([trial, m.word, cell(m.first_fixation_ms), cell(m.first_pass_ms),
                        cell(m.total_time_ms), int(m.fixated_first_pass)])


def regions_from_tokens(lines, char_width, x0=0.0):
    """Regions for monospaced text; punctuation tokens join the word they touch.

    ``lines`` is a list of token lists per line; tokens separated by a
    space in the rendered text.  A token made only of punctuation shares
    the region of the preceding word on its line (or the following one at
    line start).
    """
    regions, word = [], 0
    for li, toks in enumerate(lines):
        x = x0
        pending = None
        for k, tok in enumerate(toks):
            width = len(tok) * char_width
            punct = all(not ch.isalnum() for ch in tok)
            if punct and regions and regions[-1].line == li:
                prev = regions[-1]
                regions[-1] = Region(prev.word, li, prev.x_start, x + width)
            elif punct and k + 1 < len(toks):
                pending = x if pending is None else pending
            else:
                start = x if pending is None else pending
                regions.append(Region(word, li, start, x + width))
                word += 1
                pending = None
            x += width + char_width
    return regions


def synthetic_reading(n_lines, words_per_line, rng, line_height=30.0, char_width=10.0,
                      jitter=3.0):
    """Clean fixations reading left to right, one per word, with true line labels."""
    fixations, lines = [], []
    order = 0
    for li in range(n_lines):
        x = 0.0
        y0 = 100.0 + li * line_height
        for _ in range(words_per_line):
            w = int(rng.integers(3, 9)) * char_width
            fixations.append(RawFixation(x + 0.4 * w, y0 + float(rng.normal(0, jitter)),
                                         float(rng.integers(120, 320)), "t", order))
            lines.append(li)
            order += 1
            x += w + char_width
    line_ys = [100.0 + li * line_height for li in range(n_lines)]
    return fixations, lines, line_ys


def line_accuracy(fixations, true_lines, line_ys, line_height):
    hits = sum(1 for f, t in zip(fixations, true_lines)
               if nearest_line(f.y, line_ys, line_height) == t)
    return hits / max(len(fixations), 1)
