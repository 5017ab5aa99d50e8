"""Post-hoc calibration metrics and reliability-diagram tables.

Scalar bins are equal-width on [0, 1], left-closed and right-open with the
last bin closed, so a confidence of exactly 1.0 lands in bin B - 1.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import binned_sums, nearest_anchor, uniform_bin_index

REPORT_SCHEMA_VERSION = 1
SIMPLEX_DIAMETER = np.sqrt(2.0)


def _nonempty(x, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError(f"{what} needs at least one sample")
    return x


def _binned_gap(stat, target, n_bins):
    """sum_j (n_j / n) |mean stat_j - mean target_j| on equal-width bins of ``stat``."""
    idx = uniform_bin_index(stat, n_bins)
    cnt, sums = binned_sums(idx, np.column_stack([stat, target]), n_bins)
    occ = cnt > 0
    gaps = np.abs(sums[occ, 0] - sums[occ, 1]) / cnt[occ]
    return float(np.sum(cnt[occ] * gaps) / len(stat))


def ece_toplabel(confidence, correct, n_bins=15):
    """Top-label ECE: binned |mean confidence - accuracy| weighted by bin mass."""
    conf = _nonempty(confidence, "ece_toplabel").ravel()
    correct = np.asarray(correct, dtype=np.float64).ravel()
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    return _binned_gap(conf, correct, n_bins)


def ece_from_probs(S, labels, n_bins=15):
    S = _nonempty(S, "ece_from_probs")
    labels = _as_labels(labels)
    return ece_toplabel(S.max(axis=1), S.argmax(axis=1) == labels, n_bins)


def _as_labels(Y):
    Y = np.asarray(Y)
    return Y.argmax(axis=1) if Y.ndim == 2 else Y.astype(int)


def _as_onehot(Y, K):
    Y = np.asarray(Y)
    if Y.ndim == 2:
        return Y.astype(np.float64)
    return np.eye(K)[Y.astype(int)]


def cwece(S, Y, n_bins=15):
    """Class-wise ECE: unweighted mean over classes of the binned |s_k - freq(Y_k = 1)|."""
    S = _nonempty(S, "cwece")
    Y = _as_onehot(Y, S.shape[1])
    return float(np.mean([_binned_gap(S[:, k], Y[:, k], n_bins) for k in range(S.shape[1])]))


def canonical_ce_binned(S, Y, anchors):
    """Canonical calibration error on nearest-anchor cells of the simplex.

    sum over cells of (mass) * ||mean S - mean y||_2, divided by sqrt(2) so
    the value lies in [0, 1].
    """
    S = _nonempty(S, "canonical_ce_binned")
    Y = _as_onehot(Y, S.shape[1])
    anchors = getattr(anchors, "anchors", anchors)
    idx = nearest_anchor(S, anchors)
    B = len(anchors)
    cnt, sums = binned_sums(idx, S - Y, B)
    occ = cnt > 0
    gaps = np.linalg.norm(sums[occ], axis=1)  # = cnt * ||mean S - mean y||
    return float(gaps.sum() / len(S) / SIMPLEX_DIAMETER)


def accuracy(S, labels):
    return float(np.mean(np.asarray(S).argmax(axis=1) == _as_labels(labels)))


def accuracy_and_delta(S, labels, baseline_accuracy):
    """Return ``(acc, acc - baseline_accuracy)``."""
    acc = accuracy(S, labels)
    return acc, acc - float(baseline_accuracy)


# ---------------------------------------------------------------- reliability

@dataclass
class ReliabilityTable:
    paradigm: str
    rows: list  # dicts: bin, lower, upper / anchor, count, confidence, frequency, gap

    @property
    def total_count(self):
        return int(sum(r["count"] for r in self.rows))

    def columns(self):
        return list(self.rows[0].keys()) if self.rows else []

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns())
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (" ".join(repr(x) for x in v) if isinstance(v, list) else v)
                                 for k, v in r.items()})

    def to_dict(self):
        return {"paradigm": self.paradigm, "rows": self.rows}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _scalar_rows(stat, target, n_bins):
    idx = uniform_bin_index(stat, n_bins)
    cnt, sums = binned_sums(idx, np.column_stack([stat, target]), n_bins)
    rows = []
    for j in range(n_bins):
        c = int(cnt[j])
        conf = sums[j, 0] / c if c else float("nan")
        freq = sums[j, 1] / c if c else float("nan")
        rows.append({"bin": j, "lower": j / n_bins, "upper": (j + 1) / n_bins, "count": c,
                     "confidence": float(conf), "frequency": float(freq),
                     "gap": float(abs(conf - freq)) if c else float("nan")})
    return rows


def reliability_export(S, Y, paradigm, n_bins=15, anchors=None):
    """Hard-binned reliability table for one paradigm.

    top-label: bins on max S with accuracy as frequency. class-wise: one
    block of bins per class (a ``class`` column is added). canonical: one row
    per nearest-anchor cell with vector confidence and frequency.
    """
    S = np.asarray(S, dtype=np.float64)
    K = S.shape[1]
    Y = _as_onehot(Y, K)
    if paradigm == "top-label":
        rows = _scalar_rows(S.max(axis=1), (S.argmax(axis=1) == Y.argmax(axis=1)).astype(float), n_bins)
    elif paradigm == "class-wise":
        rows = []
        for k in range(K):
            rows += [{"class": k, **r} for r in _scalar_rows(S[:, k], Y[:, k], n_bins)]
    elif paradigm == "canonical":
        if anchors is None:
            raise ValueError("canonical reliability export needs simplex anchors")
        anchors = getattr(anchors, "anchors", anchors)
        idx = nearest_anchor(S, anchors)
        cnt, s_sum = binned_sums(idx, S, len(anchors))
        _, y_sum = binned_sums(idx, Y, len(anchors))
        rows = []
        for j, a in enumerate(anchors):
            c = int(cnt[j])
            conf = s_sum[j] / c if c else np.full(K, np.nan)
            freq = y_sum[j] / c if c else np.full(K, np.nan)
            rows.append({"bin": j, "anchor": a.tolist(), "count": c, "confidence": conf.tolist(),
                         "frequency": freq.tolist(),
                         "gap": float(np.linalg.norm(conf - freq)) if c else float("nan")})
    else:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    return ReliabilityTable(paradigm, rows)


def reliability_svg(table, path, size=320):
    """Single-file SVG of a top-label reliability diagram (accuracy bars, diagonal)."""
    if table.paradigm != "top-label":
        raise ValueError("SVG rendering is only defined for top-label tables")
    pad = 30
    inner = size - 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>']
    for r in table.rows:
        if not r["count"]:
            continue
        x = pad + r["lower"] * inner
        w = (r["upper"] - r["lower"]) * inner
        h = r["frequency"] * inner
        parts.append(f'<rect x="{x:.2f}" y="{pad + inner - h:.2f}" width="{w:.2f}" height="{h:.2f}" '
                     'fill="steelblue" stroke="white"/>')
    parts.append(f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" '
                 'stroke="gray" stroke-dasharray="4"/>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">confidence</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------- report

@dataclass
class CalibrationReport:
    method: str
    ece: float
    cwece: float
    canonical_ce: float
    accuracy: float
    delta_acc: float
    seed: int
    config: dict = field(default_factory=dict)
    reliability: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def evaluate(S, Y, anchors, method, seed, baseline_accuracy=None, n_bins=15, config=None):
    """All metrics for one prediction set, packed into a :class:`CalibrationReport`."""
    acc = accuracy(S, Y)
    base = acc if baseline_accuracy is None else baseline_accuracy
    return CalibrationReport(
        method=method,
        ece=ece_from_probs(S, Y, n_bins),
        cwece=cwece(S, Y, n_bins),
        canonical_ce=canonical_ce_binned(S, Y, anchors),
        accuracy=acc,
        delta_acc=acc - base,
        seed=seed,
        config=config or {},
    )
