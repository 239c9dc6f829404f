"""Evaluation metrics, the abstention gate and OOD energy scores.

Metrics that are undefined for the given input (an AUC with one class
present, an accuracy over an empty set) are returned as ``None`` rather
than 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import rankdata

from .data import Label, LabelMatrix
from .errors import ShapeError

ABSTAIN = -1
DEFAULT_TAU = 0.4


class Decision(NamedTuple):
    """Gate output.

    Attributes:
        value: [N, C] int8 in {1, 0, -1}; -1 means abstain.
        prob: [N, C] BCE-head probabilities.
        u: [N, C] evidential uncertainty.
    """

    value: np.ndarray
    prob: np.ndarray
    u: np.ndarray


def abstention_gate(prob, u, tau=DEFAULT_TAU):
    """Abstain where ``u > tau``; otherwise predict ``prob > 0.5``.

    The boundary is strict: ``u == tau`` does not abstain.
    """
    prob = np.asarray(prob, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if prob.shape != u.shape:
        raise ShapeError("abstention_gate", prob.shape, u.shape)
    value = np.where(u > tau, ABSTAIN, (prob > 0.5).astype(np.int8)).astype(np.int8)
    return Decision(value, prob, u)


def _codes(labels):
    return labels.codes if isinstance(labels, LabelMatrix) else np.asarray(labels)


def _values(decisions):
    return decisions.value if isinstance(decisions, Decision) else np.asarray(decisions)


# ------------------------------------------------------------------ AUC


def per_class_auc(scores, labels):
    """Rank-statistic AUC over definite entries.

    ``labels`` may contain UNC/BLANK codes; they are dropped. Ties between
    a positive and a negative count one half. Returns None unless both a
    positive and a negative remain.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    codes = np.asarray(labels).ravel()
    if scores.shape != codes.shape:
        raise ShapeError("per_class_auc", scores.shape, codes.shape)
    keep = codes >= 0
    s, y = scores[keep], codes[keep] == Label.POS
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    # Mann-Whitney U of the positives; exact in binary for half-integer ranks
    u_stat = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def class_aucs(scores, labels):
    scores = np.asarray(scores)
    codes = _codes(labels)
    if scores.shape != codes.shape:
        raise ShapeError("class_aucs", scores.shape, codes.shape)
    return [per_class_auc(scores[:, c], codes[:, c]) for c in range(codes.shape[1])]


def mean_auc(aucs):
    vals = [a for a in aucs if a is not None]
    return float(np.mean(vals)) if vals else None


def micro_auc(scores, labels):
    """AUC over every definite (sample, class) entry pooled together."""
    scores = np.asarray(scores)
    codes = _codes(labels)
    if scores.shape != codes.shape:
        raise ShapeError("micro_auc", scores.shape, codes.shape)
    return per_class_auc(scores.ravel(), codes.ravel())


# ------------------------------------------------------------------ selective


class SelectiveResult(NamedTuple):
    accuracy: float | None
    coverage: float


def selective_accuracy(decisions, labels, include_uncertain=False):
    """Accuracy over confident predictions on definite entries.

    Coverage is the confident share of definite entries. With
    ``include_uncertain`` a confident prediction on a UNC entry also
    counts, always as an error.
    """
    d = _values(decisions)
    codes = _codes(labels)
    if d.shape != codes.shape:
        raise ShapeError("selective_accuracy", d.shape, codes.shape)
    definite = codes >= 0
    confident = d != ABSTAIN
    n_def = int(definite.sum())
    sel = confident & definite
    correct = int((d[sel] == codes[sel]).sum())
    n_sel = int(sel.sum())
    if include_uncertain:
        n_sel += int((confident & (codes == Label.UNC)).sum())
    coverage = float(sel.sum() / n_def) if n_def else 0.0
    return SelectiveResult(correct / n_sel if n_sel else None, coverage)


def plain_accuracy(prob, labels):
    """Accuracy of ``prob > 0.5`` over all definite entries, without abstention."""
    codes = _codes(labels)
    definite = codes >= 0
    if not definite.any():
        return None
    pred = (np.asarray(prob) > 0.5).astype(np.int8)
    return float((pred[definite] == codes[definite]).mean())


def uncertainty_recall(decisions, labels):
    """Share of UNC ground-truth entries the gate abstained on."""
    d = _values(decisions)
    codes = _codes(labels)
    if d.shape != codes.shape:
        raise ShapeError("uncertainty_recall", d.shape, codes.shape)
    unc = codes == Label.UNC
    if not unc.any():
        return None
    return float((d[unc] == ABSTAIN).sum() / unc.sum())


def binary_confusion(decisions, labels):
    """Per-class ``(TP, FP, TN, FN)`` over definite, non-abstained entries."""
    d = _values(decisions)
    codes = _codes(labels)
    if d.shape != codes.shape:
        raise ShapeError("binary_confusion", d.shape, codes.shape)
    keep = (codes >= 0) & (d != ABSTAIN)
    pred, true = d == 1, codes == Label.POS
    out = np.stack(
        [
            (keep & pred & true).sum(axis=0),
            (keep & pred & ~true).sum(axis=0),
            (keep & ~pred & ~true).sum(axis=0),
            (keep & ~pred & true).sum(axis=0),
        ],
        axis=1,
    )
    return out.astype(np.int64)


# ------------------------------------------------------------------ energy


def energy_score(logits):
    """Free energy ``-log sum_c exp(z_c)`` per sample (higher = less confident)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("energy_score", logits.shape, ("N", "C"))
    return -logsumexp(logits, axis=1)


def energy_summary(energy):
    e = np.asarray(energy, dtype=np.float64)
    if e.size == 0:
        return {"n": 0, "mean": None, "p05": None, "p50": None, "p95": None}
    p05, p50, p95 = np.percentile(e, [5, 50, 95])
    return {"n": int(e.size), "mean": float(e.mean()), "p05": float(p05), "p50": float(p50), "p95": float(p95)}


def energy_histogram(energy, bins=30, value_range=None):
    """``(bin_centers, counts)``; counts sum to the number of samples."""
    counts, edges = np.histogram(np.asarray(energy, dtype=np.float64), bins=bins, range=value_range)
    return 0.5 * (edges[:-1] + edges[1:]), counts


def histogram_csv(centers, counts):
    lines = ["bin_center,count"]
    lines.extend(f"{c:.6f},{int(n)}" for c, n in zip(centers, counts))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ ensemble


def ensemble_logits(runs):
    """Element-wise mean of per-model logits."""
    runs = [np.asarray(r, dtype=np.float64) for r in runs]
    if not runs:
        raise ShapeError("ensemble_logits", (0,), detail="need at least one run")
    for r in runs[1:]:
        if r.shape != runs[0].shape:
            raise ShapeError("ensemble_logits", runs[0].shape, r.shape)
    return np.mean(np.stack(runs), axis=0)


# ------------------------------------------------------------------ report


def mean_uncertainty(u, labels, code_filter):
    codes = _codes(labels)
    sel = code_filter(codes)
    return float(np.asarray(u)[sel].mean()) if sel.any() else None


@dataclass
class MetricsReport:
    """Validation summary; serialises to JSON with a fixed key order."""

    class_names: tuple
    per_class_auc: list
    mean_auc: float | None
    micro_auc: float | None
    selective_accuracy: float | None
    plain_accuracy: float | None
    uncertainty_recall: float | None
    coverage: float
    mean_u_uncertain: float | None
    mean_u_definite: float | None
    confusion: list
    energy_summary: dict
    tau: float = DEFAULT_TAU
    include_uncertain: bool = False

    def to_dict(self):
        return {
            "tau": self.tau,
            "include_uncertain": self.include_uncertain,
            "class_names": list(self.class_names),
            "per_class_auc": {n: a for n, a in zip(self.class_names, self.per_class_auc)},
            "mean_auc": self.mean_auc,
            "micro_auc": self.micro_auc,
            "selective_accuracy": self.selective_accuracy,
            "plain_accuracy": self.plain_accuracy,
            "uncertainty_recall": self.uncertainty_recall,
            "coverage": self.coverage,
            "mean_u_uncertain": self.mean_u_uncertain,
            "mean_u_definite": self.mean_u_definite,
            "confusion": {n: dict(zip(("tp", "fp", "tn", "fn"), (int(v) for v in row))) for n, row in zip(self.class_names, self.confusion)},
            "energy_summary": self.energy_summary,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        names = tuple(d["class_names"])
        return cls(
            class_names=names,
            per_class_auc=[d["per_class_auc"][n] for n in names],
            mean_auc=d["mean_auc"],
            micro_auc=d["micro_auc"],
            selective_accuracy=d["selective_accuracy"],
            plain_accuracy=d["plain_accuracy"],
            uncertainty_recall=d["uncertainty_recall"],
            coverage=d["coverage"],
            mean_u_uncertain=d["mean_u_uncertain"],
            mean_u_definite=d["mean_u_definite"],
            confusion=[[d["confusion"][n][k] for k in ("tp", "fp", "tn", "fn")] for n in names],
            energy_summary=d["energy_summary"],
            tau=d["tau"],
            include_uncertain=d.get("include_uncertain", False),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def auc_table(self):
        """Per-class AUC rows as comma-separated text."""
        lines = ["class,auc"]
        for n, a in zip(self.class_names, self.per_class_auc):
            lines.append(f"{n},{_fmt(a)}")
        lines.append(f"mean,{_fmt(self.mean_auc)}")
        lines.append(f"micro,{_fmt(self.micro_auc)}")
        return "\n".join(lines) + "\n"

    def confusion_table(self):
        lines = ["class,tp,fp,tn,fn"]
        for n, row in zip(self.class_names, self.confusion):
            lines.append(",".join([n, *(str(int(v)) for v in row)]))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "absent" if v is None else f"{v:.4f}"


def build_report(logits, u, labels, tau=DEFAULT_TAU, include_uncertain=False):
    """Assemble a :class:`MetricsReport` from model outputs on a labelled set.

    ``include_uncertain`` is forwarded to :func:`selective_accuracy`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    codes = _codes(labels)
    names = labels.class_names if isinstance(labels, LabelMatrix) else tuple(f"class{c}" for c in range(codes.shape[1]))
    prob = expit(logits)
    dec = abstention_gate(prob, u, tau)
    aucs = class_aucs(logits, codes)
    sel = selective_accuracy(dec, codes, include_uncertain)
    return MetricsReport(
        class_names=tuple(names),
        per_class_auc=aucs,
        mean_auc=mean_auc(aucs),
        micro_auc=micro_auc(logits, codes),
        selective_accuracy=sel.accuracy,
        plain_accuracy=plain_accuracy(prob, codes),
        uncertainty_recall=uncertainty_recall(dec, codes),
        coverage=sel.coverage,
        mean_u_uncertain=mean_uncertainty(u, codes, lambda c: c == Label.UNC),
        mean_u_definite=mean_uncertainty(u, codes, lambda c: c >= 0),
        confusion=binary_confusion(dec, codes).tolist(),
        energy_summary=energy_summary(energy_score(logits)),
        tau=float(tau),
        include_uncertain=bool(include_uncertain),
    )
