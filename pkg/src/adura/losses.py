"""Training objectives for the dual-head classifier.

Four parts are combined into one scalar:

* masked BCE on the logit head, over definite labels only;
* a Dirichlet evidential loss on the evidence head;
* a Huber penalty on deformable offsets;
* a Gram-matrix orthogonality penalty on the deformable block output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .data import Label, LabelMatrix
from .errors import ConfigError, NumericalDivergence, ShapeError
from .tensor import Tensor, abs_, as_tensor, digamma, matmul, mean, softplus, sum_, where


@dataclass(frozen=True)
class LossWeights:
    lambda_dir: float = 0.2
    lambda_orth: float = 5e-3
    lambda_unc: float = 0.05
    huber_delta: float = 1.0

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ConfigError(key, f"must be a finite non-negative number, got {value}")
        if self.huber_delta == 0:
            raise ConfigError("huber_delta", "must be positive")

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for key in ("lambda_dir", "lambda_orth", "lambda_unc", "huber_delta"):
            if key in mapping:
                try:
                    kwargs[key] = float(mapping[key])
                except (TypeError, ValueError):
                    raise ConfigError(key, f"expected a number, got {mapping[key]!r}") from None
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


class DirichletOutput(NamedTuple):
    """Per-class Beta (two-outcome Dirichlet) parameters.

    ``alpha[..., 0]`` is the negative and ``alpha[..., 1]`` the positive
    concentration.
    """

    alpha: Tensor
    S: Tensor
    u: Tensor


def _codes(labels):
    return labels.codes if isinstance(labels, LabelMatrix) else np.asarray(labels)


def evidence_to_alpha(evidence_raw):
    """Map raw head outputs [B, C, 2] to concentrations via softplus evidence."""
    evidence_raw = as_tensor(evidence_raw)
    if evidence_raw.ndim != 3 or evidence_raw.shape[-1] != 2:
        raise ShapeError("evidence_to_alpha", evidence_raw.shape, ("B", "C", 2))
    alpha = softplus(evidence_raw) + 1.0
    S = sum_(alpha, axis=-1)
    u = 2.0 / S
    return DirichletOutput(alpha, S, u)


def masked_bce(logits, labels):
    """Mean BCE-with-logits over POS/NEG entries.

    UNC and BLANK entries are excluded. Their logits are replaced by a
    constant before any arithmetic, so they affect neither the value nor
    the gradient. With no definite entry the loss is exactly 0.
    """
    logits = as_tensor(logits)
    codes = _codes(labels)
    if logits.shape != codes.shape:
        raise ShapeError("masked_bce", logits.shape, codes.shape)
    mask = codes >= 0
    y = (codes == Label.POS).astype(np.float64)
    z = where(mask, logits, 0.0)
    # softplus(z) - z*y == max(z,0) - z*y + log1p(exp(-|z|))
    per_entry = softplus(z) - z * y
    count = int(mask.sum())
    return sum_(per_entry * mask.astype(np.float64)) * (1.0 / max(count, 1))


class DirichletTerms(NamedTuple):
    """Raw sums and counts behind :func:`dirichlet_loss`."""

    pos_sum: float
    pos_count: int
    neg_sum: float
    neg_count: int
    unc_sum: float
    unc_count: int

    @property
    def raw(self):
        """Unnormalised value with ``lambda_unc`` already applied to ``unc_sum``."""
        return self.pos_sum + self.neg_sum + self.unc_sum

    def normalized(self):
        return sum(s / c for s, c in ((self.pos_sum, self.pos_count), (self.neg_sum, self.neg_count), (self.unc_sum, self.unc_count)) if c)


def _dirichlet_parts(dout, labels, lambda_unc):
    codes = _codes(labels)
    if dout.S.shape != codes.shape:
        raise ShapeError("dirichlet_loss", dout.S.shape, codes.shape)
    pos, neg, unc = (codes == Label.POS), (codes == Label.NEG), (codes == Label.UNC)
    psi_S = digamma(dout.S)
    a0 = dout.alpha[..., 0]
    a1 = dout.alpha[..., 1]
    parts = []
    for m, term in ((pos, lambda: psi_S - digamma(a1)), (neg, lambda: psi_S - digamma(a0)), (unc, lambda: dout.S * lambda_unc)):
        n = int(m.sum())
        if n == 0:
            parts.append((None, 0))
            continue
        parts.append((sum_(where(m, term(), 0.0)), n))
    return parts


def dirichlet_loss(dout, labels, lambda_unc=0.05):
    """Evidential loss: digamma terms for definite labels plus evidence pressure on UNC.

    For POS entries the term is psi(S) - psi(alpha1), for NEG entries
    psi(S) - psi(alpha0), and UNC entries add ``lambda_unc * S``. Each of
    the three sums is divided by its own entry count; an empty term
    contributes 0. BLANK entries are ignored.
    """
    total = None
    for s, n in _dirichlet_parts(dout, labels, lambda_unc):
        if s is None:
            continue
        term = s * (1.0 / n)
        total = term if total is None else total + term
    if total is None:
        return sum_(dout.S * 0.0)
    return total


def dirichlet_terms(dout, labels, lambda_unc=0.05):
    """Unnormalised term sums and counts, for logging."""
    vals = []
    for s, n in _dirichlet_parts(dout, labels, lambda_unc):
        vals.extend([0.0 if s is None else float(s.data), n])
    return DirichletTerms(*vals)


def orthogonality_loss(features):
    """Batch mean of ||F F^T / (HW) - I||_F^2 with F the [C, HW] channel matrix."""
    features = as_tensor(features)
    if features.ndim != 4:
        raise ShapeError("orthogonality_loss", features.shape, ("B", "C", "H", "W"))
    B, C, H, W = features.shape
    F = features.reshape(B, C, H * W)
    G = matmul(F, F.transpose(0, 2, 1)) * (1.0 / (H * W))
    diff = G - np.eye(C)
    return sum_(diff * diff) * (1.0 / B)


def offset_loss(offsets, delta=1.0):
    """Element-mean Huber penalty pulling offsets toward zero."""
    offsets = as_tensor(offsets)
    r = abs_(offsets)
    quad = r * r * 0.5
    lin = (r - 0.5 * delta) * delta
    return mean(where(r.data <= delta, quad, lin))


PART_NAMES = ("bce", "dir", "offset", "orth")


def total_loss(parts, w=LossWeights()):
    """Weighted objective ``bce + lambda_dir*dir + offset + lambda_orth*orth``.

    Args:
        parts: mapping with keys ``bce``, ``dir``, ``offset``, ``orth``
            holding scalar tensors (or numbers).
        w: loss weights.

    Returns:
        ``(total, values)`` where ``values`` maps each part name and
        ``"total"`` to a float.

    Raises:
        NumericalDivergence: naming the first non-finite part.
    """
    missing = [k for k in PART_NAMES if k not in parts]
    if missing:
        raise ConfigError("parts", f"missing loss parts {missing}")
    tensors = {k: as_tensor(parts[k]) for k in PART_NAMES}
    for k, t in tensors.items():
        if t.size != 1:
            raise ShapeError("total_loss", t.shape, (), detail=f"part {k} must be scalar")
        if not np.isfinite(t.data).all():
            raise NumericalDivergence(k, f"value {float(t.data)}")
    total = tensors["bce"] + tensors["dir"] * w.lambda_dir + tensors["offset"] + tensors["orth"] * w.lambda_orth
    if not np.isfinite(total.data):
        raise NumericalDivergence("total", f"value {float(total.data)}")
    values = {k: float(t.data) for k, t in tensors.items()}
    values["total"] = float(total.data)
    return total, values
