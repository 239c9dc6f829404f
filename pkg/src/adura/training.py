"""Optimiser, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, load_model_entries, model_entries, save_checkpoint
from .data import apply_strategy, normalize_strategy
from .errors import ConfigError, NumericalDivergence
from .layers import NetworkConfig, build_network
from .losses import (
    LossWeights,
    dirichlet_loss,
    dirichlet_terms,
    evidence_to_alpha,
    masked_bce,
    offset_loss,
    orthogonality_loss,
    total_loss,
)
from .metrics import build_report
from .rng import restore_rng, rng_state, seeded_rng
from .tensor import Tensor, no_grad


# ------------------------------------------------------------------ optimiser


@dataclass
class OptimizerState:
    """AdamW moments and hyper-parameters.

    ``m`` and ``v`` map parameter names to arrays shaped like the parameter.
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


def adamw_step(named_params, state, lr):
    """One decoupled-weight-decay Adam update, in place.

    Decay scales every parameter by ``1 - lr * weight_decay`` before the
    adaptive step, so it never passes through the moment estimates. A
    parameter without a gradient is updated as if its gradient were zero.

    Raises:
        NumericalDivergence: naming the first parameter with a non-finite
            gradient. Nothing is updated in that case.
    """
    named_params = list(named_params)
    grads = []
    for name, p in named_params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise NumericalDivergence(name, "gradient")
        grads.append(g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    decay = 1.0 - lr * state.weight_decay
    for (name, p), g in zip(named_params, grads):
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data * decay - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 3e-4
    t_max: float = 100.0
    eta_min: float = 0.0


def lr_at(t, s=Schedule()):
    """Cosine annealing from ``base_lr`` at t=0 to ``eta_min`` at ``t_max``; clamps after."""
    if t < 0:
        raise ValueError(f"epoch index must be >= 0, got {t}")
    if t >= s.t_max:
        return s.eta_min
    return s.eta_min + (s.base_lr - s.eta_min) * (1.0 + math.cos(math.pi * t / s.t_max)) / 2.0


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_max: float = 100.0
    eta_min: float = 0.0
    seed: int = 0
    strategy: str = "u-mask"
    grad_clip: float = 0.0
    train_fraction: float = 0.96
    split_seed: int = 0
    tau: float = 0.4
    eval_batch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "strategy", normalize_strategy(self.strategy))
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size", f"must be >= 1, got {self.eval_batch_size}")
        for key in ("lr", "weight_decay", "eps", "eta_min", "grad_clip"):
            if not getattr(self, key) >= 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, f"must lie in [0, 1), got {getattr(self, key)}")
        if self.t_max <= 0:
            raise ConfigError("t_max", f"must be > 0, got {self.t_max}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction", f"must lie in (0, 1), got {self.train_fraction}")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau", f"must lie in (0, 1], got {self.tau}")
        for key in ("seed", "split_seed"):
            if not 0 <= getattr(self, key) < 2**64:
                raise ConfigError(key, "must be an unsigned 64-bit integer")

    @property
    def schedule(self):
        return Schedule(self.lr, self.t_max, self.eta_min)

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                kind = {int: int, float: float, str: str}[type(f.default)]
                try:
                    kwargs[f.name] = kind(mapping[f.name])
                except (TypeError, ValueError):
                    raise ConfigError(f.name, f"expected {kind.__name__}, got {mapping[f.name]!r}") from None
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ step


class StepReport(NamedTuple):
    total: float
    bce: float
    dir: float
    offset: float
    orth: float
    dir_raw: float
    grad_norm: float
    bce_empty: bool


def _grad_norm(params):
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad))
    return math.sqrt(sq)


def compute_losses(model, images, labels, weights):
    """Forward pass plus all loss parts; returns ``(total, values, extras)``."""
    out = model(Tensor(images))
    dout = evidence_to_alpha(out.evidence_raw)
    parts = {
        "bce": masked_bce(out.logits, labels),
        "dir": dirichlet_loss(dout, labels, weights.lambda_unc),
        "offset": offset_loss(out.offsets, weights.huber_delta),
        "orth": orthogonality_loss(out.features),
    }
    total, values = total_loss(parts, weights)
    terms = dirichlet_terms(dout, labels, weights.lambda_unc)
    extras = {"dir_raw": terms.raw, "bce_empty": not bool((labels.codes >= 0).any())}
    return total, values, extras


def train_step(model, images, labels, state, weights=LossWeights(), lr=3e-4, grad_clip=0.0):
    """Forward, the four losses, backward and one AdamW update.

    Returns a :class:`StepReport`. ``grad_norm`` is measured before any
    clipping. With ``grad_clip > 0`` gradients are rescaled to at most that
    global norm.
    """
    if len(labels) == 0:
        raise ConfigError("batch", "empty batch")
    model.train()
    model.zero_grad()
    total, values, extras = compute_losses(model, images, labels, weights)
    total.backward()
    named = model.named_parameters()
    gnorm = _grad_norm(p for _, p in named)
    if not math.isfinite(gnorm):
        bad = next(n for n, p in named if p.grad is not None and not np.isfinite(p.grad).all())
        raise NumericalDivergence(bad, "gradient")
    if grad_clip > 0 and gnorm > grad_clip:
        scale = grad_clip / gnorm
        for _, p in named:
            if p.grad is not None:
                p.grad = p.grad * scale
    adamw_step(named, state, lr)
    return StepReport(
        values["total"], values["bce"], values["dir"], values["offset"], values["orth"], extras["dir_raw"], gnorm, extras["bce_empty"]
    )


# ------------------------------------------------------------------ evaluation


class Predictions(NamedTuple):
    logits: np.ndarray
    u: np.ndarray


def _predict_chunk(model, images):
    with no_grad():
        out = model(Tensor(images))
        dout = evidence_to_alpha(out.evidence_raw)
        return out.logits.data.copy(), dout.u.data.copy()


def predict(model, dataset, batch_size=128, threads=1):
    """BCE logits and evidential uncertainty for every sample, in eval mode.

    With ``threads > 1`` chunks are evaluated concurrently, each on its own
    graph-free forward pass. Results are identical to the serial path.
    """
    model.eval()
    n = len(dataset)
    C = dataset.labels.n_classes
    if n == 0:
        return Predictions(np.zeros((0, C)), np.zeros((0, C)))
    starts = range(0, n, batch_size)
    work = lambda s: _predict_chunk(model, dataset.images(np.arange(s, min(n, s + batch_size))))  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, starts))
    else:
        chunks = [work(s) for s in starts]
    return Predictions(np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks]))


def evaluate(model, dataset, tau=0.4, batch_size=128, threads=1):
    pred = predict(model, dataset, batch_size, threads)
    return build_report(pred.logits, pred.u, dataset.labels, tau)


# ------------------------------------------------------------------ fit

LOG_COLUMNS = (
    "epoch",
    "lr",
    "loss_total",
    "loss_bce",
    "loss_dir",
    "loss_offset",
    "loss_orth",
    "micro_auc",
    "selective_acc",
    "unc_recall",
    "coverage",
)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_log(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        w.writerow([_cell(row[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


@dataclass
class FitResult:
    model: object
    state: OptimizerState
    log: list
    best_epoch: int | None
    best_micro_auc: float | None
    last_report: object = None


def _data_seed(seed):
    # shuffling stream kept separate from the initialisation stream
    return (int(seed) + 0x9E3779B97F4A7C15) % 2**64


def make_checkpoint(model, state, data_rng, config, trainer):
    opt = {"step": state.step, "m": {k: v.copy() for k, v in state.m.items()}, "v": {k: v.copy() for k, v in state.v.items()}}
    return Checkpoint(model_entries(model), opt, rng_state(data_rng) if data_rng is not None else None, dict(config), dict(trainer))


def resolved_config(net_cfg, weights, cfg):
    out = {}
    out.update(net_cfg.to_dict())
    out.update(weights.to_dict())
    out.update(cfg.to_dict())
    return out


def fit(train, val, net_cfg=NetworkConfig(), weights=LossWeights(), cfg=TrainConfig(), out_path=None, resume=None, log_path=None, progress=None):
    """Train from scratch (or resume) and evaluate on ``val`` after every epoch.

    Args:
        train, val: datasets; the label strategy in ``cfg`` is applied to
            the training labels only.
        out_path: if given, the full resumable state is written there after
            every epoch, and the best-micro-AUC weights to
            ``<stem>.best<suffix>`` next to it.
        resume: path of a checkpoint written by a previous call with the
            same configuration.
        log_path: epoch log CSV, rewritten after every epoch.
        progress: optional callable receiving each log row.
    """
    if net_cfg.num_classes != train.labels.n_classes:
        raise ConfigError("num_classes", f"config says {net_cfg.num_classes}, data has {train.labels.n_classes} classes")
    config_echo = resolved_config(net_cfg, weights, cfg)
    model = build_network(net_cfg, seeded_rng(cfg.seed))
    state = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    data_rng = seeded_rng(_data_seed(cfg.seed))
    trainer = {"epoch": 0, "best_epoch": None, "best_micro_auc": None, "log": []}
    if resume is not None:
        ck = load_checkpoint(resume)
        mismatch = {k: (ck.config.get(k), v) for k, v in config_echo.items() if k != "epochs" and ck.config.get(k) != v}
        if mismatch:
            key = sorted(mismatch)[0]
            raise ConfigError(key, f"resume config mismatch: checkpoint {mismatch[key][0]!r} vs {mismatch[key][1]!r}")
        load_model_entries(model, ck.entries)
        state.step = ck.optimizer["step"]
        state.m = {k: v.copy() for k, v in ck.optimizer["m"].items()}
        state.v = {k: v.copy() for k, v in ck.optimizer["v"].items()}
        data_rng = restore_rng(ck.rng_state)
        trainer = dict(ck.trainer)

    train_labels = apply_strategy(train.labels, cfg.strategy)
    train_images = train.images()
    n = len(train)
    log = [dict(r) for r in trainer["log"]]
    out_path = Path(out_path) if out_path is not None else None
    best_path = out_path.with_name(out_path.stem + ".best" + out_path.suffix) if out_path is not None else None
    report = None
    for epoch in range(trainer["epoch"], cfg.epochs):
        lr = lr_at(epoch, cfg.schedule)
        order = data_rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rep = train_step(model, train_images[idx], train_labels.subset(idx), state, weights, lr, cfg.grad_clip)
            sums += (rep.total, rep.bce, rep.dir, rep.offset, rep.orth)
            batches += 1
        means = sums / max(batches, 1)
        report = evaluate(model, val, cfg.tau, cfg.eval_batch_size)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": float(means[0]),
            "loss_bce": float(means[1]),
            "loss_dir": float(means[2]),
            "loss_offset": float(means[3]),
            "loss_orth": float(means[4]),
            "micro_auc": report.micro_auc,
            "selective_acc": report.selective_accuracy,
            "unc_recall": report.uncertainty_recall,
            "coverage": report.coverage,
        }
        log.append(row)
        improved = report.micro_auc is not None and (trainer["best_micro_auc"] is None or report.micro_auc > trainer["best_micro_auc"])
        if improved:
            trainer["best_micro_auc"] = report.micro_auc
            trainer["best_epoch"] = epoch
        trainer["epoch"] = epoch + 1
        trainer["log"] = log
        if out_path is not None:
            ck = make_checkpoint(model, state, data_rng, config_echo, trainer)
            save_checkpoint(out_path, ck)
            if improved:
                save_checkpoint(best_path, ck)
        if log_path is not None:
            Path(log_path).write_text(format_log(log), encoding="utf-8")
        if progress is not None:
            progress(row)
    if out_path is not None and not out_path.exists():
        save_checkpoint(out_path, make_checkpoint(model, state, data_rng, config_echo, trainer))
    if log_path is not None and not Path(log_path).exists():
        Path(log_path).write_text(format_log(log), encoding="utf-8")
    return FitResult(model, state, log, trainer["best_epoch"], trainer["best_micro_auc"], report)


def model_from_checkpoint(ckpt):
    """Rebuild the network described by a checkpoint's config echo."""
    net_cfg = NetworkConfig.from_mapping(ckpt.config)
    model = build_network(net_cfg, seeded_rng(0))
    load_model_entries(model, ckpt.entries)
    model.eval()
    return model
