"""Dual-supervision incremental training: binary and multi-label heads, feature
distillation against the previous task's frozen encoder, and the fixed-then-dynamic
anchor schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import encoder as enc
from .anchors import AnchorLibrary, Match, match_dynamic, match_static, match_unlabeled
from .errors import DegenerateFeature, InvalidInput, TrainingDiverged
from .indicators import DIMENSIONS, IndicatorMatrix

LN2 = math.log(2.0)


@dataclass
class Heads:
    bin_w: np.ndarray
    bin_b: np.ndarray
    ind_w: np.ndarray
    ind_b: np.ndarray

    @classmethod
    def init(cls, dim: int, seed: int = 0, scale: float = 0.02) -> "Heads":
        rng = np.random.default_rng([seed, 7])
        return cls(bin_w=scale * rng.standard_normal((2, dim)), bin_b=np.zeros(2),
                   ind_w=scale * rng.standard_normal((len(DIMENSIONS), dim)), ind_b=np.zeros(len(DIMENSIONS)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "Heads":
        return Heads(**{k: v.copy() for k, v in self.as_dict().items()})

    def logits(self, feature: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return feature @ self.bin_w.T + self.bin_b, feature @ self.ind_w.T + self.ind_b

    def fake_probability(self, feature: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(feature)[0])[..., 1]


@dataclass
class TrainSample:
    image: np.ndarray
    y_bin: int
    y_ind: np.ndarray
    indicators: IndicatorMatrix | None = None
    masks: Mapping[str, np.ndarray] | None = None
    sample_id: str = ""

    def __post_init__(self):
        self.y_ind = np.asarray(self.y_ind, dtype=np.int64)
        if self.y_bin not in (0, 1):
            raise InvalidInput(f"y_bin must be 0 or 1, got {self.y_bin}")
        if self.y_bin == 0 and self.y_ind.any():
            raise InvalidInput("real samples must have an all-zero indicator target")

    @property
    def label(self) -> str:
        return "fake" if self.y_bin else "real"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 32
    lr: float = 8e-5
    mu1: float = 0.1
    mu2: float = 1.0
    n_anchors: int = 3
    n_warmup: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_apa: bool = True

    def __post_init__(self):
        if self.n_warmup > self.epochs:
            raise InvalidInput(f"warm-up {self.n_warmup} exceeds epochs {self.epochs}")
        if self.mu1 < 0 or self.mu2 < 0:
            raise InvalidInput("loss weights must be non-negative")
        if self.batch < 1 or self.epochs < 1:
            raise InvalidInput("epochs and batch must be positive")

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None, **overrides) -> "TrainConfig":
        """Parse flat ``key=value`` lines; unknown keys are an error.

        Keys missing from the file keep their value in ``base`` (class defaults if None).
        """
        types = {f.name: f.type for f in fields(cls)}
        values = asdict(base) if base is not None else {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise InvalidInput(f"{path}:{lineno}: unrecognized entry {line!r}")
            values[key] = _parse_value(val, types[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def _parse_value(text: str, typ: str):
    if typ == "bool":
        return text.lower() in ("1", "true", "yes", "on")
    if typ == "int":
        return int(text)
    return float(text)


@dataclass(frozen=True)
class TaskSnapshot:
    encoder: enc.EncoderState
    library: AnchorLibrary
    anchor_usage: Mapping[tuple[str, str], int] = field(default_factory=dict)


# --- losses -------------------------------------------------------------------

def _softmax(z):
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def make_ind_target(label: str, matched: Sequence[Match]) -> np.ndarray:
    """Artifact-presence target: zeros for real images, matched dimensions for fakes."""
    y = np.zeros(len(DIMENSIONS), dtype=np.int64)
    if label == "fake":
        for m in matched:
            y[DIMENSIONS.index(m.anchor.dimension)] = 1
    return y


def loss_cls(logits, y_bin: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[y_bin])


def loss_cls_grad(logits, y_bin: int) -> np.ndarray:
    g = _softmax(np.asarray(logits, dtype=np.float64))
    g[y_bin] -= 1.0
    return g


def loss_ind(logits, y_ind) -> float:
    """Mean sigmoid cross-entropy over the artifact dimensions."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y_ind, dtype=np.float64)
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def loss_ind_grad(logits, y_ind) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return (_sigmoid(z) - np.asarray(y_ind, dtype=np.float64)) / z.shape[-1]


def loss_dis(f_cur, f_prev) -> float:
    a = np.asarray(f_cur, dtype=np.float64)
    b = np.asarray(f_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"feature shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


def loss_total(l_cls: float, l_ind: float, l_dis: float, mu1: float = 0.1, mu2: float = 1.0) -> float:
    return l_cls + mu1 * l_ind + mu2 * l_dis


def batch_objective(feature: np.ndarray, heads: Heads, y_bin: np.ndarray, y_ind: np.ndarray,
                    teacher: np.ndarray | None, mu1: float, mu2: float):
    """Batch-mean total loss, its components, and gradients w.r.t. ``feature`` and the heads."""
    B = feature.shape[0]
    lb, li = heads.logits(feature)
    comps = np.zeros((B, 3))
    d_lb = np.empty_like(lb)
    d_li = np.empty_like(li)
    d_feat = np.zeros_like(feature)
    for i in range(B):
        comps[i, 0] = loss_cls(lb[i], y_bin[i])
        comps[i, 1] = loss_ind(li[i], y_ind[i])
        d_lb[i] = loss_cls_grad(lb[i], y_bin[i])
        d_li[i] = mu1 * loss_ind_grad(li[i], y_ind[i])
        if teacher is not None:
            comps[i, 2] = loss_dis(feature[i], teacher[i])
            d_feat[i] = mu2 * 2.0 * (feature[i] - teacher[i])
    d_lb /= B
    d_li /= B
    d_feat = d_feat / B + d_lb @ heads.bin_w + d_li @ heads.ind_w
    mean = comps.mean(axis=0)
    total = loss_total(mean[0], mean[1], mean[2], mu1, mu2)
    head_grads = {"bin_w": d_lb.T @ feature, "bin_b": d_lb.sum(axis=0),
                  "ind_w": d_li.T @ feature, "ind_b": d_li.sum(axis=0)}
    return total, mean, d_feat, head_grads


# --- anchor schedule ----------------------------------------------------------------

def preliminary_features(images, encoder: enc.EncoderState) -> np.ndarray:
    """Pooled features with injection disabled, used to drive dynamic matching."""
    return enc.forward(images, None, encoder)[0]


def select_anchors_for_step(epoch: int, sample: TrainSample, encoder: enc.EncoderState,
                            lib: AnchorLibrary, cfg: TrainConfig,
                            feature: np.ndarray | None = None) -> list[Match]:
    """Static indicator-ranked anchors for epochs <= warm-up, cosine-matched afterwards.

    ``epoch`` is 1-based. A zero preliminary feature falls back to static matching.
    ``feature`` may carry a precomputed preliminary feature for the sample.
    """
    if epoch > cfg.n_warmup:
        if feature is None:
            feature = preliminary_features(sample.image, encoder)
        try:
            return match_dynamic(feature, lib, sample.label, cfg.n_anchors)
        except DegenerateFeature:
            pass
    if sample.indicators is None or sample.indicators.anomaly is None:
        raise InvalidInput(f"sample {sample.sample_id!r} has no anomaly scores for static matching")
    return match_static(sample.indicators, lib, sample.label, cfg.n_anchors)


def test_time_anchors(images, encoder: enc.EncoderState, lib: AnchorLibrary, n: int) -> np.ndarray:
    """Label-free anchors per image, as a ``(B, N, D)`` embedding stack."""
    feats = preliminary_features(images, encoder)
    rows = []
    for f in np.atleast_2d(feats):
        try:
            matched = match_unlabeled(f, lib, n)
        except DegenerateFeature:
            matched = match_unlabeled(np.ones_like(f), lib, n)
        rows.append(np.stack([m.embedding for m in matched]))
    return np.stack(rows)


# --- optimizer ---------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --- training ----------------------------------------------------------------------

LOG_HEADER = ("epoch", "batch", "loss_total", "loss_cls", "loss_ind", "loss_dis")


def train_task(task_data: Sequence[TrainSample], encoder: enc.EncoderState, heads: Heads,
               snapshot: TaskSnapshot | None, cfg: TrainConfig, lib: AnchorLibrary,
               on_batch: Callable[[dict], None] | None = None):
    """Train on one task's data and return ``(encoder, heads, snapshot, log_rows)``.

    Inputs are not modified; trained copies are returned. ``log_rows`` follow
    :data:`LOG_HEADER`. ``on_batch`` receives per-batch details (targets,
    anchors, losses) for auditing.
    """
    if not task_data:
        raise InvalidInput("task has no training samples")
    encoder = encoder.copy()
    heads = heads.copy()
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    images = np.stack([s.image for s in task_data])
    usage: dict[tuple[str, str], int] = {}
    log_rows = []
    batch_index = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(task_data))
        for b, start in enumerate(range(0, len(order), cfg.batch)):
            idx = order[start:start + cfg.batch]
            batch = [task_data[i] for i in idx]
            x = images[idx]
            feats = preliminary_features(x, encoder) if epoch > cfg.n_warmup else [None] * len(idx)
            matched = [select_anchors_for_step(epoch, s, encoder, lib, cfg, f) for s, f in zip(batch, feats)]
            for ms in matched:
                for m in ms:
                    usage[m.anchor.channel] = usage.get(m.anchor.channel, 0) + 1
            y_bin = np.array([s.y_bin for s in batch])
            y_ind = np.stack([make_ind_target(s.label, ms) for s, ms in zip(batch, matched)])
            anchors = np.stack([[m.embedding for m in ms] for ms in matched]) if cfg.use_apa else None

            feat, trace = enc.forward(x, anchors, encoder)
            teacher = enc.forward(x, anchors, snapshot.encoder)[0] if snapshot is not None else None
            total, comps, d_feat, head_grads = batch_objective(
                feat, heads, y_bin, y_ind, teacher, cfg.mu1, cfg.mu2)
            if not np.isfinite(total):
                raise TrainingDiverged(batch_index, total)
            grads = enc.backward(trace, d_feat)
            params = dict(encoder.params)
            params.update({"head." + k: getattr(heads, k) for k in head_grads})
            grads.update({"head." + k: v for k, v in head_grads.items()})
            # arrays are updated in place, so encoder and heads see the step
            opt.step(params, grads)
            encoder.bump()

            log_rows.append((epoch, b + 1, total, *comps))
            if on_batch is not None:
                on_batch({"epoch": epoch, "batch": b + 1, "y_bin": y_bin, "y_ind": y_ind,
                          "matched": matched, "loss_total": total})
            batch_index += 1

    snap = TaskSnapshot(encoder=encoder.snapshot(), library=lib, anchor_usage=dict(usage))
    return encoder, heads, snap, log_rows


def total_gradient_check(encoder: enc.EncoderState, heads: Heads, images, anchors,
                         y_bin, y_ind, teacher=None, mu1: float = 0.1, mu2: float = 1.0,
                         h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of the full objective over encoder and head parameters."""
    work = encoder.copy()
    hw = heads.copy()
    y_bin = np.asarray(y_bin)
    y_ind = np.asarray(y_ind)

    def loss():
        f = enc.forward(images, anchors, work)[0]
        return batch_objective(f, hw, y_bin, y_ind, teacher, mu1, mu2)[0]

    feat, trace = enc.forward(images, anchors, work)
    _, _, d_feat, head_grads = batch_objective(feat, hw, y_bin, y_ind, teacher, mu1, mu2)
    analytic = enc.backward(trace, d_feat)
    analytic.update({"head." + k: v for k, v in head_grads.items()})
    params = dict(work.params)
    params.update({"head." + k: v for k, v in hw.as_dict().items()})
    numeric = enc.finite_difference(params, loss, h=h)
    return {k: enc.tensor_relative_error(analytic[k], numeric[k]) for k in params}
