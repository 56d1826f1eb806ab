"""Classifier-head harmonization across tasks on the unit hypersphere.

After each task the binary and multi-label head weights are flattened (bias
excluded), normalized, and rotated toward an affinity-weighted reference built
from earlier tasks' heads. The original norm is restored afterwards, so only the
direction of a head ever changes. LERP, EMA and weighted-mean merges are
provided as baselines.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateReference, InvalidInput, NoHistory, UndefinedGeodesic
from .trainer import Heads

HEAD_KINDS = ("binary", "multilabel")
METHODS = ("slerp", "lerp", "ema", "wm")
COINCIDENT = 1e-8
ARCHIVE_MAGIC = b"AIFH"


@dataclass(frozen=True)
class HeadVector:
    flat: np.ndarray
    norm: float
    head_kind: str
    task_id: int

    @classmethod
    def from_weights(cls, weights, head_kind: str, task_id: int) -> "HeadVector":
        """Normalize a head weight matrix; ``flat`` is the unit direction."""
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        n = float(np.linalg.norm(w))
        if not n > 0 or not np.all(np.isfinite(w)):
            raise InvalidInput("head weights must be finite with non-zero norm")
        return cls(flat=w / n, norm=n, head_kind=head_kind, task_id=task_id)


@dataclass
class TaskHeadArchive:
    entries: dict[str, list[HeadVector]] = field(default_factory=lambda: {k: [] for k in HEAD_KINDS})

    def __len__(self):
        return len(self.entries["binary"])

    def vectors(self, kind: str) -> np.ndarray:
        return np.stack([e.flat for e in self.entries[kind]]) if self.entries[kind] else np.empty((0, 0))

    def append(self, vec: HeadVector) -> None:
        if not abs(np.linalg.norm(vec.flat) - 1.0) <= 1e-9:
            raise InvalidInput("archived head directions must be unit norm")
        existing = self.entries[vec.head_kind]
        if existing and existing[0].flat.shape != vec.flat.shape:
            raise InvalidInput(f"{vec.head_kind} head dim {vec.flat.size} != archived {existing[0].flat.size}")
        existing.append(vec)

    def save(self, path) -> None:
        items = [e for k in HEAD_KINDS for e in self.entries[k]]
        parts = [ARCHIVE_MAGIC, struct.pack("<I", len(items))]
        for e in items:
            parts.append(struct.pack("<BII", HEAD_KINDS.index(e.head_kind), e.task_id, e.flat.size))
            parts.append(np.asarray(e.flat, dtype="<f8").tobytes())
            parts.append(struct.pack("<d", e.norm))
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "TaskHeadArchive":
        data = Path(path).read_bytes()
        if data[:4] != ARCHIVE_MAGIC:
            raise InvalidInput(f"{path}: bad magic {data[:4]!r}")
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        archive = cls()
        for _ in range(count):
            kind, task_id, dim = struct.unpack_from("<BII", data, pos)
            pos += 9
            flat = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
            pos += 8 * dim
            (norm,) = struct.unpack_from("<d", data, pos)
            pos += 8
            archive.append(HeadVector(flat, norm, HEAD_KINDS[kind], task_id))
        return archive


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def affinity_weights(current: np.ndarray, history: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Softmax over earlier tasks of cosine(current, earlier) / tau."""
    history = np.atleast_2d(np.asarray(history, dtype=np.float64))
    if history.size == 0:
        raise NoHistory("no earlier task heads to harmonize against")
    if tau <= 0:
        raise InvalidInput(f"temperature must be positive, got {tau}")
    cos = (history @ current) / (np.linalg.norm(history, axis=1) * np.linalg.norm(current))
    z = cos / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def global_reference(history: np.ndarray, weights: np.ndarray) -> np.ndarray:
    agg = np.asarray(weights, dtype=np.float64) @ np.atleast_2d(history)
    n = np.linalg.norm(agg)
    if n < 1e-12:
        raise DegenerateReference("weighted head directions cancel out")
    return agg / n


def adaptive_t(current: np.ndarray, reference: np.ndarray) -> float:
    """Alignment strength: cosine of the two unit directions, clamped to [0, 1]."""
    return float(np.clip(np.dot(current, reference), 0.0, 1.0))


def slerp(wi: np.ndarray, wref: np.ndarray, t: float) -> np.ndarray:
    """Constant-speed geodesic interpolation between unit vectors ``wi`` (t=0) and ``wref`` (t=1)."""
    theta = float(np.arccos(np.clip(np.dot(wi, wref), -1.0, 1.0)))
    if theta < COINCIDENT:
        return np.array(wi, dtype=np.float64)
    if theta > np.pi - COINCIDENT:
        raise UndefinedGeodesic("antipodal directions have no unique geodesic")
    s = np.sin(theta)
    return (np.sin((1.0 - t) * theta) / s) * wi + (np.sin(t * theta) / s) * wref


def rescale(aligned: np.ndarray, original_norm: float) -> np.ndarray:
    return aligned * original_norm


def merge_direction(current: np.ndarray, history: np.ndarray, tau: float = 0.1,
                    method: str = "slerp", alpha: float = 0.9) -> tuple[np.ndarray, dict]:
    """New unit direction for one head kind, plus the intermediate quantities."""
    if method not in METHODS:
        raise InvalidInput(f"unknown alignment method {method!r}; expected one of {METHODS}")
    omega = affinity_weights(current, history, tau)
    ref = global_reference(history, omega)
    t = adaptive_t(current, ref)
    if method == "slerp":
        new = slerp(current, ref, t)
    elif method == "lerp":
        new = _unit((1.0 - t) * current + t * ref)
    elif method == "ema":
        new = _unit(alpha * ref + (1.0 - alpha) * current)
    else:
        pool = np.vstack([current, history])
        new = _unit(affinity_weights(current, pool, tau) @ pool)
    return new, {"omega": omega, "reference": ref, "t": t}


_WEIGHT_ATTR = {"binary": "bin_w", "multilabel": "ind_w"}


def harmonize(heads: Heads, archive: TaskHeadArchive, tau: float = 0.1, method: str = "slerp",
              alpha: float = 0.9, task_id: int | None = None) -> Heads:
    """Align both heads with the archived history and record the result in ``archive``.

    With an empty archive the heads come back unchanged and only get archived.
    On error nothing is modified.
    """
    task_id = len(archive) + 1 if task_id is None else task_id
    updates = {}
    for kind, attr in _WEIGHT_ATTR.items():
        w = getattr(heads, attr)
        cur = HeadVector.from_weights(w, kind, task_id)
        if not archive.entries[kind]:
            updates[kind] = (w, cur)
            continue
        new_dir, _ = merge_direction(cur.flat, archive.vectors(kind), tau, method, alpha)
        new_w = rescale(new_dir, cur.norm).reshape(w.shape)
        updates[kind] = (new_w, HeadVector(new_dir, cur.norm, kind, task_id))
    for kind, (_, vec) in updates.items():
        archive.append(vec)
    if all(updates[k][0] is getattr(heads, a) for k, a in _WEIGHT_ATTR.items()):
        return heads
    return replace(heads, bin_w=updates["binary"][0], ind_w=updates["multilabel"][0])
