"""Semantic anchor library: selection from candidate text pairs and per-image retrieval."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateFeature, IncompleteLibrary, InvalidInput
from .indicators import CHANNEL_INDEX, CHANNELS, IndicatorMatrix

UNIT_TOL = 1e-6
MIN_TOY_DIM = 40
VECTOR_MAGIC = b"AIFD"


def _check_unit(vecs: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.atleast_2d(vecs), axis=1)
    if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
        raise InvalidInput(f"{what}: embeddings must be unit norm (got {norms.min():.6g}..{norms.max():.6g})")


@dataclass(frozen=True)
class TextCandidatePair:
    real_text: str
    fake_text: str
    real_embedding: np.ndarray
    fake_embedding: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.real_embedding, dtype=np.float64)
        f = np.asarray(self.fake_embedding, dtype=np.float64)
        if r.ndim != 1 or r.shape != f.shape:
            raise InvalidInput("real and fake embeddings must be vectors of equal length")
        _check_unit(np.stack([r, f]), "candidate pair")
        object.__setattr__(self, "real_embedding", r)
        object.__setattr__(self, "fake_embedding", f)


@dataclass(frozen=True)
class SupportSet:
    """Embedded exemplar pairs; row k of ``real`` and ``fake`` form one pair."""

    real: np.ndarray
    fake: np.ndarray

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.real, dtype=np.float64))
        f = np.atleast_2d(np.asarray(self.fake, dtype=np.float64))
        if r.shape != f.shape or r.shape[0] < 1:
            raise InvalidInput("support set needs at least one (real, fake) pair of equal shape")
        _check_unit(np.concatenate([r, f]), "support set")
        object.__setattr__(self, "real", r)
        object.__setattr__(self, "fake", f)


@dataclass(frozen=True)
class Anchor:
    dimension: str
    region: str
    pair: TextCandidatePair

    def __post_init__(self):
        if (self.region, self.dimension) not in CHANNEL_INDEX:
            raise InvalidInput(f"({self.region}, {self.dimension}) is not a valid indicator channel")

    @property
    def channel(self) -> tuple[str, str]:
        return (self.region, self.dimension)

    def text(self, label: str) -> str:
        return self.pair.fake_text if label == "fake" else self.pair.real_text

    def embedding(self, label: str) -> np.ndarray:
        return self.pair.fake_embedding if label == "fake" else self.pair.real_embedding


class Match(NamedTuple):
    anchor: Anchor
    text: str
    embedding: np.ndarray


class AnchorLibrary:
    """One anchor per indicator channel, stored in channel order."""

    def __init__(self, anchors: Sequence[Anchor]):
        by_channel = {}
        for a in anchors:
            if a.channel in by_channel:
                raise InvalidInput(f"duplicate anchor for channel {a.channel}")
            by_channel[a.channel] = a
        for ch in CHANNELS:
            if ch not in by_channel:
                raise IncompleteLibrary(ch)
        self.anchors: tuple[Anchor, ...] = tuple(by_channel[ch] for ch in CHANNELS)
        dims = {a.pair.fake_embedding.shape[0] for a in self.anchors}
        if len(dims) != 1:
            raise InvalidInput(f"inconsistent embedding dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self.fake_matrix = np.stack([a.pair.fake_embedding for a in self.anchors])
        self.real_matrix = np.stack([a.pair.real_embedding for a in self.anchors])
        self.fake_matrix.setflags(write=False)
        self.real_matrix.setflags(write=False)

    def __len__(self):
        return len(self.anchors)

    def __getitem__(self, channel: tuple[str, str]) -> Anchor:
        return self.anchors[CHANNEL_INDEX[channel]]

    def matrix(self, label: str) -> np.ndarray:
        return self.fake_matrix if label == "fake" else self.real_matrix


def _check_label(label: str) -> None:
    if label not in ("real", "fake"):
        raise InvalidInput(f"label must be 'real' or 'fake', got {label!r}")


def _check_n(n: int) -> None:
    if not 1 <= n <= len(CHANNELS):
        raise InvalidInput(f"N must be in [1, {len(CHANNELS)}], got {n}")


def _cos_rows(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return (mat @ vec) / (np.linalg.norm(mat, axis=-1) * np.linalg.norm(vec))


def candidate_scores(candidates: Sequence[TextCandidatePair], support: SupportSet) -> np.ndarray:
    """Summed real/fake cosine agreement of each candidate with the support exemplars."""
    scores = np.empty(len(candidates))
    for k, c in enumerate(candidates):
        scores[k] = (_cos_rows(support.fake, c.fake_embedding).sum()
                     + _cos_rows(support.real, c.real_embedding).sum())
    return scores


def select_anchor(candidates: Sequence[TextCandidatePair], support: SupportSet,
                  dimension: str, region: str) -> Anchor:
    """Pick the candidate pair that best agrees with the support set.

    Ties go to the lowest candidate index.
    """
    if len(candidates) == 0:
        raise InvalidInput("candidate list is empty")
    best = int(np.argmax(candidate_scores(candidates, support)))
    return Anchor(dimension=dimension, region=region, pair=candidates[best])


def build_library(candidate_sets: Mapping[tuple[str, str], Sequence[TextCandidatePair]],
                  supports: Mapping[tuple[str, str], SupportSet]) -> AnchorLibrary:
    """Run :func:`select_anchor` for every channel. Keys are ``(region, dimension)``."""
    anchors = []
    for region, dim in CHANNELS:
        ch = (region, dim)
        if ch not in candidate_sets or ch not in supports:
            raise IncompleteLibrary(ch)
        anchors.append(select_anchor(candidate_sets[ch], supports[ch], dim, region))
    return AnchorLibrary(anchors)


def _ranked(keys: np.ndarray, n: int) -> np.ndarray:
    # stable sort keeps fixed channel order among equal keys
    return np.argsort(keys, kind="stable")[:n]


def match_static(mtx: IndicatorMatrix, lib: AnchorLibrary, label: str, n: int = 3) -> list[Match]:
    """Fake images get the N most anomalous channels, real images the N least anomalous."""
    _check_label(label)
    _check_n(n)
    if mtx.anomaly is None:
        raise InvalidInput("indicator matrix has no anomaly scores")
    keys = -mtx.anomaly if label == "fake" else mtx.anomaly
    return [_match(lib, k, label) for k in _ranked(keys, n)]


def _match(lib: AnchorLibrary, k: int, label: str) -> Match:
    a = lib.anchors[k]
    return Match(a, a.text(label), a.embedding(label))


def _cosines(feature, lib: AnchorLibrary, label: str) -> np.ndarray:
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != (lib.dim,):
        raise InvalidInput(f"feature must have length {lib.dim}, got {f.shape}")
    if not np.any(f):
        raise DegenerateFeature("feature vector is zero")
    return _cos_rows(lib.matrix(label), f)


def match_dynamic(feature, lib: AnchorLibrary, label: str, n: int = 3) -> list[Match]:
    """Top-N anchors by cosine between ``feature`` and the label's polarity embeddings."""
    _check_label(label)
    _check_n(n)
    cos = _cosines(feature, lib, label)
    return [_match(lib, k, label) for k in _ranked(-cos, n)]


def match_unlabeled(feature, lib: AnchorLibrary, n: int = 3) -> list[Match]:
    """Label-free retrieval: the polarity whose top-N cosines sum higher wins (fake on ties)."""
    _check_n(n)
    best = None
    for label in ("fake", "real"):
        cos = _cosines(feature, lib, label)
        idx = _ranked(-cos, n)
        total = cos[idx].sum()
        if best is None or total > best[0]:
            best = (total, label, idx)
    _, label, idx = best
    return [_match(lib, k, label) for k in idx]


def toy_embed(dimension: str, region: str, polarity: str, seed: int, dim: int = 64) -> np.ndarray:
    """Deterministic stand-in for a text encoder.

    The channel's two-wide coordinate block holds (+1, +1) for the fake text and
    (+1, -1) for the real one; the rest is seed-keyed noise of amplitude 0.05.
    """
    _check_label(polarity)
    if (region, dimension) not in CHANNEL_INDEX:
        raise InvalidInput(f"({region}, {dimension}) is not a valid indicator channel")
    if dim < MIN_TOY_DIM:
        raise InvalidInput(f"toy embeddings need D >= {MIN_TOY_DIM}, got {dim}")
    block = CHANNEL_INDEX[(region, dimension)]
    rng = np.random.default_rng([seed, block, polarity == "fake"])
    v = rng.uniform(-0.05, 0.05, size=dim)
    v[2 * block] = 1.0
    v[2 * block + 1] = 1.0 if polarity == "fake" else -1.0
    return v / np.linalg.norm(v)


# --- library files ----------------------------------------------------------

def write_vectors(path, vectors: np.ndarray) -> None:
    vectors = np.atleast_2d(np.asarray(vectors, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(VECTOR_MAGIC)
        fh.write(struct.pack("<II", vectors.shape[0], vectors.shape[1]))
        fh.write(vectors.tobytes())


def read_vectors(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != VECTOR_MAGIC:
        raise InvalidInput(f"{path}: bad magic {data[:4]!r}")
    count, dim = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 8 * count * dim:
        raise InvalidInput(f"{path}: expected {count}x{dim} vectors, file size {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=12).reshape(count, dim).astype(np.float64)


def _check_text(text: str) -> str:
    if "|" in text or "\n" in text or "\r" in text:
        raise InvalidInput(f"text may not contain '|' or newlines: {text!r}")
    return text


def _sidecar(index_path) -> Path:
    return Path(index_path).with_suffix(".vec")


def save_library(lib: AnchorLibrary, index_path) -> None:
    """Write the text index and its ``.vec`` sidecar (rows: real, fake per anchor)."""
    lines, vecs = [], []
    for a in lib.anchors:
        off = len(vecs)
        vecs += [a.pair.real_embedding, a.pair.fake_embedding]
        lines.append("|".join([a.dimension, a.region, _check_text(a.pair.real_text),
                               _check_text(a.pair.fake_text), str(off), str(off + 1)]))
    Path(index_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_vectors(_sidecar(index_path), np.stack(vecs))


def _read_records(index_path, width: int) -> list[list[str]]:
    records = []
    for lineno, line in enumerate(Path(index_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != width:
            raise InvalidInput(f"{index_path}:{lineno}: expected {width} fields, got {len(parts)}")
        records.append(parts)
    return records


def _row(vecs: np.ndarray, off: str) -> np.ndarray:
    i = int(off)
    if not 0 <= i < len(vecs):
        raise InvalidInput(f"embedding offset {i} out of range")
    return vecs[i]


def _read_pairs(index_path) -> list[tuple[str, str, TextCandidatePair]]:
    vecs = read_vectors(_sidecar(index_path))
    out = []
    for dim, region, rt, ft, ro, fo in _read_records(index_path, 6):
        out.append((dim, region, TextCandidatePair(rt, ft, _row(vecs, ro), _row(vecs, fo))))
    return out


def load_library(index_path) -> AnchorLibrary:
    return AnchorLibrary([Anchor(d, r, pair) for d, r, pair in _read_pairs(index_path)])


def load_candidates(index_path) -> dict[tuple[str, str], list[TextCandidatePair]]:
    """Candidate files use the library record layout, with several records per channel."""
    out: dict[tuple[str, str], list[TextCandidatePair]] = {}
    for dim, region, pair in _read_pairs(index_path):
        out.setdefault((region, dim), []).append(pair)
    return out


def save_candidates(candidate_sets: Mapping[tuple[str, str], Sequence[TextCandidatePair]], index_path) -> None:
    lines, vecs = [], []
    for (region, dim), pairs in candidate_sets.items():
        for p in pairs:
            off = len(vecs)
            vecs += [p.real_embedding, p.fake_embedding]
            lines.append("|".join([dim, region, _check_text(p.real_text), _check_text(p.fake_text),
                                   str(off), str(off + 1)]))
    Path(index_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_vectors(_sidecar(index_path), np.stack(vecs))


def load_supports(index_path) -> dict[tuple[str, str], SupportSet]:
    """Support files: ``dimension|region|real_emb_offset|fake_emb_offset`` per exemplar pair."""
    vecs = read_vectors(_sidecar(index_path))
    grouped: dict[tuple[str, str], tuple[list, list]] = {}
    for dim, region, ro, fo in _read_records(index_path, 4):
        r, f = grouped.setdefault((region, dim), ([], []))
        r.append(_row(vecs, ro))
        f.append(_row(vecs, fo))
    return {ch: SupportSet(np.stack(r), np.stack(f)) for ch, (r, f) in grouped.items()}


def save_supports(supports: Mapping[tuple[str, str], SupportSet], index_path) -> None:
    lines, vecs = [], []
    for (region, dim), s in supports.items():
        for r, f in zip(s.real, s.fake):
            off = len(vecs)
            vecs += [r, f]
            lines.append(f"{dim}|{region}|{off}|{off + 1}")
    Path(index_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_vectors(_sidecar(index_path), np.stack(vecs))
