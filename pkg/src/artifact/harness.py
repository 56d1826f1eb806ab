"""Desk-scale incremental protocol: synthetic forgery tasks, frame-level AUC, reporting."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import encoder as enc
from . import imgstat
from .anchors import (AnchorLibrary, SupportSet, TextCandidatePair, build_library, toy_embed,
                      MIN_TOY_DIM)
from .errors import InvalidInput, UndefinedMetric
from .harmonizer import METHODS, TaskHeadArchive, harmonize
from .indicators import (CHANNELS, DIMENSIONS, anomaly_scores, compute_indicator_matrix,
                         fit_normalizer, is_valid_channel, read_mask_manifest, write_mask_manifest)
from .trainer import Heads, TrainConfig, TrainSample, test_time_anchors, train_task

# --- synthetic faces ----------------------------------------------------------------

# (row0, row1, col0, col1) boxes on a 64x64 canvas; scaled for other sides
_BOXES = {
    "eyes": [(18, 25, 14, 50)],
    "nose": [(26, 40, 27, 37)],
    "cheeks": [(30, 44, 10, 24), (30, 44, 40, 54)],
    "mouth": [(44, 51, 22, 42)],
    "jawline": [(52, 58, 12, 52)],
    "skin": [(10, 17, 20, 44)],
}
_FACE = (6, 60, 6, 58)
_RING = 3


def region_masks(side: int = 64) -> dict[str, np.ndarray]:
    """Fixed rectangular masks for the six regions and the skin reference."""
    scale = side / 64.0

    def box(r0, r1, c0, c1):
        m = np.zeros((side, side), dtype=bool)
        m[round(r0 * scale):round(r1 * scale), round(c0 * scale):round(c1 * scale)] = True
        return m

    masks = {}
    for name, boxes in _BOXES.items():
        m = np.zeros((side, side), dtype=bool)
        for b in boxes:
            m |= box(*b)
        masks[name] = m
    outer = box(*_FACE)
    inner = box(_FACE[0] + _RING, _FACE[1] - _RING, _FACE[2] + _RING, _FACE[3] - _RING)
    masks["boundary"] = outer & ~inner
    return masks


@dataclass(frozen=True)
class SyntheticSpec:
    """One synthetic task: which channels the fakes corrupt, and how hard.

    ``recipe`` entries are ``(region, dimension, intensity)``. Counts are per class.
    """

    recipe: tuple[tuple[str, str, float], ...] = ()
    image_size: int = 64
    patch_size: int = 8
    n_train: int = 200
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        for entry in self.recipe:
            if len(entry) != 3 or not is_valid_channel(entry[0], entry[1]):
                raise InvalidInput(f"invalid recipe channel {entry!r}")
        if self.n_train < 2 or self.n_test < 2:
            raise InvalidInput("need at least 2 samples per class per split")
        if self.image_size % self.patch_size:
            raise InvalidInput("patch size must divide the image side")
        object.__setattr__(self, "recipe", tuple((r, d, float(i)) for r, d, i in self.recipe))

    @property
    def dimensions(self) -> np.ndarray:
        y = np.zeros(len(DIMENSIONS), dtype=np.int64)
        for _, dim, _ in self.recipe:
            y[DIMENSIONS.index(dim)] = 1
        return y


def make_face(rng: np.random.Generator, side: int, masks: dict[str, np.ndarray]) -> np.ndarray:
    """A smooth random-gradient 'face' with darker eyes, a reddish mouth and fine skin grain."""
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    skin = np.array([0.72, 0.54, 0.44]) + rng.uniform(-0.06, 0.06, 3)
    grad = rng.uniform(-0.12, 0.12) * xx + rng.uniform(-0.12, 0.12) * yy
    img = skin + grad[..., None]
    face = np.zeros((side, side), dtype=bool)
    s = side / 64.0
    face[round(_FACE[0] * s):round(_FACE[1] * s), round(_FACE[2] * s):round(_FACE[3] * s)] = True
    bg = rng.uniform(0.1, 0.35, 3)
    img[~face] = bg + 0.05 * grad[~face, None]
    img[masks["eyes"]] *= rng.uniform(0.55, 0.7)
    img[masks["mouth"]] *= np.array([1.05, 0.7, 0.7]) * rng.uniform(0.9, 1.0)
    img[masks["nose"]] *= rng.uniform(0.9, 1.0)
    img += rng.normal(0.0, rng.uniform(0.02, 0.035), (side, side, 1))
    return np.clip(img, 0.0, 1.0)


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    return sum(p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)) / 9.0


def apply_artifact(img: np.ndarray, mask: np.ndarray, dimension: str, intensity: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Corrupt ``img`` inside ``mask`` so that the named indicator moves."""
    out = img.copy()
    if dimension == "blur":
        blurred = img
        for _ in range(max(1, int(round(intensity)))):
            blurred = _box_blur(blurred)
        out[mask] = blurred[mask]
    elif dimension == "color":
        out[mask] += intensity
    elif dimension == "structure":
        rows, cols = np.nonzero(mask)
        stripes = np.sin(np.pi * (cols - cols.min()) / 2.0 + rng.uniform(0, np.pi))
        out[rows, cols] += intensity * stripes[:, None]
    elif dimension == "texture":
        out[mask] += rng.normal(0.0, intensity, (int(mask.sum()), img.shape[2]))
    elif dimension == "boundary":
        rows = np.nonzero(mask)[0]
        mid = (rows.min() + rows.max() + 1) // 2
        seam = mask.copy()
        seam[mid:] = False
        out[seam] += intensity
    else:
        raise InvalidInput(f"unknown dimension {dimension!r}")
    return np.clip(out, 0.0, 1.0)


@dataclass
class TaskData:
    train: list[TrainSample]
    test: list[TrainSample]
    masks: dict[str, np.ndarray]
    spec: SyntheticSpec | None


def gen_synthetic_task(spec: SyntheticSpec, task_index: int) -> TaskData:
    """Paired reals and fakes per split; fakes are the reals with the recipe applied."""
    masks = region_masks(spec.image_size)
    splits = {}
    for code, (name, n) in enumerate((("train", spec.n_train), ("test", spec.n_test))):
        rng = np.random.default_rng([spec.seed, task_index, code])
        samples = []
        for i in range(n):
            real = make_face(rng, spec.image_size, masks)
            fake = real
            for region, dim, intensity in spec.recipe:
                fake = apply_artifact(fake, masks[region], dim, intensity * rng.uniform(0.7, 1.3), rng)
            samples.append(TrainSample(real, 0, np.zeros(len(DIMENSIONS)), masks=masks,
                                       sample_id=f"t{task_index}-{name}-{i:04d}-real"))
            samples.append(TrainSample(fake, 1, spec.dimensions, masks=masks,
                                       sample_id=f"t{task_index}-{name}-{i:04d}-fake"))
        splits[name] = samples
    return TaskData(train=splits["train"], test=splits["test"], masks=masks, spec=spec)


LABEL_HEADER = ("file", "y_bin") + DIMENSIONS


def save_dataset(data: TaskData, out_dir) -> Path:
    """Write ``masks/*.pgm`` with ``masks.txt`` and ``{train,test}/*.ppm`` with ``labels.csv``.

    Pixels are stored at 8 bits, so a reloaded dataset is quantized.
    """
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rel = {}
    for name, m in data.masks.items():
        imgstat.save_mask(out / "masks" / f"{name}.pgm", m)
        rel[name] = f"masks/{name}.pgm"
    write_mask_manifest(out / "masks.txt", rel)
    for split in ("train", "test"):
        d = out / split
        d.mkdir(exist_ok=True)
        with open(d / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LABEL_HEADER)
            for i, s in enumerate(getattr(data, split)):
                name = f"{s.sample_id or f'{split}-{i:04d}'}.ppm"
                imgstat.save_pnm(d / name, s.image)
                w.writerow([name, s.y_bin, *(int(v) for v in s.y_ind)])
    return out


def load_split(data_dir, split: str) -> list[TrainSample]:
    root = Path(data_dir)
    masks = read_mask_manifest(root / "masks.txt")
    samples = []
    with open(root / split / "labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != LABEL_HEADER:
            raise InvalidInput(f"{root / split / 'labels.csv'}: expected header {','.join(LABEL_HEADER)}")
        for row in reader:
            if len(row) != len(LABEL_HEADER):
                raise InvalidInput(f"{root / split / 'labels.csv'}: malformed row {row}")
            img = imgstat.load_image(root / split / row[0])
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            samples.append(TrainSample(img, int(row[1]), [int(v) for v in row[2:]], masks=masks,
                                       sample_id=Path(row[0]).stem))
    return samples


def load_dataset(data_dir) -> TaskData:
    root = Path(data_dir)
    return TaskData(train=load_split(root, "train"), test=load_split(root, "test"),
                    masks=read_mask_manifest(root / "masks.txt"), spec=None)


def attach_indicators(samples: Sequence[TrainSample], calibration: Sequence[TrainSample] | None = None):
    """Compute indicator matrices and anomaly scores in place.

    The normalizer is fitted on ``calibration`` (default: the real samples).
    """
    for s in samples:
        if s.indicators is None:
            s.indicators = compute_indicator_matrix(s.image, s.masks, s.sample_id)
    calib = calibration if calibration is not None else [s for s in samples if s.y_bin == 0]
    for s in calib:
        if s.indicators is None:
            s.indicators = compute_indicator_matrix(s.image, s.masks, s.sample_id)
    norm = fit_normalizer([s.indicators for s in calib])
    for s in samples:
        s.indicators = anomaly_scores(s.indicators, norm)
    return norm


# --- toy anchor library ------------------------------------------------------------------

def toy_library_inputs(dim: int, seed: int = 0, k: int = 4, support_size: int = 3):
    """Candidate sets and support sets with a planted best candidate per channel.

    Candidate ``planted`` (seeded per channel) carries the exact toy embeddings;
    the others are noisy variants. Below the toy embedder's minimum width the
    vectors are built at that width and randomly projected down.
    """
    full = max(dim, MIN_TOY_DIM)
    proj = None
    if full != dim:
        proj = np.random.default_rng([seed, 99]).standard_normal((full, dim)) / np.sqrt(dim)

    def fit(v):
        v = v if proj is None else v @ proj
        return v / np.linalg.norm(v)

    rng = np.random.default_rng([seed, 17])
    candidates, supports, planted = {}, {}, {}
    for region, dimension in CHANNELS:
        base = {p: toy_embed(dimension, region, p, seed, full) for p in ("real", "fake")}
        best = int(rng.integers(k))
        pairs = []
        for j in range(k):
            if j == best:
                r, f = base["real"], base["fake"]
            else:
                r = base["real"] + 0.8 * rng.standard_normal(full) / np.sqrt(full)
                f = base["fake"] + 0.8 * rng.standard_normal(full) / np.sqrt(full)
            pairs.append(TextCandidatePair(
                real_text=f"authentic {dimension} in the {region} (variant {j})",
                fake_text=f"{dimension} artifact in the {region} (variant {j})",
                real_embedding=fit(r), fake_embedding=fit(f)))
        sup_r = [fit(toy_embed(dimension, region, "real", seed + 1000 + s, full)) for s in range(support_size)]
        sup_f = [fit(toy_embed(dimension, region, "fake", seed + 1000 + s, full)) for s in range(support_size)]
        candidates[(region, dimension)] = pairs
        supports[(region, dimension)] = SupportSet(np.stack(sup_r), np.stack(sup_f))
        planted[(region, dimension)] = best
    return candidates, supports, planted


def toy_library(dim: int, seed: int = 0) -> AnchorLibrary:
    candidates, supports, _ = toy_library_inputs(dim, seed)
    return build_library(candidates, supports)


# --- metric ----------------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic, average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InvalidInput("scores and labels must be 1-D and equally long")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise InvalidInput("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --- protocol ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Ablations:
    adh: bool = True
    apa: bool = True
    ind: bool = True
    align: str = "slerp"
    tau: float = 0.1
    ema_alpha: float = 0.9

    def __post_init__(self):
        if self.align not in METHODS:
            raise InvalidInput(f"align must be one of {METHODS}, got {self.align!r}")


# desk-scale defaults: learning from scratch needs a larger step than fine-tuning
DESK_TRAIN = TrainConfig(epochs=10, batch=32, lr=1e-3, n_warmup=2, n_anchors=3)
DESK_ENCODER = enc.EncoderConfig(image_size=64, patch_size=8, d_model=32, layers=4, heads=4,
                                 mlp_ratio=2, apa_layers=2)
DESK_TASKS = (
    (("mouth", "blur", 3.0), ("cheeks", "color", 0.2)),
    (("eyes", "texture", 0.25), ("jawline", "boundary", 0.5)),
)


def desk_tasks(seed: int = 0, n_train: int = 200, n_test: int = 100) -> list[SyntheticSpec]:
    return [SyntheticSpec(recipe=r, n_train=n_train, n_test=n_test, seed=seed) for r in DESK_TASKS]


@dataclass
class ProtocolResult:
    auc: dict[tuple[int, int], float]
    manifest: dict = field(default_factory=dict)
    logs: list = field(default_factory=list)
    # final (encoder, heads, library, archive), kept for checkpointing
    state: tuple | None = None

    @property
    def num_tasks(self) -> int:
        return max(s for s, _ in self.auc) if self.auc else 0

    def averages(self) -> dict[int, float]:
        out = {}
        for s in range(1, self.num_tasks + 1):
            out[s] = float(np.mean([self.auc[(s, e)] for e in range(1, s + 1)]))
        return out

    def matrix(self) -> np.ndarray:
        T = self.num_tasks
        m = np.full((T, T), np.nan)
        for (s, e), v in self.auc.items():
            m[s - 1, e - 1] = v
        return m


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def score_samples(samples: Sequence[TrainSample], encoder: enc.EncoderState, heads: Heads,
                  lib: AnchorLibrary | None, n_anchors: int, use_apa: bool, batch: int = 64) -> np.ndarray:
    """Fake-class probability per sample; anchors are retrieved without labels."""
    out = []
    for start in range(0, len(samples), batch):
        x = np.stack([s.image for s in samples[start:start + batch]])
        anchors = test_time_anchors(x, encoder, lib, n_anchors) if use_apa and lib is not None else None
        out.append(heads.fake_probability(enc.forward(x, anchors, encoder)[0]))
    return np.concatenate(out)


def evaluate(samples, encoder, heads, lib, n_anchors, use_apa) -> float:
    scores = score_samples(samples, encoder, heads, lib, n_anchors, use_apa)
    return auc(scores, [s.y_bin for s in samples])


def run_protocol(task_specs: Sequence[SyntheticSpec], cfg: TrainConfig = DESK_TRAIN,
                 ablations: Ablations = Ablations(), enc_cfg: enc.EncoderConfig = DESK_ENCODER,
                 seed: int | None = None, tasks: Sequence[TaskData] | None = None) -> ProtocolResult:
    """Train tasks in sequence, harmonize heads, and score every test split seen so far.

    ``tasks`` may supply pre-generated data (then ``task_specs`` is only echoed
    in the manifest).
    """
    if not task_specs and not tasks:
        raise InvalidInput("protocol needs at least one task")
    seed = cfg.seed if seed is None else seed
    cfg = replace(cfg, seed=seed, use_apa=ablations.apa, mu1=cfg.mu1 if ablations.ind else 0.0)
    payload = {"train": asdict(cfg), "encoder": asdict(enc_cfg), "ablations": asdict(ablations),
               "tasks": [asdict(s) for s in task_specs]}
    manifest = {"config_hash": config_hash(payload), "seed": seed, "config": payload,
                "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "stages": []}

    lib = toy_library(enc_cfg.d_model, seed)
    encoder = enc.EncoderState.init(enc_cfg, seed)
    heads = Heads.init(enc_cfg.d_model, seed)
    archive = TaskHeadArchive()
    snapshot = None
    seen: list[TaskData] = []
    result = ProtocolResult(auc={}, manifest=manifest)

    n_tasks = len(tasks) if tasks is not None else len(task_specs)
    for t in range(1, n_tasks + 1):
        t0 = time.perf_counter()
        data = tasks[t - 1] if tasks is not None else gen_synthetic_task(task_specs[t - 1], t)
        attach_indicators(data.train)
        t1 = time.perf_counter()
        encoder, heads, snapshot, log_rows = train_task(
            data.train, encoder, heads, snapshot, replace(cfg, seed=seed * 1000 + t), lib)
        result.logs.extend((t, *row) for row in log_rows)
        t2 = time.perf_counter()
        if ablations.adh:
            heads = harmonize(heads, archive, ablations.tau, ablations.align, ablations.ema_alpha, task_id=t)
        seen.append(data)
        for e, d in enumerate(seen, 1):
            result.auc[(t, e)] = evaluate(d.test, encoder, heads, lib, cfg.n_anchors, cfg.use_apa)
        t3 = time.perf_counter()
        manifest["stages"].append({"task": t, "data_s": t1 - t0, "train_s": t2 - t1, "eval_s": t3 - t2})
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    result.state = (encoder, heads, lib, archive)
    return result


def write_auc_csv(result: ProtocolResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["after_task", "eval_task", "auc"])
        for (s, e) in sorted(result.auc):
            w.writerow([s, e, f"{result.auc[(s, e)]:.6f}"])


def report(result: ProtocolResult, out_dir) -> dict[str, Path]:
    """Write ``auc.csv``, ``train_log.csv`` and ``manifest.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"auc": out / "auc.csv", "log": out / "train_log.csv", "manifest": out / "manifest.txt"}
    write_auc_csv(result, paths["auc"])
    with open(paths["log"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "epoch", "batch", "loss_total", "loss_cls", "loss_ind", "loss_dis"])
        for task, epoch, batch, *losses in result.logs:
            w.writerow([task, epoch, batch, *(f"{v:.6f}" for v in losses)])
    m = result.manifest
    lines = [f"config_hash={m.get('config_hash', '')}", f"seed={m.get('seed', '')}",
             f"started={m.get('started', '')}", f"finished={m.get('finished', '')}"]
    for st in m.get("stages", []):
        lines.append(f"task{st['task']}_wallclock_s=data:{st['data_s']:.6f},train:{st['train_s']:.6f},"
                     f"eval:{st['eval_s']:.6f}")
    for s, v in result.averages().items():
        lines.append(f"avg_auc_after_task{s}={v:.6f}")
    lines.append("config=" + json.dumps(m.get("config", {}), sort_keys=True, default=str))
    paths["manifest"].write_text("\n".join(lines) + "\n")
    return paths
