"""Small pre-norm vision transformer with gated anchor cross-attention.

Everything is float64 numpy with hand-written reverse-mode gradients so that
training and finite-difference checks need no autodiff framework. Batches are
``(B, H, W, C)`` image stacks; anchor embeddings are ``(B, N, D)`` (one set per
sample) and are treated as constants by :func:`backward`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidInput, TraceMismatch

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    in_channels: int = 3
    patch_size: int = 8
    d_model: int = 32
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    apa_layers: int = 2
    # "learnable" or a fixed float scale applied to every gate coordinate
    gate_mode: str | float = "learnable"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise InvalidInput(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 1 <= self.apa_layers <= self.layers:
            raise InvalidInput(f"apa_layers must be in [1, {self.layers}], got {self.apa_layers}")
        if self.image_size % self.patch_size:
            raise InvalidInput(f"patch size {self.patch_size} does not divide image side {self.image_size}")
        if self.gate_mode != "learnable":
            object.__setattr__(self, "gate_mode", float(self.gate_mode))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def learnable_gate(self) -> bool:
        return self.gate_mode == "learnable"

    def is_apa_layer(self, layer: int) -> bool:
        return layer >= self.layers - self.apa_layers


_ATTN_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    D, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    patch_in = cfg.in_channels * cfg.patch_size ** 2
    attn = {"wq": (D, D), "bq": (D,), "wk": (D, D), "bk": (D,),
            "wv": (D, D), "bv": (D,), "wo": (D, D), "bo": (D,)}
    shapes = {"patch_w": (patch_in, D), "patch_b": (D,), "cls": (D,), "pos": (cfg.num_tokens, D)}
    for l in range(cfg.layers):
        p = f"l{l}."
        shapes[p + "ln1_g"] = (D,)
        shapes[p + "ln1_b"] = (D,)
        shapes.update({p + "attn_" + k: s for k, s in attn.items()})
        shapes[p + "ln2_g"] = (D,)
        shapes[p + "ln2_b"] = (D,)
        shapes[p + "mlp_w1"] = (D, hid)
        shapes[p + "mlp_b1"] = (hid,)
        shapes[p + "mlp_w2"] = (hid, D)
        shapes[p + "mlp_b2"] = (D,)
        if cfg.is_apa_layer(l):
            shapes.update({p + "apa_" + k: s for k, s in attn.items()})
            if cfg.learnable_gate:
                shapes[p + "apa_gate"] = (D,)
    shapes["lnf_g"] = (D,)
    shapes["lnf_b"] = (D,)
    return shapes


class EncoderState:
    """Parameter container. ``version`` increments on every in-place update."""

    def __init__(self, cfg: EncoderConfig, params: Mapping[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if list(params) != list(shapes):
            missing = set(shapes) ^ set(params)
            if missing:
                raise InvalidInput(f"parameter set mismatch: {sorted(missing)}")
            params = {k: params[k] for k in shapes}
        for k, s in shapes.items():
            if np.shape(params[k]) != s:
                raise InvalidInput(f"{k}: expected shape {s}, got {np.shape(params[k])}")
        self.cfg = cfg
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.version = 0

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int = 0) -> "EncoderState":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g") and leaf.startswith("ln"):
                params[name] = np.ones(shape)
            elif leaf in ("cls", "pos"):
                params[name] = 0.02 * rng.standard_normal(shape)
            elif len(shape) == 2:
                params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                # biases and gates start at zero
                params[name] = np.zeros(shape)
        return cls(cfg, params)

    def gate(self, layer: int) -> np.ndarray:
        if self.cfg.learnable_gate:
            return self.params[f"l{layer}.apa_gate"]
        return np.full(self.cfg.d_model, self.cfg.gate_mode)

    def copy(self) -> "EncoderState":
        return EncoderState(self.cfg, self.params)

    def snapshot(self) -> "EncoderState":
        """Read-only copy, safe to share as a distillation teacher."""
        snap = self.copy()
        for v in snap.params.values():
            v.setflags(write=False)
        return snap

    def bump(self) -> None:
        self.version += 1

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


# --- primitives -------------------------------------------------------------

def _linear(x, w, b):
    return x @ w + b


def _linear_back(dy, x, w):
    D_in = w.shape[0]
    dw = x.reshape(-1, D_in).T @ dy.reshape(-1, w.shape[1])
    db = dy.reshape(-1, w.shape[1]).sum(axis=0)
    return dy @ w.T, dw, db


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_back(dy, cache):
    xhat, inv, g = cache
    D = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, D).sum(axis=0)
    db = dy.reshape(-1, D).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_tanh(x):
    return np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))


def gelu(x):
    """Tanh-approximated GELU."""
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * (x * x))


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x, heads):
    B, T, D = x.shape
    return x.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def multi_head_attention(xq, xkv, p: Mapping[str, np.ndarray], heads: int):
    """Scaled dot-product attention; queries from ``xq``, keys and values from ``xkv``.

    ``p`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. Returns ``(out, cache)``.
    """
    scale = 1.0 / np.sqrt(xq.shape[-1] // heads)
    q = _split_heads(_linear(xq, p["wq"], p["bq"]), heads)
    k = _split_heads(_linear(xkv, p["wk"], p["bk"]), heads)
    v = _split_heads(_linear(xkv, p["wv"], p["bv"]), heads)
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = _merge_heads(attn @ v)
    out = _linear(o, p["wo"], p["bo"])
    return out, (xq, xkv, q, k, v, attn, o, scale)


def _mha_back(dout, cache, p, heads):
    xq, xkv, q, k, v, attn, o, scale = cache
    do, dwo, dbo = _linear_back(dout, o, p["wo"])
    do = _split_heads(do, heads)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dxq, dwq, dbq = _linear_back(_merge_heads(dq), xq, p["wq"])
    dxk, dwk, dbk = _linear_back(_merge_heads(dk), xkv, p["wk"])
    dxv, dwv, dbv = _linear_back(_merge_heads(dv), xkv, p["wv"])
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
             "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dxq, dxk + dxv, grads


def cross_attention(x, anchors, p: Mapping[str, np.ndarray], heads: int) -> np.ndarray:
    """Visual tokens ``x`` (P, D) or (B, P, D) attend over anchor embeddings (N, D) or (B, N, D)."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(anchors, dtype=np.float64)
    if s.shape[-2] == 0:
        raise InvalidInput("cross-attention needs at least one anchor; disable injection instead")
    single = x.ndim == 2
    if single:
        x = x[None]
    if s.ndim == 2:
        s = np.broadcast_to(s, (x.shape[0],) + s.shape)
    out, _ = multi_head_attention(x, s, p, heads)
    return out[0] if single else out


def gated_fuse(x, x_tilde, gate) -> np.ndarray:
    return x + np.asarray(gate) * x_tilde


# --- encoder ------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, P, patch*patch*C)``, patches in row-major order."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def _as_batch(images, cfg: EncoderConfig) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == (3 if cfg.in_channels > 1 else 2)
    if single:
        x = x[None]
    if cfg.in_channels == 1 and x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise InvalidInput(f"expected images with {cfg.in_channels} channels, got shape {x.shape}")
    if x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size:
        if x.shape[1] % cfg.patch_size or x.shape[2] % cfg.patch_size:
            raise InvalidInput(f"image {x.shape[1]}x{x.shape[2]} is not divisible into {cfg.patch_size}-pixel patches")
        raise InvalidInput(f"encoder expects {cfg.image_size}x{cfg.image_size} images, got {x.shape[1]}x{x.shape[2]}")
    return x, single


def _as_anchor_batch(anchors, batch: int, D: int) -> np.ndarray | None:
    if anchors is None:
        return None
    s = np.asarray(anchors, dtype=np.float64)
    if s.size == 0:
        return None
    if s.ndim == 2:
        s = np.broadcast_to(s, (batch,) + s.shape)
    if s.ndim != 3 or s.shape[0] != batch or s.shape[2] != D:
        raise InvalidInput(f"anchors must be (N, {D}) or ({batch}, N, {D}), got {s.shape}")
    return s


def _sub(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: params[prefix + k] for k in _ATTN_NAMES}


@dataclass
class ForwardTrace:
    """Cached activations from :func:`forward`, consumed once by :func:`backward`."""

    state: EncoderState
    version: int
    single: bool
    injected: bool
    patches: np.ndarray
    layers: list = field(default_factory=list)
    final: tuple | None = None
    tokens: list = field(default_factory=list)
    feature: np.ndarray | None = None


def forward(images, anchors, state: EncoderState, keep_tokens: bool = False):
    """Encode images, optionally injecting anchor embeddings into the top layers.

    Args:
        images: one image ``(H, W, C)`` or a batch ``(B, H, W, C)``.
        anchors: ``None`` or an empty array disables injection; otherwise
            ``(N, D)`` shared by the batch or ``(B, N, D)`` per sample.
        state: encoder parameters.
        keep_tokens: also record each layer's output tokens in the trace.

    Returns:
        ``(F, trace)`` where ``F`` is the normed class-token output, ``(D,)``
        for a single image or ``(B, D)`` for a batch.
    """
    cfg, P = state.cfg, state.params
    x_img, single = _as_batch(images, cfg)
    B = x_img.shape[0]
    s = _as_anchor_batch(anchors, B, cfg.d_model)
    patches = patchify(x_img, cfg.patch_size)
    trace = ForwardTrace(state=state, version=state.version, single=single,
                         injected=s is not None, patches=patches)

    x = _linear(patches, P["patch_w"], P["patch_b"])
    cls = np.broadcast_to(P["cls"], (B, 1, cfg.d_model))
    x = np.concatenate([cls, x], axis=1) + P["pos"]

    for l in range(cfg.layers):
        pre = f"l{l}."
        h, ln1 = layer_norm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
        a, attn = multi_head_attention(h, h, _sub(P, pre + "attn_"), cfg.heads)
        x = x + a
        h2, ln2 = layer_norm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
        z = _linear(h2, P[pre + "mlp_w1"], P[pre + "mlp_b1"])
        tz = _gelu_tanh(z)
        gz = 0.5 * z * (1.0 + tz)
        x = x + _linear(gz, P[pre + "mlp_w2"], P[pre + "mlp_b2"])
        apa = None
        if s is not None and cfg.is_apa_layer(l):
            xt, apa_cache = multi_head_attention(x, s, _sub(P, pre + "apa_"), cfg.heads)
            gate = state.gate(l)
            x = gated_fuse(x, xt, gate)
            apa = (xt, apa_cache, gate)
        trace.layers.append((ln1, attn, ln2, h2, z, tz, gz, apa))
        if keep_tokens:
            trace.tokens.append(x.copy())

    feat, lnf = layer_norm(x[:, 0], P["lnf_g"], P["lnf_b"])
    trace.final = lnf
    trace.feature = feat
    return (feat[0] if single else feat), trace


def backward(trace: ForwardTrace, d_feature) -> dict[str, np.ndarray]:
    """Exact parameter gradients given the upstream gradient on ``F``."""
    state = trace.state
    if trace.version != state.version:
        raise TraceMismatch(f"trace recorded at version {trace.version}, state is at {state.version}")
    cfg, P = state.cfg, state.params
    dF = np.asarray(d_feature, dtype=np.float64)
    if trace.single:
        dF = dF[None]
    if dF.shape != trace.feature.shape:
        raise InvalidInput(f"upstream gradient shape {dF.shape} != feature shape {trace.feature.shape}")
    B = dF.shape[0]
    grads: dict[str, np.ndarray] = {}

    d_cls_tok, grads["lnf_g"], grads["lnf_b"] = _layer_norm_back(dF, trace.final)
    dx = np.zeros((B, cfg.num_tokens, cfg.d_model))
    dx[:, 0] = d_cls_tok

    for l in reversed(range(cfg.layers)):
        pre = f"l{l}."
        ln1, attn, ln2, h2, z, tz, gz, apa = trace.layers[l]
        if apa is not None:
            xt, apa_cache, gate = apa
            if cfg.learnable_gate:
                grads[pre + "apa_gate"] = (dx * xt).reshape(-1, cfg.d_model).sum(axis=0)
            dxq, _, g_apa = _mha_back(dx * gate, apa_cache, _sub(P, pre + "apa_"), cfg.heads)
            for k, v in g_apa.items():
                grads[pre + "apa_" + k] = v
            dx = dx + dxq
        elif cfg.is_apa_layer(l):
            for k in _ATTN_NAMES:
                grads[pre + "apa_" + k] = np.zeros_like(P[pre + "apa_" + k])
            if cfg.learnable_gate:
                grads[pre + "apa_gate"] = np.zeros(cfg.d_model)
        dgz, grads[pre + "mlp_w2"], grads[pre + "mlp_b2"] = _linear_back(dx, gz, P[pre + "mlp_w2"])
        dz = dgz * _gelu_grad(z, tz)
        dh2, grads[pre + "mlp_w1"], grads[pre + "mlp_b1"] = _linear_back(dz, h2, P[pre + "mlp_w1"])
        dres, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_back(dh2, ln2)
        dx = dx + dres
        dhq, dhkv, g_attn = _mha_back(dx, attn, _sub(P, pre + "attn_"), cfg.heads)
        for k, v in g_attn.items():
            grads[pre + "attn_" + k] = v
        dres, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_back(dhq + dhkv, ln1)
        dx = dx + dres

    grads["pos"] = dx.sum(axis=0)
    grads["cls"] = dx[:, 0].sum(axis=0)
    _, grads["patch_w"], grads["patch_b"] = _linear_back(dx[:, 1:], trace.patches, P["patch_w"])
    return {k: grads[k] for k in P}


# --- gradient checking --------------------------------------------------------

def tensor_relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> float:
    """max|a - n| / max|a|, or the absolute error when max|a| is below ``abs_floor``."""
    err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = float(np.max(np.abs(analytic))) if analytic.size else 0.0
    return err if scale < abs_floor else err / scale


def finite_difference(params: dict[str, np.ndarray], loss_fn: Callable[[], float],
                      names=None, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. entries of ``params`` (perturbed in place)."""
    out = {}
    for name in names if names is not None else list(params):
        arr = params[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def probe_loss(feature: np.ndarray, direction: np.ndarray) -> tuple[float, np.ndarray]:
    """Smooth scalar probe ``0.5*|F|^2 + <F, direction>`` and its gradient."""
    return float(0.5 * np.sum(feature ** 2) + np.sum(feature * direction)), feature + direction


def gradient_check(state: EncoderState, images, anchors=None, h: float = 1e-5,
                   seed: int = 0) -> dict[str, float]:
    """Per-tensor max relative error of reverse-mode vs central-difference gradients."""
    work = state.copy()
    probe_dir = np.random.default_rng(seed).standard_normal(
        forward(images, anchors, work)[0].shape)

    def loss():
        return probe_loss(forward(images, anchors, work)[0], probe_dir)[0]

    feat, trace = forward(images, anchors, work)
    analytic = backward(trace, probe_loss(feat, probe_dir)[1])
    numeric = finite_difference(work.params, loss, h=h)
    return {k: tensor_relative_error(analytic[k], numeric[k]) for k in work.params}


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"AIFE"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: EncoderState, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Binary checkpoint: config JSON, then named little-endian f64 tensors.

    ``extra`` tensors (e.g. classifier heads) are appended after the encoder's own.
    """
    cfg_blob = json.dumps(asdict(state.cfg), sort_keys=True).encode()
    tensors = dict(state.params)
    for k, v in (extra or {}).items():
        tensors["extra." + k] = np.asarray(v, dtype=np.float64)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[EncoderState, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidInput(f"{path}: bad magic {data[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path}: unsupported schema version {version}")
    pos = 12
    cfg = EncoderConfig(**json.loads(data[pos:pos + cfg_len]))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    extra = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("extra.")}
    return EncoderState(cfg, params), extra
