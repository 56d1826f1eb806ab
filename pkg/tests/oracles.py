"""Naive reference implementations used as independent test oracles.

Everything here is written as plain scalar loops over Python floats and shares no
code with the package under test.
"""
from __future__ import annotations

import math


def clampi(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def gray_pixel(r, g, b):
    return min(1.0, max(0.0, 0.299 * r + 0.587 * g + 0.114 * b))


def gray_image(img):
    h, w = len(img), len(img[0])
    return [[gray_pixel(*img[y][x]) if isinstance(img[y][x], (list, tuple)) else img[y][x]
             for x in range(w)] for y in range(h)]


def lab_lightness(r, g, b):
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    rl, gl, bl = lin(r), lin(g), lin(b)
    y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl
    yn = 0.2126729 + 0.7151522 + 0.0721750
    t = y / yn
    d = 6.0 / 29.0
    f = t ** (1.0 / 3.0) if t > d ** 3 else t / (3 * d * d) + 4.0 / 29.0
    return min(100.0, max(0.0, 116.0 * f - 16.0))


def convolve(img, k):
    h, w = len(img), len(img[0])
    side = len(k)
    c = side // 2
    out = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(side):
                for dx in range(side):
                    yy = clampi(y + dy - c, 0, h - 1)
                    xx = clampi(x + dx - c, 0, w - 1)
                    acc += k[dy][dx] * img[yy][xx]
            out[y][x] = acc
    return out


def masked_values(field, mask):
    return [field[y][x] for y in range(len(field)) for x in range(len(field[0])) if mask[y][x]]


def mean_var(vals):
    n = len(vals)
    m = sum(vals) / n
    return m, sum((v - m) ** 2 for v in vals) / n


LAPLACE = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]
SOBX = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
SOBY = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]


def blur(gray, mask):
    return mean_var(masked_values(convolve(gray, LAPLACE), mask))[1]


def boundary(gray, mask):
    gx = convolve(gray, SOBX)
    gy = convolve(gray, SOBY)
    h, w = len(gray), len(gray[0])
    mag = [[math.sqrt(gx[y][x] ** 2 + gy[y][x] ** 2) for x in range(w)] for y in range(h)]
    return mean_var(masked_values(mag, mask))[0]


def color(rgb, region, skin):
    h, w = len(rgb), len(rgb[0])
    L = [[lab_lightness(*rgb[y][x]) for x in range(w)] for y in range(h)]
    return abs(mean_var(masked_values(L, region))[0] - mean_var(masked_values(L, skin))[0])


def texture(gray, mask, levels=64):
    h, w = len(gray), len(gray[0])
    q = [[int(math.floor(gray[y][x] * (levels - 1e-9))) for x in range(w)] for y in range(h)]
    glcm = [[0.0] * levels for _ in range(levels)]
    total = 0
    for y in range(h):
        for x in range(w - 1):
            if mask[y][x] and mask[y][x + 1]:
                a, b = q[y][x], q[y][x + 1]
                glcm[a][b] += 1
                glcm[b][a] += 1
                total += 2
    return sum(glcm[i][j] / total * (i - j) ** 2 for i in range(levels) for j in range(levels))


def bbox(mask):
    ys = [y for y in range(len(mask)) for x in range(len(mask[0])) if mask[y][x]]
    xs = [x for y in range(len(mask)) for x in range(len(mask[0])) if mask[y][x]]
    return min(ys), max(ys), min(xs), max(xs)


def resize(patch, oh, ow):
    ih, iw = len(patch), len(patch[0])
    out = [[0.0] * ow for _ in range(oh)]
    for i in range(oh):
        sy = min(max((i + 0.5) * ih / oh - 0.5, 0.0), ih - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, ih - 1)
        fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * iw / ow - 0.5, 0.0), iw - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, iw - 1)
            fx = sx - x0
            top = patch[y0][x0] * (1 - fx) + patch[y0][x1] * fx
            bot = patch[y1][x0] * (1 - fx) + patch[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bot * fy
    return out


def norm_patch(gray, mask):
    y0, y1, x0, x1 = bbox(mask)
    crop = [row[x0:x1 + 1] for row in gray[y0:y1 + 1]]
    p = resize(crop, 32, 32)
    flat = [v for row in p for v in row]
    lo, hi = min(flat), max(flat)
    if hi - lo <= 0:
        return [0.5] * len(flat)
    return [(v - lo) / (hi - lo) for v in flat]


def ssim(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    va = sum((x - ma) ** 2 for x in a) / n
    vb = sum((x - mb) ** 2 for x in b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))


def structure(gray, region, skin):
    return ssim(norm_patch(gray, region), norm_patch(gray, skin))


def auc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    acc = 0.0
    for p in pos:
        for q in neg:
            acc += 1.0 if p > q else 0.5 if p == q else 0.0
    return acc / (len(pos) * len(neg))


def attention(X, S, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Per-head triple loop over queries, keys and head coordinates."""
    P, D = len(X), len(X[0])
    N = len(S)
    dh = D // heads

    def proj(rows, w, b):
        return [[b[j] + sum(r[i] * w[i][j] for i in range(D)) for j in range(D)] for r in rows]

    q, k, v = proj(X, wq, bq), proj(S, wk, bk), proj(S, wv, bv)
    concat = [[0.0] * D for _ in range(P)]
    for h in range(heads):
        lo = h * dh
        for p in range(P):
            logits = [sum(q[p][lo + c] * k[n][lo + c] for c in range(dh)) / math.sqrt(dh) for n in range(N)]
            m = max(logits)
            e = [math.exp(z - m) for z in logits]
            tot = sum(e)
            for c in range(dh):
                concat[p][lo + c] = sum(e[n] / tot * v[n][lo + c] for n in range(N))
    return [[bo[j] + sum(concat[p][i] * wo[i][j] for i in range(D)) for j in range(D)] for p in range(P)]


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def unit(a):
    n = math.sqrt(dot(a, a))
    return [x / n for x in a]


def harmonize_slerp(current, history, tau):
    """Scalar transcription of affinity softmax, reference, t, slerp and rescale."""
    norm = math.sqrt(dot(current, current))
    wi = [x / norm for x in current]
    hist = [unit(h) for h in history]
    ex = [math.exp(dot(wi, h) / tau) for h in hist]
    om = [e / sum(ex) for e in ex]
    ref = unit([sum(om[j] * hist[j][d] for j in range(len(hist))) for d in range(len(wi))])
    cos = dot(wi, ref)
    t = min(1.0, max(0.0, cos))
    theta = math.acos(min(1.0, max(-1.0, cos)))
    if theta < 1e-8:
        new = wi
    else:
        a = math.sin((1 - t) * theta) / math.sin(theta)
        b = math.sin(t * theta) / math.sin(theta)
        new = [a * x + b * y for x, y in zip(wi, ref)]
    return [x * norm for x in new]


def cosine(a, b):
    return dot(a, b) / (math.sqrt(dot(a, a)) * math.sqrt(dot(b, b)))


def select_brute(cands, sup_real, sup_fake):
    """Index of the best (real, fake) candidate pair; first index wins ties."""
    best, best_score = None, None
    for k, (r, f) in enumerate(cands):
        score = sum(cosine(f, s) for s in sup_fake) + sum(cosine(r, s) for s in sup_real)
        if best_score is None or score > best_score:
            best, best_score = k, score
    return best
