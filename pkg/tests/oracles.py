"""Slow scalar-loop reference implementations used as test oracles."""
import math

import numpy as np


def conv_loop(x, w, b=None, stride=1, pad=0):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def upsample_formula(x, factor):
    """Align-corners-false bilinear upsampling evaluated site by site."""
    c, h, w = x.shape
    out = np.zeros((c, h * factor, w * factor))
    for ch in range(c):
        for dy in range(h * factor):
            sy = min(max((dy + 0.5) / factor - 0.5, 0.0), h - 1.0)
            y0 = int(math.floor(sy))
            y1 = min(y0 + 1, h - 1)
            fy = sy - y0
            for dx in range(w * factor):
                sx = min(max((dx + 0.5) / factor - 0.5, 0.0), w - 1.0)
                x0 = int(math.floor(sx))
                x1 = min(x0 + 1, w - 1)
                fx = sx - x0
                out[ch, dy, dx] = ((1 - fy) * ((1 - fx) * x[ch, y0, x0] + fx * x[ch, y0, x1])
                                   + fy * ((1 - fx) * x[ch, y1, x0] + fx * x[ch, y1, x1]))
    return out


def maxpool_loop(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(x[ch, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
    return out


def se_loop(x, w1, w2):
    c, h, w = x.shape
    pooled = [sum(x[ch].ravel().tolist()) / (h * w) for ch in range(c)]
    hid = [max(0.0, sum(w1[j, ch] * pooled[ch] for ch in range(c))) for j in range(w1.shape[0])]
    gates = []
    for ch in range(c):
        z = sum(w2[ch, j] * hid[j] for j in range(w1.shape[0]))
        gates.append(1.0 / (1.0 + math.exp(-z)))
    out = np.zeros_like(x)
    for ch in range(c):
        out[ch] = x[ch] * gates[ch]
    return out, np.array(gates)


def softmax_direct(row, temperature):
    e = [math.exp(v / temperature) for v in row]
    s = sum(e)
    return np.array([v / s for v in e])


def phi_dense(n):
    """The n x n transformation matrix: zero first row, then -1/+1 adjacent-difference rows."""
    m = np.zeros((n, n))
    for i in range(1, n):
        m[i, i - 1] = -1.0
        m[i, i] = 1.0
    return m


def phi_apply_dense(x):
    """Row-by-row dense matrix-vector product, summed left to right."""
    n = len(x)
    m = phi_dense(n)
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += m[i, j] * x[j]
        out[i] = acc
    return out


def crl_dense(x, delta):
    """Mean over curves of sum_i max(|(Phi x)_i| - delta, 0), via the dense matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    total = 0.0
    for row in x:
        d = phi_apply_dense(row)
        total += sum(max(abs(v) - delta, 0.0) for v in d)
    return total / x.shape[0]


def hd_brute(a, b):
    def directed(p, q):
        worst = 0.0
        for x1, y1 in p:
            best = math.inf
            for x2, y2 in q:
                best = min(best, math.sqrt((x1 - x2) ** 2 + (y1 - y2) ** 2))
            worst = max(worst, best)
        return worst
    return max(directed(a, b), directed(b, a))


def asd_brute(a, b):
    def dists(p, q):
        out = []
        for x1, y1 in p:
            best = math.inf
            for x2, y2 in q:
                best = min(best, math.sqrt((x1 - x2) ** 2 + (y1 - y2) ** 2))
            out.append(best)
        return out
    d = dists(a, b) + dists(b, a)
    return math.fsum(d) / len(d)


def lde_loop(pred, pmask, gt, gmask):
    total, n = [], 0
    for y in range(len(pred)):
        if pmask[y] and gmask[y]:
            total.append(abs(pred[y] - gt[y]))
            n += 1
    return math.fsum(total) / n


def max_shift_loop(xs, mask):
    rows = [y for y in range(len(xs)) if mask[y]]
    y0, y1 = rows[0], rows[-1]
    worst = 0.0
    for y in rows:
        chord = xs[y0] + (xs[y1] - xs[y0]) * (y - y0) / (y1 - y0)
        worst = max(worst, abs(xs[y] - chord))
    return worst


def adam_scalar(p, g, m, v, t, lr, b1, b2, eps):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return p - lr * mhat / (math.sqrt(vhat) + eps), m, v


def total_loss_loop(limits_p, band_p, coords, limits_t, band_t, coords_t, w):
    """Loop-level evaluation of the four-term objective for one sample."""
    h, wd = band_t.shape
    lim = 0.0
    for i in range(h):
        p = limits_p[i]
        lim += -(limits_t[i] * math.log(p) + (1 - limits_t[i]) * math.log(1 - p))
    lim /= h
    seg = 0.0
    for i in range(h):
        for j in range(wd):
            p = band_p[i, j]
            y = band_t[i, j]
            seg += -(w.pos_weight * y * math.log(p) + (1 - y) * math.log(1 - p))
    seg /= h * wd
    rows = [i for i in range(h) if limits_t[i] > 0.5]
    reg = sum(abs(coords[i] - coords_t[i]) for i in rows) / max(len(rows), 1)
    cr = 0.0
    for a, b in zip(rows[:-1], rows[1:]):
        if b == a + 1:
            cr += max(0.0, abs(coords[b] - coords[a]) - w.delta)
    return w.lam * lim + w.gamma * seg + w.xi * reg + w.mu * cr
