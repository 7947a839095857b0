"""Independent straight-line reference implementations used as test oracles.

Everything here is written with explicit Python loops over numpy arrays so
that it shares no code path with the vectorized torch implementation.
"""
import math

import numpy as np


def softmax_row(values):
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    s = sum(exps)
    return [e / s for e in exps]


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def linear(x, weight, bias=None):
    """x: (in,), weight: (out, in) -> (out,)"""
    out = []
    for o in range(weight.shape[0]):
        acc = 0.0 if bias is None else float(bias[o])
        for i in range(weight.shape[1]):
            acc += float(weight[o, i]) * float(x[i])
        out.append(acc)
    return np.array(out)


def mlp(x, fc1_w, fc1_b, fc2_w, fc2_b):
    hidden = np.array([gelu(v) for v in linear(x, fc1_w, fc1_b)])
    return linear(hidden, fc2_w, fc2_b)


def soft_iou(r, m):
    inter = union = 0.0
    for a, b in zip(np.ravel(r), np.ravel(m)):
        inter += min(float(a), float(b))
        union += max(float(a), float(b))
    return inter / union if union > 0 else 0.0


def binary_iou(a, b):
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += int(bool(x) and bool(y))
        union += int(bool(x) or bool(y))
    return inter / union if union else 0.0


def alignment(r, masks, valid):
    """Scores, foreground index, foreground mask, background union."""
    h, w = r.shape
    scores = []
    for p, m in enumerate(masks):
        best = 0.0
        if valid[p]:
            for i in range(h):
                for j in range(w):
                    best = max(best, float(r[i, j]) * float(m[i, j]))
        scores.append(best)
    fg = None
    for p in range(len(masks)):
        if valid[p] and (fg is None or scores[p] > scores[fg]):
            fg = p
    bg = np.zeros((h, w))
    for p, m in enumerate(masks):
        if valid[p] and p != fg:
            for i in range(h):
                for j in range(w):
                    bg[i, j] = max(bg[i, j], float(m[i, j]))
    return scores, fg, np.asarray(masks[fg], dtype=float), bg


def ambiguity(r, fg, bg):
    raw = 1.0 - (soft_iou(r, fg) - soft_iou(r, bg))
    return min(1.0, max(0.0, raw))


def ras(ambs):
    n = len(ambs)
    if n < 2:
        return 0.0
    total = 0.0
    for k in range(n - 1):
        total += max(0.0, ambs[k + 1] - ambs[k])
    return total / (n - 1)


def cls(y):
    b = len(y)
    total = 0.0
    for i in range(b):
        row = 0.0
        for j in range(b):
            s = 1.0 / (1.0 + math.exp(-y[i][j]))
            row += math.log(s) if i == j else math.log(1.0 - s)
        total += -row / b
    return total / b


def filter_proposals(raw, area_min, iou_dedupe, p):
    """Indices kept, in output order."""
    areas = [int(np.sum(m)) for m in raw]
    cand = [i for i in range(len(raw)) if areas[i] >= area_min]
    # selection sort by (-area, index)
    ordered = []
    while cand:
        best = cand[0]
        for i in cand[1:]:
            if areas[i] > areas[best] or (areas[i] == areas[best] and i < best):
                best = i
        ordered.append(best)
        cand.remove(best)
    kept = []
    for i in ordered:
        if all(binary_iou(raw[i], raw[j]) <= iou_dedupe for j in kept):
            kept.append(i)
    return kept[:p]


def bilinear(grid, out_h, out_w):
    """Half-pixel-centre bilinear resize with edge clamping."""
    h, w = grid.shape
    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        sy = max((y + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(out_w):
            sx = max((x + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[y, x] = ((1 - fy) * ((1 - fx) * grid[y0, x0] + fx * grid[y0, x1])
                         + fy * ((1 - fx) * grid[y1, x0] + fx * grid[y1, x1]))
    return out


def miou_oiou(preds, gts):
    ious = []
    inter_total = union_total = 0
    for p, g in zip(preds, gts):
        inter = union = 0
        for a, b in zip(np.ravel(p), np.ravel(g)):
            inter += int(bool(a) and bool(b))
            union += int(bool(a) or bool(b))
        ious.append(inter / union if union else 0.0)
        inter_total += inter
        union_total += union
    return sum(ious) / len(ious), (inter_total / union_total if union_total else 0.0)


def point_hits(peaks, gts):
    return sum(1 for (r, c), g in zip(peaks, gts) if g[r, c]) / len(gts)


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at numpy array x by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad
