"""Independent brute-force reimplementations used as test oracles."""

from decimal import ROUND_HALF_UP, Decimal


def reflect(i, n):
    # mirror without repeating the edge sample, like numpy's "reflect"
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def clamp04(v):
    return min(max(float(v), 0.0), 4.0)


def kernel_means(mask, x0, y0, w, h, k=5, stride=1):
    rows, cols = len(mask), len(mask[0])
    out = []
    for y in range(y0, y0 + h, stride):
        for x in range(x0, x0 + w, stride):
            s = 0.0
            for j in range(k):
                for i in range(k):
                    s += clamp04(mask[reflect(y + j, rows)][reflect(x + i, cols)])
            out.append(s / (k * k))
    return out


def round_half_away(v):
    return int(Decimal(repr(v)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def window_class(mask, bbox, agg, k=5):
    vals = kernel_means(mask, *bbox, k=k)
    if agg == "mean":
        v = sum(vals) / len(vals)
    elif agg == "min":
        v = min(vals)
    else:
        v = max(vals)
    return min(max(round_half_away(v), 0), 4)


def threshold_accuracy(pred, gt, thr=1.25):
    hits = total = 0
    for prow, grow in zip(pred, gt):
        for p, g in zip(prow, grow):
            a = clamp04(p) + 1.0
            b = float(g) + 1.0
            hits += max(a / b, b / a) < thr
            total += 1
    return hits / total
