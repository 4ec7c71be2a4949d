"""Straight-line per-pixel reference implementations.

These deliberately share no code with the package: plain Python loops over
pixels, written from the metric definitions.
"""
import math


def bilinear_sample(img, x, y):
    """Sample ``img[y][x][c]`` (nested lists or array) at real coordinates,
    clamping to the border."""
    h = len(img)
    w = len(img[0])
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    out = []
    for c in range(len(img[0][0])):
        v = ((1 - ax) * (1 - ay) * img[y0][x0][c] + ax * (1 - ay) * img[y0][x1][c]
             + (1 - ax) * ay * img[y1][x0][c] + ax * ay * img[y1][x1][c])
        out.append(float(v))
    return out


def warp(src, flow):
    h = len(src)
    w = len(src[0])
    return [[bilinear_sample(src, x + float(flow[y][x][0]), y + float(flow[y][x][1]))
             for x in range(w)] for y in range(h)]


def occlusion(f_fwd, f_bwd, a1, a2):
    h = len(f_fwd)
    w = len(f_fwd[0])
    back = warp(f_bwd, f_fwd)
    mask = []
    for y in range(h):
        row = []
        for x in range(w):
            fx, fy = float(f_fwd[y][x][0]), float(f_fwd[y][x][1])
            bx, by = back[y][x]
            res = (fx + bx) ** 2 + (fy + by) ** 2
            bound = a1 * (fx * fx + fy * fy + bx * bx + by * by) + a2
            row.append([1.0 if res <= bound else 0.0])
        mask.append(row)
    return mask


def e_pair(o_t, o_s, flow, mask):
    warped = warp(o_s, flow)
    num = 0.0
    den = 0.0
    for y in range(len(o_t)):
        for x in range(len(o_t[0])):
            m = float(mask[y][x][0])
            l1 = sum(abs(float(o_t[y][x][c]) - warped[y][x][c]) for c in range(len(o_t[0][0])))
            num += m * l1
            den += m
    return num / den


def e_warp(outputs, flows_fwd, flows_bwd, a1, a2):
    """``flows_fwd[(t, s)]`` is the flow from t to s; ``flows_bwd`` is unused
    beyond the mask, kept separate for clarity."""
    total = 0.0
    n = len(outputs)
    for t in range(1, n):
        for s in (0, t - 1):
            mask = occlusion(flows_fwd[(t, s)], flows_fwd[(s, t)], a1, a2)
            total += e_pair(outputs[t], outputs[s], flows_fwd[(t, s)], mask)
    return total / (n - 1)


def psnr(a, b):
    se = 0.0
    count = 0
    for y in range(len(a)):
        for x in range(len(a[0])):
            for c in range(len(a[0][0])):
                d = float(a[y][x][c]) - float(b[y][x][c])
                se += d * d
                count += 1
    mse = se / count
    if mse < 1e-10:
        return 100.0
    return min(100.0, -10.0 * math.log10(mse))


def f_data(processed, outputs):
    vals = [psnr(processed[t], outputs[t]) for t in range(1, len(processed))]
    return sum(vals) / len(vals)


def resize_bilinear(img, h2, w2):
    """Half-pixel-centre bilinear resize, one output pixel at a time."""
    h = len(img)
    w = len(img[0])
    out = []
    for y in range(h2):
        row = []
        for x in range(w2):
            sx = (x + 0.5) * w / w2 - 0.5
            sy = (y + 0.5) * h / h2 - 0.5
            row.append(bilinear_sample(img, sx, sy))
        out.append(row)
    return out


def masked_l1(pred, target, mask):
    num = 0.0
    den = 0.0
    for y in range(len(pred)):
        for x in range(len(pred[0])):
            m = float(mask[y][x][0])
            if m:
                c = len(pred[0][0])
                num += sum(abs(float(pred[y][x][k]) - float(target[y][x][k])) for k in range(c)) / c
                den += 1
    return num / den if den else 0.0


def pixel_distance(a, b):
    return [[[sum(abs(float(a[y][x][c]) - float(b[y][x][c])) for c in range(len(a[0][0])))
              / len(a[0][0])] for x in range(len(a[0]))] for y in range(len(a))]
