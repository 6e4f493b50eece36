"""Reference preprocessing pipeline, written from the stage definitions.

Regenerates the expected stage outputs for lesion.ppm:
    python3 tests/golden/make_golden.py
"""

import math
import os
from fractions import Fraction

HERE = os.path.dirname(os.path.abspath(__file__))


def read_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    assert tokens[0] == b"P6" and tokens[3] == b"255"
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:]
    assert len(data) == w * h * 3
    return [[[data[(y * w + x) * 3 + c] for c in range(3)] for x in range(w)] for y in range(h)]


def write_pnm(path, img):
    h, w, ch = len(img), len(img[0]), len(img[0][0])
    magic = b"P6" if ch == 3 else b"P5"
    body = bytes(v for row in img for px in row for v in px)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h) + body)


def quantize(v):
    r = math.floor(v + 0.5)
    return 0 if not r > 0 else 255 if r >= 255 else int(r)


def clamp(i, n):
    return 0 if i < 0 else n - 1 if i >= n else i


def window(img, r, pick):
    h, w, ch = len(img), len(img[0]), len(img[0][0])
    return [[[pick(img[clamp(y + dy, h)][clamp(x + dx, w)][c] for dy in range(-r, r + 1) for dx in range(-r, r + 1))
              for c in range(ch)] for x in range(w)] for y in range(h)]


def close(img, size=5):
    return window(window(img, size // 2, max), size // 2, min)


def bilateral(img, sigma_s=3.0, sigma_r=30.0):
    r = math.ceil(2 * sigma_s)
    spatial = {(dx, dy): math.exp(-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s))
               for dy in range(-r, r + 1) for dx in range(-r, r + 1)}
    rng = [math.exp(-(d * d) / (2.0 * sigma_r * sigma_r)) for d in range(256)]
    h, w, ch = len(img), len(img[0]), len(img[0][0])
    out = [[[0] * ch for _ in range(w)] for _ in range(h)]
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                centre = img[y][x][c]
                num = den = 0.0
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        v = img[clamp(y + dy, h)][clamp(x + dx, w)][c]
                        wgt = spatial[(dx, dy)] * rng[abs(v - centre)]
                        num += wgt * v
                        den += wgt
                out[y][x][c] = quantize(num / den)
    return out


def gray(img):
    return [[[(299 * p[0] + 587 * p[1] + 114 * p[2] + 500) // 1000] for p in row] for row in img]


def otsu(g):
    counts = [0] * 256
    for row in g:
        for p in row:
            counts[p[0]] += 1
    n = sum(counts)
    best, best_var = None, None
    for t in range(255):
        lo = [(i, counts[i]) for i in range(t + 1)]
        hi = [(i, counts[i]) for i in range(t + 1, 256)]
        n0, n1 = sum(c for _, c in lo), sum(c for _, c in hi)
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * c for i, c in lo), n0)
        mu1 = Fraction(sum(i * c for i, c in hi), n1)
        within = (sum(c * (i - mu0) ** 2 for i, c in lo) + sum(c * (i - mu1) ** 2 for i, c in hi)) / n
        if best_var is None or within < best_var:
            best, best_var = t, within
    return best


def segment(g, t):
    return [[[255 if p[0] >= t else 0] for p in row] for row in g]


def highlight(img, mask, alpha=1.14):
    return [[[quantize(v + alpha * m[0]) for v in px] for px, m in zip(row, mrow)] for row, mrow in zip(img, mask)]


def unsharp(img, sigma=2.0, gain=1.2):
    r = math.ceil(3 * sigma)
    k = [math.exp(-(i * i) / (2.0 * sigma * sigma)) for i in range(-r, r + 1)]
    total = 0.0
    for v in k:
        total += v
    k = [v / total for v in k]
    h, w, ch = len(img), len(img[0]), len(img[0][0])
    tmp = [[[0.0] * ch for _ in range(w)] for _ in range(h)]
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                acc = 0.0
                for d in range(-r, r + 1):
                    acc += k[d + r] * img[y][clamp(x + d, w)][c]
                tmp[y][x][c] = acc
    out = [[[0] * ch for _ in range(w)] for _ in range(h)]
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                acc = 0.0
                for d in range(-r, r + 1):
                    acc += k[d + r] * tmp[clamp(y + d, h)][x][c]
                v = img[y][x][c]
                out[y][x][c] = quantize(v + gain * (v - acc))
    return out


def resize(img, w_out, h_out):
    h, w, ch = len(img), len(img[0]), len(img[0][0])
    sx, sy = w / w_out, h / h_out
    out = [[[0] * ch for _ in range(w_out)] for _ in range(h_out)]
    for y in range(h_out):
        fy_src = min(max((y + 0.5) * sy - 0.5, 0.0), h - 1.0)
        y0 = int(fy_src)
        y1 = min(y0 + 1, h - 1)
        fy = fy_src - y0
        for x in range(w_out):
            fx_src = min(max((x + 0.5) * sx - 0.5, 0.0), w - 1.0)
            x0 = int(fx_src)
            x1 = min(x0 + 1, w - 1)
            fx = fx_src - x0
            for c in range(ch):
                top = (1.0 - fx) * img[y0][x0][c] + fx * img[y0][x1][c]
                bottom = (1.0 - fx) * img[y1][x0][c] + fx * img[y1][x1][c]
                out[y][x][c] = quantize((1.0 - fy) * top + fy * bottom)
    return out


def main():
    src = read_ppm(os.path.join(HERE, "lesion.ppm"))
    out = os.path.join(HERE, "lesion")
    os.makedirs(out, exist_ok=True)
    closed = close(src)
    smoothed = bilateral(closed)
    g = gray(smoothed)
    t = otsu(g)
    mask = segment(g, t)
    highlighted = highlight(smoothed, mask)
    sharpened = unsharp(highlighted)
    resized = resize(sharpened, 64, 64)
    for name, img in [("1_closed.ppm", closed), ("2_smoothed.ppm", smoothed), ("3_gray.pgm", g), ("4_mask.pgm", mask),
                      ("5_highlighted.ppm", highlighted), ("6_sharpened.ppm", sharpened),
                      ("7_resized.ppm", resized)]:
        write_pnm(os.path.join(out, name), img)
    with open(os.path.join(out, "threshold.txt"), "w") as f:
        f.write("%d\n" % t)


if __name__ == "__main__":
    main()
