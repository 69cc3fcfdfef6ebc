"""Slow, loop-based reference implementations used only by the tests."""
import math


def brute_precision(img, rep, img_cls, rep_cls, k):
    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        return sum(x * y for x, y in zip(a, b)) / max(na * nb, 1e-12)

    total = 0
    for i, a in enumerate(img):
        scored = [(-cos(a, b), j) for j, b in enumerate(rep)]
        scored.sort()
        mine = set(img_cls[i])
        total += sum(1 for _, j in scored[:k] if mine & set(rep_cls[j]))
    return total / (k * len(img))


def brute_cnr(values, mask, eps=1e-8):
    inside = [v for i, v in enumerate(values) if i in mask]
    outside = [v for i, v in enumerate(values) if i not in mask]

    def stats(xs):
        mu = math.fsum(xs) / len(xs)
        return mu, math.fsum((x - mu) ** 2 for x in xs) / len(xs)

    m_in, v_in = stats(inside)
    m_out, v_out = stats(outside)
    return (m_in - m_out) / math.sqrt(v_in + v_out + eps)


def brute_propagate(y, s_i, s_t, steps):
    n, m = len(y), len(y[0])

    def mm(a, b):
        return [[math.fsum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))]
                for i in range(len(a))]

    p = [row[:] for row in y]
    for _ in range(steps):
        p = mm(mm(s_i, p), s_t)
        p = [[p[i][j] + y[i][j] for j in range(m)] for i in range(n)]
    out = []
    for row in p:
        s = math.fsum(row)
        out.append([v / s for v in row] if s > 0 else [0.0] * m)
    return out
