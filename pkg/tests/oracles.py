"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the package's numeric code; each value is computed
directly from its definition with plain Python floats, or with exact
rationals where ties must be decided exactly.
"""

import math
from fractions import Fraction


def norm(v):
    return math.sqrt(sum(x * x for x in v))


def cos(a, b, eps=1e-12):
    return sum(x * y for x, y in zip(a, b)) / (max(norm(a), eps) * max(norm(b), eps))


def cos_matrix(rows):
    return [[cos(a, b) for b in rows] for a in rows]


def mse(pred, target):
    n = len(pred)
    return sum(sum((p - t) ** 2 for p, t in zip(pr, tr)) for pr, tr in zip(pred, target)) / n


def contrastive(eeg, image, temperature):
    b = len(eeg)
    logits = [[cos(e, v) / temperature for v in image] for e in eeg]
    row = 0.0
    for i in range(b):
        row += math.log(sum(math.exp(z) for z in logits[i])) - logits[i][i]
    col = 0.0
    for j in range(b):
        col += math.log(sum(math.exp(logits[i][j]) for i in range(b))) - logits[j][j]
    return 0.5 * (row / b + col / b)


def semantic(eeg, image):
    me, mi = cos_matrix(eeg), cos_matrix(image)
    b = len(eeg)
    return sum((mi[i][j] - me[i][j]) ** 2 for i in range(b) for j in range(b)) / (b * b)


def kernel(a, b, t):
    return math.exp(-t * norm([x - y for x, y in zip(a, b)]))


def geometric(eeg, image, labels, t, template="min_kernel"):
    total = 0.0
    for k in set(labels):
        pairs = [(i, j) for i in range(len(eeg)) for j in range(len(image)) if labels[i] == k and labels[j] == k]
        vals = [kernel(eeg[i], image[j], t) for i, j in pairs]
        ref = min(vals) if template == "min_kernel" else max(vals)
        total += sum((g - ref) if template == "min_kernel" else (ref - g) for g in vals)
    return total


def central_difference(f, x, h=1e-5):
    """Gradient of scalar f at nested-list/array x by central differences."""
    import numpy as np

    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def exact_cos_key(query, g):
    """Orders exactly like cos(query, g): sign(d) * d^2 / |g|^2 in rationals."""
    d = sum(Fraction(a) * Fraction(b) for a, b in zip(query, g))
    n = sum(Fraction(b) ** 2 for b in g)
    return Fraction(0) if n == 0 else d * abs(d) / n


def brute_force_ranking(query, gallery):
    keys = [exact_cos_key(query, g) for g in gallery]
    return sorted(range(len(gallery)), key=lambda i: (-keys[i], i))


def kernel_fixture(t=2.0):
    """One class, two EEG rows and two image rows, same-class kernels {0.9, 0.7, 0.7, 0.7}.

    e0 sits at the origin, v0 at kernel 0.9 from it and v1 at kernel 0.7;
    e1 lies on the perpendicular bisector of v0-v1 at the 0.7 distance from
    both. Hand value of the geometric loss: (0.9 - 0.7) + 0 + 0 + 0 = 0.2.
    """
    a = -math.log(0.9) / t
    b = -math.log(0.7) / t
    v0 = (a, 0.0)
    v1 = (0.0, b)
    mid = (a / 2, b / 2)
    half = math.hypot(a, b) / 2
    length = math.hypot(a, b)
    normal = (b / length, a / length)
    off = math.sqrt(b * b - half * half)
    e1 = (mid[0] + off * normal[0], mid[1] + off * normal[1])
    return [(0.0, 0.0), e1], [v0, v1]
