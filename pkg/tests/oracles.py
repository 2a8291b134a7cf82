"""Independent pure-Python reference computations used by the tests.

Nothing here imports the package's math; every value is recomputed with
explicit loops over floats.
"""
import math


def matvec(x, W, b):
    """``x @ W + b`` with ``W`` given as rows over the input index."""
    n_out = len(W[0])
    return [sum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(n_out)]


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def injection(F, gates):
    """Unrolled residual gate recursion.

    ``gates`` is a list of dicts with plain nested lists ``W1 b1 W2 b2 P bp``.
    """
    out = list(F)
    for g in gates:
        hidden = [max(0.0, v) for v in matvec(out, g["W1"], g["b1"])]
        attn = [sigmoid(v) for v in matvec(hidden, g["W2"], g["b2"])]
        resid = [o * a + o for o, a in zip(out, attn)]
        out = matvec(resid, g["P"], g["bp"])
    return out


def column_means(rows):
    n = len(rows)
    return [sum(r[k] for r in rows) / n for k in range(len(rows[0]))]


def gap(m):
    """Per-channel mean of a nested ``W x H x C`` list."""
    W, H, C = len(m), len(m[0]), len(m[0][0])
    return [sum(m[i][j][c] for i in range(W) for j in range(H)) / (W * H) for c in range(C)]


def cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def harmonic(a, b):
    return 2.0 * a * b / (a + b)
