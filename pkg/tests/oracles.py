"""Slow, loop-based reference implementations used only by the tests.

They share no code with the package: plain Python loops over numpy arrays.
"""

import math

import numpy as np


def region_mean_oracle(x, ratio):
    """x: (C, H, W) array. Band k of a length-L axis covers
    rows floor(k*L/ratio) .. floor((k+1)*L/ratio) - 1."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    out = np.zeros((c, ratio, ratio))
    for ch in range(c):
        for i in range(ratio):
            r0, r1 = (i * h) // ratio, ((i + 1) * h) // ratio
            for j in range(ratio):
                c0, c1 = (j * w) // ratio, ((j + 1) * w) // ratio
                total, count = 0.0, 0
                for r in range(r0, r1):
                    for col in range(c0, c1):
                        total += x[ch, r, col]
                        count += 1
                out[ch, i, j] = total / count
    return out


def region_areas(h, w, ratio):
    rows = [((i + 1) * h) // ratio - (i * h) // ratio for i in range(ratio)]
    cols = [((j + 1) * w) // ratio - (j * w) // ratio for j in range(ratio)]
    return np.outer(rows, cols)


def non_local_oracle(f_a, f_b, f_c):
    """f_*: (c, N) arrays. Returns (out (c, N), attention (N, N))."""
    f_a, f_b, f_c = (np.asarray(t, dtype=np.float64) for t in (f_a, f_b, f_c))
    c, n = f_a.shape
    attn = np.zeros((n, n))
    for i in range(n):
        scores = []
        for j in range(n):
            s = 0.0
            for k in range(c):
                s += f_a[k, i] * f_b[k, j]
            scores.append(s)
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        z = sum(exps)
        for j in range(n):
            attn[i, j] = exps[j] / z
    out = np.zeros((f_c.shape[0], n))
    for i in range(n):
        for j in range(n):
            out[:, i] += attn[i, j] * f_c[:, j]
    return out, attn


def conv1x1_oracle(x, weight, bias):
    """x: (Cin, H, W); weight: (Cout, Cin, 1, 1)."""
    x = np.asarray(x, dtype=np.float64)
    cout = weight.shape[0]
    out = np.zeros((cout,) + x.shape[1:])
    for o in range(cout):
        out[o] = bias[o] + np.tensordot(weight[o, :, 0, 0], x, axes=(0, 0))
    return out


def central_difference(f, params, coords, eps=1e-6):
    """Numerical d f / d params[name][idx] for each (name, idx) in coords."""
    grads = []
    for name, idx in coords:
        p = params[name]
        orig = p[idx].item()
        p[idx] = orig + eps
        up = f()
        p[idx] = orig - eps
        down = f()
        p[idx] = orig
        grads.append((up - down) / (2 * eps))
    return grads
