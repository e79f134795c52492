"""Finite-difference oracles shared by the gradient tests."""

import copy
import math

import numpy as np
import torch

from sfuda.refine import COLUMN_EPS


def rel_err(a, b):
    a, b = float(a), float(b)
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0.0 else abs(a - b) / denom


def fd_input_grad(model, objective, x, coords, h=1e-3):
    """Central differences of ``objective(model64, x64)`` at ``coords``, all in float64."""
    m64 = copy.deepcopy(model).double().eval()
    base = np.asarray(x, dtype=np.float64)
    out = []
    with torch.no_grad():
        for idx in coords:
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = float(objective(m64, torch.from_numpy(plus)))
            fm = float(objective(m64, torch.from_numpy(minus)))
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def fd_param_grad(model, loss_fn, flat_indices, h=1e-3):
    """Central differences of ``loss_fn(model64)`` w.r.t. flat parameter indices."""
    m64 = copy.deepcopy(model).double().eval()
    params = list(m64.parameters())
    sizes = np.cumsum([0] + [p.numel() for p in params])
    out = []
    with torch.no_grad():
        for j in flat_indices:
            i = int(np.searchsorted(sizes, j, side="right") - 1)
            flat = params[i].view(-1)
            k = int(j - sizes[i])
            old = flat[k].item()
            flat[k] = old + h
            fp = float(loss_fn(m64))
            flat[k] = old - h
            fm = float(loss_fn(m64))
            flat[k] = old
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def random_coords(rng, shape, n):
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(n)]


def brute_refine(p):
    """Scalar loops over the refinement formula."""
    n, k = len(p), len(p[0])
    col = [sum(p[j][c] for j in range(n)) for c in range(k)]
    col = [c if c > 0 else COLUMN_EPS for c in col]
    out = []
    for j in range(n):
        w = [p[j][c] / math.sqrt(col[c]) for c in range(k)]
        s = sum(w)
        out.append([v / s for v in w])
    return out
