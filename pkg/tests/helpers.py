"""Finite-difference gradient checking shared by several test modules."""
import numpy as np

from spreg import tensor as T


def numeric_grad(f, leaves, h=1e-5, max_entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. every (or a sampled
    subset of) entry of each leaf. Returns {id(leaf): (flat_index, grad)}."""
    out = {}
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        g = np.zeros(len(idx))
        for n, k in enumerate(idx):
            old = flat[k]
            flat[k] = old + h
            up = f().item()
            flat[k] = old - h
            down = f().item()
            flat[k] = old
            g[n] = (up - down) / (2 * h)
        out[id(leaf)] = (idx, g)
    return out


def gradient_relative_error(f, leaves, h=1e-5, max_entries=None, rng=None) -> float:
    """max over leaves of ||g_autodiff - g_fd|| / max(||g_autodiff||, ||g_fd||)."""
    for leaf in leaves:
        leaf.grad = None
    T.backward(f())
    auto = {id(leaf): (leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(leaf.data.size)) for leaf in leaves}
    num = numeric_grad(f, leaves, h, max_entries, rng)
    worst = 0.0
    for leaf in leaves:
        idx, g = num[id(leaf)]
        a = auto[id(leaf)][idx]
        scale = max(np.linalg.norm(a), np.linalg.norm(g), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - g) / scale))
    return worst
