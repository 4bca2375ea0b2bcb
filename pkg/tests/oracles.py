"""Independent reference implementations the tests check the library against.

Everything here is written the slow, obvious way (explicit loops, raw
enumeration, pseudo-inverse) and must stay decoupled from the library's own
computation paths.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, shape) -> np.ndarray:
    """Direct 7-deep convolution loop; weights are (m, n) with (c, fy, fx) rows."""
    k = x.shape[0]
    out = np.zeros((k, shape.n, shape.out_h, shape.out_w), dtype=np.float64)
    for img in range(k):
        for f in range(shape.n):
            for oy in range(shape.out_h):
                for ox in range(shape.out_w):
                    acc = float(bias[f])
                    for ci in range(shape.in_c):
                        for fy in range(shape.filt_h):
                            for fx in range(shape.filt_w):
                                iy = oy * shape.stride + fy - shape.pad
                                ix = ox * shape.stride + fx - shape.pad
                                if 0 <= iy < shape.in_h and 0 <= ix < shape.in_w:
                                    w = weights[(ci * shape.filt_h + fy) * shape.filt_w + fx, f]
                                    acc += float(x[img, ci, iy, ix]) * float(w)
                    out[img, f, oy, ox] = acc
    return out


def count_nonskipped(x: np.ndarray, weights: np.ndarray, shape) -> int:
    """MACs whose weight and input activation are both nonzero (pad-free shapes)."""
    assert shape.pad == 0, "instrumented count assumes no zero-padding"
    count = 0
    for img in range(x.shape[0]):
        for f in range(shape.n):
            for oy in range(shape.out_h):
                for ox in range(shape.out_w):
                    for ci in range(shape.in_c):
                        for fy in range(shape.filt_h):
                            for fx in range(shape.filt_w):
                                iy = oy * shape.stride + fy
                                ix = ox * shape.stride + fx
                                w = weights[(ci * shape.filt_h + fy) * shape.filt_w + fx, f]
                                if w != 0.0 and x[img, ci, iy, ix] != 0.0:
                                    count += 1
    return count


# ---------------------------------------------------------------------------
# exhaustive tiling enumeration


def _divisors(x: int) -> list[int]:
    return [d for d in range(1, x + 1) if x % d == 0]


def _footprint(shape, tile) -> tuple[int, int, int]:
    tb, tn, tc, th, tw = tile
    f_if = tb * tc * ((th - 1) * shape.stride + shape.filt_h) * (
        (tw - 1) * shape.stride + shape.filt_w
    )
    f_w = tn * tc * shape.filt_h * shape.filt_w
    f_o = tb * tn * th * tw
    return f_if, f_w, f_o


def _working_set(shape, tile) -> int:
    if all(t == 1 for t in tile):
        return 3  # streaming: one activation + one weight + one partial sum
    return sum(_footprint(shape, tile))


def _tiling_energy(shape, hw, tiles) -> float:
    bounds = (shape.batch, shape.n, shape.in_c, shape.out_h, shape.out_w)
    prev = bounds
    mult = 1
    rc = 1
    energy = 0.0
    for lv, tile in zip(hw.levels[:-1], tiles):
        for i in range(5):
            mult *= math.ceil(prev[i] / tile[i])
        rc *= math.ceil(prev[2] / tile[2])
        f_if, f_w, f_o = _footprint(shape, tile)
        energy += lv.energy * ((f_if + f_w) * mult + f_o * (2 * mult - mult // rc))
        prev = tile
    macs = shape.batch * shape.out_h * shape.out_w * shape.n * shape.m
    energy += hw.levels[-1].energy * 4 * macs
    return energy


def enumerate_tilings(shape, hw):
    """All feasible nested divisor tilings with their movement energies.

    Yields (tiles, energy) with tiles a tuple of one 5-tuple per bounded
    level, generated in lexicographic order of the flattened tile vector.
    """
    bounds = (shape.batch, shape.n, shape.in_c, shape.out_h, shape.out_w)
    per_dim = [_divisors(b) for b in bounds]
    levels = hw.levels[1:]

    def rec(depth, prev, chosen):
        if depth == len(levels):
            yield tuple(chosen), _tiling_energy(shape, hw, chosen)
            return
        cap = levels[depth].capacity
        for tb in per_dim[0]:
            if tb > prev[0]:
                continue
            for tn in per_dim[1]:
                if tn > prev[1]:
                    continue
                for tc in per_dim[2]:
                    if tc > prev[2]:
                        continue
                    for th in per_dim[3]:
                        if th > prev[3]:
                            continue
                        for tw in per_dim[4]:
                            if tw > prev[4]:
                                continue
                            tile = (tb, tn, tc, th, tw)
                            if _working_set(shape, tile) > cap:
                                continue
                            chosen.append(tile)
                            yield from rec(depth + 1, tile, chosen)
                            chosen.pop()

    yield from rec(0, bounds, [])


def best_tiling(shape, hw):
    """Minimum-energy tiling by raw enumeration (lex tie-break)."""
    best = None
    for tiles, energy in enumerate_tilings(shape, hw):
        flat = tuple(v for t in tiles for v in t)
        key = (energy, flat)
        if best is None or key < best:
            best = key
    if best is None:
        raise AssertionError("no feasible tiling")
    return best  # (energy, flat tile vector)


# ---------------------------------------------------------------------------
# least squares / restoration


def pinv_solution(x: np.ndarray, y: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Least-squares weights on the support via the Moore-Penrose pseudo-inverse."""
    full = np.zeros(x.shape[1])
    full[support] = np.linalg.pinv(x[:, support]) @ y
    return full


def best_single_restore(x, y_hat, weights, mask, restorable, original, p=1):
    """Brute-force sweep: which single restorable weight most improves the
    max-l1-residual filter? Returns (filter, weight_row)."""
    resid = y_hat - x @ weights
    per_filter = np.abs(resid).sum(axis=0)
    candidates_per_filter = restorable.any(axis=0)
    best_f = None
    for f in np.argsort(-per_filter, kind="stable"):
        if candidates_per_filter[f]:
            best_f = int(f)
            break
    assert best_f is not None
    best = None
    for j in np.where(restorable[:, best_f])[0]:
        trial = resid[:, best_f] - x[:, j] * original[j, best_f]
        if p == 1:
            gain = np.abs(resid[:, best_f]).sum() - np.abs(trial).sum()
        else:
            gain = np.square(resid[:, best_f]).sum() - np.square(trial).sum()
        if best is None or gain > best[0] + 1e-12:
            best = (gain, int(j))
    return best_f, best[1]


# ---------------------------------------------------------------------------
# finite differences


def fd_gradients(loss_fn, arrays: list[np.ndarray], eps: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. each array in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_fn()
            arr[idx] = orig - eps
            down = loss_fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * eps)
            it.iternext()
        grads.append(g)
    return grads
