"""Chunked-NumPy pairwise drift, used when the compiled extension is absent.

Same contract as kscontrol._pairwise.pairwise_accumulate: per-i sums run over
ascending j, so the two backends agree to rounding; chunking only batches the
i rows and does not change any summation order.
"""

from __future__ import annotations

import numpy as np


def pairwise_accumulate(pos, dphi, inv_dr, r_max, tail_coef, scale, out, num_threads=1):
    pos = np.asarray(pos, dtype=float)
    n = pos.shape[0]
    m = dphi.shape[0]
    chunk = max(1, min(n, int(4e6) // max(n, 1)))
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        diff = pos[a:b, None, :] - pos[None, :, :]          # (c, n, 3)
        r = np.sqrt(np.sum(diff * diff, axis=-1))           # (c, n)
        t = np.minimum(r * inv_dr, m - 1 - 1e-12)
        k = t.astype(np.intp)
        frac = t - k
        w_tab = dphi[k] + (dphi[np.minimum(k + 1, m - 1)] - dphi[k]) * frac
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r < r_max, w_tab / r, tail_coef / np.maximum(r, 1e-300) ** 3)
        rows = np.arange(a, b)
        w[rows - a, rows] = 0.0                             # self term
        w[r <= 0.0] = 0.0
        out[a:b] = scale * np.einsum("cn,cnd->cd", w, diff)
    return out
