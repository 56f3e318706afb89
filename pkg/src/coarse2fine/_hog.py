"""Numba kernel for per-cell orientation histograms."""

import math

from numba import njit


@njit(cache=True)
def cell_hist(imgs, cell_px, bins, out):
    """Accumulate into ``out`` (N, cells_y, cells_x, bins); zero-gradient pixels are skipped."""
    N, H, W = imgs.shape
    scale = bins / math.pi
    for n in range(N):
        for i in range(H):
            up = i - 1 if i > 0 else 0
            dn = i + 1 if i < H - 1 else H - 1
            ci = i // cell_px
            for j in range(W):
                lf = j - 1 if j > 0 else 0
                rt = j + 1 if j < W - 1 else W - 1
                gx = imgs[n, i, rt] - imgs[n, i, lf]
                gy = imgs[n, dn, j] - imgs[n, up, j]
                if gx == 0.0 and gy == 0.0:
                    continue
                mag = math.hypot(gx, gy)
                ang = math.atan2(gy, gx)
                if ang < 0.0:
                    ang += math.pi
                if ang >= math.pi:
                    ang -= math.pi
                pos = ang * scale - 0.5
                lo = math.floor(pos)
                frac = pos - lo
                b0 = int(lo) % bins
                b1 = (b0 + 1) % bins
                cj = j // cell_px
                out[n, ci, cj, b0] += mag * (1.0 - frac)
                out[n, ci, cj, b1] += mag * frac
    return out
