"""Numba scanline kernels shared by the silhouette renderer and the scene shader."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def scan_fill(out, xs, ys, faces, values):
    """Fill triangles into ``out`` in order, writing ``values[t]`` at covered pixels.

    A pixel (i, j) is covered when its centre (j + 0.5, i + 0.5) lies inside
    or on the boundary of the projected triangle. Later triangles overwrite
    earlier ones, so callers wanting painter's order sort ``faces`` first.
    """
    H, W = out.shape
    for t in range(faces.shape[0]):
        ia = faces[t, 0]
        ib = faces[t, 1]
        ic = faces[t, 2]
        px = (xs[ia], xs[ib], xs[ic])
        py = (ys[ia], ys[ib], ys[ic])
        ymin = min(py[0], min(py[1], py[2]))
        ymax = max(py[0], max(py[1], py[2]))
        i0 = int(math.ceil(ymin - 0.5))
        i1 = int(math.floor(ymax - 0.5))
        if i0 < 0:
            i0 = 0
        if i1 > H - 1:
            i1 = H - 1
        for i in range(i0, i1 + 1):
            yc = i + 0.5
            xl = np.inf
            xr = -np.inf
            for e in range(3):
                x0 = px[e]
                y0 = py[e]
                x1 = px[(e + 1) % 3]
                y1 = py[(e + 1) % 3]
                if y0 == y1:
                    continue
                if (y0 <= yc <= y1) or (y1 <= yc <= y0):
                    x = x0 + (yc - y0) * (x1 - x0) / (y1 - y0)
                    if x < xl:
                        xl = x
                    if x > xr:
                        xr = x
            if xl > xr:
                continue
            j0 = int(math.ceil(xl - 0.5))
            j1 = int(math.floor(xr - 0.5))
            if j0 < 0:
                j0 = 0
            if j1 > W - 1:
                j1 = W - 1
            for j in range(j0, j1 + 1):
                out[i, j] = values[t]
    return out
