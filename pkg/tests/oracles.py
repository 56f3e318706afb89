"""Independent slow reference implementations the tests compare against.

Nothing here shares code with the package's fast paths beyond data types:
loops are written per pixel and per candidate, and nothing is cached.
"""

from __future__ import annotations

import math

import numpy as np


def naive_cell_histograms(img, cell_px=8, bins=9):
    """Per-pixel orientation voting with explicit loops."""
    H, W = len(img), len(img[0])
    hist = [[[0.0] * bins for _ in range(W // cell_px)] for _ in range(H // cell_px)]
    for i in range(H):
        for j in range(W):
            left = img[i][max(j - 1, 0)]
            right = img[i][min(j + 1, W - 1)]
            up = img[max(i - 1, 0)][j]
            down = img[min(i + 1, H - 1)][j]
            gx, gy = right - left, down - up
            mag = math.sqrt(gx * gx + gy * gy)
            if mag == 0.0:
                continue
            theta = math.atan2(gy, gx) % math.pi  # unsigned
            width = math.pi / bins
            # bin k is centred at (k + 1/2) * width
            u = theta / width - 0.5
            k0 = math.floor(u)
            t = u - k0
            hist[i // cell_px][j // cell_px][k0 % bins] += mag * (1.0 - t)
            hist[i // cell_px][j // cell_px][(k0 + 1) % bins] += mag * t
    return hist


def naive_hog(img, cell_px=8, bins=9, clip=0.2, eps=1e-5):
    """Cell-major descriptor with L2-hys on non-overlapping 2x2 blocks."""
    hist = naive_cell_histograms(img, cell_px, bins)
    cy, cx = len(hist), len(hist[0])
    out = [[None] * cx for _ in range(cy)]
    for by in range(0, cy, 2):
        for bx in range(0, cx, 2):
            cells = [(by, bx), (by, bx + 1), (by + 1, bx), (by + 1, bx + 1)]
            vec = [x for (r, c) in cells for x in hist[r][c]]
            n = math.sqrt(sum(x * x for x in vec) + eps * eps)
            vec = [min(x / n, clip) for x in vec]
            n = math.sqrt(sum(x * x for x in vec) + eps * eps)
            vec = [x / n for x in vec]
            for k, (r, c) in enumerate(cells):
                out[r][c] = vec[k * bins:(k + 1) * bins]
    return np.array([x for r in range(cy) for c in range(cx) for x in out[r][c]])


def naive_contour_value(region_hog, outline, n_cells, cell_px, bins):
    desc = naive_hog(outline.astype(float).tolist(), cell_px, bins)
    return float(sum(a * b for a, b in zip(desc, region_hog))) / n_cells


def naive_energy(w, det, hog, app, cnt2, cnt3, v, s, f, layers):
    """Energy written term by term from the weight blocks."""
    e = w.block("det")[0] * det
    e += sum(a * b for a, b in zip(w.block("glb.1")[v], hog))
    e += sum(a * b for a, b in zip(w.block("loc.1")[v], app))
    if layers >= 2:
        e += sum(a * b for a, b in zip(w.block("glb.2")[v, s], hog))
        e += sum(a * b for a, b in zip(w.block("loc.2")[v, s], app))
        e += w.block("cnt.2")[s] * cnt2
        e += w.block("vw.1")[0]
    if layers >= 3:
        if f is not None:
            e += sum(a * b for a, b in zip(w.block("glb.3")[v, f], hog))
            e += sum(a * b for a, b in zip(w.block("loc.3")[v, f], app))
            e += w.block("cnt.3")[f] * cnt3
        e += w.block("vw.2")[0] + w.block("sb.2")[0]
    return float(e)


def naive_loss(truth, v, s, f, is_bg, losses, config):
    """Loss of one candidate from the label definitions."""
    def subcost(si):
        K = losses.counts[si] if si is not None and si < len(losses.counts) else 1
        return losses.subcat_base / max(K, 1)

    def full(si):
        out = losses.viewpoint
        if config.layers >= 2:
            out += subcost(si)
        if config.layers >= 3:
            out += losses.finer
        return out

    if truth.o == 0:
        return 0.0 if is_bg else full(s)
    if is_bg:
        return full(truth.s2)
    out = losses.viewpoint if v != truth.v1 else 0.0
    if config.layers >= 2 and s != truth.s2:
        out += subcost(truth.s2)
    if config.layers >= 3 and f != truth.f:
        out += losses.finer
    return out


def contour_table(hog, region, config, registry, particle_sets, focal):
    """Contour alignment of every (bin, model, particle), rendered and described from scratch.

    Keys are ("merged", v, s) and ("finer", v, f); values list one score per particle.
    """
    from coarse2fine.geometry import CameraPose, contour_of, render_bits

    T = config.template
    sx, sy = T / region[2], T / region[3]

    def value(cad, p):
        # render on a canvas wide enough for the offset, then cut the template window
        dx, dy = int(np.rint(p.occ[0] * sx)), int(np.rint(p.occ[1] * sy))
        pad = max(abs(dx), abs(dy)) + 3
        S = T + 2 * pad
        bits = render_bits(cad, CameraPose(p.azimuth, p.elevation, p.distance), (S, S),
                           (focal * sx, focal * sy))
        window = contour_of(bits)[pad - dy:pad - dy + T, pad - dx:pad - dx + T]
        return naive_contour_value(hog, window, config.hog_cells, config.cell_px, config.bins)

    table = {}
    for v in range(config.m):
        parts = particle_sets[v].particles
        for s in range(config.n):
            table["merged", v, s] = [value(registry.merged_model(config, s), p) for p in parts]
        if config.layers >= 3:
            for f in range(config.n_finer):
                table["finer", v, f] = [value(registry.finer_model(config, f), p) for p in parts]
    return table


def first_max(values):
    best, arg = values[0], 0
    for k, x in enumerate(values):
        if x > best:
            best, arg = x, k
    return best, arg


def naive_map(w, config, det, hog, app, table, truth=None, losses=None):
    """Exhaustive search over every consistent (o, v, s, f).

    The contour potential of each candidate is the maximum of the table's
    per-particle scores, found by a linear scan. Returns ((o, v, s, f),
    score, (particle2, particle3)) keeping the first maximiser in
    enumeration order, background first.
    """
    def add_loss(score, v, s, f, is_bg):
        if truth is None:
            return score
        return score + naive_loss(truth, v, s, f, is_bg, losses, config)

    best_labels, best_parts = (0, None, None, None), (None, None)
    best = add_loss(0.0, None, None, None, True)
    for v in range(config.m):
        if config.layers == 1:
            e = add_loss(naive_energy(w, det, hog, app, 0.0, 0.0, v, None, None, 1), v, None, None, False)
            if e > best:
                best, best_labels = e, (1, v, None, None)
            continue
        for s in range(config.n):
            finer = config.finer_of(s) + [None] if config.layers >= 3 else [None]
            for f in finer:
                c2, p2 = first_max(table["merged", v, s])
                c3, p3 = first_max(table["finer", v, f]) if f is not None else (0.0, None)
                e = naive_energy(w, det, hog, app, c2, c3, v, s, f, config.layers)
                e = add_loss(e, v, s, f, False)
                if e > best:
                    best, best_labels, best_parts = e, (1, v, s, f), (p2, p3)
    return best_labels, best, best_parts
