"""Continuous-viewpoint particles anchored to a discrete azimuth bin."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import TAU, wrap_angle
from .model import ContinuousViewpoint, HierarchyConfig


def make_rng(*keys) -> np.random.Generator:
    """Philox stream keyed by integers or strings (strings go through CRC32)."""
    ints = [k if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(i) & 0xFFFFFFFF for i in ints])))


@dataclass(frozen=True, eq=False)
class DistanceReference:
    """Box sizes and camera distances of annotated training instances."""

    widths: np.ndarray
    heights: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        w, h, d = (np.asarray(a, dtype=np.float64).ravel() for a in (self.widths, self.heights, self.distances))
        if not (len(w) == len(h) == len(d)):
            raise ValueError("width, height and distance records differ in length")
        if len(d) and d.min() <= 0:
            raise ValueError("reference distances must be positive")
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "distances", d)

    @classmethod
    def from_records(cls, records) -> "DistanceReference":
        arr = np.asarray(list(records), dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self):
        return len(self.distances)

    def weights(self, region) -> np.ndarray:
        """Normalised exp(-(|dw| + |dh|) / L) with L the longer region side."""
        if len(self) == 0:
            raise ValueError("distance reference is empty")
        w, h = float(region[2]), float(region[3])
        L = max(w, h)
        logits = -(np.abs(self.widths - w) + np.abs(self.heights - h)) / L
        p = np.exp(logits - logits.max())
        return p / p.sum()

    def mode_distance(self, region) -> float:
        return float(self.distances[int(np.argmax(self.weights(region)))])

    def sample(self, region, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.distances[rng.choice(len(self), size=n, p=self.weights(region))]


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Cartesian product of per-axis draws, occlusion offset varying fastest.

    Particle 0 is the anchor: bin centre, mean elevation, highest-weight
    distance and no offset.
    """

    azimuths: np.ndarray
    elevations: np.ndarray
    distances: np.ndarray
    occs: np.ndarray
    seed: int
    source_bin: int

    def __len__(self):
        return len(self.azimuths) * len(self.elevations) * len(self.distances) * len(self.occs)

    def index(self, ia: int, ie: int, idist: int, io: int) -> int:
        n_e, n_d, n_o = len(self.elevations), len(self.distances), len(self.occs)
        return ((ia * n_e + ie) * n_d + idist) * n_o + io

    def unravel(self, k: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(
            k, (len(self.azimuths), len(self.elevations), len(self.distances), len(self.occs))))

    def __getitem__(self, k: int) -> ContinuousViewpoint:
        ia, ie, idist, io = self.unravel(k)
        return ContinuousViewpoint(self.azimuths[ia], self.elevations[ie], self.distances[idist],
                                   tuple(self.occs[io]))

    @property
    def particles(self) -> list[ContinuousViewpoint]:
        return [self[k] for k in range(len(self))]

    def anchor_only(self) -> "ParticleSet":
        return ParticleSet(self.azimuths[:1], self.elevations[:1], self.distances[:1], self.occs[:1],
                           self.seed, self.source_bin)


def occ_sigmas(region, factor: float = 0.15) -> tuple[float, float]:
    L = max(float(region[2]), float(region[3]))
    return factor * L, factor * L


def default_sigmas(m: int, elevations, region=None, occ_factor: float = 0.15):
    """(sigma_a, sigma_e, mu_e, sigma_rx, sigma_ry); the offset sigmas need a region."""
    el = np.asarray(elevations, dtype=np.float64)
    if el.size == 0:
        raise ValueError("need training elevations to estimate sigma_e and mu_e")
    sigma_e = float(el.std(ddof=1)) if el.size > 1 else 0.0
    sx, sy = occ_sigmas(region, occ_factor) if region is not None else (None, None)
    return (TAU / m) / 3.0, sigma_e, float(el.mean()), sx, sy


def sample_particles(v: int, region, refs: DistanceReference, config: HierarchyConfig,
                     seed: int) -> ParticleSet:
    if not 0 <= v < config.m:
        raise ValueError(f"azimuth bin {v} outside [0, {config.m})")
    if len(refs) == 0:
        raise ValueError("distance reference is empty")
    n_a, n_e, n_d, n_o = config.sample_counts
    rng = make_rng(seed, v)
    sa = config.azimuth_sigma
    centre = config.bin_center(v)
    offs = np.clip(rng.normal(0.0, 1.0, n_a) * sa, -3 * sa, 3 * sa)
    offs[0] = 0.0
    az = np.array([wrap_angle(centre + o) for o in offs])
    el = np.clip(config.mu_e + config.sigma_e * rng.normal(0.0, 1.0, n_e), 0.0, math.pi / 2)
    el[0] = min(max(config.mu_e, 0.0), math.pi / 2)
    dist = refs.sample(region, n_d, rng)
    dist[0] = refs.mode_distance(region)
    sx, sy = occ_sigmas(region, config.occ_factor)
    occ = rng.normal(0.0, 1.0, (n_o, 2)) * np.array([sx, sy])
    occ[0] = 0.0
    return ParticleSet(az, el, dist, occ, seed, v)


def anchor_particle(v: int, region, refs: DistanceReference, config: HierarchyConfig) -> ContinuousViewpoint:
    """The discrete hypothesis of bin ``v`` as a continuous viewpoint."""
    return ContinuousViewpoint(config.bin_center(v), min(max(config.mu_e, 0.0), math.pi / 2),
                               refs.mode_distance(region), (0.0, 0.0))
