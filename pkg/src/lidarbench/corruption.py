"""Seeded corruption simulators for single-agent LiDAR clouds.

Six reproducible corruption operators: beam missing, motion blur, fog,
snow, crosstalk, and cross sensor.  Each exists both as a pure function
``f(cloud, ..., seed)`` and as a thin sklearn-style transformer so suites
can be configured, cloned, and composed like any other estimator.

Contracts shared by all operators:
  * pure functions of ``(cloud, params, seed)``: same inputs, bit-identical
    outputs;
  * subset operators (beam missing, cross sensor) return a subset of the
    input points in input order, coordinates untouched;
  * displacement operators (motion blur, crosstalk) keep the point count and
    all per-point metadata;
  * the weather operators (fog, snow) never push a point beyond its original
    range, and their clean-parameter limits are exact identities.

The fog and snow models are simplified physical simulators: fog splits each
return into an attenuated hard echo and a randomly sampled soft echo and
keeps the stronger one; snow samples non-intersecting opaque spheres and
occludes rays that hit one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Type

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .rng import derive_rng
from .scene import PointCloud
from .validation import check_array, check_probability

__all__ = [
    "FogParams",
    "SnowParams",
    "CorruptionConfig",
    "assign_beams",
    "beam_missing",
    "motion_blur",
    "fog",
    "snow",
    "crosstalk",
    "cross_sensor",
    "BeamMissing",
    "MotionBlur",
    "Fog",
    "Snow",
    "Crosstalk",
    "CrossSensor",
    "CORRUPTION_KINDS",
]

DEFAULT_N_BEAMS = 64


@dataclass(frozen=True)
class FogParams:
    """Fog model parameters.

    ``alpha`` is the attenuation coefficient (1/m), ``beta`` scales the
    soft-echo backscatter, ``noise_floor`` is the std of additive Gaussian
    noise on the soft echo.  ``alpha = beta = noise_floor = 0`` is an exact
    identity.
    """

    alpha: float = 0.06
    beta: float = 0.05
    noise_floor: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "noise_floor"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class SnowParams:
    """Snow model parameters.

    ``rate`` is the particle density (1/m^3), ``particle_radius`` the opaque
    sphere radius, and ``domain`` the axis-aligned sampling box given as a
    (3, 2) array of (min, max) per axis.  The radius must be small relative
    to the domain so the non-intersection sampling can terminate.
    """

    rate: float = 0.05
    particle_radius: float = 0.02
    domain: np.ndarray = field(
        default_factory=lambda: np.array([[-40.0, 40.0], [-40.0, 40.0], [-2.0, 6.0]])
    )

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError("rate must be >= 0")
        if not self.particle_radius > 0:
            raise ValueError("particle_radius must be > 0")
        domain = check_array(self.domain, "domain", shape=(3, 2))
        extents = domain[:, 1] - domain[:, 0]
        if not np.all(extents > 0):
            raise ValueError("domain max must exceed min on every axis")
        if self.particle_radius * 10.0 > extents.min():
            raise ValueError(
                "particle_radius must be small relative to the domain "
                f"(10 * radius = {10 * self.particle_radius} exceeds the "
                f"smallest extent {extents.min()})"
            )
        object.__setattr__(self, "domain", domain)

    @property
    def volume(self) -> float:
        extents = self.domain[:, 1] - self.domain[:, 0]
        return float(np.prod(extents))


def assign_beams(cloud: PointCloud, n_beams: int) -> PointCloud:
    """Fill beam indices by binning elevation angles into ``n_beams`` bins.

    Bins are equal-width over the cloud's [min, max] elevation span, with
    the top bin closed.  Clouds that already carry beam indices are
    returned unchanged.
    """
    if n_beams < 1:
        raise ValueError(f"n_beams must be >= 1, got {n_beams}")
    if cloud.has_beams:
        return cloud
    if len(cloud) == 0:
        raise ValueError("cannot assign beams to an empty cloud")
    xy = np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1])
    if np.all((xy == 0) & (cloud.xyz[:, 2] == 0)):
        raise ValueError("all points at the origin: elevation is degenerate")
    elevation = np.arctan2(cloud.xyz[:, 2], xy)
    lo, hi = elevation.min(), elevation.max()
    span = hi - lo
    if span == 0.0:
        idx = np.zeros(len(cloud), dtype=np.int32)
    else:
        idx = np.floor((elevation - lo) / span * n_beams).astype(np.int32)
        np.clip(idx, 0, n_beams - 1, out=idx)
    return cloud.with_beam(idx)


def _with_beams(cloud: PointCloud, n_beams: int) -> tuple:
    """Return (cloud with beams, had_beams flag) for beam-based operators."""
    had = cloud.has_beams
    return assign_beams(cloud, n_beams) if not had else cloud, had


def beam_missing(
    cloud: PointCloud,
    n_drop: int = 16,
    seed: int = 0,
    n_beams: int = DEFAULT_N_BEAMS,
) -> PointCloud:
    """Remove all points on ``n_drop`` randomly selected occupied beams.

    Beams are drawn uniformly without replacement from the occupied beam
    indices.  Surviving points keep their order.  If the input carried no
    beam metadata, indices are assigned internally (``n_beams`` elevation
    bins) and the output carries none either.
    """
    if n_drop < 0:
        raise ValueError(f"n_drop must be >= 0, got {n_drop}")
    if n_drop == 0:
        return cloud
    beamed, had_beams = _with_beams(cloud, n_beams)
    occupied = np.unique(beamed.beam)
    if n_drop >= occupied.size:
        raise ValueError(
            f"n_drop = {n_drop} must be smaller than the number of occupied "
            f"beams ({occupied.size})"
        )
    rng = derive_rng(seed, "beam_missing")
    dropped = rng.choice(occupied, size=n_drop, replace=False)
    keep = ~np.isin(beamed.beam, dropped)
    out = beamed.take(keep)
    return out if had_beams else out.with_beam(None)


def motion_blur(cloud: PointCloud, sigma: float = 0.2, seed: int = 0) -> PointCloud:
    """Add zero-mean Gaussian jitter of std ``sigma`` to every coordinate."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0 or len(cloud) == 0:
        return cloud
    rng = derive_rng(seed, "motion_blur")
    noise = rng.normal(0.0, sigma, size=(len(cloud), 3))
    return cloud.with_xyz(cloud.xyz + noise)


def fog(cloud: PointCloud, params: FogParams, seed: int = 0) -> PointCloud:
    """Apply the two-echo fog model.

    Per point at range R with reflectance r:
      * hard echo: original position, intensity ``r * exp(-2 alpha R)``;
      * soft echo: range drawn uniformly in (0, R), intensity
        ``beta * exp(-2 alpha R_soft) * (1 - exp(-2 alpha R_soft))`` plus
        Gaussian noise of std ``noise_floor``, clamped into [0, 1].
    The stronger echo wins: if the soft echo dominates, the point moves to
    the soft range along its ray and takes the soft intensity.
    """
    n = len(cloud)
    if n == 0:
        return cloud
    ranges = np.linalg.norm(cloud.xyz, axis=1)
    hard = cloud.reflectance * np.exp(-2.0 * params.alpha * ranges)
    # Draw order is part of the contract: soft ranges first, then noise.
    rng = derive_rng(seed, "fog")
    soft_range = rng.uniform(0.0, 1.0, size=n) * ranges
    noise = rng.normal(0.0, 1.0, size=n) * params.noise_floor
    decay = np.exp(-2.0 * params.alpha * soft_range)
    soft = params.beta * decay * (1.0 - decay) + noise
    np.clip(soft, 0.0, 1.0, out=soft)
    relocate = (soft > hard) & (ranges > 0)
    scale = np.ones(n)
    scale[relocate] = soft_range[relocate] / ranges[relocate]
    new_xyz = cloud.xyz * scale[:, None]
    new_refl = np.where(relocate, soft, hard)
    return cloud.with_xyz(new_xyz).with_reflectance(new_refl)


def _sample_snow_particles(params: SnowParams, rng: np.random.Generator) -> np.ndarray:
    """Poisson-count particle centers with pairwise distance >= 2 * radius.

    Candidates violating the exclusion distance are redrawn, at most 100
    attempts per particle before it is skipped.
    """
    count = int(rng.poisson(params.rate * params.volume))
    low, high = params.domain[:, 0], params.domain[:, 1]
    min_dist_sq = (2.0 * params.particle_radius) ** 2
    accepted = np.empty((count, 3))
    n = 0
    for _ in range(count):
        for _attempt in range(100):
            candidate = rng.uniform(low, high)
            delta = accepted[:n] - candidate
            if n == 0 or (np.einsum("ij,ij->i", delta, delta) >= min_dist_sq).all():
                accepted[n] = candidate
                n += 1
                break
    return accepted[:n].copy()


def snow(cloud: PointCloud, params: SnowParams, seed: int = 0) -> PointCloud:
    """Occlude rays with randomly sampled opaque snow spheres.

    Particle centers follow a Poisson count over the sampling domain with an
    exclusion radius of one diameter.  A point is occluded by the nearest
    particle whose center lies within ``particle_radius`` of its sensor ray
    and strictly between sensor and point; it is pulled back to where the
    ray enters that sphere, with reflectance scaled by the chord ratio.
    """
    n = len(cloud)
    if n == 0 or params.rate == 0.0:
        return cloud
    rng = derive_rng(seed, "snow")
    particles = _sample_snow_particles(params, rng)
    if particles.shape[0] == 0:
        return cloud
    ranges = np.linalg.norm(cloud.xyz, axis=1)
    valid = ranges > 0
    new_xyz = np.array(cloud.xyz)
    new_refl = np.array(cloud.reflectance)
    radius_sq = params.particle_radius**2
    center_norm_sq = np.einsum("ij,ij->i", particles, particles)
    # Chunk the N x K ray/particle test to bound memory; buffers are
    # reused in place because the arrays dominate the runtime.  Rows per
    # chunk shrink as K grows to keep each buffer around 50 MB.
    chunk = int(min(8192, max(512, 6_000_000 // particles.shape[0])))
    idx_all = np.flatnonzero(valid)
    for start in range(0, idx_all.size, chunk):
        idx = idx_all[start : start + chunk]
        dirs = cloud.xyz[idx] / ranges[idx, None]
        along = dirs @ particles.T  # (n_chunk, K) projection of centers
        perp_sq = along * along
        np.subtract(center_norm_sq[None, :], perp_sq, out=perp_sq)
        np.clip(perp_sq, 0.0, None, out=perp_sq)
        hits = perp_sq < radius_sq
        hits &= along > 0.0
        hits &= along < ranges[idx, None]
        if not hits.any():
            continue
        # Mask misses to +inf so argmin picks the nearest hit per ray.
        np.logical_not(hits, out=hits)
        along[hits] = np.inf
        nearest = np.argmin(along, axis=1)
        along_near = along[np.arange(idx.size), nearest]
        rows = np.flatnonzero(np.isfinite(along_near))
        if rows.size == 0:
            continue
        sel = idx[rows]
        k = nearest[rows]
        half_chord = np.sqrt(radius_sq - perp_sq[rows, k])
        enter = np.maximum(along_near[rows] - half_chord, 0.0)
        new_xyz[sel] = dirs[rows] * enter[:, None]
        new_refl[sel] = cloud.reflectance[sel] * (half_chord / params.particle_radius)
    return cloud.with_xyz(new_xyz).with_reflectance(new_refl)


def crosstalk(
    cloud: PointCloud, fraction: float = 0.01, sigma: float = 3.0, seed: int = 0
) -> PointCloud:
    """Displace ``floor(fraction * N)`` random points by strong Gaussian noise.

    The affected subset is drawn uniformly without replacement; each chosen
    point receives independent per-axis Gaussian noise of std ``sigma``.
    """
    check_probability(fraction, "fraction")
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    n = len(cloud)
    count = int(math.floor(fraction * n))
    if count == 0 or sigma == 0.0:
        return cloud
    rng = derive_rng(seed, "crosstalk")
    chosen = rng.choice(n, size=count, replace=False)
    noise = rng.normal(0.0, sigma, size=(count, 3))
    new_xyz = np.array(cloud.xyz)
    new_xyz[chosen] += noise
    return cloud.with_xyz(new_xyz)


def cross_sensor(
    cloud: PointCloud,
    keep_every_kth_beam: int = 2,
    point_subsample_ratio: float = 0.5,
    seed: int = 0,
    n_beams: int = DEFAULT_N_BEAMS,
) -> PointCloud:
    """Emulate a lower-resolution sensor by beam deletion plus subsampling.

    Beams whose index is a multiple of ``keep_every_kth_beam`` are kept,
    and within each kept beam ``ceil(ratio * n_b)`` points are drawn
    uniformly without replacement.  Surviving points keep their input
    order.  Beam metadata handling matches :func:`beam_missing`.
    """
    if keep_every_kth_beam < 1:
        raise ValueError(
            f"keep_every_kth_beam must be >= 1, got {keep_every_kth_beam}"
        )
    if not 0.0 < point_subsample_ratio <= 1.0:
        raise ValueError(
            f"point_subsample_ratio must be in (0, 1], got {point_subsample_ratio}"
        )
    if len(cloud) == 0:
        return cloud
    beamed, had_beams = _with_beams(cloud, n_beams)
    rng = derive_rng(seed, "cross_sensor")
    selected: list = []
    for beam_idx in np.unique(beamed.beam):
        if beam_idx % keep_every_kth_beam != 0:
            continue
        members = np.flatnonzero(beamed.beam == beam_idx)
        take = math.ceil(point_subsample_ratio * members.size)
        selected.append(rng.choice(members, size=take, replace=False))
    if not selected:
        out = beamed.take(np.zeros(0, dtype=np.int64))
    else:
        out = beamed.take(np.sort(np.concatenate(selected)))
    return out if had_beams else out.with_beam(None)


# ---------------------------------------------------------------------------
# sklearn-style transformer wrappers


class PointCloudCorruption(BaseEstimator, TransformerMixin):
    """Base class for corruption transformers.

    Stateless: ``fit`` is a no-op and ``transform`` applies the functional
    operator with the constructor parameters.  ``get_params`` /
    ``set_params`` come from :class:`sklearn.base.BaseEstimator`, so suites
    can be built from plain config dicts and cloned per agent with derived
    seeds.
    """

    kind: str = ""

    def fit(self, X, y=None):
        return self

    def transform(self, X: PointCloud) -> PointCloud:
        raise NotImplementedError


class BeamMissing(PointCloudCorruption):
    kind = "beam_missing"

    def __init__(self, n_drop: int = 16, n_beams: int = DEFAULT_N_BEAMS, seed: int = 0):
        self.n_drop = n_drop
        self.n_beams = n_beams
        self.seed = seed

    def transform(self, X: PointCloud) -> PointCloud:
        return beam_missing(X, self.n_drop, self.seed, self.n_beams)


class MotionBlur(PointCloudCorruption):
    kind = "motion_blur"

    def __init__(self, sigma: float = 0.2, seed: int = 0):
        self.sigma = sigma
        self.seed = seed

    def transform(self, X: PointCloud) -> PointCloud:
        return motion_blur(X, self.sigma, self.seed)


class Fog(PointCloudCorruption):
    kind = "fog"

    def __init__(
        self,
        alpha: float = 0.06,
        beta: float = 0.05,
        noise_floor: float = 0.01,
        seed: int = 0,
    ):
        self.alpha = alpha
        self.beta = beta
        self.noise_floor = noise_floor
        self.seed = seed

    def transform(self, X: PointCloud) -> PointCloud:
        return fog(X, FogParams(self.alpha, self.beta, self.noise_floor), self.seed)


class Snow(PointCloudCorruption):
    kind = "snow"

    def __init__(
        self,
        rate: float = 0.05,
        particle_radius: float = 0.02,
        domain=((-40.0, 40.0), (-40.0, 40.0), (-2.0, 6.0)),
        seed: int = 0,
    ):
        self.rate = rate
        self.particle_radius = particle_radius
        self.domain = domain
        self.seed = seed

    def transform(self, X: PointCloud) -> PointCloud:
        params = SnowParams(self.rate, self.particle_radius, np.asarray(self.domain))
        return snow(X, params, self.seed)


class Crosstalk(PointCloudCorruption):
    kind = "crosstalk"

    def __init__(self, fraction: float = 0.01, sigma: float = 3.0, seed: int = 0):
        self.fraction = fraction
        self.sigma = sigma
        self.seed = seed

    def transform(self, X: PointCloud) -> PointCloud:
        return crosstalk(X, self.fraction, self.sigma, self.seed)


class CrossSensor(PointCloudCorruption):
    kind = "cross_sensor"

    def __init__(
        self,
        keep_every_kth_beam: int = 2,
        point_subsample_ratio: float = 0.5,
        n_beams: int = DEFAULT_N_BEAMS,
        seed: int = 0,
    ):
        self.keep_every_kth_beam = keep_every_kth_beam
        self.point_subsample_ratio = point_subsample_ratio
        self.n_beams = n_beams
        self.seed = seed

    def transform(self, X: PointCloud) -> PointCloud:
        return cross_sensor(
            X,
            self.keep_every_kth_beam,
            self.point_subsample_ratio,
            self.seed,
            self.n_beams,
        )


CORRUPTION_KINDS: Dict[str, Type[PointCloudCorruption]] = {
    cls.kind: cls
    for cls in (BeamMissing, MotionBlur, Fog, Snow, Crosstalk, CrossSensor)
}


@dataclass(frozen=True)
class CorruptionConfig:
    """One corruption suite entry: kind, parameter record, seed."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(
                f"unknown corruption kind {self.kind!r}; expected one of "
                f"{sorted(CORRUPTION_KINDS)}"
            )
        object.__setattr__(self, "params", dict(self.params))

    def build(self, seed: Optional[int] = None) -> PointCloudCorruption:
        """Instantiate the transformer, optionally overriding the seed."""
        use_seed = self.seed if seed is None else seed
        return CORRUPTION_KINDS[self.kind](**self.params, seed=use_seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @staticmethod
    def from_dict(data: dict) -> "CorruptionConfig":
        unknown = set(data) - {"kind", "params", "seed"}
        if unknown:
            raise ValueError(f"unknown corruption config keys: {sorted(unknown)}")
        return CorruptionConfig(
            data["kind"], data.get("params", {}), int(data.get("seed", 0))
        )
