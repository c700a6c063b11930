"""Synthetic spine CT phantoms with exact ground-truth masks.

Axes are (z, y, x): z craniocaudal, y anterior-posterior, x lateral. Voxels
are 1 mm. The mask is the union of the vertebral bodies only; rib arcs and
pelvic blobs are rendered at bone intensity but never labelled.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .volume import Volume

SOFT_TISSUE_CEILING = 250.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 64, 64)
    seed: int = 0
    vertebra_count: int = 4
    body_radius_range: Tuple[float, float] = (5.0, 7.0)
    disc_gap: float = 2.0
    curve_amplitude: float = 3.0
    ribs: bool = True
    pelvis: bool = True
    bone_hu: Tuple[float, float] = (700.0, 150.0)
    soft_hu: Tuple[float, float] = (40.0, 20.0)
    air_hu: float = -1000.0
    noise_sigma: float = 20.0

    def __post_init__(self):
        for name in ("dims", "body_radius_range", "bone_hu", "soft_hu"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def with_seed(self, seed: int) -> "PhantomSpec":
        d = asdict(self)
        d["seed"] = seed
        return PhantomSpec(**d)


def load_specs(path) -> List[PhantomSpec]:
    """Read one spec or a list of specs from a JSON file.

    A ``{"base": {...}, "seeds": [...]}`` object expands to one spec per seed.
    """
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict) and "seeds" in raw:
        base = PhantomSpec.from_dict(raw.get("base", {}))
        return [base.with_seed(int(s)) for s in raw["seeds"]]
    if isinstance(raw, dict):
        return [PhantomSpec.from_dict(raw)]
    return [PhantomSpec.from_dict(d) for d in raw]


def _check(spec: PhantomSpec) -> None:
    d, h, w = spec.dims
    if min(spec.dims) < 32:
        raise ValueError(f"phantom dims must be >= 32 per axis, got {spec.dims}")
    if spec.vertebra_count < 1:
        raise ValueError("vertebra_count must be positive")
    lo, hi = spec.body_radius_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid body_radius_range {spec.body_radius_range}")
    slab = d / spec.vertebra_count
    if slab - spec.disc_gap < 2:
        raise ValueError(
            f"{spec.vertebra_count} bodies with gap {spec.disc_gap} do not fit in depth {d}")
    if 2 * (hi + spec.curve_amplitude) + 4 > min(h, w) * 0.8:
        raise ValueError(
            f"bodies of radius {hi} with curve {spec.curve_amplitude} do not fit in {spec.dims}")


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> Tuple[Volume, Volume]:
    """Return (intensity volume in HU, binary mask volume)."""
    _check(spec)
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.dims
    z, y, x = np.meshgrid(np.arange(d, dtype=np.float64), np.arange(h, dtype=np.float64),
                          np.arange(w, dtype=np.float64), indexing="ij")

    # trunk: elliptical cylinder of soft tissue in air
    trunk = ((y - h / 2) / (0.42 * h)) ** 2 + ((x - w / 2) / (0.46 * w)) ** 2 <= 1.0
    vol = np.full(spec.dims, spec.air_hu, dtype=np.float64)
    soft = rng.normal(spec.soft_hu[0], spec.soft_hu[1], size=spec.dims)
    vol[trunk] = soft[trunk]

    # column centreline follows a sagittal sinusoid
    phase = rng.uniform(0, 2 * np.pi)
    cycles = rng.uniform(0.5, 1.0)
    cy0 = 0.58 * h
    cx0 = w / 2 + rng.uniform(-2, 2)

    def centre_y(zz):
        return cy0 + spec.curve_amplitude * np.sin(2 * np.pi * cycles * zz / d + phase)

    lo, hi = spec.body_radius_range
    slab = d / spec.vertebra_count
    rz = (slab - spec.disc_gap) / 2
    mask = np.zeros(spec.dims, dtype=bool)
    bone = np.zeros(spec.dims, dtype=np.float64)
    radii = []
    for k in range(spec.vertebra_count):
        zc = (k + 0.5) * slab
        rx = rng.uniform(lo, hi)
        ry = rx * rng.uniform(0.75, 0.9)
        radii.append(rx)
        level = max(rng.normal(*spec.bone_hu), 350.0)
        dz = (z - zc) / rz
        dr2 = ((y - centre_y(z)) / ry) ** 2 + ((x - cx0) / rx) ** 2
        inside = dz ** 4 + dr2 ** 2 <= 1.0
        mask |= inside
        bone[inside] = level
    max_rx = max(radii)

    distract = np.zeros(spec.dims, dtype=bool)
    if spec.ribs:
        # arcs on an inner trunk ellipse, kept lateral to the column
        ey, ex = 0.33 * h, 0.38 * w
        ring = np.sqrt(((y - h / 2) / ey) ** 2 + ((x - w / 2) / ex) ** 2)
        lateral = np.abs(x - cx0) > max_rx + 4
        n_ribs = max(1, spec.vertebra_count - 1)
        for k in range(n_ribs):
            z0 = (k + 0.5) * slab + rng.uniform(-1, 1)
            arc = (np.abs(ring - 1) < 1.6 / min(ey, ex)) & (np.abs(z - z0) <= 1) & lateral
            arc &= y > h / 2 - rng.uniform(0, 0.2) * h
            distract |= arc
            bone[arc & ~mask] = max(rng.normal(*spec.bone_hu), 350.0)
    if spec.pelvis:
        # body-like blobs either side of the lowest vertebra
        zc = (spec.vertebra_count - 0.5) * slab
        for side in (-1, 1):
            r = rng.uniform(lo, hi)
            cx = cx0 + side * (max_rx + r + rng.uniform(3, 5))
            cy = centre_y(zc) + rng.uniform(-2, 2)
            blob = (((z - zc) / (rz + 1)) ** 2 + ((y - cy) / (0.85 * r)) ** 2
                    + ((x - cx) / r) ** 2) <= 1.0
            blob &= ~mask
            distract |= blob
            bone[blob] = max(rng.normal(*spec.bone_hu), 350.0)

    structures = mask | distract
    tissue = ~structures
    noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    vol[structures] = bone[structures]
    vol += noise
    vol[tissue & trunk] = np.minimum(vol[tissue & trunk], SOFT_TISSUE_CEILING)
    vol[~trunk & tissue] = np.clip(vol[~trunk & tissue], -1024.0, SOFT_TISSUE_CEILING)
    intensity = Volume(vol.astype(np.float32), (1.0, 1.0, 1.0), kind="intensity")
    truth = Volume(mask.astype(np.float32), (1.0, 1.0, 1.0), kind="binary-mask")
    return intensity, truth


def phantom_set(base: PhantomSpec, seeds: Sequence[int]) -> List[Tuple[Volume, Volume]]:
    return [generate_phantom(base.with_seed(int(s))) for s in seeds]
