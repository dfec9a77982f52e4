"""Desk-scale brain phantoms with a full 132-structure region table.

Layout per hemisphere (x < 32 left, x >= 32 right): a white-matter block
between a bottom and a top cortical plate tiled into 51 gray-matter regions,
12 box-shaped subcortical structures, and an ellipsoidal hippocampus whose
size and texture depend on the diagnosis. Brain stem and a CSF pocket sit on
the midline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume_io import PhantomSpec, Region, Shape

SUBCORTICAL = (
    "Thalamus", "Caudate", "Putamen", "Pallidum", "Amygdala", "Accumbens-area", "VentralDC",
    "Lateral-Ventricle", "Inf-Lat-Vent", "Cerebellum-Cortex", "Cerebellum-White-Matter",
    "choroid-plexus",
)
N_CORTICAL_PER_HEMI = 51
DIMS = (64, 72, 64)
HEMI_X0 = {"left": 0.0, "right": 32.0}
PLATE_Z = {"bottom": 3.0, "top": 57.0}
TILE = 8.0


@dataclass(frozen=True)
class ClassProfile:
    hippocampus_scale: float = 1.0
    hippocampus_intensity: float = 80.0
    hippocampus_texture_sd: float = 4.0
    thin_cortex_probability: float = 0.0
    age_mean: float = 72.0


DEFAULT_PROFILES = {
    "CN": ClassProfile(1.0, 80.0, 4.0, 0.0, 72.0),
    "MCI": ClassProfile(0.9, 80.0, 7.0, 0.15, 74.0),
    "AD": ClassProfile(0.78, 80.0, 10.0, 0.3, 75.0),
}


@dataclass
class CohortSpec:
    n_per_class: dict = field(default_factory=lambda: {"CN": 10, "AD": 10})
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    noise_sd: float = 4.0
    scale_jitter: float = 0.04
    age_sd: float = 5.0

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        profiles = dict(DEFAULT_PROFILES)
        for dx, over in d.get("profiles", {}).items():
            base = profiles.get(dx, ClassProfile())
            profiles[dx] = ClassProfile(**{**base.__dict__, **over})
        return cls(
            n_per_class={k: int(v) for k, v in d.get("n_per_class", {"CN": 10, "AD": 10}).items()},
            profiles=profiles,
            noise_sd=float(d.get("noise_sd", 4.0)),
            scale_jitter=float(d.get("scale_jitter", 0.04)),
            age_sd=float(d.get("age_sd", 5.0)),
        )


def region_table() -> tuple[Region, ...]:
    regions = []
    lid = 1
    for hemi, tag in (("left", "lh"), ("right", "rh")):
        for i in range(N_CORTICAL_PER_HEMI):
            regions.append(Region(lid, f"ctx-{tag}-region{i:02d}", hemi, True, True))
            lid += 1
    for hemi, prefix in (("left", "Left"), ("right", "Right")):
        regions.append(Region(lid, f"{prefix}-Hippocampus", hemi, False, False))
        lid += 1
        regions.append(Region(lid, f"{prefix}-Cerebral-White-Matter", hemi, False, False))
        lid += 1
        for name in SUBCORTICAL:
            regions.append(Region(lid, f"{prefix}-{name}", hemi, False, False))
            lid += 1
    regions.append(Region(lid, "Brain-Stem", "none", False, False))
    regions.append(Region(lid + 1, "CSF", "none", False, False))
    return tuple(regions)


def _box(label, intensity, lo, hi, **kw):
    return Shape("box", label, intensity, {"min_mm": list(map(float, lo)), "max_mm": list(map(float, hi))}, **kw)


def brain_spec(profile: ClassProfile, rng: np.random.Generator, noise_sd: float = 4.0,
               scale_jitter: float = 0.04) -> PhantomSpec:
    regions = region_table()
    ids = {r.name: r.label_id for r in regions}
    shapes = []
    for hemi, tag, prefix in (("left", "lh", "Left"), ("right", "rh", "Right")):
        x0 = HEMI_X0[hemi]
        shapes.append(_box(ids[f"{prefix}-Cerebral-White-Matter"], 110.0,
                           (x0, 0, PLATE_Z["bottom"] + 3), (x0 + 32, DIMS[1], PLATE_Z["top"])))
        slots = [(plate, ix, iy) for plate in ("bottom", "top") for ix in range(4) for iy in range(9)]
        for i in range(N_CORTICAL_PER_HEMI):
            plate, ix, iy = slots[i]
            thick = 2.0 if rng.random() < profile.thin_cortex_probability else 3.0
            z0 = PLATE_Z[plate]
            # thinning keeps the white-matter side of the plate fixed
            zlo, zhi = (z0 + 3 - thick, z0 + 3) if plate == "bottom" else (z0, z0 + thick)
            shapes.append(_box(ids[f"ctx-{tag}-region{i:02d}"], 70.0,
                               (x0 + ix * TILE, iy * TILE, zlo), (x0 + (ix + 1) * TILE, (iy + 1) * TILE, zhi)))
        sub_slots = [(sx, sy, sz) for sz in (12.0, 40.0) for sy in (2.0, 14.0, 26.0, 50.0, 62.0)
                     for sx in (2.0, 12.0, 22.0)]
        for j, name in enumerate(SUBCORTICAL):
            sx, sy, sz = sub_slots[j]
            size = 6.0 + float(rng.integers(0, 3))
            shapes.append(_box(ids[f"{prefix}-{name}"], 90.0 + 5 * j % 40,
                               (x0 + sx, sy, sz), (x0 + sx + size, sy + size, sz + size)))
        s = profile.hippocampus_scale * (1.0 + scale_jitter * rng.standard_normal())
        c = np.array([x0 + 16.0, 36.0, 26.0]) + rng.uniform(-1.0, 1.0, 3)
        shapes.append(Shape("ellipsoid", ids[f"{prefix}-Hippocampus"], profile.hippocampus_intensity,
                            {"center_mm": c.tolist(), "semi_axes_mm": [4.0 * s, 10.0 * s, 4.5 * s]},
                            texture_sd=profile.hippocampus_texture_sd))
    shapes.append(_box(ids["Brain-Stem"], 100.0, (30, 2, 12), (34, 20, 30)))
    shapes.append(_box(ids["CSF"], 20.0, (30, 50, 40), (34, 70, 50)))
    return PhantomSpec(dims=DIMS, spacing=(1.0, 1.0, 1.0), shapes=tuple(shapes),
                       noise_sd=noise_sd, background=0.0, regions=regions)


@dataclass(frozen=True)
class CohortSubject:
    subject_id: str
    diagnosis: str
    age: float
    spec: PhantomSpec
    seed: int


def cohort_subjects(cohort: CohortSpec, seed: int) -> list[CohortSubject]:
    """Deterministic per-subject phantom specs; ids ``sub-000``, ``sub-001``, ..."""
    out = []
    k = 0
    for dx in ("CN", "MCI", "AD"):
        for _ in range(cohort.n_per_class.get(dx, 0)):
            rng = np.random.default_rng([int(seed), k])
            prof = cohort.profiles[dx]
            spec = brain_spec(prof, rng, cohort.noise_sd, cohort.scale_jitter)
            age = round(float(prof.age_mean + cohort.age_sd * rng.standard_normal()), 1)
            out.append(CohortSubject(f"sub-{k:03d}", dx, age, spec, int(rng.integers(0, 2**31 - 1))))
            k += 1
    return out
