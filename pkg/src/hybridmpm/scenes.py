"""Scene templates: dam-break, solids-drop and water-drop families."""

from __future__ import annotations

import numpy as np

from .mpm import SceneConfig

TEMPLATES = ("dam_break", "solids_drop", "water_drop")


def _random_solids(rng, count, density, extent, y_range, half):
    solids = []
    for _ in range(count):
        c = [rng.uniform(0.2, 0.8) * extent[0], rng.uniform(*y_range) * extent[1],
             rng.uniform(0.2, 0.8) * extent[2]]
        if rng.random() < 0.5:
            solids.append({"shape": "box", "center": c, "half": [half] * 3, "density": density})
        else:
            solids.append({"shape": "sphere", "center": c, "radius": half * 1.1, "density": density})
    return solids


def make_scene(template="dam_break", n=16, n_solids=0, solid_density=500.0, seed=0, **overrides):
    """Build a SceneConfig for one of the template families on an n^3 grid."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    rng = np.random.default_rng(seed)
    dx = 1.0 / n
    ext = np.ones(3)
    half = max(1.5 * dx, 0.08)
    cfg = dict(dims=(n, n, n), spacing=dx, seed=seed, name=f"{template}_{seed}")
    if template == "dam_break":
        cfg["fluid_blocks"] = [{"lo": [0, 0, 0], "hi": [0.375, 0.625, 1.0]}]
        cfg["solids"] = _random_solids(rng, n_solids, solid_density, ext, (0.1, 0.3), half)
        for s in cfg["solids"]:
            s["center"][0] = rng.uniform(0.55, 0.8)
    elif template == "solids_drop":
        cfg["fluid_blocks"] = [{"lo": [0, 0, 0], "hi": [1.0, 0.375, 1.0]}]
        cfg["solids"] = _random_solids(rng, max(n_solids, 1), solid_density, ext, (0.55, 0.8), half)
    else:
        cfg["fluid_blocks"] = [{"lo": [0, 0, 0], "hi": [1.0, 0.3125, 1.0]}]
        cfg["fluid_spheres"] = [{"center": [rng.uniform(0.35, 0.65), 0.7, rng.uniform(0.35, 0.65)],
                                 "radius": 0.15}]
        cfg["solids"] = _random_solids(rng, n_solids, solid_density, ext, (0.35, 0.45), half)
    cfg.update(overrides)
    return SceneConfig(**cfg)
