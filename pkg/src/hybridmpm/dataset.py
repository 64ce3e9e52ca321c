"""Dataset generation and manifests for normalized pressure sequences."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, ConvergenceError
from .grid import map_fields, normalize_tensors, read_pgt, write_pgt
from .mpm import SceneConfig, initial_state, step_physical
from .scenes import TEMPLATES, make_scene

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT = "hybridmpm-dataset"
VERSION = 1


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: SceneConfig):
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()


@dataclass
class DatasetRequest:
    """Which scenes to generate: per-template counts, frames and resolution."""
    templates: tuple = TEMPLATES
    scenes_per_template: int = 1
    frames: int = 16
    resolution: int = 16
    n_solids: int = 1
    solid_density: float = 500.0
    seed: int = 0
    solver: str = "mgpcg"

    def __post_init__(self):
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown:
            raise ValueError(f"unknown templates {sorted(unknown)}")
        if self.scenes_per_template < 1 or self.frames < 1:
            raise ValueError("scenes_per_template and frames must be >= 1")
        if self.resolution < 4 or (self.resolution + 4) % 4:
            raise ValueError("resolution must be >= 4 and a multiple of 4")

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale request: three families, five scenes each, 585 frames at 32^3."""
        base = dict(scenes_per_template=5, frames=585, resolution=32)
        base.update(overrides)
        return cls(**base)

    @property
    def n_scenes(self):
        return len(self.templates) * self.scenes_per_template

    def scene_configs(self):
        rng = np.random.default_rng(self.seed)
        out = []
        for template in self.templates:
            for k in range(self.scenes_per_template):
                seed = int(rng.integers(2**31 - 1))
                cfg = make_scene(template, self.resolution, n_solids=self.n_solids,
                                 solid_density=self.solid_density, seed=seed, solver=self.solver)
                cfg.name = f"{template}_{k:02d}"
                out.append(cfg)
        return out


@dataclass
class SceneEntry:
    name: str
    config: dict
    config_hash: str
    frames: int
    resolution: list
    files: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None


@dataclass
class DatasetManifest:
    scenes: list
    normalized: bool = True
    format: str = FORMAT
    version: int = VERSION
    created: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("format") != FORMAT:
            raise ConsistencyError(f"{path}: not a dataset manifest")
        if d.get("version") != VERSION:
            raise ConsistencyError(f"{path}: unsupported manifest version {d.get('version')}")
        d["scenes"] = [SceneEntry(**s) for s in d["scenes"]]
        return cls(**d)


def generate_scene(cfg: SceneConfig, frames, out_dir, tol=None) -> SceneEntry:
    scene_dir = Path(out_dir) / cfg.name
    scene_dir.mkdir(parents=True, exist_ok=True)
    entry = SceneEntry(cfg.name, json.loads(cfg.to_json()), config_hash(cfg), 0, list(cfg.dims))
    state = initial_state(cfg)
    try:
        for f in range(frames):
            res = step_physical(state, cfg, tol=tol)
            state = res.state
            path = scene_dir / f"frame_{f:05d}.pgt"
            write_pgt(path, normalize_tensors(map_fields(res.fields, cfg.dims, f)))
            entry.files.append({"path": str(path.relative_to(out_dir)), "sha256": sha256_file(path)})
            entry.frames += 1
    except ConvergenceError as exc:
        entry.status = "failed"
        entry.error = str(exc)
        log.warning("scene %s failed: %s", cfg.name, exc)
    return entry


def generate_dataset(configs, frames, out_dir, tol=None, seed=None) -> DatasetManifest:
    """Simulate every scene for ``frames`` steps and write normalized tensors plus a manifest."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = [generate_scene(cfg, frames, out_dir, tol) for cfg in configs]
    manifest = DatasetManifest(scenes, created={"package": "hybridmpm", "package_version": __version__,
                                                "seed": seed, "frames_requested": frames})
    (out_dir / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


def verify_dataset(root):
    """List of problems (missing files, hash mismatches, unreadable tensors)."""
    root = Path(root)
    manifest = DatasetManifest.load(root)
    problems = []
    for s in manifest.scenes:
        if len(s.files) != s.frames:
            problems.append(f"{s.name}: {len(s.files)} files for {s.frames} frames")
        for f in s.files:
            p = root / f["path"]
            if not p.exists():
                problems.append(f"{f['path']}: missing")
            elif sha256_file(p) != f["sha256"]:
                problems.append(f"{f['path']}: hash mismatch")
            else:
                try:
                    read_pgt(p)
                except ConsistencyError as exc:
                    problems.append(str(exc))
    return problems


def load_sequences(root, include_failed=False):
    """Stacked (T, 3, D, H, W) float32 arrays, one per usable scene."""
    root = Path(root)
    manifest = DatasetManifest.load(root)
    problems = verify_dataset(root)
    if problems:
        raise ConsistencyError("dataset verification failed: " + "; ".join(problems[:5]))
    out = []
    for s in manifest.scenes:
        if s.status != "ok" and not include_failed:
            continue
        if s.files:
            out.append(np.stack([read_pgt(root / f["path"]).stack() for f in s.files]))
    return out
