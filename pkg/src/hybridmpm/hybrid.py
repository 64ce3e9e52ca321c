"""Hybrid simulation loop: physical warm-up frames followed by predicted
frames whose pressure guess is refined by a warm-started iterative solve."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, ConvergenceError, ShapeError
from .grid import PAD, Material, PressureFields, PressureTensors, denormalize, invmap, map_fields, \
    normalize_tensors, write_pgt
from .metrics import divergence_max, interacting_complexity
from .mpm import SceneConfig, finish_step, initial_state, prepare_grid, stable_dt, step_physical, \
    write_particles_csv
from .pressure import BlockSystem, assemble
from .solvers import SolveReport, relative_residual, solve

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("frame", "phase", "refine_iters", "residual", "div_max", "zeta")


@dataclass
class HybridConfig:
    scene: SceneConfig
    n_physical: int = 8
    m_predicted: int = 0
    refine_tol: float = 1e-3
    refine_solver: str = "gs"
    model_path: str | None = None
    window: int = 4
    beta: float | None = None
    out_dir: str | None = None
    write_particles: bool = True

    def __post_init__(self):
        if self.n_physical < self.window:
            raise ValueError(f"n_physical ({self.n_physical}) must be >= window ({self.window})")
        if self.m_predicted < 0:
            raise ValueError("m_predicted must be >= 0")
        if not self.refine_tol > 0:
            raise ValueError("refine_tol must be positive")
        if self.refine_solver not in ("gs", "mgpcg"):
            raise ValueError(f"unknown refine solver {self.refine_solver!r}")


@dataclass
class PredictContext:
    """What a predictor may look at for the frame being predicted."""
    frame: int
    history: list  # normalized PressureTensors of earlier frames, oldest first
    last_fields: PressureFields | None
    template: PressureFields
    system: BlockSystem
    scene: SceneConfig


@dataclass
class FrameRecord:
    frame: int
    phase: str
    refine_iters: int
    residual: float
    div_max: float
    zeta: float

    def row(self):
        return [self.frame, self.phase, self.refine_iters, f"{self.residual:.9e}",
                f"{self.div_max:.9e}", f"{self.zeta:.9g}"]


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    tensors: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    state: object = None
    status: str = "complete"
    error: str | None = None

    @property
    def complete(self):
        return self.status == "complete"

    def iterations(self, phase=None):
        return [r.refine_iters for r in self.records if phase is None or r.phase == phase]


def refine(p_hat: PressureFields, system: BlockSystem, tol=1e-3, solver="gs", frame=None):
    """Warm-started solve from ``p_hat``; raises ConvergenceError at the iteration cap."""
    x0 = system.from_fields(p_hat)
    report = solve(system, system.rhs, x0, tol=tol, method=solver)
    if not report.converged:
        raise ConvergenceError(f"refinement stopped at relative residual {report.relative_residual:.3e} > {tol:g}",
                               report, frame)
    return system.to_fields(report.solution), report


# ---------------------------------------------------------------- predictors

def zero_predictor(ctx: PredictContext) -> PressureFields:
    return ctx.template


def _dense(fields: PressureFields, dims):
    """Float64 per-cell arrays (fluid + slip, solid, interface) without narrowing."""
    out = [np.zeros(dims) for _ in range(3)]
    for arr, vals, coords in ((out[0], fields.p_fluid, fields.r_fluid), (out[0], fields.y_slip, fields.r_slip),
                              (out[1], fields.p_solid, fields.r_solid),
                              (out[2], fields.h_interface, fields.r_interface)):
        if len(coords):
            arr[tuple(coords.T)] = vals
    return out


def _gather(dense, template: PressureFields):
    def g(arr, coords):
        return arr[tuple(coords.T)] if len(coords) else np.zeros(0)

    return template.with_values(g(dense[0], template.r_fluid), g(dense[1], template.r_solid),
                                g(dense[0], template.r_slip), g(dense[2], template.r_interface))


def previous_frame_predictor(ctx: PredictContext) -> PressureFields:
    """Previous frame's solved pressure gathered onto the current unknowns."""
    if ctx.last_fields is None:
        return ctx.template
    return _gather(_dense(ctx.last_fields, ctx.scene.dims), ctx.template)


def exact_predictor(ctx: PredictContext) -> PressureFields:
    """Oracle stub: the tightly solved pressure of the current system."""
    report = solve(ctx.system, ctx.system.rhs, None, tol=1e-12, method="mgpcg", max_iter=10 * ctx.system.n + 10)
    return ctx.system.to_fields(report.solution)


class SurrogatePredictor:
    """Encode the last n recorded frames, step the ConvLSTM, decode and map back."""

    def __init__(self, model):
        from . import surrogate

        self.model = model
        self._s = surrogate

    def check(self, dims, window):
        padded = tuple(n + 2 * PAD for n in dims)
        if any(n % 4 for n in padded):
            raise ShapeError(f"padded grid {padded} is not divisible by 4; the model cannot reproduce it")
        if self.model.config.window != window:
            raise ShapeError(f"model window {self.model.config.window} differs from configured window {window}")

    def __call__(self, ctx: PredictContext) -> PressureFields:
        s, model = self._s, self.model
        n = model.config.window
        if len(ctx.history) < n:
            raise ConsistencyError(f"need {n} recorded frames, have {len(ctx.history)}")
        latents = [s.encode(t.stack(), model) for t in ctx.history[-n:]]
        pred = s.decode(s.predict_next(latents, model), model).data
        tensors = PressureTensors.from_stack(denormalize(pred.astype(np.float64)), ctx.frame)
        return invmap(tensors, ctx.template)


PREDICTORS = {"zero": zero_predictor, "previous": previous_frame_predictor, "exact": exact_predictor}


# ---------------------------------------------------------------- run

class _Writer:
    def __init__(self, out_dir, write_particles):
        self.dir = Path(out_dir) if out_dir else None
        self.write_particles = write_particles
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.dir / "metrics.csv", "w", newline="")
            self.csv = csv.writer(self.fh)
            self.csv.writerow(METRIC_COLUMNS)

    def frame(self, rec: FrameRecord, tensors, state):
        if self.dir is None:
            return
        write_pgt(self.dir / f"frame_{rec.frame:05d}.pgt", tensors)
        if self.write_particles:
            write_particles_csv(self.dir / f"particles_{rec.frame:05d}.csv", state.particles)
        self.csv.writerow(rec.row())
        self.fh.flush()

    def close(self):
        if self.dir is not None:
            self.fh.close()


def _beta(config, state):
    if config.beta is not None:
        return config.beta
    return 1.0 if np.any(state.particles.material == Material.SOLID) else 0.1


def _record(traj, writer, config, frame, phase, report: SolveReport, system, grid, fields, state):
    residual = relative_residual(system.matrix, report.solution, system.rhs)
    rec = FrameRecord(frame, phase, report.iterations, residual, divergence_max(grid),
                      interacting_complexity(_beta(config, state), config.scene.particles_per_cell, grid))
    tensors = normalize_tensors(map_fields(fields, config.scene.dims, frame))
    traj.records.append(rec)
    traj.tensors.append(tensors)
    traj.fields.append(fields)
    writer.frame(rec, tensors, state)


def run(config: HybridConfig, predictor=None, state=None) -> Trajectory:
    """Physical warm-up for ``n_physical`` frames, then ``m_predicted`` predicted frames.

    ``predictor`` is a callable taking a PredictContext, a name from PREDICTORS,
    or None to load the surrogate from ``config.model_path``.
    """
    cfg = config.scene
    if config.m_predicted:
        if predictor is None:
            if not config.model_path:
                raise ValueError("no predictor given and no model_path configured")
            from .surrogate import load_model

            predictor = SurrogatePredictor(load_model(config.model_path))
        elif isinstance(predictor, str):
            predictor = PREDICTORS[predictor]
        if isinstance(predictor, SurrogatePredictor):
            predictor.check(cfg.dims, config.window)

    state = initial_state(cfg) if state is None else state
    traj = Trajectory(state=state)
    writer = _Writer(config.out_dir, config.write_particles)
    try:
        for _ in range(config.n_physical):
            frame = state.frame
            res = step_physical(state, cfg, tol=config.refine_tol)
            state = res.state
            _record(traj, writer, config, frame, "physical", res.report, res.system, res.grid, res.fields, state)
        for _ in range(config.m_predicted):
            frame = state.frame
            dt = stable_dt(cfg, state.particles)
            grid = prepare_grid(state, cfg, dt)
            system = assemble(grid, dt, kappa=cfg.kappa, solid_pressure=state.solid_pressure)
            ctx = PredictContext(frame, traj.tensors, traj.fields[-1] if traj.fields else None,
                                 system.template(), system, cfg)
            p_hat = predictor(ctx)
            fields, report = refine(p_hat, system, config.refine_tol, config.refine_solver, frame)
            state = finish_step(state, cfg, grid, system, fields, dt)
            _record(traj, writer, config, frame, "predicted", report, system, grid, fields, state)
    except ConvergenceError as exc:
        traj.status = "truncated"
        traj.error = str(exc)
        log.warning("trajectory truncated: %s", exc)
    finally:
        writer.close()
    traj.state = state
    return traj
