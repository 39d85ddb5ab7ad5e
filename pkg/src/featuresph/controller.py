"""Two-phase relaxation state machine and convergence measurement."""
from __future__ import annotations

import csv
import json
import math
import platform
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import FeatureGroup, IntegrationError, Relaxer, StabilizationPolicy
from .sph import feature_volume_sum

__all__ = [
    "ConvergenceMonitor",
    "update_convergence",
    "PhaseConfig",
    "PhaseState",
    "advance_phase",
    "RelaxationResult",
    "relax",
    "run_pipeline",
    "PipelineResult",
    "LOG_COLUMNS",
    "EXIT_CONVERGED",
    "EXIT_FAILURE",
    "EXIT_BUDGET",
]

EXIT_CONVERGED = 0
EXIT_FAILURE = 1
EXIT_BUDGET = 2

PHASES = ("one", "transition", "two")


def _rel(num: float, den: float) -> float:
    return abs(num) if den == 0 else abs(num) / abs(den)


@dataclass
class ConvergenceMonitor:
    """Block-averaged convergence error for one feature.

    V̄ is sampled every ``sample_interval`` steps.  Every ``window`` steps the
    last ``window / sample_interval`` samples close a block; E_t compares the
    newest sample with the latest block average, E_avg compares the last two
    block averages.
    """

    sample_interval: int = 20
    window: int = 200
    threshold: float = 5e-6
    samples: deque = field(default_factory=deque)
    n_samples: int = 0
    last_window_avg: float | None = None
    prev_window_avg: float | None = None
    E_t: float = math.inf
    E_avg: float = math.inf
    converged: bool = False

    def __post_init__(self):
        if self.window % self.sample_interval:
            raise ValueError("window must be a multiple of sample_interval")
        self.samples = deque(maxlen=self.per_window)

    @property
    def per_window(self) -> int:
        return self.window // self.sample_interval

    @property
    def E_sys(self) -> float:
        return max(self.E_t, self.E_avg)

    def reset(self) -> None:
        self.samples.clear()
        self.n_samples = 0
        self.last_window_avg = self.prev_window_avg = None
        self.E_t = self.E_avg = math.inf
        self.converged = False

    def update(self, value: float) -> tuple[float, float, float, bool]:
        value = float(value)
        self.samples.append(value)
        self.n_samples += 1
        if self.n_samples % self.per_window == 0:
            self.prev_window_avg = self.last_window_avg
            self.last_window_avg = float(np.mean(self.samples))
        if self.last_window_avg is not None:
            self.E_t = _rel(value - self.last_window_avg, self.last_window_avg)
        if self.prev_window_avg is not None:
            self.E_avg = _rel(self.last_window_avg - self.prev_window_avg, self.prev_window_avg)
        self.converged = (self.prev_window_avg is not None
                          and self.E_t < self.threshold and self.E_avg < self.threshold)
        return self.E_t, self.E_avg, self.E_sys, self.converged


def update_convergence(monitor: ConvergenceMonitor, sample: float):
    return monitor.update(sample)


@dataclass
class PhaseConfig:
    nullify_period: int = 100
    damping: float = 0.05
    transition_steps: int = 200
    phase_two_budget: int = 2000
    phase_one_budget: int = 20000

    def __post_init__(self):
        if not 0.0 <= self.damping <= 0.2:
            raise ValueError(f"phase-one damping {self.damping} outside [0, 0.2]")
        if self.nullify_period < 1 or self.transition_steps < 0:
            raise ValueError("nullify_period must be >= 1 and transition_steps >= 0")

    def phase_one_policy(self) -> StabilizationPolicy:
        return StabilizationPolicy(self.nullify_period, self.damping)

    def phase_two_policy(self) -> StabilizationPolicy:
        return StabilizationPolicy(1, 0.0)

    def transition_policy(self, k: int) -> StabilizationPolicy:
        """Linear ramp of both parameters; ``k`` counts from 0 to ``transition_steps``."""
        f = min(max(k / self.transition_steps, 0.0), 1.0) if self.transition_steps else 1.0
        period = max(1, int(round(self.nullify_period + (1 - self.nullify_period) * f)))
        return StabilizationPolicy(period, self.damping * (1.0 - f))


@dataclass
class PhaseState:
    phase: str = "one"
    phase_step: int = 0          # steps spent in the current phase
    done: bool = False
    converged: bool = False      # phase two re-converged (early stop)

    @property
    def index(self) -> int:
        return PHASES.index(self.phase)


def advance_phase(state: PhaseState, monitors: dict[int, ConvergenceMonitor], cfg: PhaseConfig) -> StabilizationPolicy:
    """Move the state machine on by one step and return the policy to use next.

    Called after every step.  Phase One ends once every monitored feature is
    converged; the transition lasts ``cfg.transition_steps``; Phase Two ends on
    re-convergence or when its budget is spent.
    """
    all_conv = all(m.converged for m in monitors.values())
    state.phase_step += 1
    if state.phase == "one":
        if all_conv:
            state.phase, state.phase_step = "transition", 0
            for m in monitors.values():
                m.reset()
    elif state.phase == "transition":
        if state.phase_step >= cfg.transition_steps:
            state.phase, state.phase_step = "two", 0
            for m in monitors.values():
                m.reset()
    else:
        if all_conv:
            state.done = state.converged = True
        elif state.phase_step >= cfg.phase_two_budget:
            state.done = True
    return current_policy(state, cfg)


def current_policy(state: PhaseState, cfg: PhaseConfig) -> StabilizationPolicy:
    if state.phase == "one":
        return cfg.phase_one_policy()
    if state.phase == "transition":
        return cfg.transition_policy(state.phase_step)
    return cfg.phase_two_policy()


@dataclass
class RelaxationResult:
    exit_code: int
    steps: int
    phase_one_steps: int | None
    phase_two_converged: bool
    repair_events: int
    log: list[dict]
    error: str = ""


def relax(relaxer: Relaxer, cfg: PhaseConfig, v_ref: np.ndarray,
          on_sample: Callable[[dict], None] | None = None,
          on_step: Callable[[int, PhaseState], None] | None = None,
          sample_interval: int = 20, window: int = 200, threshold: float = 5e-6,
          force_period: int | None = None) -> RelaxationResult:
    """Run the full two-phase loop on an initialised :class:`Relaxer`.

    ``force_period`` pins the nullification period for every phase (baseline
    mode uses 1 throughout).  Returns the exit status and the sample log.
    """
    groups = [g for g in relaxer.groups if g.movable]
    monitors = {g.feature_index: ConvergenceMonitor(sample_interval, window, threshold) for g in groups}
    state = PhaseState()
    policy = cfg.phase_one_policy()
    if force_period is not None:
        policy = StabilizationPolicy(force_period, policy.damping)
    relaxer.prime(policy.damping)
    log: list[dict] = []
    step = 0
    phase_one_steps = None
    try:
        while not state.done:
            if state.phase == "one" and step >= cfg.phase_one_budget:
                return RelaxationResult(EXIT_BUDGET, step, None, False, relaxer.repair_events, log)
            active = _active_groups(groups, state)
            for g in active:
                g.phase = state.phase
            dts = relaxer.step(active, policy, step_no=step)
            step += 1
            for g in active:
                if g.steps_taken % sample_interval == 0:
                    _sample(relaxer, g, monitors[g.feature_index], v_ref, step, dts[g.feature_index], state, log)
                    if on_sample is not None:
                        on_sample(log[-1])
            prev = state.phase
            policy = advance_phase(state, monitors, cfg)
            if prev == "one" and state.phase != "one":
                phase_one_steps = step
            if state.phase != prev:
                for g in groups:
                    g.converged = False
                    g.steps_taken = 0
            if force_period is not None:
                policy = StabilizationPolicy(force_period, policy.damping)
            if on_step is not None:
                on_step(step, state)
    except IntegrationError as exc:
        return RelaxationResult(EXIT_FAILURE, step, phase_one_steps, False, relaxer.repair_events, log, str(exc))
    code = EXIT_CONVERGED
    return RelaxationResult(code, step, phase_one_steps, state.converged, relaxer.repair_events, log)


def _active_groups(groups: list[FeatureGroup], state: PhaseState) -> list[FeatureGroup]:
    if state.phase == "transition":
        return groups
    return [g for g in groups if not g.converged]


def _sample(relaxer: Relaxer, g: FeatureGroup, mon: ConvergenceMonitor, v_ref, step, dt, state, log):
    vt = relaxer.specific_volume()
    vbar = feature_volume_sum(relaxer.p, vt, v_ref)[g.feature_index]
    E_t, E_avg, E_sys, conv = mon.update(vbar)
    if state.phase != "transition":
        g.converged = conv
    log.append({
        "step": step, "feature_index": g.feature_index, "dt": float(dt), "vbar": float(vbar),
        "E_t": E_t, "E_avg": E_avg, "E_sys": E_sys, "phase": state.phase,
        "kinetic_energy": relaxer.kinetic_energy(g.members),
    })


# ---------------------------------------------------------------------------
# full pipeline

LOG_COLUMNS = ("step", "feature_index", "dt", "vbar", "E_t", "E_avg", "E_sys", "phase", "kinetic_energy")


@dataclass
class PipelineResult:
    exit_code: int
    relaxation: RelaxationResult | None
    artifacts: dict[str, str]
    report: object | None = None
    error: str = ""
    timings: dict[str, float] = field(default_factory=dict)


def phase_config(cfg) -> PhaseConfig:
    return PhaseConfig(nullify_period=cfg.period, damping=cfg.damping, transition_steps=cfg.transition_steps,
                       phase_two_budget=cfg.phase_two_budget, phase_one_budget=cfg.phase_one_budget)


def write_convergence_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([_cell(row[c]) for c in LOG_COLUMNS])


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_snapshot(path, relaxer: Relaxer) -> None:
    from .meshquality import write_vtk
    p = relaxer.p
    write_vtk(path, p.x, {"feature": p.feature, "type": p.ptype.astype(np.int64), "h": p.h, "velocity": p.v})


def _versions() -> dict[str, str]:
    import scipy
    from . import __version__
    return {"featuresph": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def run_pipeline(cfg, out_dir=None, on_sample: Callable[[dict], None] | None = None) -> PipelineResult:
    """Build, relax and mesh the case described by ``cfg``; write every artifact to ``out_dir``.

    Exit codes: 0 converged, 2 Phase-One budget exhausted, 1 numerical or
    geometric failure (the diagnostic is kept in the manifest).
    """
    from .case import build_case
    from .config import config_to_text
    from .geometry import GeometryError
    from .meshquality import MeshError, delaunay_2d, filter_to_domain, quality_report, write_obj, write_report, write_vtk

    out = Path(out_dir if out_dir is not None else cfg.resolved_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    result = PipelineResult(EXIT_FAILURE, None, artifacts, timings=timings)
    relaxation = None
    try:
        case = build_case(cfg)
        timings["setup"] = time.perf_counter() - t0
        relaxer = Relaxer(case.particles, case.grid, case.sizing, case.tags, corrected=cfg.corrected, p0=cfg.p0,
                          kernel_scale=cfg.kernel_scale)

        def snapshot(step: int, state: PhaseState) -> None:
            if step % cfg.snapshot_every == 0:
                path = out / f"particles_{step}.vtk"
                write_snapshot(path, relaxer)
                artifacts[path.stem] = path.name

        write_snapshot(out / "particles_0.vtk", relaxer)
        artifacts["particles_0"] = "particles_0.vtk"
        t1 = time.perf_counter()
        relaxation = relax(relaxer, phase_config(cfg), case.budget.v_ref, on_sample=on_sample, on_step=snapshot,
                           sample_interval=cfg.sample_interval, window=cfg.window, threshold=cfg.threshold,
                           force_period=1 if cfg.mode == "baseline" else None)
        timings["relax"] = time.perf_counter() - t1
        result.relaxation = relaxation
        result.exit_code = relaxation.exit_code
        result.error = relaxation.error
        if relaxation.exit_code == EXIT_FAILURE:
            return result
        path = out / f"particles_{relaxation.steps}.vtk"
        write_snapshot(path, relaxer)
        artifacts["particles_final"] = path.name
        t2 = time.perf_counter()
        x = relaxer.p.x
        if case.grid.dim == 2:
            mesh = filter_to_domain(delaunay_2d(x), case.grid)
            result.report = quality_report(mesh)
            write_vtk(out / "final_mesh.vtk", mesh)
            write_obj(out / "final_mesh.obj", mesh)
            write_report(out / "quality_report.csv", result.report)
            (out / "quality_summary.txt").write_text(result.report.summary() + "\n")
            artifacts.update(final_mesh_vtk="final_mesh.vtk", final_mesh_obj="final_mesh.obj",
                             quality_report="quality_report.csv", quality_summary="quality_summary.txt")
        else:
            write_vtk(out / "final_points.vtk", x, {"feature": relaxer.p.feature,
                                                   "type": relaxer.p.ptype.astype(np.int64)})
            artifacts["final_points"] = "final_points.vtk"
        timings["mesh"] = time.perf_counter() - t2
    except (IntegrationError, GeometryError, MeshError, ValueError) as exc:
        result.exit_code = EXIT_FAILURE
        result.error = f"{type(exc).__name__}: {exc}"
    finally:
        log = relaxation.log if relaxation is not None else []
        write_convergence_log(out / "convergence.csv", log)
        artifacts["convergence"] = "convergence.csv"
        timings["total"] = time.perf_counter() - t0
        manifest = {
            "config": config_to_text(cfg),
            "exit_code": result.exit_code,
            "error": result.error,
            "steps": relaxation.steps if relaxation else 0,
            "phase_one_steps": relaxation.phase_one_steps if relaxation else None,
            "phase_two_converged": relaxation.phase_two_converged if relaxation else False,
            "repair_events": relaxation.repair_events if relaxation else 0,
            "quality": result.report.as_dict() if result.report is not None else None,
            "artifacts": artifacts,
            "timings": timings,
            "versions": _versions(),
            "argv": sys.argv,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float) + "\n")
        artifacts["manifest"] = "manifest.json"
    return result
