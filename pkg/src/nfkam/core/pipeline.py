"""
Stage orchestration: reduce -> check -> kam -> degeneracy -> verify, with every stage
result converted into the serializable records of a RunArtifact.
"""

import logging
import time
from collections.abc import Callable
from enum import StrEnum
from typing import TYPE_CHECKING

import numpy as np
from attrs import define, field

from nfkam.core.conditions import (
    ALL_CONDITIONS,
    ConditionReport,
    check_normal_form_conditions,
    check_rank_conditions,
    excluded_measure,
)
from nfkam.core.degeneracy import (
    AveragedPotential,
    CriticalPoint,
    CriticalSet,
    PotentialSection,
    assemble_gbar,
    detect_order,
    relative_equilibria,
)
from nfkam.core.dynamics import RegressionBundle, Trajectory, run_regression, torus_residual, verify_torus
from nfkam.core.errors import NfkamError
from nfkam.core.ftalgebra import FloatArray, TruncationShape, average, split_slow_harmonics
from nfkam.core.kamengine import (
    IsoVariant,
    IterationResult,
    KamSchedule,
    NormalForm,
    StepMode,
    StepResult,
    run_iteration,
)
from nfkam.core.lattice import resonant_surface_sample
from nfkam.core.models import ReducedModel, reduced_model
from nfkam.data import (
    CheckRecord,
    ConditionEntryRecord,
    CriticalPointRecord,
    DegeneracyRecord,
    MeasureRecord,
    ReductionRecord,
    RegressionRecord,
    RegressionStageRecord,
    RunArtifact,
    ScheduleRecord,
    StageRecord,
    StepRecord,
    TorusRecord,
    finite,
    jsonable,
)

if TYPE_CHECKING:
    from nfkam.utils.config import ModelConfig

logger = logging.getLogger(__name__)

VERSION = "0.1.0"

HOMOLOGICAL_GATE = 1e-8
SURFACE_BOX_HALFWIDTH = 0.1


class Subcommand(StrEnum):
    REDUCE = "reduce"
    CHECK = "check"
    KAM = "kam"
    DEGENERACY = "degeneracy"
    VERIFY = "verify"
    FULL = "full"


STAGE_CHAINS: dict[Subcommand, tuple[str, ...]] = {
    Subcommand.REDUCE: ("reduce",),
    Subcommand.CHECK: ("reduce", "check"),
    Subcommand.KAM: ("reduce", "kam"),
    Subcommand.DEGENERACY: ("reduce", "kam", "degeneracy"),
    Subcommand.VERIFY: ("reduce", "kam", "degeneracy", "verify"),
    Subcommand.FULL: ("reduce", "check", "kam", "degeneracy", "verify"),
}


# ---- record conversion -----------------------------------------------------------------


def schedule_record(sched: KamSchedule) -> ScheduleRecord:
    return ScheduleRecord(
        nu=sched.nu,
        r=sched.r,
        s=sched.s,
        gamma=sched.gamma,
        mu=sched.mu,
        K_plus=sched.K_plus,
        flags=list(sched.flags),
    )


def step_record(step: StepResult, sched: KamSchedule) -> StepRecord:
    report, record = step.report, step.record
    return StepRecord(
        nu=report.nu,
        schedule=schedule_record(sched),
        generator=record.generator.to_literal(),  # pyright: ignore[reportArgumentType]
        shift=[float(v) for v in record.shift],
        t=record.t,
        pre_norm=finite(report.pre_norm),
        post_norm=finite(report.post_norm),
        tail_norm=finite(report.tail_norm),
        minimal_divisor=finite(report.minimal_divisor),
        homological_residual=finite(report.homological_residual),
        shift_residual=finite(report.shift_residual),
        drift=[float(v) for v in report.drift],
        drift_constant=finite(report.drift_constant),
        lie_order=report.lie_order,
        lie_remainder=finite(report.lie_remainder),
        conditions=dict(report.conditions),
        flags=list(report.flags),
    )


def critical_record(cp: CriticalPoint) -> CriticalPointRecord:
    return CriticalPointRecord(
        u=[float(v) for v in cp.u],
        gradient_residual=cp.gradient_residual,
        morse_index=cp.morse_index,
        kind=None if cp.kind is None else str(cp.kind),
        eigenvalues=[[finite(z.real), finite(z.imag)] for z in cp.eigenvalues],
        flags=list(cp.flags),
    )


def regression_record(bundle: RegressionBundle) -> RegressionRecord:
    stages = [
        RegressionStageRecord(
            name=s.name,
            passed=s.passed,
            checks=[CheckRecord(label=c.label, expected=finite(c.expected), actual=finite(c.actual), tolerance=c.tolerance, passed=c.passed) for c in s.checks],
            detail={k: jsonable(v) for k, v in s.detail.items()},
            error=s.error,
        )
        for s in bundle.stages
    ]
    return RegressionRecord(model=bundle.model, passed=bundle.passed, stages=stages)


def condition_records(report: ConditionReport) -> list[ConditionEntryRecord]:
    return [
        ConditionEntryRecord(name=name, holds=entry.holds, witness={k: jsonable(v) for k, v in entry.witness.items()})
        for name, entry in report.entries.items()
    ]


# ---- the run ---------------------------------------------------------------------------


def _potential_hessian(model: ReducedModel) -> Callable[[FloatArray], FloatArray] | None:
    """u -> d_u^2 of the averaged slow potential, divided by delta to its lowest grade."""
    _, potential = split_slow_harmonics(average(model.series))
    lowest = potential.min_grade()
    if lowest is None:
        return None
    section = PotentialSection(potential, model.delta)
    scale = model.delta ** float(lowest)
    return lambda u: section.hessian(u) / scale


@define
class PipelineRun:
    cfg: "ModelConfig"
    subcommand: Subcommand
    strict: bool = False
    model: ReducedModel | None = None
    iteration: IterationResult | None = None
    gbar: AveragedPotential | None = None
    equilibria: CriticalSet | None = None
    trajectories: list[Trajectory] = field(factory=list)
    artifact: RunArtifact = field(init=False)

    def __attrs_post_init__(self) -> None:
        self.artifact = RunArtifact(
            tool_version=VERSION,
            subcommand=str(self.subcommand),
            strict=self.strict,
            config=jsonable(self.cfg.model_dump(mode="json", by_alias=True)),  # pyright: ignore[reportArgumentType]
        )

    # -- stages --

    def reduce(self) -> list[str]:
        self.model = reduced_model(self.cfg)
        reduction = self.model.reduction
        record = ReductionRecord(delta=self.model.delta, epsilon=self.model.epsilon, terms=len(self.model.series))
        if reduction is not None:
            record.frame = reduction.frame.to_record()
            record.y0 = [float(v) for v in reduction.y0]
            record.omega_star = [float(v) for v in reduction.omega_star]
            record.gamma = [[float(v) for v in row] for row in reduction.gamma]
        self.artifact.deterministic.reduction = record
        print(f"Reduced model '{self.cfg.name}': {len(self.model.series)} terms, delta = {self.model.delta:.6g}")
        return []

    def check(self) -> list[str]:
        assert self.model is not None
        cfg = self.cfg.conditions
        model = self.model
        normal_form = NormalForm.from_series(model.series, model.delta)
        which = list(cfg.which)
        reduction = model.reduction
        if reduction is None:
            report = check_normal_form_conditions(normal_form, which, self.cfg.seed)
        else:
            which = which or list(ALL_CONDITIONS)
            assert model.h0 is not None
            ham = self.cfg.hamiltonian
            if ham.surface_box is not None:
                box = ham.box()
            else:
                box = (
                    [v - SURFACE_BOX_HALFWIDTH for v in reduction.y0],
                    [v + SURFACE_BOX_HALFWIDTH for v in reduction.y0],
                )
            points = resonant_surface_sample(model.h0, reduction.frame, box, cfg.samples) or [reduction.y0]
            report = check_rank_conditions(
                model.h0,
                reduction.frame,
                points,
                which,
                potential_hessian=_potential_hessian(model),
                normal_form=normal_form,
                box=box,
                seed=self.cfg.seed,
            )
        self.artifact.deterministic.conditions = condition_records(report)
        if cfg.measure_box is not None:
            lo, hi = cfg.measure_box
            estimate = excluded_measure((lo, hi), cfg.gammas, cfg.measure_tau, cfg.measure_cutoff, cfg.measure_samples, self.cfg.seed)
            self.artifact.deterministic.measure = MeasureRecord(
                gammas=estimate.gammas,
                fractions=estimate.fractions,
                stderrs=estimate.stderrs,
                slope=estimate.slope,
                slope_halfwidth=estimate.slope_halfwidth,
                censored=estimate.censored,
                samples=estimate.samples,
                seed=estimate.seed,
            )
        failed = report.failed
        print(f"Conditions: {len(report.entries) - len(failed)} of {len(report.entries)} hold" + (f" (failed: {', '.join(failed)})" if failed else ""))
        return [f"condition {name} fails" for name in failed]

    def kam(self) -> list[str]:
        assert self.model is not None
        engine = self.cfg.engine
        model = self.model
        sched = self.cfg.schedule.build(model.signature)
        self.iteration = run_iteration(
            model.series,
            sched,
            model.delta,
            engine.steps,
            StepMode(engine.mode),
            shape=TruncationShape(engine.shape),
            iso_variant=IsoVariant(engine.isoenergetic_variant),
            energy=None if engine.energy is None else float(engine.energy),
            lie_order=engine.lie_order,
        )
        gates: list[str] = []
        schedules = [sched] + [s.schedule for s in self.iteration.steps[:-1]]
        for step, before in zip(self.iteration.steps, schedules):
            record = step_record(step, before)
            self.artifact.deterministic.steps.append(record)
            report = step.report
            print(f"  step {report.nu}: |P| {report.pre_norm:.3e} -> {report.post_norm:.3e}, |drift| {float(np.linalg.norm(report.drift)):.3e}")
            if "identity" in report.flags:
                continue
            if report.post_norm >= report.pre_norm:
                gates.append(f"step {report.nu}: perturbation norm did not decrease")
            if report.homological_residual > HOMOLOGICAL_GATE:
                gates.append(f"step {report.nu}: homological residual {report.homological_residual:.3e}")
        if self.iteration.steps:
            print(f"  drift constant c = {self.iteration.drift_constant:.3e}")
        return gates

    def degeneracy(self) -> list[str]:
        assert self.model is not None and self.iteration is not None
        sig = self.model.signature
        if sig.m0 == 0:
            self.artifact.deterministic.degeneracy = DegeneracyRecord(error="no slow angles")
            return []
        cfg = self.cfg.degeneracy
        self.gbar = assemble_gbar(self.iteration.ledger, self.model.delta, cfg.delta_grid)
        kinetic = self.iteration.normal_form.M[-sig.m0:, -sig.m0:]
        self.equilibria = relative_equilibria(self.gbar, kinetic)
        record = DegeneracyRecord(
            critical_points=[critical_record(p) for p in self.equilibria.points],
            euler_sum=self.equilibria.euler_sum,
            euler_ok=self.equilibria.euler_ok,
            count_ok=self.equilibria.count_ok,
        )
        gates: list[str] = []
        if not self.equilibria.euler_ok:
            gates.append(f"Euler characteristic sum {self.equilibria.euler_sum} != 0")
        try:
            order = detect_order(self.gbar, cfg.delta_grid, cfg.order_cap, cfg.seeds_per_angle)
            record.order = order.order
            record.sigma_bar = finite(order.sigma_bar)
            record.slope = finite(order.slope)
            record.residual = finite(order.residual)
            record.samples = order.samples
        except NfkamError as e:
            record.error = str(e)
            gates.append(f"degeneracy order: {e}")
        self.artifact.deterministic.degeneracy = record
        kinds = ", ".join(f"{p.kind} at u = {p.u[0]:.6f}" for p in self.equilibria.points)
        print(f"Averaged potential: {len(self.equilibria.points)} critical points ({kinds}), order {record.order}")
        return gates

    def verify(self) -> list[str]:
        assert self.model is not None and self.iteration is not None
        cfg = self.cfg
        sig = self.model.signature
        gates: list[str] = []
        points = [p.u for p in self.equilibria.points] if self.equilibria is not None else []
        if sig.m0 == 0:
            points = [np.zeros(0)]
        for u in points:
            residual = torus_residual(self.model.series, self.iteration, u, probes=cfg.verify.probes)
            check = verify_torus(self.model.series, self.iteration, u, cfg.verify.T, cfg.verify.dt)
            self.trajectories.append(check.trajectory)
            self.artifact.deterministic.tori.append(
                TorusRecord(
                    u_star=[float(v) for v in u],
                    predicted_frequency=[float(v) for v in check.predicted],
                    residual=finite(residual.value),
                    per_probe=[finite(v) for v in residual.per_probe],
                    period=finite(residual.period),
                    measured_frequency=[est.frequency for est in check.measured],
                    energy_drift=finite(check.energy_drift),
                    energy_oscillation=finite(check.energy_oscillation),
                )
            )
            print(f"  torus at u = {list(map(float, u))}: residual {residual.value:.3e}, frequency error {check.frequency_error:.3e}")
        if cfg.golden.coefficients or cfg.golden.critical_points or cfg.golden.noncritical:
            bundle = run_regression(cfg, verify=False, model=self.model, iteration=self.iteration)
            self.artifact.deterministic.regression = regression_record(bundle)
            failure = bundle.first_failure()
            if failure is not None:
                gates.append(f"regression {failure.stage}: {failure.label} expected {failure.expected:.12g}, got {failure.actual:.12g}")
            elif not bundle.passed:
                broken = next(s for s in bundle.stages if not s.passed)
                gates.append(f"regression {broken.name}: {broken.error}")
            print(f"Regression '{bundle.model}': {'pass' if bundle.passed else 'FAIL'}")
        return gates

    # -- driver --

    def run(self) -> RunArtifact:
        chain = STAGE_CHAINS[self.subcommand]
        stages: dict[str, Callable[[], list[str]]] = {
            "reduce": self.reduce,
            "check": self.check,
            "kam": self.kam,
            "degeneracy": self.degeneracy,
            "verify": self.verify,
        }
        records = self.artifact.deterministic.stages
        broken = False
        for name in chain:
            if broken:
                records.append(StageRecord(name=name, status="skipped", message="an earlier stage failed"))
                continue
            print(f"== {name}")
            start = time.perf_counter()
            try:
                gates = stages[name]()
            except NfkamError as e:
                logger.error("stage %s failed: %s", name, e)
                records.append(StageRecord(name=name, status="fail", message=f"{type(e).__name__}: {e}"))
                broken = True
                continue
            finally:
                self.artifact.timing[name] = time.perf_counter() - start
            for gate in gates:
                logger.warning("%s gate: %s", name, gate)
            status = "fail" if self.strict and gates else "pass"
            records.append(StageRecord(name=name, status=status, gate_failures=gates))
        return self.artifact


def run_pipeline(cfg: "ModelConfig", subcommand: Subcommand | str, strict: bool = False) -> RunArtifact:
    return PipelineRun(cfg, Subcommand(subcommand), strict or cfg.engine.strict).run()
