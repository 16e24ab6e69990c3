"""Training-phase logic: decoder output schedule, KLD annealing, Polyak
averaging, per-phase optimizer parameters, and teacher snapshot rotation."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Mapping, Sequence

ACOUSTIC_PHASES = ("ops5", "ops4", "ops3", "ops2")
GAN_PHASE = "gan"
TEACHER_PHASE = "teacher"
STUDENT_PHASE = "student"


@dataclass(frozen=True)
class Phase:
    name: str
    start_step: int
    outputs_per_step: int
    gan_enabled: bool


@dataclass(frozen=True)
class PhasePlan:
    """Ordered training phases over half-open step intervals.

    The first phase starts at 0, start steps strictly increase, and
    outputs_per_step never increases from one phase to the next.
    """

    phases: tuple[Phase, ...]
    total_steps: int

    def __post_init__(self):
        if not self.phases:
            raise ValueError("phase plan needs at least one phase")
        if self.phases[0].start_step != 0:
            raise ValueError("first phase must start at step 0")
        for prev, cur in zip(self.phases, self.phases[1:]):
            if cur.start_step <= prev.start_step:
                raise ValueError("phase start steps must strictly increase")
            if cur.outputs_per_step > prev.outputs_per_step:
                raise ValueError("outputs_per_step must be non-increasing across phases")
        if self.total_steps < self.phases[-1].start_step:
            raise ValueError("total_steps ends before the last phase begins")

    def at_step(self, step: int) -> Phase:
        """The unique phase active at ``step`` (intervals are half-open)."""
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")
        idx = bisect_right([p.start_step for p in self.phases], step) - 1
        return self.phases[idx]


def build_phase_plan(phase_steps: Mapping[str, int]) -> PhasePlan:
    """Build the 5->4->3->2->GAN plan from per-phase durations.

    Phases with zero duration are dropped. ``phase_steps`` maps phase name
    (``ops5``..``ops2``, ``gan``) to its length in steps.
    """
    phases = []
    start = 0
    for name in ACOUSTIC_PHASES + (GAN_PHASE,):
        steps = int(phase_steps.get(name, 0))
        if steps < 0:
            raise ValueError(f"negative duration for phase {name}")
        if steps == 0:
            continue
        ops = 2 if name == GAN_PHASE else int(name[len("ops") :])
        phases.append(Phase(name=name, start_step=start, outputs_per_step=ops, gan_enabled=name == GAN_PHASE))
        start += steps
    return PhasePlan(phases=tuple(phases), total_steps=start)


def default_phase_plan() -> PhasePlan:
    return build_phase_plan({"ops5": 2000, "ops4": 1000, "ops3": 1000, "ops2": 2000, "gan": 2000})


def ops_at_step(plan: PhasePlan, step: int) -> tuple[int, bool, str]:
    """(outputs_per_step, gan_enabled, phase name) at ``step``."""
    phase = plan.at_step(step)
    return phase.outputs_per_step, phase.gan_enabled, phase.name


@dataclass(frozen=True)
class AnnealSpec:
    """KLD weight schedule: 0 before ramp_start, linear to 1 at ramp_end,
    then 1 only every ``period`` steps (0 otherwise)."""

    ramp_start: int = 500
    ramp_end: int = 3000
    period: int = 100

    def __post_init__(self):
        if self.ramp_start >= self.ramp_end:
            raise ValueError("ramp_start must be < ramp_end")
        if self.period < 1:
            raise ValueError("period must be >= 1")


def beta_kld(spec: AnnealSpec, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < spec.ramp_start:
        return 0.0
    if step < spec.ramp_end:
        return (step - spec.ramp_start) / (spec.ramp_end - spec.ramp_start)
    return 1.0 if (step - spec.ramp_end) % spec.period == 0 else 0.0


class PolyakAverage:
    """Exponential moving average of named parameter arrays.

    shadow <- decay * shadow + (1 - decay) * live, elementwise. Shapes are
    fixed at construction; mismatches raise.
    """

    def __init__(self, named_params: Mapping[str, "object"], decay: float = 0.999):
        if not (0.0 < decay < 1.0):
            raise ValueError("decay must be in (0, 1)")
        self.decay = decay
        self.shadow = {name: p.detach().clone() for name, p in named_params.items()}

    def update(self, named_params: Mapping[str, "object"]) -> None:
        for name, live in named_params.items():
            shadow = self.shadow[name]
            if tuple(shadow.shape) != tuple(live.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: shadow {tuple(shadow.shape)} vs live {tuple(live.shape)}"
                )
            shadow.mul_(self.decay).add_(live.detach(), alpha=1.0 - self.decay)

    def state(self) -> dict:
        return dict(self.shadow)


@dataclass(frozen=True)
class OptimizerParams:
    lr: float
    beta1: float
    lr_decay: float | None


def optimizer_phase_params(
    phase: str,
    base_lr: float = 1e-3,
    gan_beta1: float = 0.5,
    teacher_lr_decay: float = 0.95,
    epoch: int = 0,
) -> OptimizerParams:
    """Adam settings for a training phase.

    Acoustic phases use defaults; the GAN phase lowers beta1; teacher training
    decays the learning rate multiplicatively per epoch; student training uses
    a constant learning rate.
    """
    if phase in ACOUSTIC_PHASES:
        return OptimizerParams(lr=base_lr, beta1=0.9, lr_decay=None)
    if phase == GAN_PHASE:
        return OptimizerParams(lr=base_lr, beta1=gan_beta1, lr_decay=None)
    if phase == TEACHER_PHASE:
        return OptimizerParams(lr=base_lr * teacher_lr_decay**epoch, beta1=0.9, lr_decay=teacher_lr_decay)
    if phase == STUDENT_PHASE:
        return OptimizerParams(lr=base_lr, beta1=0.9, lr_decay=None)
    raise ValueError(f"unknown phase {phase!r}")


def snapshot_rotation(snapshot_ids: Sequence[str], step: int, total_steps: int) -> str:
    """Active teacher snapshot for a student step.

    The student run is split into ``len(snapshot_ids)`` equal contiguous
    segments (half-open); segment i uses snapshot i, earliest first.
    """
    if len(snapshot_ids) == 0:
        raise ValueError("snapshot list is empty")
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0:
        raise ValueError("step must be >= 0")
    idx = min(len(snapshot_ids) - 1, int(step * len(snapshot_ids) // total_steps))
    return snapshot_ids[idx]
