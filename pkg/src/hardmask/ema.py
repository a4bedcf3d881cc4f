"""Teacher synchronization by exponential moving average with annealed decay."""

from __future__ import annotations

import torch

from .config import EmaSchedule
from .errors import ContractError
from .network import ModelState, shared_parameter_items


def decay_at(schedule: EmaSchedule, step: int) -> float:
    """Linear anneal tau_start -> tau_end over anneal_steps, then flat."""
    if step < 0:
        raise ContractError("step must be >= 0")
    frac = min(step / schedule.anneal_steps, 1.0)
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac


@torch.no_grad()
def ema_update(teacher: ModelState, student: ModelState, lam: float) -> ModelState:
    """teacher <- lam * teacher + (1 - lam) * student on the shared groups.

    Implemented incrementally (t += (1 - lam) * (s - t)) so a converged pair
    is an exact fixed point; lam 0 and 1 short-circuit to bit-exact copies.
    Student-only groups (the decoder) are untouched; the student never is.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"decay {lam} outside [0, 1]")
    if lam == 1.0:
        return teacher
    pairs = zip(shared_parameter_items(teacher), shared_parameter_items(student))
    for (t_name, t_param), (s_name, s_param) in pairs:
        if t_name != s_name or t_param.shape != s_param.shape:
            raise ContractError(
                f"shared parameter mismatch: {t_name}{tuple(t_param.shape)} vs "
                f"{s_name}{tuple(s_param.shape)}"
            )
        if lam == 0.0:
            t_param.copy_(s_param)
        else:
            t_param.add_(s_param - t_param, alpha=1.0 - lam)
    return teacher
