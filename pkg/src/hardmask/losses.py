"""Reconstruction loss, ranking targets, and the joint objective.

The per-frame reconstruction value is the mean over feature channels of the
squared student/target difference, defined only at masked frames; the scalar
training loss is the mean of the defined values.  The auxiliary loss is a
pairwise logistic ranking loss over ordered masked pairs: the target indicator
says which frame of a pair had the larger actual reconstruction value, and the
prediction is a sigmoid of the predicted-value difference.  Gradients flow
only through the predicted values; both targets are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, NumericalError
from .masking import MaskSet


@dataclass
class LossVector:
    """Per-frame scalar values aligned to a batch, meaningful where defined."""

    values: torch.Tensor  # B x N
    defined: torch.Tensor  # B x N bool

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()

    @property
    def count(self) -> int:
        return int(self.defined.sum())


@dataclass
class PairRow:
    indices: np.ndarray  # masked frame indices for this row
    indicator: np.ndarray  # m x m, 1 where actual[i] > actual[j]


@dataclass
class PairTargets:
    rows: list[PairRow]


def per_frame_reconstruction(
    student_recon: torch.Tensor,
    targets: torch.Tensor,
    mask: MaskSet,
) -> tuple[torch.Tensor, LossVector]:
    """Masked-frame squared error: (scalar for backprop, per-frame values).

    An empty mask yields a zero scalar and an all-undefined vector, which the
    caller can detect via ``LossVector.count == 0``.
    """
    if student_recon.shape != targets.shape:
        raise ContractError("recon/target shape mismatch")
    m = torch.from_numpy(mask.adaptive)
    if m.shape != student_recon.shape[:2]:
        raise ContractError("mask geometry does not match recon")
    per = ((student_recon - targets) ** 2).mean(dim=-1)
    values = torch.where(m, per.detach(), torch.zeros((), dtype=per.dtype))
    vector = LossVector(values=values, defined=m)
    if vector.count == 0:
        return student_recon.new_zeros(()), vector
    scalar = per[m].mean()
    return scalar, vector


def build_indicator(actual: LossVector, mask: MaskSet) -> PairTargets:
    """Strict-inequality ordering targets over each row's masked frames.

    Equal values leave both directions at 0; the diagonal is always 0.  The
    indicator is built from detached values and carries no gradient.
    """
    vals = actual.numpy()
    rows = []
    for b in range(mask.adaptive.shape[0]):
        idx = np.flatnonzero(mask.adaptive[b])
        v = vals[b, idx]
        ind = (v[:, None] > v[None, :]).astype(np.float32)
        rows.append(PairRow(indices=idx, indicator=ind))
    return PairTargets(rows)


def stable_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def pairwise_sigmoid(predicted: LossVector, row: int, i: int, j: int) -> float:
    """sigmoid(predicted[row, i] - predicted[row, j]), computed stably."""
    if not bool(predicted.defined[row, i]) or not bool(predicted.defined[row, j]):
        raise ContractError("pairwise_sigmoid needs both indices defined")
    diff = float(predicted.values[row, i]) - float(predicted.values[row, j])
    return stable_sigmoid(diff)


def auxiliary_loss(
    predicted: LossVector,
    targets: PairTargets,
    mask: MaskSet,
    normalize: bool = False,
) -> tuple[torch.Tensor, int]:
    """Pairwise ranking cross-entropy over ordered masked pairs.

    Returns (loss, pair_count); pair_count 0 flags that no row had two or
    more masked frames.  Computed in logit space:
    max(x, 0) - x * I + log(1 + exp(-|x|)) with x the predicted difference.
    """
    dtype = predicted.values.dtype
    total = torch.zeros((), dtype=dtype)
    pairs = 0
    for b, row in enumerate(targets.rows):
        m = len(row.indices)
        if m < 2:
            continue
        idx = torch.from_numpy(row.indices)
        p = predicted.values[b].index_select(0, idx)
        x = p[:, None] - p[None, :]
        ind = torch.from_numpy(row.indicator).to(dtype)
        bce = torch.clamp_min(x, 0.0) - x * ind + torch.log1p(torch.exp(-torch.abs(x)))
        off_diag = ~torch.eye(m, dtype=torch.bool)
        total = total + bce[off_diag].sum()
        pairs += m * (m - 1)
    if pairs == 0:
        return total, 0
    if normalize:
        total = total / pairs
    return total, pairs


def joint_loss(rec_scalar, aux_scalar, alpha: float):
    """rec + alpha * aux, rejecting non-finite inputs."""
    for name, value in (("rec", rec_scalar), ("aux", aux_scalar)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"{name} loss is not finite: {v}")
    return rec_scalar + alpha * aux_scalar
