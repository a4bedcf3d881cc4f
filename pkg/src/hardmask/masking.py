"""Easy-to-hard adaptive block masking.

Per row, a mask budget of ``num_mask`` block starts is split into a selective
share (top-k by predicted per-frame loss) and a random share, with the
selective fraction growing linearly as ``(epoch + 1) / total_epochs``.  Both
start lists expand into blocks of ``mask_length`` frames, are clipped to the
row's valid length, and unioned; batch-level post-processing optionally trims
every row to the batch-minimum cardinality and applies mask dropout.

All randomness flows through a small draw protocol (:class:`GeneratorDraws`)
so a run can be recorded draw-by-draw and replayed through an independent
implementation for equivalence testing.

Normalizations relative to the common numpy idiom for this routine, applied
identically everywhere in this module:

* every row draws its own probabilistic rounding uniform (no batch-global
  shortcut for pad-free batches);
* predicted losses at padded positions are forced to ``-inf`` before the
  selective sort, so padding is never selected;
* top-k ties break toward the lower index (stable sort on descending value);
* when the random-start pool cannot supply the requested count, the whole
  pool is used and the row is flagged instead of raising;
* a zero block budget yields an empty row mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import MaskConfig
from .errors import ContractError, DegenerateLengthError

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# draw protocol


class GeneratorDraws:
    """Adapter giving masking code a two-method view of a numpy Generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def uniform(self) -> float:
        return float(self.rng.random())

    def choose(self, pool, count: int) -> np.ndarray:
        """``count`` distinct draws from ``pool`` (int n means range(n))."""
        return np.asarray(self.rng.choice(pool, size=count, replace=False))


class RecordingDraws:
    """Wraps a draw source and records every call with its arguments/result."""

    def __init__(self, inner):
        self.inner = inner
        self.trace: list[tuple] = []

    def uniform(self) -> float:
        value = self.inner.uniform()
        self.trace.append(("uniform", None, value))
        return value

    def choose(self, pool, count: int) -> np.ndarray:
        result = self.inner.choose(pool, count)
        key = int(pool) if np.isscalar(pool) else tuple(np.asarray(pool).tolist())
        self.trace.append(("choose", (key, int(count)), result.copy()))
        return result


class ReplayDraws:
    """Replays a recorded trace, asserting the call sequence is identical."""

    def __init__(self, trace: list[tuple]):
        self.trace = list(trace)
        self.pos = 0

    def _next(self, op, key):
        if self.pos >= len(self.trace):
            raise AssertionError(f"draw trace exhausted at call {op}{key}")
        rop, rkey, result = self.trace[self.pos]
        self.pos += 1
        if rop != op or rkey != key:
            raise AssertionError(
                f"draw mismatch at {self.pos - 1}: recorded {rop}{rkey}, replayed {op}{key}"
            )
        return result

    def uniform(self) -> float:
        return self._next("uniform", None)

    def choose(self, pool, count: int) -> np.ndarray:
        key = int(pool) if np.isscalar(pool) else tuple(np.asarray(pool).tolist())
        return self._next("choose", (key, int(count))).copy()

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.trace)


def as_draws(rng):
    """Accept either a numpy Generator or an existing draw source."""
    if isinstance(rng, np.random.Generator):
        return GeneratorDraws(rng)
    return rng


# ---------------------------------------------------------------------------
# data types


@dataclass
class RowMaskStats:
    """Bookkeeping for one batch row of one mask build."""

    num_mask: int
    selective_count: int
    random_count: int
    final_cardinality: int = 0
    clamp_flag: bool = False


@dataclass
class MaskSet:
    """Adaptive mask with provenance split into selective and random seeds."""

    adaptive: np.ndarray  # B x N bool
    selective_starts: list[np.ndarray]
    random_starts: list[np.ndarray]
    epoch: int
    stats: list[RowMaskStats] = field(default_factory=list)

    @property
    def selective_fraction(self) -> float:
        """Selective share of the block budget across the batch (pre-trim)."""
        total = sum(s.num_mask for s in self.stats)
        if total == 0:
            return 0.0
        return float(sum(s.selective_count for s in self.stats)) / float(total)

    def validate(self, valid: np.ndarray) -> None:
        if self.adaptive.shape != valid.shape:
            raise ContractError("mask/valid geometry mismatch")
        if np.any(self.adaptive & ~valid):
            raise ContractError("mask covers padded positions")


@dataclass
class MaskedBatch:
    """A batch annotated with mask positions; substitution happens in encode."""

    batch: object  # corpus.FrameBatch
    mask: MaskSet


# ---------------------------------------------------------------------------
# pipeline stages


def keep_ratio_at(schedule: str, epoch: int, total_epochs: int) -> float:
    """Selective share of the budget for the given curriculum position."""
    if schedule == "hard":
        return 1.0
    if schedule == "random":
        return 0.0
    if epoch < 0 or epoch >= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    return float(epoch + 1) / float(total_epochs)


def split_counts(num_mask: int, keep_ratio: float) -> tuple[int, int]:
    random_count = int(num_mask * (1.0 - keep_ratio))
    return num_mask - random_count, random_count


def schedule_split(num_mask: int, epoch: int, total_epochs: int) -> tuple[int, int]:
    """(selective_count, random_count) at the given epoch of the curriculum.

    keep_ratio = (epoch + 1) / total_epochs; the random share is
    floor(num_mask * (1 - keep_ratio)) and the selective share the remainder,
    so the final epoch is fully selective.
    """
    if num_mask < 0:
        raise ContractError("num_mask must be >= 0")
    if epoch < 0 or epoch >= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    return split_counts(num_mask, float(epoch + 1) / float(total_epochs))


def num_mask_blocks(valid_len: int, cfg: MaskConfig, rng) -> int:
    """Block budget for one row: floor(P * len / L + u), clamped by min_masks.

    The uniform addend gives probabilistic rounding, so the expected number
    of masked frames matches P * len even when P * len / L is fractional.
    """
    if valid_len < 1:
        raise ContractError("valid_len must be >= 1")
    draws = as_draws(rng)
    n = int(cfg.mask_prob * valid_len / float(cfg.mask_length) + draws.uniform())
    return max(cfg.min_masks, n)


def select_hard_starts(predicted: np.ndarray, count: int, valid_len: int) -> np.ndarray:
    """Indices of the ``count`` largest predicted values among valid positions.

    Descending value order; ties break toward the lower index.
    """
    if count > valid_len:
        raise ContractError(f"count {count} exceeds valid_len {valid_len}")
    if count < 0:
        raise ContractError("count must be >= 0")
    row = np.asarray(predicted, dtype=np.float64)[:valid_len]
    order = np.argsort(-row, kind="stable")
    return order[:count].astype(np.int64)


def effective_min_len(valid_len: int, num_mask: int, mask_length: int) -> int:
    """Start-pool margin: L, shrunk so the pool can host num_mask starts."""
    min_len = mask_length
    if valid_len - min_len <= num_mask:
        min_len = valid_len - num_mask - 1
    return min_len


def sample_random_starts(
    valid_len: int,
    num_mask: int,
    random_count: int,
    selective_starts: np.ndarray,
    min_len: int,
    rng,
) -> tuple[np.ndarray, bool]:
    """Random block starts: num_mask candidates, minus selective collisions.

    Draws ``num_mask`` candidate starts without replacement from
    [0, valid_len - min_len), removes any that collide with selective starts,
    then draws ``random_count`` from what is left.  If the remainder is too
    small the whole remainder is returned and the clamp flag is set.
    """
    if valid_len - min_len < num_mask:
        raise DegenerateLengthError(
            f"cannot place {num_mask} starts in a pool of {valid_len - min_len}"
        )
    draws = as_draws(rng)
    candidates = draws.choose(valid_len - min_len, num_mask)
    pool = np.setdiff1d(candidates, np.asarray(selective_starts))
    if random_count <= len(pool):
        return draws.choose(pool, random_count).astype(np.int64), False
    return pool.astype(np.int64), True


def expand_blocks(starts, block_len: int, valid_len: int) -> np.ndarray:
    """Union of [s, s + block_len) over starts, clipped to < valid_len, sorted."""
    if block_len < 1:
        raise ContractError("block_len must be >= 1")
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0:
        return np.empty(0, dtype=np.int64)
    span = starts[:, None] + np.arange(block_len, dtype=np.int64)[None, :]
    flat = span.reshape(-1)
    return np.unique(flat[flat < valid_len])


def build_adaptive_mask(
    valid: np.ndarray,
    predicted: np.ndarray,
    cfg: MaskConfig,
    epoch: int,
    rng,
) -> MaskSet:
    """Full easy-to-hard mask for one batch.

    Per row: block budget -> curriculum split -> selective top-k starts ->
    random starts -> block expansion -> union.  Across rows: optional trim to
    the batch-minimum cardinality, then mask dropout.  Padded positions are
    never masked.
    """
    valid = np.asarray(valid, dtype=bool)
    predicted = np.asarray(predicted)
    if predicted.shape != valid.shape:
        raise ContractError("predicted/valid geometry mismatch")
    draws = as_draws(rng)
    bsz, width = valid.shape
    lengths = valid.sum(axis=1).astype(np.int64)
    if not np.array_equal(valid, np.arange(width)[None, :] < lengths[:, None]):
        raise ContractError("valid mask must be right-padded (contiguous prefixes)")
    keep = keep_ratio_at(cfg.schedule, epoch, cfg.total_epochs)

    row_sets: list[np.ndarray] = []
    sel_lists: list[np.ndarray] = []
    rnd_lists: list[np.ndarray] = []
    stats: list[RowMaskStats] = []
    for i in range(bsz):
        sz = int(lengths[i])
        if sz < 1:
            raise ContractError(f"row {i} has no valid frames")
        num = num_mask_blocks(sz, cfg, draws)
        sel_count, rnd_count = split_counts(num, keep)
        row_pred = np.where(valid[i], predicted[i], NEG_INF)
        sel = select_hard_starts(row_pred, min(sel_count, sz), sz)
        min_len = effective_min_len(sz, num, cfg.mask_length)
        rnd, clamped = sample_random_starts(sz, num, rnd_count, sel, min_len, draws)
        union = np.union1d(
            expand_blocks(sel, cfg.mask_length, sz),
            expand_blocks(rnd, cfg.mask_length, sz),
        )
        row_sets.append(union)
        sel_lists.append(sel)
        rnd_lists.append(rnd[rnd < sz])
        stats.append(RowMaskStats(num, sel_count, rnd_count, clamp_flag=clamped))

    min_card = min(len(m) for m in row_sets)
    adaptive = np.zeros((bsz, width), dtype=bool)
    for i, m in enumerate(row_sets):
        if cfg.require_same_masks and len(m) > min_card:
            m = draws.choose(m, min_card)
        if cfg.mask_dropout > 0:
            holes = int(np.rint(len(m) * cfg.mask_dropout))
            m = draws.choose(m, len(m) - holes)
        adaptive[i, np.asarray(m, dtype=np.int64)] = True
        stats[i].final_cardinality = int(len(m))

    mask = MaskSet(adaptive, sel_lists, rnd_lists, epoch, stats)
    mask.validate(valid)
    return mask


def frame_mask(valid: np.ndarray, rows_indices: list[np.ndarray], epoch: int = 0) -> MaskSet:
    """MaskSet from explicit per-row frame indices (inference-time masking)."""
    valid = np.asarray(valid, dtype=bool)
    adaptive = np.zeros(valid.shape, dtype=bool)
    stats = []
    sel = []
    for i, idx in enumerate(rows_indices):
        idx = np.asarray(idx, dtype=np.int64)
        adaptive[i, idx] = True
        sel.append(np.sort(idx))
        stats.append(RowMaskStats(len(idx), len(idx), 0, final_cardinality=len(idx)))
    mask = MaskSet(adaptive, sel, [np.empty(0, dtype=np.int64)] * len(rows_indices), epoch, stats)
    mask.validate(valid)
    return mask


def apply_mask(batch, mask: MaskSet) -> MaskedBatch:
    """Annotate a batch with mask positions after checking the geometry."""
    mask.validate(batch.valid)
    return MaskedBatch(batch, mask)
