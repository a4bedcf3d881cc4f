"""Analysis experiments on trained states: inference-time masking degradation,
predictor ranking quality, frozen-representation linear probing, and the
per-epoch loss-landscape report.

The degradation metric is the relative increase in frame-probe error,
(error masked / error unmasked) - 1.  Error is evaluated at the positions
left visible (a frame-level linear probe saturates to chance at masked
positions themselves, which would hide any strategy difference), against the
unmasked-condition error at those same positions within the same run, so the
ratio isolates how much useful context the masked frames carried.  Selective
masking picks the top fraction of frames by the teacher's predicted
reconstruction values (or by actual reconstruction values when ``use_actual``
is set); random masking draws the same count uniformly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import kendalltau
from sklearn.linear_model import LogisticRegression

from .config import FrontendConfig
from .corpus import Utterance, assemble_batch
from .errors import ContractError
from .losses import per_frame_reconstruction
from .masking import MaskSet, frame_mask
from .network import (
    ModelState,
    build_targets,
    decode_reconstruction,
    encode,
    extract_features,
    predict_frame_losses,
)

_CHUNK = 16


@dataclass
class DegradeCurve:
    masking_percentages: tuple[float, ...]
    relative: dict[str, tuple[float, ...]]  # strategy -> per-percentage metric


class LinearProbe:
    """Frame-level multinomial logistic probe; constant-label corpora are
    handled by always predicting the single observed class."""

    def __init__(self):
        self._model = None
        self._constant = None

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "LinearProbe":
        classes = np.unique(labels)
        if len(classes) == 1:
            self._constant = int(classes[0])
            return self
        self._model = LogisticRegression(max_iter=500, C=1.0)
        self._model.fit(features, labels)
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self._constant is not None:
            return np.full(features.shape[0], self._constant, dtype=np.int64)
        return self._model.predict(features).astype(np.int64)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(features) == labels))


@dataclass
class ProbeResult:
    probe: LinearProbe
    accuracy: float
    layer: int
    train_utts: list[int]
    heldout_utts: list[int]


def _layer_output(enc, layer: int) -> torch.Tensor:
    """layer 0 -> final normalized output; 1..K -> that block's output."""
    if layer == 0:
        return enc.final
    if not 1 <= layer <= len(enc.per_layer):
        raise ContractError(f"layer {layer} outside [0, {len(enc.per_layer)}]")
    return enc.per_layer[layer - 1]


def encode_frames(
    state: ModelState,
    utterances: list[Utterance],
    frontend: FrontendConfig,
    layer: int = 0,
    masks: list[np.ndarray] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-utterance encoder frames (optionally under inference masking) and labels."""
    reps: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    with torch.no_grad():
        for lo in range(0, len(utterances), _CHUNK):
            chunk = utterances[lo:lo + _CHUNK]
            feats = [extract_features(u, frontend) for u in chunk]
            batch = assemble_batch(feats, [u.frame_labels for u in chunk])
            mask = None
            if masks is not None:
                mask = frame_mask(batch.valid, masks[lo:lo + _CHUNK])
            enc = encode(state, batch, mask)
            out = _layer_output(enc, layer).cpu().numpy()
            for row, utt in enumerate(chunk):
                n = batch.lengths[row]
                reps.append(out[row, :n])
                labels.append(
                    utt.frame_labels if utt.frame_labels is not None else None
                )
    return reps, labels


def probe_train(
    student: ModelState,
    utterances: list[Utterance],
    frontend: FrontendConfig,
    layer: int = 0,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> ProbeResult:
    """Train a frozen-representation frame classifier; report held-out accuracy."""
    if any(u.frame_labels is None for u in utterances):
        raise ContractError("probe training needs frame labels on every utterance")
    reps, labels = encode_frames(student, utterances, frontend, layer)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(utterances))
    n_train = min(max(int(round(train_fraction * len(utterances))), 1), len(utterances) - 1)
    train_utts = sorted(int(i) for i in order[:n_train])
    heldout_utts = sorted(int(i) for i in order[n_train:])

    x_train = np.concatenate([reps[i] for i in train_utts])
    y_train = np.concatenate([labels[i] for i in train_utts])
    x_held = np.concatenate([reps[i] for i in heldout_utts])
    y_held = np.concatenate([labels[i] for i in heldout_utts])

    probe = LinearProbe().fit(x_train, y_train)
    return ProbeResult(
        probe=probe,
        accuracy=probe.accuracy(x_held, y_held),
        layer=layer,
        train_utts=train_utts,
        heldout_utts=heldout_utts,
    )


def _actual_frame_losses(
    student: ModelState,
    teacher: ModelState,
    utterances: list[Utterance],
    frontend: FrontendConfig,
) -> list[np.ndarray]:
    """Actual per-frame reconstruction values under a full-valid mask."""
    out: list[np.ndarray] = []
    k_avg = min(student.cfg.effective_layers_to_average, student.cfg.encoder_layers)
    with torch.no_grad():
        for lo in range(0, len(utterances), _CHUNK):
            chunk = utterances[lo:lo + _CHUNK]
            feats = [extract_features(u, frontend) for u in chunk]
            batch = assemble_batch(feats)
            full = frame_mask(
                batch.valid, [np.arange(n) for n in batch.lengths]
            )
            enc_t = encode(teacher, batch)
            targets = build_targets(enc_t, k_avg, student.cfg.instance_norm_eps)
            enc_s = encode(student, batch, full)
            recon = decode_reconstruction(student, enc_s)
            _, vec = per_frame_reconstruction(recon, targets, full)
            values = vec.numpy()
            for row, n in enumerate(batch.lengths):
                out.append(values[row, :n].copy())
    return out


def _predicted_frame_losses(
    teacher: ModelState,
    utterances: list[Utterance],
    frontend: FrontendConfig,
) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    with torch.no_grad():
        for lo in range(0, len(utterances), _CHUNK):
            chunk = utterances[lo:lo + _CHUNK]
            feats = [extract_features(u, frontend) for u in chunk]
            batch = assemble_batch(feats)
            enc = encode(teacher, batch)
            pred = predict_frame_losses(teacher, enc, batch.valid).numpy()
            for row, n in enumerate(batch.lengths):
                out.append(pred[row, :n].copy())
    return out


def degrade_experiment(
    student: ModelState,
    teacher: ModelState,
    utterances: list[Utterance],
    frontend: FrontendConfig,
    percentages: tuple[float, ...],
    seed: int = 0,
    layer: int = 0,
    use_actual: bool = False,
    probe_result: ProbeResult | None = None,
) -> DegradeCurve:
    """Relative probe-error increase under selective vs random inference masking.

    Error is measured at visible positions against the unmasked condition at
    the same positions; a zero percentage therefore yields exactly 0.
    """
    last = -1.0
    for p in percentages:
        if not 0.0 <= p < 1.0:
            raise ContractError(f"masking percentage {p} outside [0, 1)")
        if p <= last:
            raise ContractError("percentages must be strictly increasing")
        last = p

    if probe_result is None:
        probe_result = probe_train(student, utterances, frontend, layer=layer, seed=seed)
    probe = probe_result.probe
    held = [utterances[i] for i in probe_result.heldout_utts]
    labels = [u.frame_labels for u in held]

    base_reps, _ = encode_frames(student, held, frontend, layer)
    base_pred = [probe.predict(r) for r in base_reps]

    if use_actual:
        scores = _actual_frame_losses(student, teacher, held, frontend)
    else:
        scores = _predicted_frame_losses(teacher, held, frontend)

    def visible_error(idx_rows, predictions) -> float:
        wrong = total = 0
        for pred, lab, masked_idx in zip(predictions, labels, idx_rows):
            vis = np.setdiff1d(np.arange(len(lab)), masked_idx)
            wrong += int(np.sum(pred[vis] != lab[vis]))
            total += len(vis)
        return wrong / total if total else 0.0

    rng = np.random.default_rng(seed)
    relative: dict[str, list[float]] = {"random": [], "selective": []}
    for p in percentages:
        counts = [int(round(p * len(s))) for s in scores]
        selective_idx = [
            np.argsort(-s, kind="stable")[:c] for s, c in zip(scores, counts)
        ]
        random_idx = [
            rng.choice(len(s), size=c, replace=False) for s, c in zip(scores, counts)
        ]
        for name, idx_rows in (("random", random_idx), ("selective", selective_idx)):
            reps, _ = encode_frames(student, held, frontend, layer, masks=idx_rows)
            masked_pred = [probe.predict(r) for r in reps]
            err = visible_error(idx_rows, masked_pred)
            base = visible_error(idx_rows, base_pred)
            floor = 1.0 / sum(len(lab) for lab in labels)
            relative[name].append(err / max(base, floor) - 1.0)
    return DegradeCurve(
        masking_percentages=tuple(percentages),
        relative={k: tuple(v) for k, v in relative.items()},
    )


def kendall_tau(a: np.ndarray, b: np.ndarray) -> float:
    tau = kendalltau(a, b).statistic
    return float(tau) if np.isfinite(tau) else 0.0


def ranking_quality(
    student: ModelState,
    teacher: ModelState,
    utterances: list[Utterance],
    frontend: FrontendConfig,
    seed: int = 0,
    mask_fraction: float = 0.5,
) -> float:
    """Kendall tau between teacher-predicted and actual losses at masked frames.

    Masks ``mask_fraction`` of each utterance's frames uniformly at random and
    reconstructs.  Tau is computed per utterance (the ranking objective only
    ever orders frames within one sequence, so prediction levels are not
    comparable across utterances) and aggregated weighted by frame count.
    """
    rng = np.random.default_rng(seed)
    k_avg = min(student.cfg.effective_layers_to_average, student.cfg.encoder_layers)
    taus: list[float] = []
    weights: list[int] = []
    with torch.no_grad():
        for lo in range(0, len(utterances), _CHUNK):
            chunk = utterances[lo:lo + _CHUNK]
            feats = [extract_features(u, frontend) for u in chunk]
            batch = assemble_batch(feats)
            rows = [
                np.sort(rng.choice(n, size=int(round(mask_fraction * n)), replace=False))
                for n in batch.lengths
            ]
            mask = frame_mask(batch.valid, rows)
            enc_t = encode(teacher, batch)
            pred_t = predict_frame_losses(teacher, enc_t, batch.valid).numpy()
            targets = build_targets(enc_t, k_avg, student.cfg.instance_norm_eps)
            enc_s = encode(student, batch, mask)
            recon = decode_reconstruction(student, enc_s)
            _, vec = per_frame_reconstruction(recon, targets, mask)
            values = vec.numpy()
            for row, idx in enumerate(rows):
                if len(idx) >= 2:
                    taus.append(kendall_tau(pred_t[row, idx], values[row, idx]))
                    weights.append(len(idx))
    if not taus:
        return 0.0
    return float(np.average(taus, weights=weights))


# ---------------------------------------------------------------------------
# loss-landscape report (per-epoch per-frame losses of one tracked utterance)


@dataclass
class LandscapeReport:
    epochs: list[int]
    rows: list[np.ndarray | None]  # per-epoch values, NaN where unmasked
    frame_count: int
    empty_epochs: list[int]


def loss_landscape_report(tracked, frame_count: int) -> LandscapeReport:
    """Fold tracked per-step losses into one row per data epoch.

    The first occurrence within each epoch wins (the utterance is visited once
    per shuffle); epochs with no visit yield a flagged empty row.
    """
    by_epoch: dict[int, np.ndarray] = {}
    for item in tracked:
        if item.data_epoch in by_epoch:
            continue
        row = np.full(frame_count, np.nan)
        defined = item.defined.astype(bool)
        row[defined] = item.values[defined]
        by_epoch[item.data_epoch] = row
    if not by_epoch:
        return LandscapeReport([], [], frame_count, [])
    max_epoch = max(by_epoch)
    epochs = list(range(max_epoch + 1))
    rows = [by_epoch.get(e) for e in epochs]
    empty = [e for e in epochs if rows[e] is None]
    return LandscapeReport(epochs, rows, frame_count, empty)


def write_landscape_csv(report: LandscapeReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"frame_{i}" for i in range(report.frame_count)])
        for epoch, row in zip(report.epochs, report.rows):
            if row is None:
                writer.writerow([epoch] + [""] * report.frame_count)
            else:
                cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
                writer.writerow([epoch] + cells)
