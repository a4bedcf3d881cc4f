"""Synthetic speech-like corpus, WAV ingestion, and batch assembly.

Synthetic utterances are concatenations of segments, each rendered from one of
``codebook_size`` unit templates (a fixed mixture of 2-3 sinusoids plus
low-pass-filtered noise per unit).  Phase restarts at segment boundaries make
transition frames locally harder to predict from context, and ``frame_labels``
record the generating unit at each output frame of the frontend, which gives
the linear probe exact ground truth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import network
from .config import FrontendConfig, SynthConfig
from .errors import ConfigurationError, ContractError, CorruptWavError, UnsupportedWavError


@dataclass
class Utterance:
    samples: np.ndarray  # float32 amplitudes in [-1, 1]
    sample_rate: int
    frame_labels: np.ndarray | None = None  # int64, one per frontend frame

    def validate(self) -> None:
        if self.samples.size == 0:
            raise ContractError("utterance has no samples")
        if not np.isfinite(self.samples).all():
            raise ContractError("utterance contains non-finite samples")


@dataclass
class FrameBatch:
    """Right-padded batch of frame features with a validity mask."""

    features: np.ndarray  # B x N x d float32, zero at padding
    valid: np.ndarray  # B x N bool
    lengths: np.ndarray  # B int64
    labels: np.ndarray | None = None  # B x N int64, -1 at padding

    @property
    def size(self) -> tuple[int, int, int]:
        return self.features.shape

    def validate(self) -> None:
        bsz, width, _ = self.features.shape
        if self.valid.shape != (bsz, width) or self.lengths.shape != (bsz,):
            raise ContractError("batch geometry mismatch")
        positions = np.arange(width)[None, :]
        if not np.array_equal(self.valid, positions < self.lengths[:, None]):
            raise ContractError("valid mask must cover exactly the first `length` frames")
        if not np.isfinite(self.features).all():
            raise ContractError("batch features contain non-finite values")
        if np.any(self.features[~self.valid] != 0.0):
            raise ContractError("padded features must be zero")


# ---------------------------------------------------------------------------
# synthetic generation


def _unit_codebook(rng: np.random.Generator, size: int, sample_rate: int) -> list[dict]:
    """Unit templates with disjoint base-frequency slots.

    Slotting keeps units linearly separable at the frame level (the probe's
    ground truth stays learnable); the wide per-unit noise-gain range spreads
    intrinsic reconstruction difficulty across units.
    """
    units = []
    f_lo, f_hi = 0.025 * sample_rate, 0.35 * sample_rate
    slot = (f_hi - f_lo) / size
    ratios = np.array([1.0, 1.93, 2.71])
    for u in range(size):
        n_sin = int(rng.integers(2, 4))
        base = f_lo + slot * (u + rng.uniform(0.0, 1.0))
        units.append(
            {
                "freqs": np.minimum(base * ratios[:n_sin], 0.45 * sample_rate),
                "amps": rng.uniform(0.3, 1.0, n_sin),
                "phases": rng.uniform(0.0, 2.0 * np.pi, n_sin),
                "noise_gain": float(rng.uniform(0.08, 0.4)),
                "lp_coeff": float(rng.uniform(0.1, 0.6)),
            }
        )
    return units


def _render_segment(unit: dict, length: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(length, dtype=np.float64) / sample_rate
    wave = np.zeros(length, dtype=np.float64)
    for f, a, ph in zip(unit["freqs"], unit["amps"], unit["phases"]):
        wave += a * np.sin(2.0 * np.pi * f * t + ph)
    wave /= max(1.0, float(np.sum(unit["amps"])))
    noise = rng.normal(0.0, 1.0, length)
    c = unit["lp_coeff"]
    filtered = lfilter([1.0 - c], [1.0, -c], noise)  # one-pole low-pass
    return wave + unit["noise_gain"] * filtered


def generate_synthetic(cfg: SynthConfig, frontend: FrontendConfig) -> list[Utterance]:
    """Deterministic labeled corpus; bit-identical for identical (cfg, seed)."""
    cfg.validate()
    if frontend.passthrough:
        raise ConfigurationError("synthetic generation needs a waveform frontend")
    lo, hi = cfg.segment_len_range
    min_total = cfg.segments_per_utterance * lo
    if min_total < network.receptive_field(frontend):
        raise ConfigurationError(
            f"shortest possible utterance ({min_total} samples) is below the "
            f"frontend receptive field ({network.receptive_field(frontend)})"
        )
    rng = np.random.default_rng(cfg.seed)
    units = _unit_codebook(rng, cfg.codebook_size, cfg.sample_rate)
    stride = network.total_stride(frontend)
    rf = network.receptive_field(frontend)

    utterances = []
    for _ in range(cfg.num_utterances):
        unit_ids = rng.integers(0, cfg.codebook_size, cfg.segments_per_utterance)
        seg_lens = rng.integers(lo, hi + 1, cfg.segments_per_utterance)
        pieces = [
            _render_segment(units[int(u)], int(n), cfg.sample_rate, rng)
            for u, n in zip(unit_ids, seg_lens)
        ]
        wave = np.concatenate(pieces)
        peak = float(np.max(np.abs(wave)))
        if peak > 0.95:
            wave = wave * (0.95 / peak)
        samples = wave.astype(np.float32)

        boundaries = np.cumsum(seg_lens)  # segment end positions
        n_frames = network.frame_count(len(samples), frontend)
        centers = np.arange(n_frames) * stride + rf // 2
        centers = np.minimum(centers, len(samples) - 1)
        labels = unit_ids[np.searchsorted(boundaries, centers, side="right")]
        utt = Utterance(samples=samples, sample_rate=cfg.sample_rate,
                        frame_labels=labels.astype(np.int64))
        utt.validate()
        utterances.append(utt)
    return utterances


# ---------------------------------------------------------------------------
# WAV I/O (RIFF; PCM16 and IEEE float32)


def load_wav(path: str | Path) -> Utterance:
    """Decode a mono/stereo PCM16 or float32 WAV; stereo is averaged to mono."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorruptWavError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise CorruptWavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise CorruptWavError(f"{path}: truncated data chunk")
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise CorruptWavError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1:
        raise CorruptWavError(f"{path}: zero channels")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedWavError(
            f"{path}: unsupported encoding (format {audio_format}, {bits}-bit)"
        )
    if samples.size % channels != 0:
        raise CorruptWavError(f"{path}: payload not divisible by channel count")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1).astype(np.float32)
    utt = Utterance(samples=samples, sample_rate=sample_rate)
    utt.validate()
    return utt


def write_wav(path: str | Path, utterance: Utterance, encoding: str = "pcm16") -> None:
    samples = np.asarray(utterance.samples, dtype=np.float32)
    if encoding == "pcm16":
        scaled = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        payload = scaled.tobytes()
        fmt = struct.pack("<HHIIHH", 1, 1, utterance.sample_rate,
                          utterance.sample_rate * 2, 2, 16)
    elif encoding == "float32":
        payload = samples.astype("<f4").tobytes()
        fmt = struct.pack("<HHIIHH", 3, 1, utterance.sample_rate,
                          utterance.sample_rate * 4, 4, 32)
    else:
        raise ConfigurationError(f"unknown WAV encoding {encoding!r}")
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(payload)) + payload)


# ---------------------------------------------------------------------------
# persistence (one binary file per utterance + a manifest of paths)


def save_utterance(path: str | Path, utterance: Utterance) -> None:
    arrays = {"samples": utterance.samples, "sample_rate": np.int64(utterance.sample_rate)}
    if utterance.frame_labels is not None:
        arrays["frame_labels"] = utterance.frame_labels
    np.savez(path, **arrays)


def load_utterance(path: str | Path) -> Utterance:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return load_wav(path)
    with np.load(path) as data:
        labels = data["frame_labels"].astype(np.int64) if "frame_labels" in data else None
        utt = Utterance(
            samples=data["samples"].astype(np.float32),
            sample_rate=int(data["sample_rate"]),
            frame_labels=labels,
        )
    utt.validate()
    return utt


def save_corpus(directory: str | Path, utterances: list[Utterance]) -> Path:
    """Write one .npz per utterance plus manifest.txt (one path per line)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, utt in enumerate(utterances):
        p = directory / f"utt_{i:05d}.npz"
        save_utterance(p, utt)
        paths.append(p)
    manifest = directory / "manifest.txt"
    manifest.write_text("".join(f"{p}\n" for p in paths))
    return manifest


def load_manifest(manifest_path: str | Path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"no such manifest: {manifest_path}")
    utterances = []
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if line:
            utterances.append(load_utterance(line))
    if not utterances:
        raise ConfigurationError(f"manifest {manifest_path} lists no utterances")
    return utterances


# ---------------------------------------------------------------------------
# batching


def assemble_batch(
    feature_list: list[np.ndarray],
    label_list: list[np.ndarray | None] | None = None,
) -> FrameBatch:
    """Right-pad per-utterance features (and labels) into one batch."""
    if not feature_list:
        raise ContractError("cannot assemble an empty batch")
    dim = feature_list[0].shape[1]
    lengths = np.array([f.shape[0] for f in feature_list], dtype=np.int64)
    width = int(lengths.max())
    bsz = len(feature_list)
    features = np.zeros((bsz, width, dim), dtype=np.float32)
    valid = np.zeros((bsz, width), dtype=bool)
    for i, feats in enumerate(feature_list):
        if feats.shape[1] != dim:
            raise ContractError("inconsistent feature dims in batch")
        features[i, : feats.shape[0]] = feats
        valid[i, : feats.shape[0]] = True
    labels = None
    if label_list is not None and all(l is not None for l in label_list):
        labels = np.full((bsz, width), -1, dtype=np.int64)
        for i, lab in enumerate(label_list):
            if len(lab) != lengths[i]:
                raise ContractError(
                    f"row {i}: {len(lab)} labels for {lengths[i]} frames"
                )
            labels[i, : len(lab)] = lab
    batch = FrameBatch(features=features, valid=valid, lengths=lengths, labels=labels)
    batch.validate()
    return batch


def make_batch(utterances: list[Utterance], frontend: FrontendConfig) -> FrameBatch:
    """Extract features per utterance and right-pad into a FrameBatch."""
    if not utterances:
        raise ContractError("cannot batch zero utterances")
    feats = [network.extract_features(u, frontend) for u in utterances]
    labels = [u.frame_labels for u in utterances]
    return assemble_batch(feats, labels)
