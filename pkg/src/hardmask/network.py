"""Feature frontend, transformer context encoder, conv heads, and targets.

The frontend is a fixed strided 1-D conv stack whose weights are drawn once
from the frontend seed; it is applied at batch-assembly time and is never
trained, so student and teacher share it by construction.  The encoder is a
pre-norm transformer with learned absolute positional embeddings and a learned
mask embedding that replaces features at masked positions before the stack.
With pre-norm blocks the residual stream passes through untouched when all
block weights are zero, and ``EncoderOutput.final`` equals the final layer
norm applied to ``per_layer[-1]``.

Reconstruction decoder and loss predictor are light conv stacks over the
frame axis (kernel ``head_kernel``, ``head_layers`` deep) followed by a 1x1
head; the predictor emits one scalar per frame and returns ``-inf`` at
invalid positions so padding can never win a top-k selection.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import erf
from torch import nn

from .config import FrontendConfig, ModelConfig
from .errors import CheckpointError, ContractError, InputTooShortError, NumericalError
from .losses import LossVector

#: Parameter groups kept in sync between student and teacher by EMA.
SHARED_GROUPS = ("frontend", "encoder", "predictor")


# ---------------------------------------------------------------------------
# fixed frontend (numpy)


def receptive_field(cfg: FrontendConfig) -> int:
    rf = 1
    stride = 1
    for _, k, s in cfg.layers:
        rf += (k - 1) * stride
        stride *= s
    return rf


def total_stride(cfg: FrontendConfig) -> int:
    stride = 1
    for _, _, s in cfg.layers:
        stride *= s
    return stride


def frame_count(num_samples: int, cfg: FrontendConfig) -> int:
    """Output frames for a waveform length: per-layer floor((n - k)/s) + 1."""
    if cfg.passthrough:
        raise ContractError("frame_count undefined for passthrough frontends")
    n = num_samples
    for _, k, s in cfg.layers:
        n = (n - k) // s + 1
        if n < 1:
            raise InputTooShortError(
                f"waveform of {num_samples} samples is shorter than the "
                f"receptive field ({receptive_field(cfg)})"
            )
    return n


_frontend_cache: dict[tuple, list[tuple[np.ndarray, np.ndarray]]] = {}


def frontend_weights(cfg: FrontendConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seed-deterministic conv weights (biases are zero)."""
    key = cfg.key()
    if key not in _frontend_cache:
        rng = np.random.default_rng(cfg.seed)
        weights = []
        in_ch = 1
        for out_ch, k, _ in cfg.layers:
            std = 1.0 / np.sqrt(in_ch * k)
            w = rng.normal(0.0, std, size=(out_ch, in_ch, k)).astype(np.float32)
            b = np.zeros(out_ch, dtype=np.float32)
            weights.append((w, b))
            in_ch = out_ch
        _frontend_cache[key] = weights
    return _frontend_cache[key]


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(np.float32)


def _conv1d_np(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    # x: (C_in, T), w: (C_out, C_in, K) -> (C_out, N)
    k = w.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride, :]
    out = np.einsum("oik,ink->on", w, windows, optimize=True)
    return (out + b[:, None]).astype(np.float32)


def extract_features(source, cfg: FrontendConfig) -> np.ndarray:
    """Waveform -> N x d frames; passthrough mode returns N x d input as-is."""
    if cfg.passthrough:
        arr = np.asarray(source, dtype=np.float32)
        if arr.ndim != 2:
            raise ContractError("passthrough frontend expects an N x d array")
        return arr.copy()
    samples = np.asarray(getattr(source, "samples", source), dtype=np.float32)
    if samples.ndim != 1:
        raise ContractError("expected a 1-D waveform")
    if samples.shape[0] < receptive_field(cfg):
        raise InputTooShortError(
            f"waveform of {samples.shape[0]} samples is shorter than the "
            f"receptive field ({receptive_field(cfg)})"
        )
    x = samples[None, :]
    for (w, b), (_, _, stride) in zip(frontend_weights(cfg), cfg.layers):
        x = _gelu_np(_conv1d_np(x, w, b, stride))
    return np.ascontiguousarray(x.T)


# ---------------------------------------------------------------------------
# torch modules


class FrozenFrontend(nn.Module):
    """Frontend weights registered for checkpoint/EMA; never run in forward."""

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        if not cfg.passthrough:
            for i, (w, b) in enumerate(frontend_weights(cfg)):
                self.register_parameter(f"w{i}", nn.Parameter(torch.from_numpy(w.copy()), requires_grad=False))
                self.register_parameter(f"b{i}", nn.Parameter(torch.from_numpy(b.copy()), requires_grad=False))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        bsz, n, dim = x.shape
        def split(t):
            return t.view(bsz, n, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = (q @ k.transpose(-2, -1)) / (self.head_dim ** 0.5)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(bsz, n, dim)
        return self.out_proj(ctx)


class TransformerLayer(nn.Module):
    """Pre-norm block: x + attn(ln1(x)); x + ffn(ln2(x))."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), valid)
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))


class ContextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_positions, cfg.dim))
        self.mask_emb = nn.Parameter(torch.zeros(cfg.dim))
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.dim, cfg.attention_heads, cfg.ffn_dim)
            for _ in range(cfg.encoder_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.dim)


class ConvHead(nn.Module):
    """head_layers convs (kernel head_kernel, GELU) then a 1x1 projection."""

    def __init__(self, in_dim: int, width: int, out_dim: int, layers: int, kernel: int, groups: int):
        super().__init__()
        convs = []
        ch = in_dim
        for _ in range(layers):
            convs.append(nn.Conv1d(ch, width, kernel, padding=kernel // 2, groups=groups))
            ch = width
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv1d(width, out_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = torch.nn.functional.gelu(conv(h))
        return self.head(h).transpose(1, 2)


class ModelState(nn.Module):
    """One network role: frontend + encoder + loss predictor (+ decoder)."""

    def __init__(self, cfg: ModelConfig, role: str):
        super().__init__()
        if role not in ("student", "teacher"):
            raise ContractError(f"unknown role {role!r}")
        self.cfg = cfg
        self.role = role
        self.frontend = FrozenFrontend(cfg.frontend)
        self.encoder = ContextEncoder(cfg)
        self.predictor = ConvHead(
            cfg.dim, cfg.head_dim, 1, cfg.head_layers, cfg.head_kernel, cfg.head_groups
        )
        self.decoder = (
            ConvHead(cfg.dim, cfg.head_dim, cfg.dim, cfg.head_layers, cfg.head_kernel, cfg.head_groups)
            if role == "student"
            else None
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.mask_emb.dtype


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def init_model(
    cfg: ModelConfig,
    role: str = "student",
    rng: np.random.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> ModelState:
    """Build a model with seed-deterministic truncated-normal initialization."""
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    model = ModelState(cfg, role).to(dtype)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.startswith("frontend."):
                continue  # seed-fixed by FrontendConfig, already set
            if ".ln1." in name or ".ln2." in name or "final_norm" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                values = _trunc_normal(rng, tuple(param.shape), 0.02)
                param.copy_(torch.from_numpy(values).to(dtype))
    if role == "teacher":
        model.requires_grad_(False)
    return model


def clone_as_teacher(student: ModelState) -> ModelState:
    """Teacher = parameter copy of the student without the decoder."""
    if student.role != "student":
        raise ContractError("can only clone a student into a teacher")
    teacher = copy.deepcopy(student)
    teacher.role = "teacher"
    teacher.decoder = None
    teacher.requires_grad_(False)
    return teacher


# ---------------------------------------------------------------------------
# forward operations


@dataclass
class EncoderOutput:
    final: torch.Tensor  # B x N x d, final_norm(per_layer[-1])
    per_layer: tuple[torch.Tensor, ...]  # K residual-stream outputs
    valid: torch.Tensor  # B x N bool


def masked_encoder_input(state: ModelState, batch, mask=None) -> torch.Tensor:
    """Features with padding zeroed and masked positions replaced, pre-position."""
    feats = torch.from_numpy(np.ascontiguousarray(batch.features)).to(state.dtype)
    if feats.ndim != 3 or feats.shape[2] != state.cfg.dim:
        raise ContractError(
            f"batch features {tuple(feats.shape)} do not match model dim {state.cfg.dim}"
        )
    valid = torch.from_numpy(np.ascontiguousarray(batch.valid))
    x = torch.where(valid[..., None], feats, feats.new_zeros(()))
    if mask is not None:
        if mask.adaptive.shape != batch.valid.shape:
            raise ContractError("mask geometry does not match batch")
        masked = torch.from_numpy(mask.adaptive)
        x = torch.where(masked[..., None], state.encoder.mask_emb, x)
    return x


def encode(state: ModelState, batch, mask=None) -> EncoderOutput:
    """Run the context encoder; padded keys are excluded from attention."""
    n = batch.features.shape[1]
    if n > state.cfg.max_positions:
        raise ContractError(f"sequence of {n} frames exceeds max_positions")
    x = masked_encoder_input(state, batch, mask)
    valid = torch.from_numpy(np.ascontiguousarray(batch.valid))
    x = x + state.encoder.pos_emb[:n].to(state.dtype)
    per_layer = []
    for layer in state.encoder.layers:
        x = layer(x, valid)
        per_layer.append(x)
    final = state.encoder.final_norm(x)
    return EncoderOutput(final=final, per_layer=tuple(per_layer), valid=valid)


def predict_frame_losses(state: ModelState, enc: EncoderOutput, valid) -> LossVector:
    """Per-frame predicted reconstruction values; -inf at invalid positions."""
    if isinstance(valid, np.ndarray):
        valid = torch.from_numpy(np.ascontiguousarray(valid))
    raw = state.predictor(enc.final).squeeze(-1)
    values = raw.masked_fill(~valid, float("-inf"))
    return LossVector(values=values, defined=valid)


def decode_reconstruction(state: ModelState, enc: EncoderOutput) -> torch.Tensor:
    """Student-only reconstruction of the target representation."""
    if state.role != "student" or state.decoder is None:
        raise ContractError("decode_reconstruction requires the student role")
    return state.decoder(enc.final)


def instance_normalize(x: torch.Tensor, valid: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-(sample, channel) standardization over valid frames; zero at padding."""
    v = valid[..., None].to(x.dtype)
    n = v.sum(dim=1, keepdim=True)
    mean = (x * v).sum(dim=1, keepdim=True) / n
    var = (((x - mean) ** 2) * v).sum(dim=1, keepdim=True) / n
    return (x - mean) / torch.sqrt(var + eps) * v


def build_targets(teacher_out: EncoderOutput, layers_to_average: int, eps: float = 1e-5) -> torch.Tensor:
    """Average of instance-normalized top layers; constant to the student."""
    k = len(teacher_out.per_layer)
    if not 1 <= layers_to_average <= k:
        raise ContractError(f"layers_to_average {layers_to_average} outside [1, {k}]")
    acc = None
    for layer_out in teacher_out.per_layer[-layers_to_average:]:
        normed = instance_normalize(layer_out, teacher_out.valid, eps)
        acc = normed if acc is None else acc + normed
    return (acc / layers_to_average).detach()


# ---------------------------------------------------------------------------
# gradient checking and parameter plumbing


def gradient_check(
    loss_fn,
    params,
    eps: float = 1e-4,
    num_coords: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autograd and central finite differences.

    Samples ``num_coords`` coordinates across the given parameters; for each,
    the relative error is |analytic - numeric| / max(|numeric|, 1e-8).
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ContractError("gradient_check needs at least one parameter")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite: {float(loss.detach())}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(num_coords, total), replace=False)
    max_rel = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            li = int(flat - offsets[pi])
            view = params[pi].view(-1)
            orig = view[li].item()
            view[li] = orig + eps
            f_plus = float(loss_fn())
            view[li] = orig - eps
            f_minus = float(loss_fn())
            view[li] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError("perturbed loss is not finite")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(grads[pi].view(-1)[li])
            rel = abs(analytic - numeric) / max(abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel


def parameter_arrays(state: ModelState) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in state.named_parameters()}


def load_parameter_arrays(state: ModelState, arrays: dict[str, np.ndarray]) -> None:
    own = dict(state.named_parameters())
    if set(own) != set(arrays):
        missing = sorted(set(own) ^ set(arrays))
        raise CheckpointError(f"parameter name mismatch: {missing}")
    with torch.no_grad():
        for name, param in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: file {arr.shape} vs model {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype))


def shared_parameter_items(state: ModelState):
    """(name, parameter) pairs for the EMA-covered groups, in a fixed order."""
    for group in SHARED_GROUPS:
        module = getattr(state, group)
        for name, param in module.named_parameters():
            yield f"{group}.{name}", param


def fingerprint(state: ModelState) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(state.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
