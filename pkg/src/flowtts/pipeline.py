"""End-to-end training and inference: the synthetic latent oracle, the joint
objective, Adam-smoothed SGD, autoregressive synthesis with stop detection,
real-time-factor measurement, and binary persistence (checkpoints, latent
trajectory files, loss CSVs).
"""

from __future__ import annotations

import dataclasses
import math
import struct
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    RngHub,
    ShapeError,
    Tensor,
    active_dtype,
    add,
    bce_with_logits,
    constant,
    mse,
    mul,
    parameter,
    record,
    rng_stream,
    zero_grads,
)
from .flowmatch import sample_patch, velocity_batch
from .model import (
    ModelConfig,
    ModelState,
    embedding_lookup,
    encode_patches,
    fsq_quantize,
    narrow,
    param_layout,
    residual_hiddens,
    semantic_hiddens,
    step_hiddens,
    stop_logits,
)

__all__ = [
    "TrainConfig",
    "TrainingExample",
    "SyntheticSpec",
    "LossRecord",
    "LossParts",
    "draw_conditioning_enabled",
    "TrainingDiverged",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "LatentFileError",
    "default_synthetic_spec",
    "synthetic_example",
    "sample_prompt",
    "stop_loss",
    "total_loss",
    "train",
    "synthesize",
    "measure_rtf",
    "rtf_value",
    "save_checkpoint",
    "load_checkpoint",
    "write_latents",
    "read_latents",
    "write_loss_csv",
]

GOLDEN_FRACTION = 0.6180339887498949  # spreads speaker phases over the offset range


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the stop-loss weight comes from ModelConfig."""

    learning_rate: float = 3e-4
    train_steps: int = 3000
    batch_size: int = 8
    cfg_drop_prob: float = 0.1
    seed: int = 0
    prompt_min_tokens: int = 2
    prompt_max_tokens: int = 6
    prompt_speakers: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig.learning_rate must be positive")
        if self.train_steps < 0 or self.batch_size < 1:
            raise ValueError("TrainConfig: train_steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ValueError("TrainConfig.cfg_drop_prob must lie in [0, 1]")
        if not 1 <= self.prompt_min_tokens <= self.prompt_max_tokens:
            raise ValueError("TrainConfig: need 1 <= prompt_min_tokens <= prompt_max_tokens")


@dataclass
class TrainingExample:
    """Token prompt, ground-truth latent patches, and per-patch stop labels."""

    text_tokens: tuple[int, ...]
    patches: np.ndarray  # (n, d_patch)
    stop_labels: np.ndarray  # (n,) bool, true only at the last patch

    def __post_init__(self):
        self.patches = np.asarray(self.patches)
        self.stop_labels = np.asarray(self.stop_labels, dtype=bool)
        n = self.patches.shape[0]
        if n < 1 or self.stop_labels.shape != (n,):
            raise ValueError("TrainingExample: need >= 1 patch and one label per patch")
        if self.stop_labels.sum() != 1 or not self.stop_labels[-1]:
            raise ValueError("TrainingExample: exactly one stop label, at the last patch")


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic sinusoid oracle standing in for a latent audio codec.

    Token k maps to a base frequency; speaker identity shifts the phase.
    Patch g (global index) of token k samples sin(2*pi*f(k)*(g + phase + j/d))
    at the d in-patch positions j, so consecutive patches continue the wave.
    """

    token_freq: dict[int, float]
    speaker_phase_range: float = 0.5
    patches_per_token: int = 3
    noise_amp: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.patches_per_token < 1:
            raise ValueError("SyntheticSpec.patches_per_token must be >= 1")
        if self.noise_amp < 0:
            raise ValueError("SyntheticSpec.noise_amp must be >= 0")


def default_synthetic_spec(config: ModelConfig) -> SyntheticSpec:
    freq = {k: 0.05 + 0.9 * k / config.vocab_size for k in range(config.vocab_size)}
    return SyntheticSpec(token_freq=freq)


def _speaker_phase(spec: SyntheticSpec, speaker_id: int) -> float:
    return spec.speaker_phase_range * ((int(speaker_id) * GOLDEN_FRACTION) % 1.0)


def synthetic_example(spec: SyntheticSpec, config: ModelConfig,
                      text_tokens: Sequence[int], speaker_id: int) -> TrainingExample:
    """Oracle latents for a prompt: patches_per_token patches per token."""
    tokens = tuple(int(t) for t in text_tokens)
    if not tokens:
        raise ValueError("synthetic_example: empty token sequence")
    d = config.d_patch
    per = spec.patches_per_token
    phase = _speaker_phase(spec, speaker_id)
    grid = np.arange(d) / d
    rows = []
    for position, token in enumerate(tokens):
        freq = spec.token_freq.get(token)
        if freq is None:
            raise ValueError(f"synthetic_example: no base frequency for token {token}")
        g = position * per + np.arange(per)
        t = g[:, None] + phase + grid[None, :]
        rows.append(np.sin(2.0 * math.pi * freq * t))
    patches = np.concatenate(rows, axis=0).astype(np.float64)
    if spec.noise_amp > 0:
        name = f"oracle-noise:{speaker_id}:" + ",".join(map(str, tokens))
        noise_rng = rng_stream(spec.noise_seed, name)
        patches = patches + spec.noise_amp * noise_rng.standard_normal(patches.shape)
    labels = np.zeros(patches.shape[0], dtype=bool)
    labels[-1] = True
    return TrainingExample(text_tokens=tokens, patches=patches, stop_labels=labels)


def sample_prompt(cfg: TrainConfig, model_cfg: ModelConfig,
                  rng: np.random.Generator) -> tuple[tuple[int, ...], int]:
    """Draw a (tokens, speaker) pair from the training prompt distribution."""
    length = int(rng.integers(cfg.prompt_min_tokens, cfg.prompt_max_tokens + 1))
    tokens = tuple(int(t) for t in rng.integers(0, model_cfg.vocab_size, size=length))
    speaker = int(rng.integers(0, cfg.prompt_speakers))
    return tokens, speaker


# --------------------------------------------------------------------------
# Joint objective
# --------------------------------------------------------------------------

def stop_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of termination logits against stop labels."""
    labels = np.asarray(labels, dtype=bool)
    if logits.data.size != labels.size:
        raise ShapeError(f"stop_loss: {logits.data.size} logits vs {labels.size} labels")
    if labels.size == 0:
        raise ShapeError("stop_loss: need at least one position")
    targets = labels.astype(logits.data.dtype).reshape(logits.data.shape)
    return bce_with_logits(logits, targets)


@dataclass
class LossParts:
    fm: float
    stop: float
    cond_enabled: bool


def draw_conditioning_enabled(rngs: RngHub, drop_prob: float) -> bool:
    """Per-sequence guidance-dropout decision; consumes the cfg_drop stream."""
    return bool(rngs.stream("cfg_drop").uniform() >= drop_prob)


def _teacher_forced_hiddens(state: ModelState, example: TrainingExample):
    """Per-step conditioning tensors for all patch positions in one causal pass.

    Equivalent to running step_hiddens at each position with the ground-truth
    history (teacher forcing), but with a single pass through each stack.
    """
    cfg = state.config
    patches = np.asarray(example.patches, dtype=state.dtype)
    n = patches.shape[0]
    n_text = len(example.text_tokens)

    embeddings = encode_patches(state, patches)
    hiddens = semantic_hiddens(state, example.text_tokens, embeddings)
    pred_rows = n_text - 1 + np.arange(n)
    pred = embedding_lookup(hiddens, pred_rows)
    quantized = fsq_quantize(pred, cfg.fsq_delta, cfg.fsq_bound)

    text_h = narrow(hiddens, 0, 0, n_text)
    resid_all = residual_hiddens(state, text_h,
                                 narrow(quantized, 0, 0, n - 1),
                                 narrow(embeddings, 0, 0, n - 1))
    h_res = embedding_lookup(resid_all, pred_rows)
    h_final = add(quantized, h_res)
    return h_final, quantized


def total_loss(example: TrainingExample, state: ModelState, rngs: RngHub,
               drop_prob: float | None = None,
               velocity_fn: Callable | None = None,
               stop_logits_fn: Callable | None = None) -> tuple[Tensor, LossParts]:
    """Joint objective for one example: flow-matching loss averaged over patch
    positions (independent t and eps per position) plus the weighted stop loss.

    Conditioning is dropped for the whole sequence with probability
    ``drop_prob`` (default: the model's cfg_drop_prob); the dropped branch
    trains the null embedding used for guidance at inference.

    ``velocity_fn(z_t, t_values, cond, z_prev) -> Tensor`` and
    ``stop_logits_fn(h_fsq) -> Tensor`` substitute the velocity net or the
    stop head; tests use them to plug in exact oracles.
    """
    cfg = state.config
    dtype = state.dtype
    if drop_prob is None:
        drop_prob = cfg.cfg_drop_prob

    h_final, quantized = _teacher_forced_hiddens(state, example)
    logits = (stop_logits_fn or (lambda q: stop_logits(state, q)))(quantized)
    l_stop = stop_loss(logits, example.stop_labels)

    n = example.patches.shape[0]
    z0 = np.asarray(example.patches, dtype=dtype)
    z_prev = np.vstack([np.zeros((1, cfg.d_patch), dtype=dtype), z0[:-1]])
    t_values = rngs.stream("t").uniform(size=n)
    eps = rngs.stream("eps").standard_normal((n, cfg.d_patch)).astype(dtype)
    cond_enabled = draw_conditioning_enabled(rngs, drop_prob)

    z_t = ((1.0 - t_values)[:, None] * z0 + t_values[:, None] * eps).astype(dtype)
    target = eps - z0
    cond = h_final if cond_enabled else None
    if velocity_fn is None:
        v = velocity_batch(state, z_t, t_values, cond, z_prev)
    else:
        v = velocity_fn(z_t, t_values, cond, z_prev)
        if not isinstance(v, Tensor):
            v = constant(np.asarray(v, dtype=dtype), dtype=dtype)
    l_fm = mse(v, constant(target, dtype=dtype))

    total = add(l_fm, mul(l_stop, cfg.lambda_stop))
    return total, LossParts(fm=l_fm.item(), stop=l_stop.item(), cond_enabled=cond_enabled)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries the failing step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class LossRecord:
    step: int
    total: float
    fm: float
    stop: float


class _Adam:
    """Adam moments (b1 0.9, b2 0.999, eps 1e-8) over the named parameters."""

    def __init__(self, state: ModelState, lr: float):
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in state.parameters()}
        self.v = {name: np.zeros_like(p.data) for name, p in state.parameters()}

    def step(self, state: ModelState) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in state.parameters():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)


def train(config: TrainConfig, spec: SyntheticSpec,
          state: ModelState) -> tuple[ModelState, list[LossRecord]]:
    """Jointly optimize all submodules on synthetic batches.

    Deterministic given the seed: data sampling, noise, times, and the
    conditioning drop all consume dedicated named streams.
    """
    rngs = RngHub(config.seed)
    data_rng = rngs.stream("data")
    optimizer = _Adam(state, config.learning_rate)
    params = [p for _, p in state.parameters()]
    history: list[LossRecord] = []

    for step in range(config.train_steps):
        examples = [
            synthetic_example(spec, state.config, *sample_prompt(config, state.config, data_rng))
            for _ in range(config.batch_size)
        ]
        fm_sum = 0.0
        stop_sum = 0.0
        with record() as tape:
            acc = None
            for example in examples:
                loss, parts = total_loss(example, state, rngs, drop_prob=config.cfg_drop_prob)
                fm_sum += parts.fm
                stop_sum += parts.stop
                acc = loss if acc is None else add(acc, loss)
            batch_loss = mul(acc, 1.0 / config.batch_size)
        value = batch_loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step)
        zero_grads(params)
        tape.backward(batch_loss)
        optimizer.step(state)
        history.append(LossRecord(step=step, total=value,
                                  fm=fm_sum / config.batch_size,
                                  stop=stop_sum / config.batch_size))
    return state, history


# --------------------------------------------------------------------------
# Synthesis and timing
# --------------------------------------------------------------------------

def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def synthesize(state: ModelState, text_tokens, reference_patches=(),
               cfg_scale: float = 2.5, steps: int = 10,
               rng: np.random.Generator | None = None,
               max_patches: int | None = None) -> np.ndarray:
    """Autoregressive patch generation with stop detection.

    Reference patches seed the history (voice-cloning context) but are never
    part of the output.  Generation ends when the stop probability exceeds
    0.5 or the history reaches the patch cap; at least one patch is produced.
    """
    cfg = state.config
    tokens = tuple(int(t) for t in np.atleast_1d(np.asarray(text_tokens, dtype=np.int64)))
    if not tokens:
        raise ValueError("synthesize: a non-empty text token sequence is required")
    cap = cfg.max_patches if max_patches is None else int(max_patches)
    if not 1 <= cap <= cfg.max_patches:
        raise ValueError(f"synthesize: max_patches must lie in [1, {cfg.max_patches}]")
    refs = np.asarray(reference_patches, dtype=state.dtype)
    if refs.size == 0:
        refs = np.zeros((0, cfg.d_patch), dtype=state.dtype)
    elif refs.ndim == 1:
        refs = refs.reshape(1, -1)
    if refs.ndim != 2 or refs.shape[1] != cfg.d_patch:
        raise ShapeError(f"synthesize: reference patches must be (n, {cfg.d_patch}), "
                         f"got shape {np.asarray(reference_patches).shape}")
    if refs.shape[0] >= cap:
        raise ValueError("synthesize: reference context already fills the patch cap")
    if rng is None:
        rng = rng_stream(0, "synth")

    history = list(refs)
    generated: list[np.ndarray] = []
    while True:
        hiddens = step_hiddens(state, tokens, np.asarray(history, dtype=state.dtype))
        z_prev = history[-1] if history else np.zeros(cfg.d_patch, dtype=state.dtype)
        patch = sample_patch(state, hiddens.h_final, z_prev, steps=steps,
                             cfg_scale=cfg_scale, rng=rng)
        history.append(patch)
        generated.append(patch)
        if _sigmoid(hiddens.stop_logit) > 0.5:
            break
        if len(history) >= cap or len(generated) >= cap:
            break
    return np.asarray(generated)


def rtf_value(wall_seconds: float, n_patches: int, frame_ms: float) -> float:
    """Real-time factor: synthesis wall-clock seconds over implied audio seconds."""
    audio_seconds = n_patches * frame_ms / 1000.0
    if audio_seconds <= 0:
        raise ValueError("rtf_value: zero-duration output")
    return wall_seconds / audio_seconds


def measure_rtf(synthesis_fn: Callable, text_tokens, frame_ms: float) -> float:
    """Time one synthesis call and report its real-time factor."""
    start = time.perf_counter()
    patches = synthesis_fn(text_tokens)
    wall = time.perf_counter() - start
    return rtf_value(wall, len(patches), frame_ms)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"JTV1"
CHECKPOINT_VERSION = 1
LATENT_MAGIC = b"JLAT"


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class LatentFileError(Exception):
    """Malformed latent trajectory file."""


class _Reader:
    def __init__(self, blob: bytes, error_cls):
        self.blob = blob
        self.pos = 0
        self.error_cls = error_cls

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise self.error_cls(
                f"file truncated: needed {n} bytes at offset {self.pos}, have {len(self.blob)}"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


_CONFIG_PREFIX = "config."


def _config_entries(config: ModelConfig):
    for f in dataclasses.fields(ModelConfig):
        yield _CONFIG_PREFIX + f.name, np.asarray(getattr(config, f.name), dtype="<f4")


def save_checkpoint(state: ModelState, path) -> None:
    """Write the state in the versioned binary tensor format.

    The config snapshot rides along as rank-0 entries named "config.<field>";
    parameter tensors follow in layout order.  Values are little-endian f32.
    """
    entries = list(_config_entries(state.config))
    entries += [(name, p.data) for name, p in state.parameters()]
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<Q", dim)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def _coerce_config_value(field_obj, raw: float):
    if field_obj.type in ("int", int):
        return int(round(raw))
    return float(raw)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelState:
    """Read a checkpoint back into a ModelState (bitwise round trip).

    With ``expected_config`` given, every tensor must match the shape that
    config implies; mismatches raise CheckpointShapeError naming the tensor.
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), CheckpointTruncatedError)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")
    (count,) = reader.unpack("<I")
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = tuple(reader.unpack("<" + "Q" * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        if name in raw:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        raw[name] = values
    if reader.pos != len(reader.blob):
        raise CheckpointError(f"{len(reader.blob) - reader.pos} trailing bytes after tensor data")

    config_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    config_kwargs = {}
    tensors = {}
    for name, values in raw.items():
        if name.startswith(_CONFIG_PREFIX):
            key = name[len(_CONFIG_PREFIX):]
            if key not in config_fields:
                raise CheckpointError(f"unknown config field {key!r} in checkpoint")
            config_kwargs[key] = _coerce_config_value(config_fields[key], float(values))
        else:
            tensors[name] = values
    missing_cfg = set(config_fields) - set(config_kwargs)
    if missing_cfg:
        raise CheckpointError(f"checkpoint lacks config fields: {sorted(missing_cfg)}")
    config = ModelConfig(**config_kwargs)

    reference = expected_config if expected_config is not None else config
    expected_shapes = {name: shape for name, shape, _ in param_layout(reference)}
    for name, shape in expected_shapes.items():
        if name not in tensors:
            raise CheckpointShapeError(f"tensor {name!r} missing from checkpoint")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: file shape {tensors[name].shape}, config expects {shape}"
            )
    extra = set(tensors) - set(expected_shapes)
    if extra:
        raise CheckpointShapeError(f"unexpected tensors in checkpoint: {sorted(extra)}")

    dtype = active_dtype()
    params = {name: parameter(tensors[name].astype(dtype), dtype=dtype)
              for name in expected_shapes}
    return ModelState(reference, params)


def write_latents(path, patches: np.ndarray, frame_ms: int) -> None:
    """Write a latent trajectory: magic, d_patch, n_patches, frame_ms, f32 rows."""
    arr = np.asarray(patches, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"write_latents: expected (n, d_patch) array, got shape {arr.shape}")
    out = bytearray()
    out += LATENT_MAGIC
    out += struct.pack("<III", arr.shape[1], arr.shape[0], int(frame_ms))
    out += np.ascontiguousarray(arr).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_latents(path) -> tuple[np.ndarray, int]:
    """Read a latent trajectory file; returns (patches, frame_ms)."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), LatentFileError)
    magic = reader.take(4)
    if magic != LATENT_MAGIC:
        raise LatentFileError(f"bad magic {magic!r}, expected {LATENT_MAGIC!r}")
    d_patch, n_patches, frame_ms = reader.unpack("<III")
    values = np.frombuffer(reader.take(4 * d_patch * n_patches), dtype="<f4")
    if reader.pos != len(reader.blob):
        raise LatentFileError("trailing bytes after latent data")
    return values.reshape(n_patches, d_patch).copy(), int(frame_ms)


def write_loss_csv(path, history: list[LossRecord]) -> None:
    lines = ["step,total,fm,stop"]
    lines += [f"{r.step},{r.total:.10g},{r.fm:.10g},{r.stop:.10g}" for r in history]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
