"""Conditioning-side model: patch encoder, semantic and residual transformers,
scalar-lattice quantizer with straight-through gradients, and the stop head.

Each generation step produces a quantized "skeleton" hidden plus a residual
hidden; their sum conditions the patch decoder.  All transformers are causal
pre-LN stacks with learned absolute position embeddings (separate tables for
text and acoustic segments).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    RngHub,
    ShapeError,
    Tensor,
    active_dtype,
    add,
    concat,
    constant,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mul,
    narrow,
    parameter,
    push_op,
    softmax,
    transpose,
)

__all__ = [
    "ModelConfig",
    "ModelState",
    "StepHiddens",
    "VELOCITY_LAYERS",
    "init_model_state",
    "param_layout",
    "encode_patches",
    "semantic_hiddens",
    "semantic_forward",
    "fsq_quantize",
    "residual_hiddens",
    "residual_forward",
    "stop_logits",
    "step_hiddens",
    "causal_mask",
    "pair_mask",
    "transformer_stack",
    "linear",
]

MASK_VALUE = -1e9
INIT_STD = 0.02
VELOCITY_LAYERS = 2  # depth of the patch-decoder transformer
MLP_WIDTH = 4  # hidden width multiplier inside transformer blocks


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and constants shared by all five submodules."""

    d_model: int = 64
    n_layers_semantic: int = 2
    n_layers_residual: int = 2
    n_heads: int = 4
    d_patch: int = 16
    vocab_size: int = 64
    fsq_delta: float = 0.5
    fsq_bound: int = 4
    max_patches: int = 256
    max_text_len: int = 64
    lambda_stop: float = 0.1
    cfg_drop_prob: float = 0.1
    frame_ms: int = 40

    def __post_init__(self):
        for name in ("d_model", "n_layers_semantic", "n_layers_residual", "n_heads",
                     "d_patch", "vocab_size", "max_patches", "max_text_len", "frame_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("ModelConfig.d_model must be divisible by n_heads")
        if self.fsq_delta <= 0:
            raise ValueError("ModelConfig.fsq_delta must be > 0")
        if self.fsq_bound < 1:
            raise ValueError("ModelConfig.fsq_bound must be a positive integer")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ValueError("ModelConfig.cfg_drop_prob must lie in [0, 1]")


def _stack_layout(prefix: str, n_layers: int, d: int):
    for i in range(n_layers):
        base = f"{prefix}.l{i}"
        yield f"{base}.ln1.g", (d,), "ones"
        yield f"{base}.ln1.b", (d,), "zeros"
        for proj in ("wq", "wk", "wv", "wo"):
            yield f"{base}.attn.{proj}", (d, d), "normal"
        for bias in ("bq", "bk", "bv", "bo"):
            yield f"{base}.attn.{bias}", (d,), "zeros"
        yield f"{base}.ln2.g", (d,), "ones"
        yield f"{base}.ln2.b", (d,), "zeros"
        yield f"{base}.mlp.w1", (d, MLP_WIDTH * d), "normal"
        yield f"{base}.mlp.b1", (MLP_WIDTH * d,), "zeros"
        yield f"{base}.mlp.w2", (MLP_WIDTH * d, d), "normal"
        yield f"{base}.mlp.b2", (d,), "zeros"
    yield f"{prefix}.lnf.g", (d,), "ones"
    yield f"{prefix}.lnf.b", (d,), "zeros"


def param_layout(config: ModelConfig):
    """Ordered (name, shape, init) triples for every learnable tensor."""
    d, dp = config.d_model, config.d_patch
    # Local acoustic encoder: per-patch 2-layer MLP.
    yield "enc.w1", (dp, d), "normal"
    yield "enc.b1", (d,), "zeros"
    yield "enc.w2", (d, d), "normal"
    yield "enc.b2", (d,), "zeros"
    # Semantic transformer over [text tokens ++ acoustic embeddings].
    yield "sem.tok", (config.vocab_size, d), "normal"
    yield "sem.pos_text", (config.max_text_len, d), "normal"
    yield "sem.pos_ac", (config.max_patches, d), "normal"
    yield from _stack_layout("sem", config.n_layers_semantic, d)
    # Residual transformer over [text hiddens ++ projected (skeleton ⊕ acoustic) history].
    yield "res.proj.w", (2 * d, d), "normal"
    yield "res.proj.b", (d,), "zeros"
    yield "res.pos_text", (config.max_text_len, d), "normal"
    yield "res.pos_hist", (config.max_patches, d), "normal"
    yield from _stack_layout("res", config.n_layers_residual, d)
    # Stop head reads the quantized skeleton.
    yield "stop.w", (d, 1), "normal"
    yield "stop.b", (1,), "zeros"
    # Velocity net (patch decoder): 2-token bidirectional transformer.
    yield "vel.in.w", (dp, d), "normal"
    yield "vel.in.b", (d,), "zeros"
    yield "vel.pos", (2, d), "normal"
    yield "vel.null", (1, d), "normal"
    yield from _stack_layout("vel", VELOCITY_LAYERS, d)
    yield "vel.out.w", (d, dp), "normal"
    yield "vel.out.b", (dp,), "zeros"


class ModelState:
    """All learnable parameter tensors plus the sizing/quantizer config.

    Immutable during inference: concurrent read-only forward passes are safe.
    Training mutates parameter values under a single writer.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self):
        return self.params.items()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).data.dtype


def init_model_state(config: ModelConfig, seed: int = 0) -> ModelState:
    """Fresh random state; weights are scaled-normal (std 0.02), biases zero."""
    rng = RngHub(seed).stream("init")
    dtype = active_dtype()
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_layout(config):
        if kind == "normal":
            arr = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
        elif kind == "ones":
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        params[name] = parameter(arr, dtype=dtype)
    return ModelState(config, params)


# --------------------------------------------------------------------------
# Shared transformer machinery
# --------------------------------------------------------------------------

_MASK_CACHE: dict[tuple[str, int, str], Tensor] = {}


def causal_mask(n: int, dtype=None) -> Tensor:
    """Additive mask forbidding attention to positions > own."""
    dtype = np.dtype(dtype) if dtype is not None else active_dtype()
    key = ("causal", n, dtype.str)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        m = np.zeros((n, n), dtype=dtype)
        m[np.triu_indices(n, 1)] = MASK_VALUE
        cached = constant(m, dtype=dtype)
        _MASK_CACHE[key] = cached
    return cached


def pair_mask(n_pairs: int, dtype=None) -> Tensor:
    """Additive mask isolating consecutive row pairs (bidirectional within a pair)."""
    dtype = np.dtype(dtype) if dtype is not None else active_dtype()
    key = ("pair", n_pairs, dtype.str)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        n = 2 * n_pairs
        m = np.full((n, n), MASK_VALUE, dtype=dtype)
        for i in range(n_pairs):
            m[2 * i:2 * i + 2, 2 * i:2 * i + 2] = 0.0
        cached = constant(m, dtype=dtype)
        _MASK_CACHE[key] = cached
    return cached


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _ln(state: ModelState, prefix: str, x: Tensor) -> Tensor:
    return add(mul(layer_norm(x), state[f"{prefix}.g"]), state[f"{prefix}.b"])


def _attention(state: ModelState, prefix: str, x: Tensor, mask: Tensor) -> Tensor:
    d = state.config.d_model
    heads = state.config.n_heads
    dh = d // heads
    q = linear(x, state[f"{prefix}.wq"], state[f"{prefix}.bq"])
    k = linear(x, state[f"{prefix}.wk"], state[f"{prefix}.bk"])
    v = linear(x, state[f"{prefix}.wv"], state[f"{prefix}.bv"])
    scale = 1.0 / math.sqrt(dh)
    outputs = []
    for h in range(heads):
        start = h * dh
        qh = narrow(q, 1, start, dh)
        kh = narrow(k, 1, start, dh)
        vh = narrow(v, 1, start, dh)
        scores = add(mul(matmul(qh, transpose(kh)), scale), mask)
        outputs.append(matmul(softmax(scores), vh))
    merged = concat(outputs, axis=1)
    return linear(merged, state[f"{prefix}.wo"], state[f"{prefix}.bo"])


def _block(state: ModelState, prefix: str, x: Tensor, mask: Tensor) -> Tensor:
    x = add(x, _attention(state, f"{prefix}.attn", _ln(state, f"{prefix}.ln1", x), mask))
    h = gelu(linear(_ln(state, f"{prefix}.ln2", x), state[f"{prefix}.mlp.w1"], state[f"{prefix}.mlp.b1"]))
    return add(x, linear(h, state[f"{prefix}.mlp.w2"], state[f"{prefix}.mlp.b2"]))


def transformer_stack(state: ModelState, prefix: str, x: Tensor, n_layers: int, mask: Tensor) -> Tensor:
    for i in range(n_layers):
        x = _block(state, f"{prefix}.l{i}", x, mask)
    return _ln(state, f"{prefix}.lnf", x)


# --------------------------------------------------------------------------
# Submodules
# --------------------------------------------------------------------------

def _as_patch_matrix(patches, d_patch: int, dtype) -> np.ndarray:
    arr = np.asarray(patches, dtype=dtype)
    if arr.size == 0:
        return arr.reshape(0, d_patch)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != d_patch:
        raise ShapeError(f"patches must have length {d_patch}, got shape {arr.shape}")
    return arr


def encode_patches(state: ModelState, patches) -> Tensor:
    """Per-patch MLP producing one compact acoustic embedding per patch.

    Embedding k depends only on patch k, so causality of downstream stacks
    is preserved by construction.
    """
    cfg = state.config
    arr = _as_patch_matrix(patches, cfg.d_patch, state.dtype)
    h = gelu(linear(constant(arr, dtype=state.dtype), state["enc.w1"], state["enc.b1"]))
    return linear(h, state["enc.w2"], state["enc.b2"])


def _check_tokens(config: ModelConfig, text_tokens) -> np.ndarray:
    ids = np.asarray(text_tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("a non-empty text token sequence is required")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    if ids.size > config.max_text_len:
        raise ShapeError(f"text length {ids.size} exceeds max_text_len {config.max_text_len}")
    return ids


def semantic_hiddens(state: ModelState, text_tokens, acoustic: Tensor) -> Tensor:
    """Causal hidden states over [embedded text] ++ [acoustic embeddings].

    Row (n_text - 1 + i) is the prediction hidden for patch i: it has seen
    the full text plus acoustic context strictly before patch i.
    """
    cfg = state.config
    ids = _check_tokens(cfg, text_tokens)
    n_text = ids.size
    n_ac = acoustic.data.shape[0]
    if n_ac > cfg.max_patches:
        raise ShapeError(f"acoustic context of {n_ac} patches exceeds max_patches {cfg.max_patches}")
    tx = add(embedding_lookup(state["sem.tok"], ids),
             embedding_lookup(state["sem.pos_text"], np.arange(n_text)))
    if n_ac:
        ac = add(acoustic, embedding_lookup(state["sem.pos_ac"], np.arange(n_ac)))
        x = concat([tx, ac], axis=0)
    else:
        x = tx
    mask = causal_mask(n_text + n_ac, state.dtype)
    return transformer_stack(state, "sem", x, cfg.n_layers_semantic, mask)


def semantic_forward(state: ModelState, text_tokens, acoustic: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (text hiddens, next-patch prediction hidden)."""
    ids = np.asarray(text_tokens, dtype=np.int64)
    h = semantic_hiddens(state, text_tokens, acoustic)
    n_total = h.data.shape[0]
    return narrow(h, 0, 0, ids.size), narrow(h, 0, n_total - 1, 1)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # Fixed half-away-from-zero rounding, independent of platform default.
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fsq_quantize(h: Tensor, delta: float, bound: int) -> Tensor:
    """Per-dimension scalar quantization onto the lattice delta * [-bound, bound].

    output[j] = delta * clip(round(h[j] / delta), -bound, bound) with
    half-away-from-zero rounding.  The backward pass is the identity
    (straight-through), so gradients flow to the pre-quantization hidden.
    """
    if delta <= 0:
        raise ValueError("fsq_quantize: delta must be > 0")
    if bound < 1:
        raise ValueError("fsq_quantize: bound must be >= 1")
    if not np.all(np.isfinite(h.data)):
        raise ValueError("fsq_quantize: non-finite input")
    q = delta * np.clip(_round_half_away(h.data / delta), -bound, bound)
    out_arr = q.astype(h.data.dtype, copy=False)
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.grad = None
    out.requires_grad = h.requires_grad

    def adjoint(g: np.ndarray) -> None:
        if h.requires_grad:
            if h.grad is None:
                h.grad = np.zeros_like(h.data)
            h.grad += g

    push_op(out, adjoint)
    return out


def residual_hiddens(state: ModelState, text_hiddens: Tensor,
                     fsq_history: Tensor, acoustic_history: Tensor) -> Tensor:
    """Causal hidden states over [text hiddens] ++ [proj(skeleton ⊕ acoustic)].

    Row (n_text - 1 + i) is the residual hidden for step i.
    """
    cfg = state.config
    k = fsq_history.data.shape[0]
    if acoustic_history.data.shape[0] != k:
        raise ShapeError(
            f"history length mismatch: {k} quantized vs {acoustic_history.data.shape[0]} acoustic"
        )
    n_text = text_hiddens.data.shape[0]
    tx = add(text_hiddens, embedding_lookup(state["res.pos_text"], np.arange(n_text)))
    if k:
        hist = linear(concat([fsq_history, acoustic_history], axis=1),
                      state["res.proj.w"], state["res.proj.b"])
        hist = add(hist, embedding_lookup(state["res.pos_hist"], np.arange(k)))
        x = concat([tx, hist], axis=0)
    else:
        x = tx
    mask = causal_mask(n_text + k, state.dtype)
    return transformer_stack(state, "res", x, cfg.n_layers_residual, mask)


def residual_forward(state: ModelState, text_hiddens: Tensor,
                     fsq_history: Tensor, acoustic_history: Tensor) -> Tensor:
    h = residual_hiddens(state, text_hiddens, fsq_history, acoustic_history)
    n_total = h.data.shape[0]
    return narrow(h, 0, n_total - 1, 1)


def stop_logits(state: ModelState, h_fsq: Tensor) -> Tensor:
    """Linear head mapping quantized skeleton rows to termination logits."""
    return linear(h_fsq, state["stop.w"], state["stop.b"])


@dataclass
class StepHiddens:
    """Per-step conditioning bundle; h_final == h_quantized + h_residual."""

    h_semantic: Tensor
    h_quantized: Tensor
    h_residual: Tensor
    h_final: Tensor
    stop_logit: float


def step_hiddens(state: ModelState, text_tokens, patch_history) -> StepHiddens:
    """Run the full conditioning pipeline for the next patch.

    One causal pass yields the prediction hiddens for every step up to the
    current one, so the quantized history the residual transformer needs is
    recomputed consistently from the patch history alone.
    """
    cfg = state.config
    history = _as_patch_matrix(patch_history, cfg.d_patch, state.dtype)
    i = history.shape[0]
    if i >= cfg.max_patches:
        raise ShapeError(f"patch history of {i} reached max_patches {cfg.max_patches}")
    ids = _check_tokens(cfg, text_tokens)
    n_text = ids.size

    embeddings = encode_patches(state, history)
    hiddens = semantic_hiddens(state, text_tokens, embeddings)
    pred = embedding_lookup(hiddens, n_text - 1 + np.arange(i + 1))
    quantized = fsq_quantize(pred, cfg.fsq_delta, cfg.fsq_bound)

    text_h = narrow(hiddens, 0, 0, n_text)
    h_res = residual_forward(state, text_h, narrow(quantized, 0, 0, i), embeddings)
    h_sem = narrow(pred, 0, i, 1)
    h_fsq = narrow(quantized, 0, i, 1)
    h_final = add(h_fsq, h_res)
    logit = stop_logits(state, h_fsq)
    return StepHiddens(
        h_semantic=h_sem,
        h_quantized=h_fsq,
        h_residual=h_res,
        h_final=h_final,
        stop_logit=float(logit.data[0, 0]),
    )
