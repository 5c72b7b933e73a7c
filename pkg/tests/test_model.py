"""Model-core tests: patch encoder locality, transformer causality, lattice
quantizer properties including the straight-through gradient contract, stop
head, and the per-step conditioning composition."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtts.autodiff import (
    ShapeError,
    constant,
    grad_check,
    mul,
    parameter,
    precision,
    record,
    tensor_sum,
    zero_grads,
)
from flowtts.model import (
    ModelConfig,
    encode_patches,
    fsq_quantize,
    init_model_state,
    residual_forward,
    semantic_forward,
    semantic_hiddens,
    step_hiddens,
    stop_logits,
)

CFG = ModelConfig(d_model=16, n_layers_semantic=1, n_layers_residual=1, n_heads=2,
                  d_patch=4, vocab_size=12, max_patches=32, max_text_len=16)
STATE = init_model_state(CFG, seed=3)
RNG = np.random.default_rng(5)


# --------------------------------------------------------------------------
# ModelConfig validation
# --------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=13, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(fsq_delta=0.0)
    with pytest.raises(ValueError):
        ModelConfig(cfg_drop_prob=1.5)


# --------------------------------------------------------------------------
# Patch encoder
# --------------------------------------------------------------------------

def test_encode_empty_sequence():
    out = encode_patches(STATE, np.zeros((0, CFG.d_patch)))
    assert out.data.shape == (0, CFG.d_model)


def test_encode_single_patch_shape():
    out = encode_patches(STATE, RNG.standard_normal((1, CFG.d_patch)))
    assert out.data.shape == (1, CFG.d_model)


def test_encode_identical_patches_identical_embeddings():
    p = RNG.standard_normal(CFG.d_patch)
    out = encode_patches(STATE, np.stack([p, p])).data
    np.testing.assert_array_equal(out[0], out[1])


def test_encode_per_patch_locality():
    patches = RNG.standard_normal((3, CFG.d_patch))
    base = encode_patches(STATE, patches).data.copy()
    changed = patches.copy()
    changed[2] += 1.0
    after = encode_patches(STATE, changed).data
    np.testing.assert_array_equal(base[:2], after[:2])
    assert not np.array_equal(base[2], after[2])


def test_encode_wrong_patch_length():
    with pytest.raises(ShapeError):
        encode_patches(STATE, np.zeros((2, CFG.d_patch + 1)))


# --------------------------------------------------------------------------
# Semantic transformer
# --------------------------------------------------------------------------

def test_semantic_requires_text():
    with pytest.raises(ValueError):
        semantic_forward(STATE, [], encode_patches(STATE, np.zeros((0, CFG.d_patch))))


def test_semantic_first_patch_prediction_from_text_alone():
    empty = encode_patches(STATE, np.zeros((0, CFG.d_patch)))
    text_h, h_next = semantic_forward(STATE, [1, 2, 3], empty)
    assert text_h.data.shape == (3, CFG.d_model)
    assert h_next.data.shape == (1, CFG.d_model)
    np.testing.assert_array_equal(h_next.data[0], text_h.data[-1])


def test_semantic_causality_appending_acoustic_leaves_text_hiddens():
    tokens = [4, 7, 1, 0]
    patches = RNG.standard_normal((3, CFG.d_patch))
    base = encode_patches(STATE, patches[:2])
    ext = encode_patches(STATE, patches)
    h_base = semantic_hiddens(STATE, tokens, base).data
    h_ext = semantic_hiddens(STATE, tokens, ext).data
    np.testing.assert_array_equal(h_base, h_ext[: h_base.shape[0]])


def test_semantic_causality_positionwise():
    # Hidden at position k is invariant to changes strictly after k.
    tokens = [2, 5, 9]
    patches = RNG.standard_normal((4, CFG.d_patch))
    h_full = semantic_hiddens(STATE, tokens, encode_patches(STATE, patches)).data
    mutated = patches.copy()
    mutated[3] += 2.0  # last acoustic position only
    h_mut = semantic_hiddens(STATE, tokens, encode_patches(STATE, mutated)).data
    np.testing.assert_array_equal(h_full[:-1], h_mut[:-1])


def test_semantic_bitwise_stable():
    tokens = [1, 2]
    patches = RNG.standard_normal((2, CFG.d_patch))
    a = semantic_hiddens(STATE, tokens, encode_patches(STATE, patches)).data
    b = semantic_hiddens(STATE, tokens, encode_patches(STATE, patches)).data
    np.testing.assert_array_equal(a, b)


def test_semantic_rejects_bad_tokens():
    empty = encode_patches(STATE, np.zeros((0, CFG.d_patch)))
    with pytest.raises(ValueError):
        semantic_forward(STATE, [CFG.vocab_size], empty)


# --------------------------------------------------------------------------
# FSQ quantizer
# --------------------------------------------------------------------------

def test_fsq_direct_examples():
    assert fsq_quantize(constant([0.2]), 1.0, 2).data[0] == 0.0
    assert fsq_quantize(constant([3.7]), 1.0, 2).data[0] == 2.0
    assert fsq_quantize(constant([-2.6]), 1.0, 2).data[0] == -2.0


def test_fsq_half_away_from_zero():
    out = fsq_quantize(constant([0.5, -0.5, 1.5, -1.5]), 1.0, 4).data
    np.testing.assert_array_equal(out, [1.0, -1.0, 2.0, -2.0])


def test_fsq_rejects_nonfinite():
    with pytest.raises(ValueError):
        fsq_quantize(constant(np.array([np.nan])), 1.0, 2)
    with pytest.raises(ValueError):
        fsq_quantize(parameter(np.array([np.inf])), 0.5, 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=16),
       st.floats(0.05, 2.0), st.integers(1, 8))
def test_fsq_lattice_membership_and_idempotence(values, delta, bound):
    h = constant(np.array(values, dtype=np.float64), dtype=np.float64)
    q = fsq_quantize(h, delta, bound)
    ratio = q.data / delta
    np.testing.assert_allclose(ratio, np.round(ratio), atol=1e-9)
    assert np.all(np.abs(q.data) <= bound * delta + 1e-12)
    q2 = fsq_quantize(q, delta, bound)
    np.testing.assert_array_equal(q.data, q2.data)


def test_fsq_monotonic_per_coordinate():
    rng = np.random.default_rng(11)
    x = np.sort(rng.uniform(-6, 6, size=500))
    q = fsq_quantize(constant(x, dtype=np.float64), 0.5, 4).data
    assert np.all(np.diff(q) >= 0)


def test_fsq_stability_margin():
    rng = np.random.default_rng(12)
    delta, bound = 0.5, 4
    h = rng.uniform(-3, 3, size=(200, 8))
    scaled = h / delta
    dist = np.abs(scaled - np.floor(scaled) - 0.5)  # distance to nearest half-integer
    margin = dist.min(axis=1)
    keep = margin > 1e-3
    h, margin = h[keep], margin[keep]
    q_before = fsq_quantize(constant(h, dtype=np.float64), delta, bound).data
    pert = rng.uniform(-1, 1, size=h.shape) * (0.9 * margin * delta)[:, None]
    q_after = fsq_quantize(constant(h + pert, dtype=np.float64), delta, bound).data
    np.testing.assert_array_equal(q_before, q_after)


def test_fsq_straight_through_gradient():
    # d loss(fsq(h)) / dh must equal the identity-surrogate finite difference.
    with precision("float64"):
        rng = np.random.default_rng(13)
        probe = rng.standard_normal(8)
        h = parameter(rng.uniform(-3, 3, size=8))

        def through_quantizer(t):
            return tensor_sum(mul(fsq_quantize(t, 0.5, 4), constant(probe)))

        def surrogate(t):
            return tensor_sum(mul(t, constant(probe)))

        # Analytic gradient through the quantizer ...
        zero_grads([h])
        with record() as tape:
            loss = through_quantizer(h)
        tape.backward(loss)
        analytic = h.grad.copy()
        # ... equals the finite-difference gradient of the identity surrogate.
        assert grad_check(surrogate, h) <= 1e-4
        np.testing.assert_allclose(analytic, probe, rtol=1e-12)


# --------------------------------------------------------------------------
# Residual transformer
# --------------------------------------------------------------------------

def _text_hiddens(tokens, patches):
    emb = encode_patches(STATE, patches)
    text_h, _ = semantic_forward(STATE, tokens, emb)
    return text_h, emb


def test_residual_empty_history():
    text_h, _ = _text_hiddens([3, 1], np.zeros((0, CFG.d_patch)))
    empty = encode_patches(STATE, np.zeros((0, CFG.d_patch)))
    empty_fsq = fsq_quantize(empty, CFG.fsq_delta, CFG.fsq_bound)
    out = residual_forward(STATE, text_h, empty_fsq, empty)
    assert out.data.shape == (1, CFG.d_model)


def test_residual_history_length_mismatch():
    text_h, emb = _text_hiddens([3, 1], RNG.standard_normal((2, CFG.d_patch)))
    fsq_hist = fsq_quantize(emb, CFG.fsq_delta, CFG.fsq_bound)
    short = encode_patches(STATE, RNG.standard_normal((1, CFG.d_patch)))
    with pytest.raises(ShapeError):
        residual_forward(STATE, text_h, fsq_hist, short)


def test_residual_causality_at_final_position():
    # h_res at step i is unchanged by appending step-i history entries.
    tokens = [3, 1, 8]
    patches = RNG.standard_normal((3, CFG.d_patch))
    text_h, emb = _text_hiddens(tokens, patches)
    fsq_hist = fsq_quantize(emb, CFG.fsq_delta, CFG.fsq_bound)
    from flowtts.model import narrow, residual_hiddens
    short = residual_hiddens(STATE, text_h,
                             narrow(fsq_hist, 0, 0, 2), narrow(emb, 0, 0, 2)).data
    longer = residual_hiddens(STATE, text_h, fsq_hist, emb).data
    np.testing.assert_array_equal(short, longer[: short.shape[0]])


# --------------------------------------------------------------------------
# Stop head
# --------------------------------------------------------------------------

def test_stop_zero_head_gives_half_probability():
    state = init_model_state(CFG, seed=9)
    state.params["stop.w"].data[:] = 0.0
    state.params["stop.b"].data[:] = 0.0
    h = constant(RNG.standard_normal((3, CFG.d_model)))
    logits = stop_logits(state, h).data
    np.testing.assert_array_equal(logits, np.zeros((3, 1), dtype=logits.dtype))


def test_stop_deterministic():
    h = constant(RNG.standard_normal((2, CFG.d_model)))
    a = stop_logits(STATE, h).data
    b = stop_logits(STATE, h).data
    np.testing.assert_array_equal(a, b)


# --------------------------------------------------------------------------
# Per-step composition
# --------------------------------------------------------------------------

def test_step_hiddens_sum_identity_and_lattice():
    history = RNG.standard_normal((3, CFG.d_patch))
    sh = step_hiddens(STATE, [1, 2], history)
    np.testing.assert_array_equal(sh.h_final.data, sh.h_quantized.data + sh.h_residual.data)
    ratio = sh.h_quantized.data / CFG.fsq_delta
    np.testing.assert_allclose(ratio, np.round(ratio), atol=1e-5)
    requant = fsq_quantize(sh.h_quantized, CFG.fsq_delta, CFG.fsq_bound)
    np.testing.assert_array_equal(requant.data, sh.h_quantized.data)


def test_step_hiddens_empty_history():
    sh = step_hiddens(STATE, [5, 6, 7], np.zeros((0, CFG.d_patch)))
    assert sh.h_final.data.shape == (1, CFG.d_model)
    assert math.isfinite(sh.stop_logit)


def test_step_hiddens_rejects_full_history():
    history = RNG.standard_normal((CFG.max_patches, CFG.d_patch))
    with pytest.raises(ShapeError):
        step_hiddens(STATE, [1], history)
