"""Train a small model on the synthetic sinusoid oracle and synthesize.

Uses a reduced geometry so the whole script finishes in well under a minute;
the packaged defaults (d_model 64, 3000 steps) are exercised by the
acceptance suite instead.
"""

import time

import numpy as np

from flowtts.autodiff import rng_stream
from flowtts.model import ModelConfig, init_model_state
from flowtts.pipeline import (
    TrainConfig,
    default_synthetic_spec,
    measure_rtf,
    synthesize,
    synthetic_example,
    train,
)

cfg = ModelConfig(d_model=32, n_layers_semantic=1, n_layers_residual=1,
                  n_heads=2, d_patch=8, vocab_size=16, max_patches=64, max_text_len=16)
spec = default_synthetic_spec(cfg)

example = synthetic_example(spec, cfg, [3, 7, 11], speaker_id=2)
print(f"Oracle example: {len(example.text_tokens)} tokens -> "
      f"{example.patches.shape[0]} patches of length {example.patches.shape[1]}")
print("Stop labels:", example.stop_labels.astype(int), "\n")

state = init_model_state(cfg, seed=0)
train_cfg = TrainConfig(train_steps=700, batch_size=4, learning_rate=1e-3, seed=0,
                        prompt_min_tokens=1, prompt_max_tokens=3, prompt_speakers=4)
print(f"Training {train_cfg.train_steps} steps ...")
start = time.perf_counter()
state, history = train(train_cfg, spec, state)
elapsed = time.perf_counter() - start

first = np.mean([r.total for r in history[:40]])
last = np.mean([r.total for r in history[-40:]])
print(f"  {elapsed:.1f}s, mean loss {first:.3f} -> {last:.3f}\n")

for tokens in ([3], [4, 9], [1, 2, 5]):
    target_len = spec.patches_per_token * len(tokens)
    out = synthesize(state, tokens, rng=rng_stream(0, "synth"))
    print(f"Synthesis for {len(tokens)} token(s): generated {out.shape[0]} patches "
          f"(oracle length {target_len})")
tokens = [4, 9]

rtf = measure_rtf(lambda t: synthesize(state, t, rng=rng_stream(1, "synth")),
                  tokens, cfg.frame_ms)
print(f"Real-time factor on this machine: {rtf:.4f} "
      f"(seconds of compute per second of implied audio)")
