"""Constructed models with known behavior, shared across test modules."""

from pathlib import Path

import numpy as np

from orthorank import Model, ModelConfig, generate_synthetic_model, load_checkpoint
from orthorank.checkpoint_io import required_tensors, save_checkpoint


def make_tokens(n, vocab, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=n)


def blank_weights(config):
    """All-zero weight map with unit gains: every block is an exact identity."""
    weights = {}
    for name, shape in required_tensors(config):
        if name.endswith("gain"):
            weights[name] = np.ones(shape, dtype=np.float32)
        else:
            weights[name] = np.zeros(shape, dtype=np.float32)
    return weights


def make_uniform_model():
    """Zero lm_head on an untied model: logits are identically zero.

    Perplexity of any corpus is then exactly the vocab size. vocab_size=32
    is kept because exp(log(32.0)) rounds back to 32.0 in float64, making
    the equality exact rather than approximate.
    """
    config = ModelConfig(n_layers=2, d_model=16, n_heads=2, n_kv_heads=2,
                         d_head=8, d_ffn=32, vocab_size=32, tied_embeddings=False)
    weights = blank_weights(config)
    rng = np.random.default_rng(7)
    weights["embed.weight"] = rng.standard_normal((32, 16)).astype(np.float32) * 0.25
    return Model.from_weights(config, weights, model_id="uniform-logit")


PROB1_TOKEN = 5


def make_prob1_model():
    """Model that puts a ~80 logit gap on PROB1_TOKEN regardless of input.

    On a constant corpus of that token the per-position NLL underflows to
    exactly zero, so perplexity is exactly 1.0.
    """
    config = ModelConfig(n_layers=2, d_model=16, n_heads=2, n_kv_heads=2,
                         d_head=8, d_ffn=32, vocab_size=16, tied_embeddings=False)
    weights = blank_weights(config)
    weights["embed.weight"][PROB1_TOKEN, 0] = 4.0
    weights["lm_head.weight"][0, PROB1_TOKEN] = 20.0
    return Model.from_weights(config, weights, model_id="prob1")


ROTATION_TOKEN = 5
ROTATION_DECOY = 3


def make_rotation_model(n_layers, identity_layers, gamma=8.0, theta=0.25):
    """Doctored model where named layers are exact identity blocks.

    Attention is disabled everywhere (zero projections). Every other
    layer's FFN nudges the hidden state toward basis direction
    ROTATION_TOKEN, sharpening the prediction of the constant corpus made
    of that token. Skipping a functional layer for any token therefore
    strictly raises its NLL, while converting an identity layer changes
    nothing at all: calibration must rank the identity layers first.
    """
    d = 16
    config = ModelConfig(n_layers=n_layers, d_model=d, n_heads=2, n_kv_heads=2,
                         d_head=d // 2, d_ffn=32, vocab_size=d,
                         tied_embeddings=False)
    weights = blank_weights(config)
    weights["embed.weight"][ROTATION_TOKEN, ROTATION_DECOY] = 0.7
    weights["embed.weight"][ROTATION_TOKEN, ROTATION_TOKEN] = 0.7
    weights["lm_head.weight"] = np.eye(d, dtype=np.float32)
    for layer in range(n_layers):
        if layer in identity_layers:
            continue
        weights[f"layers.{layer}.ffn.w_gate.weight"][ROTATION_TOKEN, 0] = gamma
        weights[f"layers.{layer}.ffn.w_up.weight"][ROTATION_TOKEN, 0] = 1.0
        weights[f"layers.{layer}.ffn.w_down.weight"][0, ROTATION_TOKEN] = theta
    ident = "-".join(str(l) for l in sorted(identity_layers))
    return Model.from_weights(config, weights, model_id=f"rotation-{n_layers}-{ident}")


def rotation_corpus(n_tokens):
    return np.full(n_tokens, ROTATION_TOKEN, dtype=np.int64)


def make_sink_probe_model():
    """Five inert layers; layer 2's attention is crafted to hit position 0.

    All blocks pass hidden states through unchanged (zero wo / w_down), so
    the crafted layer sees raw embeddings. Token 0 is the only embedding
    with mass on basis 0; layer 2's keys read basis 0 and its queries read
    the shared basis-1 component, both through the slowest rotary pair, so
    every query scores high against key 0 only. Other layers have zero
    scores, hence uniform attention.
    """
    d = 16
    config = ModelConfig(n_layers=5, d_model=d, n_heads=2, n_kv_heads=2,
                         d_head=8, d_ffn=32, vocab_size=32, tied_embeddings=False)
    weights = blank_weights(config)
    rng = np.random.default_rng(3)
    emb = np.zeros((32, d), dtype=np.float32)
    emb[0, 0] = 4.0
    emb[1:, 1] = 1.0
    emb[1:, 4:] = rng.standard_normal((31, d - 4)).astype(np.float32) * 0.05
    weights["embed.weight"] = emb
    weights["lm_head.weight"] = rng.standard_normal((d, 32)).astype(np.float32) * 0.1
    # head 0 spans projected dims 0..7; its slowest rotary pair is (3, 7)
    weights["layers.2.attn.wk.weight"][0, 3] = 4.0
    weights["layers.2.attn.wq.weight"][1, 3] = 4.0
    return Model.from_weights(config, weights, model_id="sink-probe")


def sink_probe_tokens(n=64, seed=4):
    rest = np.random.default_rng(seed).integers(1, 32, size=n - 1)
    return np.concatenate([[0], rest])


def make_planted_sink_model(tmp_dir):
    """Live random model with a planted attention sink at layer 1.

    Starts from a synthetic checkpoint, then rewires layer 1 the same way
    as the probe model (keys read the sink token's private basis direction,
    queries a shared one) with the remaining projections damped so the
    planted score dominates. Detection on a 0-led token stream yields 1.
    """
    config = ModelConfig(n_layers=10, d_model=16, n_heads=2, n_kv_heads=2,
                         d_head=8, d_ffn=32, vocab_size=32, tied_embeddings=False)
    generate_synthetic_model(config, 11, tmp_dir)
    _, weights = load_checkpoint(tmp_dir)
    emb = weights["embed.weight"]
    emb[0] *= 0.0
    emb[0, 0] = 4.0
    emb[1:, 1] += 0.8
    weights["layers.1.attn.wk.weight"] *= 0.1
    weights["layers.1.attn.wq.weight"] *= 0.1
    weights["layers.1.attn.wk.weight"][0, 3] = 6.0
    weights["layers.1.attn.wq.weight"][1, 3] = 6.0
    return Model.from_weights(config, weights, model_id="planted-sink")


def save_planted_sink_checkpoint(dir_path):
    """On-disk variant of the planted-sink model for CLI runs."""
    model = make_planted_sink_model(Path(dir_path) / "base")
    save_checkpoint(dir_path, model.config, model.weights)
    return dir_path


def planted_tokens(n=128, seed=9):
    rest = np.random.default_rng(seed).integers(1, 32, size=n - 1)
    return np.concatenate([[0], rest])
