"""Dense decoder-only forward pass, KV caching, and sink-layer detection.

Architecture: pre-norm blocks, x += Attn(RMSNorm(x)) then x += SwiGLU(RMSNorm(x)),
grouped-query attention (query head h reads KV head h // (n_heads // n_kv_heads)),
rotary position embeddings on Q and K, final RMSNorm before the output
projection. All sequence paths, dense and selective alike, run through
``block_forward`` so that full selection is bitwise identical to the dense
pass by construction.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .checkpoint_io import ModelConfig, load_checkpoint, weights_sha256
from .errors import StateError, UsageError
from .trace import HiddenTrace


@dataclass
class Model:
    """Immutable weights plus config; shareable across threads."""

    config: ModelConfig
    weights: dict[str, np.ndarray]
    model_id: str
    _unembed: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_checkpoint(cls, dir_path, dtype=np.float32) -> "Model":
        config, weights = load_checkpoint(dir_path, dtype=dtype)
        return cls(config, weights, weights_sha256(dir_path))

    @classmethod
    def from_weights(cls, config, weights, model_id="in-memory") -> "Model":
        return cls(config, weights, model_id)

    def w(self, name: str) -> np.ndarray:
        try:
            return self.weights[name]
        except KeyError:
            raise StateError(f"model has no tensor named {name!r}") from None

    @property
    def unembed(self) -> np.ndarray:
        """(d_model, vocab) output projection; embedding transpose when tied."""
        if self._unembed is None:
            if self.config.tied_embeddings:
                mat = np.ascontiguousarray(self.weights["embed.weight"].T)
            else:
                mat = self.weights["lm_head.weight"]
            object.__setattr__(self, "_unembed", mat)
        return self._unembed


@dataclass
class KVCache:
    """Per-layer keys/values plus the selection state of one sequence.

    ``keys[l]``/``values[l]`` are (t_l, n_kv_heads, d_head); ``positions[l]``
    holds the absolute positions with a KV entry at layer l. t_l equals the
    number of processed tokens except at layers run with KV computation for
    unselected tokens disabled. ``score_history[o]`` (one score per processed
    token, +inf for the sink) and ``sink_normalized[o]`` exist only for
    layers run selectively.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: list[np.ndarray]
    score_history: dict[int, list[float]] = field(default_factory=dict)
    sink_normalized: dict[int, np.ndarray] = field(default_factory=dict)
    n_tokens: int = 0

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVCache":
        shape = (0, config.n_kv_heads, config.d_head)
        return cls(
            keys=[np.zeros(shape, dtype=tc.DEFAULT_DTYPE) for _ in range(config.n_layers)],
            values=[np.zeros(shape, dtype=tc.DEFAULT_DTYPE) for _ in range(config.n_layers)],
            positions=[np.zeros(0, dtype=np.int64) for _ in range(config.n_layers)],
        )

    @property
    def n_layers(self) -> int:
        return len(self.keys)


def block_forward(
    model: Model,
    layer: int,
    x: np.ndarray,
    positions: np.ndarray,
    sel: np.ndarray,
    kv_rows: np.ndarray,
    cache: KVCache | None = None,
    capture_attn0: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Run decoder block ``layer`` in place on rows ``sel`` of ``x``.

    RMSNorm is evaluated for every row; keys and values are computed for
    ``kv_rows`` (and appended to ``cache`` when given); the query, attention,
    output projection, and FFN run only for ``sel`` rows. Rows outside
    ``sel`` are left untouched, so they pass through bitwise.

    Returns the new key and value rows plus the per-``sel``-row
    mean-over-heads attention probability on key position 0 when
    ``capture_attn0`` (else None).
    """
    cfg = model.config
    n_heads, n_kv, d_head = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    w = model.w
    prefix = f"layers.{layer}"

    xn = tc.rms_norm(x, w(f"{prefix}.attn_norm.gain"), cfg.norm_eps)

    xk = xn[kv_rows]
    kv_pos = positions[kv_rows]
    k_new = tc.matmul(xk, w(f"{prefix}.attn.wk.weight")).reshape(len(kv_rows), n_kv, d_head)
    k_new = tc.rope_apply(k_new, kv_pos, cfg.rope_theta)
    v_new = tc.matmul(xk, w(f"{prefix}.attn.wv.weight")).reshape(len(kv_rows), n_kv, d_head)

    if cache is None:
        keys, values, key_pos = k_new, v_new, kv_pos
    else:
        keys = np.concatenate([cache.keys[layer], k_new])
        values = np.concatenate([cache.values[layer], v_new])
        key_pos = np.concatenate([cache.positions[layer], kv_pos])
        cache.keys[layer], cache.values[layer], cache.positions[layer] = keys, values, key_pos

    q_pos = positions[sel]
    q = tc.matmul(xn[sel], w(f"{prefix}.attn.wq.weight")).reshape(len(sel), n_heads, d_head)
    q = tc.rope_apply(q, q_pos, cfg.rope_theta)

    scale = tc.attention_scale(d_head)
    group = n_heads // n_kv
    ctx = np.empty((len(sel), n_heads, d_head), dtype=x.dtype)
    attn0 = np.zeros(len(sel), dtype=np.float64) if capture_attn0 else None
    sink_col = np.flatnonzero(key_pos == 0)
    for h in range(n_heads):
        g = h // group
        scores = tc.matmul(q[:, h, :], keys[:, g, :].T) * scale
        probs = tc.softmax_causal(scores, q_pos, key_positions=key_pos)
        ctx[:, h, :] = tc.matmul(probs, values[:, g, :])
        if attn0 is not None and sink_col.size:
            attn0 += probs[:, sink_col[0]]
    if attn0 is not None:
        attn0 /= n_heads

    attn_out = tc.matmul(ctx.reshape(len(sel), n_heads * d_head), w(f"{prefix}.attn.wo.weight"))
    x[sel] = x[sel] + attn_out

    xn2 = tc.rms_norm(x[sel], w(f"{prefix}.ffn_norm.gain"), cfg.norm_eps)
    gate = tc.silu(tc.matmul(xn2, w(f"{prefix}.ffn.w_gate.weight")))
    hidden = gate * tc.matmul(xn2, w(f"{prefix}.ffn.w_up.weight"))
    x[sel] = x[sel] + tc.matmul(hidden, w(f"{prefix}.ffn.w_down.weight"))
    return k_new, v_new, attn0


def lm_head_logits(model: Model, x: np.ndarray) -> np.ndarray:
    """Final RMSNorm followed by the output projection."""
    xn = tc.rms_norm(x, model.w("final_norm.gain"), model.config.norm_eps)
    return tc.matmul(xn, model.unembed)


def embed_tokens(model: Model, token_ids) -> tuple[np.ndarray, np.ndarray]:
    """Validate token ids and return (embeddings copy, ids array)."""
    tokens = np.asarray(token_ids, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise UsageError("token sequence must be a non-empty 1-D list of ids")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise UsageError(
            f"token ids must lie in [0, {model.config.vocab_size}), "
            f"got range [{tokens.min()}, {tokens.max()}]"
        )
    return model.w("embed.weight")[tokens].copy(), tokens


def check_cache(model: Model, cache: KVCache) -> None:
    if cache.n_layers != model.config.n_layers:
        raise StateError(
            f"cache has {cache.n_layers} layers, model has {model.config.n_layers}"
        )


def forward_dense(
    model: Model,
    token_ids,
    capture_trace: bool = False,
    capture_attn_to_sink: bool = False,
) -> tuple[np.ndarray, HiddenTrace | None, KVCache]:
    """Teacher-forced dense forward pass over a full sequence.

    Returns (T, vocab) logits, an optional trace of per-layer block inputs
    (their pre-attention RMSNorm outputs, and attention-to-sink masses when
    requested), and the populated KV cache.
    """
    x, tokens = embed_tokens(model, token_ids)
    seq = tokens.size
    positions = np.arange(seq, dtype=np.int64)
    all_rows = np.arange(seq, dtype=np.int64)
    cache = KVCache.empty(model.config)

    capture = capture_trace or capture_attn_to_sink
    trace = None
    if capture:
        trace = HiddenTrace(attn_to_sink=[] if capture_attn_to_sink else None)

    for layer in range(model.config.n_layers):
        if capture:
            trace.layers.append(layer)
            trace.hidden.append(x.copy())
            trace.normalized.append(
                tc.rms_norm(x, model.w(f"layers.{layer}.attn_norm.gain"), model.config.norm_eps)
            )
        _, _, attn0 = block_forward(
            model, layer, x, positions, all_rows, all_rows, cache,
            capture_attn0=capture_attn_to_sink,
        )
        if capture_attn_to_sink:
            trace.attn_to_sink.append(attn0)

    cache.n_tokens = seq
    return lm_head_logits(model, x), trace, cache


def decode_step_dense(model: Model, cache: KVCache, token_id: int) -> tuple[np.ndarray, KVCache]:
    """Append one token to the cached sequence and return its (1, vocab) logits.

    An empty cache makes this a length-1 prefill. Matches the corresponding
    row of a from-scratch dense forward within normal f32 accumulation noise.
    """
    check_cache(model, cache)
    x, _ = embed_tokens(model, [token_id])
    positions = np.array([cache.n_tokens], dtype=np.int64)
    row = np.array([0], dtype=np.int64)
    for layer in range(model.config.n_layers):
        block_forward(model, layer, x, positions, row, row, cache)
    cache.n_tokens += 1
    return lm_head_logits(model, x), cache


def detect_sink_layer(model: Model, calib_tokens, tau: float = 0.3) -> int:
    """Smallest layer whose mean attention mass on key 0 reaches ``tau``.

    The mean runs over all heads and all query positions >= 1. Returns
    n_layers as a sentinel when no layer reaches the threshold.
    """
    if not 0.0 < tau <= 1.0:
        raise UsageError(f"tau must be in (0, 1], got {tau}")
    tokens = np.asarray(calib_tokens)
    if tokens.size < 8:
        raise UsageError(f"sink detection needs >= 8 calibration tokens, got {tokens.size}")
    _, trace, _ = forward_dense(model, tokens, capture_attn_to_sink=True)
    for layer, attn0 in zip(trace.layers, trace.attn_to_sink):
        if float(np.mean(attn0[1:])) >= tau:
            return layer
    return model.config.n_layers
