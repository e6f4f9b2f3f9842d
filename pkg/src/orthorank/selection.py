"""Orthogonality-based token selection and the selective layer forward pass.

A token's importance is how fast it can still move toward the sink
direction: the gradient of cos(h_bar_0, h_bar_i) with respect to h_bar_i has
squared norm (1 - cos^2) / ||h_bar_i||^2, so under approximately equal norms
the tokens most orthogonal to the sink are the ones attention can still
reshape, and |<h_bar_0, h_bar_i>| ranks them without computing cosines. A
selective layer fully computes only the k = floor(p * T) lowest-scoring
tokens; every token still contributes keys and values by default, and
unselected tokens ride the residual stream through unchanged.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DomainError, StateError, UsageError
from .model_runtime import (
    KVCache,
    Model,
    block_forward,
    check_cache,
    embed_tokens,
    lm_head_logits,
)
from .trace import HiddenTrace

CRITERION_KINDS = ("orthogonal_asc", "orthogonal_desc", "norm_asc", "norm_desc", "random")
STAGES = ("normalized", "raw_hidden")


@dataclass(frozen=True)
class Criterion:
    """Token ranking rule: what to order by, and at which stage.

    ``orthogonal_asc`` over ``normalized`` states is the default selection
    rule; the remaining kinds and the ``raw_hidden`` stage exist for
    ablations. ``random`` requires an explicit seed.
    """

    kind: str = "orthogonal_asc"
    stage: str = "normalized"
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in CRITERION_KINDS:
            raise ConfigError(f"unknown criterion kind {self.kind!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown criterion stage {self.stage!r}")
        if self.kind == "random" and self.seed is None:
            raise ConfigError("random criterion requires an explicit seed")


DEFAULT_CRITERION = Criterion()


@dataclass
class SelectionScores:
    """Per-token scores |<h_bar_0, h_bar_i>| with the sink pinned to +inf."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)


@dataclass
class SelectionMask:
    """The k selected token indices, sorted ascending."""

    selected: np.ndarray
    k: int

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.int64)
        if self.selected.size != self.k:
            raise StateError(f"mask holds {self.selected.size} indices, k={self.k}")


def compute_scores(states: np.ndarray, sink_index: int = 0) -> SelectionScores:
    """Absolute inner products of every token state with the sink state.

    The sink's own score is overwritten to +inf so it is never ranked into
    the selected set unless selection is exhaustive.
    """
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[0] < 1:
        raise UsageError(f"states must be (T, d) with T >= 1, got {states.shape}")
    s64 = states.astype(np.float64, copy=False)
    scores = np.abs(s64 @ s64[sink_index])
    scores[sink_index] = np.inf
    return SelectionScores(scores)


def _topk_ascending(keys: np.ndarray, keep_ratio: float) -> SelectionMask:
    if not 0.0 <= keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must be in [0, 1], got {keep_ratio}")
    t = keys.shape[0]
    k = int(math.floor(keep_ratio * t))
    order = np.argsort(keys, kind="stable")  # ties resolve to the smaller index
    return SelectionMask(np.sort(order[:k]), k)


def select_topk(scores, keep_ratio: float) -> SelectionMask:
    """Indices of the k = floor(p * T) smallest scores, sorted ascending."""
    keys = scores.scores if isinstance(scores, SelectionScores) else np.asarray(scores)
    return _topk_ascending(keys, keep_ratio)


def _norms_f64(x: np.ndarray, axis=None) -> np.ndarray:
    return np.linalg.norm(x.astype(np.float64, copy=False), axis=axis)


def cos_gradient(h0: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Gradient of cos(h0, hi) with respect to hi.

    Equals (1/||hi||) (h0/||h0|| - cos(h0, hi) hi/||hi||): the residual of
    the unit sink direction orthogonal to hi, shrunk by 1/||hi||. Computed
    in float64, returned in the input dtype.
    """
    h0 = np.asarray(h0)
    hi = np.asarray(hi)
    a = h0.astype(np.float64, copy=False)
    b = hi.astype(np.float64, copy=False)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cos_gradient is undefined for zero vectors")
    cos = float(a @ b) / (na * nb)
    grad = (a / na - cos * (b / nb)) / nb
    return grad.astype(np.result_type(h0, hi), copy=False)


def importance_norm_sq(h0: np.ndarray, hi: np.ndarray) -> float:
    """Squared norm of cos_gradient; the token's alignment speed.

    Satisfies the exact identity value * ||hi||^2 + cos^2(h0, hi) == 1.
    """
    h0 = np.asarray(h0).astype(np.float64, copy=False)
    grad = cos_gradient(h0, np.asarray(hi).astype(np.float64, copy=False))
    return float(grad @ grad)


def selection_keys(
    states: np.ndarray,
    criterion: Criterion,
    layer: int,
    sink_index: int = 0,
) -> np.ndarray:
    """Float64 sort keys for one layer's ranking; smaller key = selected.

    Descending kinds negate their ascending counterparts. The random
    criterion draws from a generator keyed by (seed, layer, T) so every
    (layer, length) pair gets a reproducible permutation. The sink key is
    +inf for every kind.
    """
    states = np.asarray(states)
    t = states.shape[0]
    if criterion.kind in ("orthogonal_asc", "orthogonal_desc"):
        keys = compute_scores(states, sink_index).scores
        if criterion.kind == "orthogonal_desc":
            finite = keys != np.inf
            keys = np.where(finite, -keys, keys)
    elif criterion.kind in ("norm_asc", "norm_desc"):
        keys = _norms_f64(states, axis=1)
        if criterion.kind == "norm_desc":
            keys = -keys
    else:
        rng = np.random.default_rng((criterion.seed, layer, t))
        keys = rng.random(t)
    keys = np.asarray(keys, dtype=np.float64)
    keys[sink_index] = np.inf
    return keys


def _stage_states(model: Model, layer: int, x: np.ndarray, stage: str) -> np.ndarray:
    if stage == "raw_hidden":
        return x
    gain = model.w(f"layers.{layer}.attn_norm.gain")
    return tc.rms_norm(x, gain, model.config.norm_eps)


@dataclass
class AuditLog:
    """Selection decisions, one row per (layer, token) scoring event."""

    rows: list[tuple[int, int, int, float, int]] = field(default_factory=list)

    def record(self, layer: int, step: int, position: int, score: float, selected: bool):
        self.rows.append((layer, step, position, float(score), int(selected)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "step", "position", "score", "selected"])
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2], repr(row[3]), row[4]])


def forward_orthorank_layer(
    model: Model,
    layer_index: int,
    x: np.ndarray,
    keep_ratio: float,
    criterion: Criterion = DEFAULT_CRITERION,
    compute_kv_for_unselected: bool = True,
    positions: np.ndarray | None = None,
    cache: KVCache | None = None,
    audit: AuditLog | None = None,
    step: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, SelectionMask]:
    """One selective block: full compute for the top-k tokens only.

    RMSNorm runs for all tokens; K/V are computed for all tokens unless
    ``compute_kv_for_unselected`` is off (then only for selected ones);
    attention, output projection, and FFN run for the selected rows, which
    attend at their original rotary positions. Unselected rows of the
    result are bitwise equal to the input. Returns the updated states, the
    new key and value rows, and the selection mask.
    """
    if not 0 <= layer_index < model.config.n_layers:
        raise ConfigError(f"layer_index {layer_index} out of range")
    x_out = np.array(x, copy=True)
    t = x_out.shape[0]
    if positions is None:
        positions = np.arange(t, dtype=np.int64)

    stage = _stage_states(model, layer_index, x_out, criterion.stage)
    keys = selection_keys(stage, criterion, layer_index)
    mask = _topk_ascending(keys, keep_ratio)

    if cache is not None:
        cache.score_history.setdefault(layer_index, []).extend(float(v) for v in keys)
        norm_stage = _stage_states(model, layer_index, x_out, "normalized")
        cache.sink_normalized.setdefault(layer_index, norm_stage[0].copy())
    if audit is not None:
        in_mask = np.zeros(t, dtype=bool)
        in_mask[mask.selected] = True
        for pos in range(t):
            audit.record(layer_index, step, int(positions[pos]), keys[pos], bool(in_mask[pos]))

    kv_rows = np.arange(t, dtype=np.int64) if compute_kv_for_unselected else mask.selected
    k_new, v_new, _ = block_forward(
        model, layer_index, x_out, positions, mask.selected, kv_rows, cache
    )
    return x_out, k_new, v_new, mask


def _ratio_for(layer: int, plan_layers, keep_ratio) -> float:
    if isinstance(keep_ratio, dict):
        return float(keep_ratio[layer])
    if isinstance(keep_ratio, (list, tuple, np.ndarray)):
        return float(keep_ratio[list(plan_layers).index(layer)])
    return float(keep_ratio)


def forward_with_plan(
    model: Model,
    token_ids,
    plan_layers,
    keep_ratio,
    criterion: Criterion = DEFAULT_CRITERION,
    compute_kv_for_unselected: bool = True,
    capture_trace: bool = False,
    audit: AuditLog | None = None,
) -> tuple[np.ndarray, HiddenTrace | None, KVCache]:
    """Full-sequence forward pass with the plan's layers run selectively.

    ``plan_layers`` is any iterable of layer indices; ``keep_ratio`` is a
    scalar or a per-plan-layer list. An empty plan is exactly the dense
    forward pass (same kernel, same arithmetic). The returned cache holds
    score histories and the cached sink state for each plan layer, ready
    for decode.
    """
    converted = {int(l) for l in plan_layers}
    bad = [l for l in converted if not 0 <= l < model.config.n_layers]
    if bad:
        raise ConfigError(f"plan layers out of range: {sorted(bad)}")

    x, tokens = embed_tokens(model, token_ids)
    seq = tokens.size
    positions = np.arange(seq, dtype=np.int64)
    all_rows = np.arange(seq, dtype=np.int64)
    cache = KVCache.empty(model.config)
    trace = HiddenTrace() if capture_trace else None

    for layer in range(model.config.n_layers):
        if capture_trace:
            trace.layers.append(layer)
            trace.hidden.append(x.copy())
            trace.normalized.append(_stage_states(model, layer, x, "normalized"))
        if layer in converted:
            ratio = _ratio_for(layer, plan_layers, keep_ratio)
            stage = _stage_states(model, layer, x, criterion.stage)
            keys = selection_keys(stage, criterion, layer)
            mask = _topk_ascending(keys, ratio)
            cache.score_history[layer] = [float(v) for v in keys]
            cache.sink_normalized[layer] = _stage_states(model, layer, x, "normalized")[0].copy()
            if audit is not None:
                in_mask = np.zeros(seq, dtype=bool)
                in_mask[mask.selected] = True
                for pos in range(seq):
                    audit.record(layer, 0, pos, keys[pos], bool(in_mask[pos]))
            kv_rows = all_rows if compute_kv_for_unselected else mask.selected
            block_forward(model, layer, x, positions, mask.selected, kv_rows, cache)
        else:
            block_forward(model, layer, x, positions, all_rows, all_rows, cache)

    cache.n_tokens = seq
    return lm_head_logits(model, x), trace, cache


def decode_select(cache: KVCache, layer: int, new_score: float, keep_ratio: float) -> bool:
    """Streaming selection for one new token at one selective layer.

    With history H (scores of all prior tokens at this layer) and the new
    score s, the token is selected iff s ranks within k = floor(p * (|H|+1))
    of the pooled set; equal scores favor the incumbent history entry. The
    score joins the history either way: every token becomes context.
    """
    if layer not in cache.score_history:
        raise StateError(f"layer {layer} has no score history; prefill with the plan first")
    if not math.isfinite(new_score):
        raise UsageError(f"new_score must be finite, got {new_score}")
    history = cache.score_history[layer]
    k = int(math.floor(keep_ratio * (len(history) + 1)))
    rank = sum(1 for v in history if v <= new_score) + 1
    history.append(float(new_score))
    return rank <= k


def decode_step_with_plan(
    model: Model,
    cache: KVCache,
    token_id: int,
    plan_layers,
    keep_ratio,
    criterion: Criterion = DEFAULT_CRITERION,
    compute_kv_for_unselected: bool = True,
    audit: AuditLog | None = None,
) -> tuple[np.ndarray, KVCache]:
    """Decode one token under a layer plan.

    At each plan layer the new token is scored against the sink state cached
    at prefill; unselected tokens skip the block (keeping their KV
    contribution unless disabled). The random criterion draws a per-token
    key from (seed, layer, position).
    """
    check_cache(model, cache)
    converted = {int(l) for l in plan_layers}
    x, _ = embed_tokens(model, [token_id])
    pos = cache.n_tokens
    positions = np.array([pos], dtype=np.int64)
    row = np.array([0], dtype=np.int64)
    none = np.zeros(0, dtype=np.int64)

    for layer in range(model.config.n_layers):
        if layer not in converted:
            block_forward(model, layer, x, positions, row, row, cache)
            continue
        ratio = _ratio_for(layer, plan_layers, keep_ratio)
        stage = _stage_states(model, layer, x, criterion.stage)[0]
        if criterion.kind in ("orthogonal_asc", "orthogonal_desc"):
            score = float(
                np.abs(
                    stage.astype(np.float64)
                    @ cache.sink_normalized[layer].astype(np.float64)
                )
            )
            if criterion.kind == "orthogonal_desc":
                score = -score
        elif criterion.kind in ("norm_asc", "norm_desc"):
            score = float(_norms_f64(stage))
            if criterion.kind == "norm_desc":
                score = -score
        else:
            score = float(np.random.default_rng((criterion.seed, layer, pos)).random())
        selected = decode_select(cache, layer, score, ratio)
        if audit is not None:
            audit.record(layer, pos, pos, score, selected)
        if selected:
            block_forward(model, layer, x, positions, row, row, cache)
        elif compute_kv_for_unselected:
            block_forward(model, layer, x, positions, none, row, cache)

    cache.n_tokens += 1
    return lm_head_logits(model, x), cache


def generate_greedy(
    model: Model,
    prompt_tokens,
    n_new: int,
    plan_layers=(),
    keep_ratio=1.0,
    criterion: Criterion = DEFAULT_CRITERION,
    compute_kv_for_unselected: bool = True,
    audit: AuditLog | None = None,
) -> list[int]:
    """Greedy decode: prefill the prompt, then argmax one token at a time.

    Returns the prompt plus ``n_new`` generated ids. Argmax ties resolve to
    the smallest token id.
    """
    if n_new < 0:
        raise UsageError(f"n_new must be >= 0, got {n_new}")
    logits, _, cache = forward_with_plan(
        model, prompt_tokens, plan_layers, keep_ratio, criterion,
        compute_kv_for_unselected, audit=audit,
    )
    out = [int(t) for t in np.asarray(prompt_tokens)]
    for i in range(n_new):
        next_id = int(np.argmax(logits[-1]))
        out.append(next_id)
        if i + 1 < n_new:
            logits, _ = decode_step_with_plan(
                model, cache, next_id, plan_layers, keep_ratio, criterion,
                compute_kv_for_unselected, audit=audit,
            )
    return out
