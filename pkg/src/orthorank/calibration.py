"""Choosing which layers run selectively, and the sparsity/FLOP arithmetic.

Converting a fraction f of the layers to compute only a fraction r of their
tokens removes f * (1 - r) of the block compute (the effective sparsity).
Calibration greedily converts one layer per round, always the one whose
conversion keeps calibration perplexity lowest, starting from the layers
after the sink layer and never touching the final layer.
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint_io import ModelConfig
from .errors import ConfigError

DEFAULT_KEEP_RATIO = 0.333


@dataclass
class LayerPlan:
    """The calibrated set of selective layers plus audit metadata.

    ``keep_ratio`` is a scalar applied to every layer or a list aligned
    with ``layers``. ``calib`` records corpus hash and context length so a
    plan states what produced it.
    """

    layers: list[int] = field(default_factory=list)
    keep_ratio: float | list[float] = DEFAULT_KEEP_RATIO
    model_id: str = "unknown"
    l_sink: int = 0
    target_sparsity: float | None = None
    calib: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = [int(l) for l in self.layers]
        if self.layers != sorted(set(self.layers)):
            raise ConfigError(f"plan layers must be strictly ascending, got {self.layers}")
        if self.layers and self.layers[0] <= self.l_sink:
            raise ConfigError(
                f"plan layer {self.layers[0]} is not after the sink layer {self.l_sink}"
            )
        ratios = self.ratios()
        if any(not 0.0 < r <= 1.0 for r in ratios):
            raise ConfigError(f"keep ratios must lie in (0, 1], got {ratios}")

    def ratios(self) -> list[float]:
        if isinstance(self.keep_ratio, (int, float)):
            return [float(self.keep_ratio)] * len(self.layers)
        if len(self.keep_ratio) != len(self.layers):
            raise ConfigError(
                f"{len(self.keep_ratio)} keep ratios for {len(self.layers)} layers"
            )
        return [float(r) for r in self.keep_ratio]

    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.layers, self.ratios()))

    def ratio_for(self, layer: int) -> float | None:
        """Keep ratio for a planned layer, or None if the layer runs dense."""
        return dict(self.entries()).get(layer)

    def to_json(self) -> str:
        keep = self.keep_ratio
        if isinstance(keep, (list, tuple)):
            keep = [float(r) for r in keep]
        return json.dumps(
            {
                "model_id": self.model_id,
                "l_sink": self.l_sink,
                "target_sparsity": self.target_sparsity,
                "keep_ratio": keep,
                "layers": self.layers,
                "calib": self.calib,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "LayerPlan":
        data = json.loads(text)
        return cls(
            layers=data["layers"],
            keep_ratio=data["keep_ratio"],
            model_id=data.get("model_id", "unknown"),
            l_sink=data.get("l_sink", 0),
            target_sparsity=data.get("target_sparsity"),
            calib=data.get("calib", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "LayerPlan":
        return cls.from_json(Path(path).read_text())


def effective_sparsity(layer_fraction: float, keep_ratio: float) -> float:
    """Fraction of block compute removed: f * (1 - r)."""
    if not 0.0 <= layer_fraction <= 1.0:
        raise ConfigError(f"layer_fraction must be in [0, 1], got {layer_fraction}")
    if not 0.0 <= keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must be in [0, 1], got {keep_ratio}")
    return layer_fraction * (1.0 - keep_ratio)


def plan_effective_sparsity(plan: LayerPlan, n_layers: int) -> float:
    """Effective sparsity a plan achieves on an n_layers model."""
    return sum(1.0 - r for r in plan.ratios()) / n_layers


def eligible_layers(n_layers: int, l_sink: int) -> list[int]:
    """Layers a plan may convert: strictly after the sink, before the last."""
    return list(range(l_sink + 1, n_layers - 1))


def plan_from_sparsity(
    n_layers: int,
    l_sink: int,
    target_sparsity: float,
    keep_ratio: float = DEFAULT_KEEP_RATIO,
) -> tuple[int, list[int]]:
    """Layer count and eligible set that realize a target sparsity.

    m = round(target * n_layers / (1 - keep_ratio)), rounding half up.
    Raises when the target exceeds what the eligible set can deliver,
    naming the maximum achievable value.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ConfigError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    eligible = eligible_layers(n_layers, l_sink)
    if target_sparsity == 0.0:
        return 0, eligible
    if keep_ratio == 1.0:
        raise ConfigError(
            "target sparsity is unreachable at keep_ratio 1.0; maximum achievable is 0"
        )
    m = int(math.floor(target_sparsity * n_layers / (1.0 - keep_ratio) + 0.5))
    if m > len(eligible):
        max_s = (1.0 - keep_ratio) * len(eligible) / n_layers
        raise ConfigError(
            f"target sparsity {target_sparsity} needs {m} layers but only "
            f"{len(eligible)} are eligible; maximum achievable is {max_s:.4f}"
        )
    return m, eligible


def corpus_sha256(tokens) -> str:
    """Identity hash of a token sequence (int64 little-endian bytes)."""
    arr = np.ascontiguousarray(np.asarray(tokens, dtype=np.int64))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def calibrate_greedy(
    model,
    calib_tokens,
    m: int,
    keep_ratio: float,
    eligible,
    context_len: int = 128,
    l_sink: int = 0,
    target_sparsity: float | None = None,
    one_shot: bool = False,
    threads: int | None = None,
) -> LayerPlan:
    """Pick m layers to convert by measuring calibration perplexity.

    Greedy mode converts one layer per round, each round trying every
    remaining eligible layer on top of the already-converted set and keeping
    the argmin; ties go to the smaller layer index. One-shot mode scores
    every single-layer conversion once and takes the m best. Candidate
    evaluations are read-only over the model and may run in parallel; the
    argmin is reduced in candidate order afterward, so the result is
    deterministic either way.
    """
    from .eval_harness import perplexity

    eligible = sorted({int(l) for l in eligible})
    if m > len(eligible):
        raise ConfigError(f"m={m} exceeds the {len(eligible)} eligible layers")
    n_layers = model.config.n_layers
    if any(not 0 <= l < n_layers for l in eligible):
        raise ConfigError(f"eligible layers out of range for {n_layers}-layer model")

    def ppl_of(layers: list[int]) -> float:
        plan = LayerPlan(
            layers=sorted(layers), keep_ratio=keep_ratio,
            model_id=model.model_id, l_sink=l_sink,
        )
        return perplexity(model, plan, calib_tokens, context_len).perplexity

    def sweep(candidate_sets: list[list[int]]) -> list[float]:
        if threads and threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(ppl_of, candidate_sets))
        return [ppl_of(c) for c in candidate_sets]

    chosen: list[int] = []
    remaining = list(eligible)
    if one_shot:
        ppls = sweep([[c] for c in remaining])
        order = sorted(range(len(remaining)), key=lambda i: (ppls[i], remaining[i]))
        chosen = sorted(remaining[i] for i in order[:m])
    else:
        for _ in range(m):
            ppls = sweep([chosen + [c] for c in remaining])
            best = min(range(len(remaining)), key=lambda i: (ppls[i], remaining[i]))
            chosen.append(remaining.pop(best))
        chosen.sort()

    return LayerPlan(
        layers=chosen,
        keep_ratio=keep_ratio,
        model_id=model.model_id,
        l_sink=l_sink,
        target_sparsity=target_sparsity,
        calib={"corpus_sha256": corpus_sha256(calib_tokens), "context_len": context_len},
    )


def _dense_layer_flops(cfg: ModelConfig, seq_len: int) -> int:
    d, dffn = cfg.d_model, cfg.d_ffn
    q_dim, kv_dim = cfg.n_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    t = seq_len
    proj = 2 * t * d * q_dim + 2 * 2 * t * d * kv_dim + 2 * t * q_dim * d
    mix = 2 * 2 * cfg.n_heads * t * t * cfg.d_head
    ffn = 2 * t * d * dffn * 2 + 2 * t * dffn * d
    norms = 2 * 4 * t * d
    return proj + mix + ffn + norms


def _selective_layer_flops(cfg: ModelConfig, seq_len: int, keep_ratio: float) -> int:
    d, dffn = cfg.d_model, cfg.d_ffn
    q_dim, kv_dim = cfg.n_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    t = seq_len
    k = int(math.floor(keep_ratio * t))
    proj = 2 * k * d * q_dim + 2 * 2 * t * d * kv_dim + 2 * k * q_dim * d
    mix = 2 * 2 * cfg.n_heads * k * t * cfg.d_head
    ffn = 2 * k * d * dffn * 2 + 2 * k * dffn * d
    norms = 4 * t * d + 4 * k * d
    scoring = 2 * t * d
    return proj + mix + ffn + norms + scoring


def _head_flops(cfg: ModelConfig, seq_len: int) -> int:
    return 4 * seq_len * cfg.d_model + 2 * seq_len * cfg.d_model * cfg.vocab_size


def flop_count(config: ModelConfig, plan: LayerPlan, seq_len: int) -> dict:
    """Matmul-dominated FLOP totals for one dense vs. planned forward pass.

    Conventions: 2 FLOPs per multiply-add; attention score/value matmuls
    counted at full (unmasked) size as executed; RMSNorm costed at 4 FLOPs
    per element; a selective layer pays K/V, pre-attention norms, and
    scoring for all T tokens but everything else for its k tokens. The
    final norm and output projection appear in both totals.
    """
    if seq_len < 1:
        raise ConfigError(f"seq_len must be >= 1, got {seq_len}")
    ratios = dict(plan.entries())
    bad = [l for l in ratios if not 0 <= l < config.n_layers]
    if bad:
        raise ConfigError(f"plan layers out of range: {sorted(bad)}")
    dense_layers = [_dense_layer_flops(config, seq_len) for _ in range(config.n_layers)]
    plan_layers = [
        _selective_layer_flops(config, seq_len, ratios[l])
        if l in ratios else dense_layers[l]
        for l in range(config.n_layers)
    ]
    head = _head_flops(config, seq_len)
    dense_total = sum(dense_layers) + head
    plan_total = sum(plan_layers) + head
    return {
        "dense_flops": dense_total,
        "plan_flops": plan_total,
        "ratio": plan_total / dense_total,
        "per_layer_dense": dense_layers,
        "per_layer_plan": plan_layers,
        "head_flops": head,
    }
