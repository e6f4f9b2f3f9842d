"""Perplexity evaluation, the per-layer criterion sweep, and the ablation grid.

Perplexity uses non-overlapping context_len chunks (final partial chunk
dropped) and teacher-forced NLL of every position after the first, summed in
float64. Dense evaluation is the empty plan: both run the same kernel, so
their reports agree bitwise.
"""

import csv
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .calibration import LayerPlan, corpus_sha256, flop_count
from .errors import UsageError
from .model_runtime import Model
from .selection import DEFAULT_CRITERION, AuditLog, Criterion, forward_with_plan


@dataclass
class EvalReport:
    """One perplexity measurement and everything needed to reproduce it."""

    model_id: str
    plan_id: str
    plan_layers: list[int]
    corpus_sha256: str
    context_len: int
    n_chunks: int
    n_tokens: int
    n_predicted: int
    chunk_nll: list[float]
    total_nll: float
    perplexity: float
    flop_ratio: float
    criterion: str = "orthogonal_asc/normalized"
    kv_for_unselected: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _plan_id(plan: LayerPlan | None) -> str:
    if plan is None or not plan.layers:
        return "dense"
    return hashlib.sha256(plan.to_json().encode()).hexdigest()[:12]


def criterion_label(criterion: Criterion, kv: bool) -> str:
    return f"{criterion.kind}/{criterion.stage}/kv_{'on' if kv else 'off'}"


def _chunk_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position NLL in float64 from (T-1, vocab) logits rows."""
    ls = logits.astype(np.float64)
    row_max = ls.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(ls - row_max).sum(axis=1))
    picked = ls[np.arange(targets.size), targets]
    return lse - picked


def perplexity(
    model: Model,
    plan: LayerPlan | None,
    corpus_tokens,
    context_len: int,
    criterion: Criterion = DEFAULT_CRITERION,
    compute_kv_for_unselected: bool = True,
    audit: AuditLog | None = None,
) -> EvalReport:
    """Chunked teacher-forced perplexity under a plan (None = dense).

    Every chunk of ``context_len`` tokens contributes the NLL of its
    positions 1..W-1; perplexity is exp(total NLL / total predictions).
    When an audit log is given it records chunk index as the step.
    """
    if context_len < 2:
        raise UsageError(f"context_len must be >= 2, got {context_len}")
    tokens = np.asarray(corpus_tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < context_len:
        raise UsageError(
            f"corpus has {tokens.size} tokens, need at least context_len={context_len}"
        )
    layers = [] if plan is None else plan.layers
    ratios = 1.0 if plan is None else plan.keep_ratio

    n_chunks = tokens.size // context_len
    chunk_nlls = []
    total = 0.0
    for c in range(n_chunks):
        chunk = tokens[c * context_len:(c + 1) * context_len]
        chunk_audit = AuditLog() if audit is not None else None
        logits, _, _ = forward_with_plan(
            model, chunk, layers, ratios, criterion,
            compute_kv_for_unselected, audit=chunk_audit,
        )
        if audit is not None:
            audit.rows.extend((l, c, p, s, sel) for l, _, p, s, sel in chunk_audit.rows)
        nll = _chunk_nll(logits[:-1], chunk[1:])
        chunk_total = float(np.sum(nll))
        chunk_nlls.append(chunk_total)
        total += chunk_total

    n_predicted = n_chunks * (context_len - 1)
    ppl = float(np.exp(total / n_predicted))
    flops = flop_count(model.config, plan if plan is not None else LayerPlan(), context_len)
    return EvalReport(
        model_id=model.model_id,
        plan_id=_plan_id(plan),
        plan_layers=list(layers),
        corpus_sha256=corpus_sha256(tokens),
        context_len=context_len,
        n_chunks=n_chunks,
        n_tokens=n_chunks * context_len,
        n_predicted=n_predicted,
        chunk_nll=chunk_nlls,
        total_nll=total,
        perplexity=ppl,
        flop_ratio=flops["ratio"],
        criterion=f"{criterion.kind}/{criterion.stage}",
        kv_for_unselected=compute_kv_for_unselected,
    )


def layerwise_comparison(
    model: Model,
    corpus_tokens,
    keep_ratio: float,
    criteria: list[Criterion],
    l_sink: int,
    context_len: int,
) -> dict:
    """Perplexity of converting each single layer after the sink, per criterion.

    Sweeps every layer index in (l_sink, n_layers), final layer included so
    its degradation is visible. Returns {"layers", "dense", "columns":
    {label: [ppl per layer]}}.
    """
    if not criteria:
        raise UsageError("need at least one criterion")
    layers = list(range(l_sink + 1, model.config.n_layers))
    dense = perplexity(model, None, corpus_tokens, context_len).perplexity
    columns: dict[str, list[float]] = {}
    for crit in criteria:
        label = criterion_label(crit, kv=True)
        cells = []
        for layer in layers:
            plan = LayerPlan(layers=[layer], keep_ratio=keep_ratio,
                             model_id=model.model_id, l_sink=l_sink)
            cells.append(
                perplexity(model, plan, corpus_tokens, context_len, criterion=crit).perplexity
            )
        columns[label] = cells
    return {"layers": layers, "dense": dense, "columns": columns}


def layerwise_to_csv(table: dict, path) -> None:
    labels = list(table["columns"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "dense"] + labels)
        for i, layer in enumerate(table["layers"]):
            row = [layer, repr(table["dense"])]
            row += [repr(table["columns"][lab][i]) for lab in labels]
            writer.writerow(row)


ABLATION_ROWS: list[tuple[str, str, bool]] = [
    ("random", "normalized", True),
    ("norm_asc", "normalized", True),
    ("norm_desc", "normalized", True),
    ("orthogonal_desc", "normalized", True),
    ("orthogonal_asc", "raw_hidden", True),
    ("orthogonal_asc", "normalized", False),
    ("orthogonal_asc", "normalized", True),
]


def ablation_grid(
    model: Model,
    plan: LayerPlan,
    corpus_tokens,
    context_len: int,
    random_seed: int = 0,
) -> list[dict]:
    """The seven-row criterion/stage/KV ablation over one plan.

    The last row is the default configuration and matches the standalone
    perplexity op exactly (same code path).
    """
    rows = []
    for kind, stage, kv in ABLATION_ROWS:
        crit = Criterion(kind, stage, seed=random_seed if kind == "random" else None)
        report = perplexity(
            model, plan, corpus_tokens, context_len,
            criterion=crit, compute_kv_for_unselected=kv,
        )
        rows.append(
            {
                "criterion": kind,
                "stage": stage,
                "kv_for_unselected": kv,
                "perplexity": report.perplexity,
            }
        )
    return rows


def ablation_to_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["criterion", "stage", "kv_for_unselected", "perplexity"])
        for row in rows:
            writer.writerow(
                [
                    row["criterion"],
                    row["stage"],
                    "on" if row["kv_for_unselected"] else "off",
                    repr(row["perplexity"]),
                ]
            )
