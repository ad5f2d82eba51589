"""Model-level quantization: source container -> encoded tensors -> GGUF.

Two modes:

* direct: each source tensor is encoded straight into its plan-assigned type.
* staged: every tensor first goes through an NF4 stage (the ``nf4-linear-only``
  plan by default), is dequantized, and the result is encoded under the final
  plan. The size of the intermediate stage is recorded for the stage report.

Tensors are processed by a thread pool but always collected in manifest
order, so the output does not depend on the worker count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import gguf_io, kquant, metrics, plans
from .core import Assignment, ModelManifest, QuantPlan, QuantType, TensorView, assign_types
from .errors import UnsupportedTypeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuantizeResult:
    tensors: tuple[TensorView, ...]
    assignments: tuple[Assignment, ...]
    # (label, bytes) per stage, source first
    stages: tuple[tuple[str, int], ...]


def _encode(values: np.ndarray, qtype: QuantType) -> bytes:
    return kquant.quantize(values.ravel(), qtype)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def quantize_tensors(
    manifest: ModelManifest,
    load: Callable[[str], np.ndarray],
    plan: QuantPlan,
    jobs: int = 1,
    stage_plan: QuantPlan | None = None,
) -> QuantizeResult:
    """Encode every manifest tensor under ``plan``; ``load(name)`` yields float32 values.

    With ``stage_plan`` the tensors pass through that plan first (encode,
    decode) and the decoded values feed the final encoding.
    """
    assignments = tuple(assign_types(manifest, plan))
    staged = tuple(assign_types(manifest, stage_plan)) if stage_plan else None
    shapes = {e.name: e.shape for e in manifest.entries}

    def work(i: int):
        a = assignments[i]
        values = np.asarray(load(a.name), dtype=np.float32)
        stage_bytes = None
        if staged is not None:
            blob = _encode(values, staged[i].qtype)
            stage_bytes = len(blob)
            values = kquant.dequantize(blob, staged[i].qtype)
        data = _encode(values, a.qtype)
        log.debug("%s -> %s (%d bytes)", a.name, a.qtype.tag, len(data))
        return TensorView(a.name, shapes[a.name], a.qtype, data), stage_bytes

    done = _map(work, range(len(assignments)), jobs)
    tensors = tuple(t for t, _ in done)
    stages = [("source", manifest.source_bytes)]
    if staged is not None:
        payload = [metrics.TensorSize(a.name, a.qtype, n) for a, (_, n) in zip(staged, done)]
        overhead = metrics.container_overhead(manifest, payload, stage_plan.name)
        stages.append((stage_plan.name, sum(t.nbytes for t in payload) + overhead))
    return QuantizeResult(tensors, assignments, tuple(stages))


def quantize_model(
    manifest: ModelManifest,
    load: Callable[[str], np.ndarray],
    plan: QuantPlan,
    jobs: int = 1,
    paper_pipeline: bool = False,
    stage_plan: QuantPlan = plans.NF4_LINEAR_ONLY,
) -> tuple[gguf_io.GgufFile, QuantizeResult]:
    """Quantize and pack into a GGUF file (raises UnsupportedTypeError for NF4 targets)."""
    for a in assign_types(manifest, plan):
        if a.qtype.ggml_type is None:
            raise UnsupportedTypeError(
                f"plan {plan.name!r} assigns {a.qtype.tag} to {a.name!r}, which GGUF cannot store; "
                "use --paper-pipeline to run the NF4 stage before k-quant conversion"
            )
    result = quantize_tensors(manifest, load, plan, jobs, stage_plan if paper_pipeline else None)
    gguf = gguf_io.pack_model(
        result.tensors,
        manifest.model_name,
        manifest.metadata,
        plan.name,
        manifest.metadata.get("architecture", "llama"),
    )
    return gguf, result


def stage_report(result: QuantizeResult, final_label: str, final_bytes: int) -> list[dict]:
    base = result.stages[0][1]
    stages = [(label, n, base) for label, n in result.stages] + [(final_label, final_bytes, base)]
    return metrics.stage_rows(stages)


def bits_per_weight(tensors: Sequence[TensorView]) -> float:
    n = sum(math.prod(t.shape) for t in tensors)
    return 8 * sum(t.nbytes for t in tensors) / n if n else 0.0
