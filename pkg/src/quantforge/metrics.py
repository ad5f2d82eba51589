"""Quantization error statistics and model size accounting."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import gguf_io
from .core import ModelManifest, QuantPlan, QuantType, assign_types
from .errors import ArgumentError, DiffError

GB = 10**9
GIB = 2**30


@dataclass(frozen=True)
class ErrorStats:
    rmse: float
    max_abs_err: float
    sqnr_db: float  # +inf when the reconstruction is exact
    cosine_sim: float
    n_elements: int
    # raw sums, kept so stats over several tensors can be pooled exactly
    signal_power: float = field(default=0.0, repr=False)
    noise_power: float = field(default=0.0, repr=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "rmse": self.rmse,
            "max_abs_err": self.max_abs_err,
            "sqnr_db": _finite_or_none(self.sqnr_db),
            "cosine_sim": self.cosine_sim,
            "n_elements": self.n_elements,
        }


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _sqnr(signal: float, noise: float) -> float:
    if noise == 0:
        return math.inf
    if signal == 0:
        return -math.inf
    return 10 * math.log10(signal / noise)


def compare_tensors(original, reconstructed) -> ErrorStats:
    """Error of ``reconstructed`` against ``original``, computed in float64."""
    a = np.asarray(original, dtype=np.float64).ravel()
    b = np.asarray(reconstructed, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ArgumentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ArgumentError("cannot compare empty tensors")
    err = b - a
    noise = float(np.dot(err, err))
    signal = float(np.dot(a, a))
    recon = float(np.dot(b, b))
    if noise == 0:
        cosine = 1.0
    elif signal == 0 or recon == 0:
        cosine = 0.0
    else:
        cosine = float(np.clip(np.dot(a, b) / math.sqrt(signal * recon), -1.0, 1.0))
    return ErrorStats(
        rmse=math.sqrt(noise / a.size),
        max_abs_err=float(np.abs(err).max()),
        sqnr_db=_sqnr(signal, noise),
        cosine_sim=cosine,
        n_elements=int(a.size),
        signal_power=signal,
        noise_power=noise,
    )


# --- size accounting -------------------------------------------------------


@dataclass(frozen=True)
class TensorSize:
    name: str
    qtype: QuantType
    nbytes: int
    note: str | None = None


@dataclass(frozen=True)
class SizeReport:
    """Storage cost of a model under a plan.

    ``total_bytes`` = Σ per-tensor bytes + ``overhead_bytes`` (container header,
    metadata, tensor table and alignment padding). ``baseline_bytes`` is the raw
    tensor payload of the source dtypes.
    """

    model: str
    plan: str
    per_tensor: tuple[TensorSize, ...]
    overhead_bytes: int
    baseline_bytes: int
    n_params: int

    @property
    def tensor_bytes(self) -> int:
        return sum(t.nbytes for t in self.per_tensor)

    @property
    def total_bytes(self) -> int:
        return self.tensor_bytes + self.overhead_bytes

    @property
    def reduction_pct(self) -> float:
        return _reduction(self.total_bytes, self.baseline_bytes)

    @property
    def payload_reduction_pct(self) -> float:
        """Reduction counting tensor payload only (0 exactly for an identity plan)."""
        return _reduction(self.tensor_bytes, self.baseline_bytes)

    @property
    def bits_per_weight(self) -> float:
        return 8 * self.tensor_bytes / self.n_params if self.n_params else 0.0

    def type_counts(self) -> dict[str, int]:
        return dict(Counter(t.qtype.tag for t in self.per_tensor))

    def to_json(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "plan": self.plan,
            "baseline_bytes": self.baseline_bytes,
            "total_bytes": self.total_bytes,
            "reduction_pct": self.reduction_pct,
            "bits_per_weight": self.bits_per_weight,
            "tensor_bytes": self.tensor_bytes,
            "overhead_bytes": self.overhead_bytes,
            "n_params": self.n_params,
            "total_gb": self.total_bytes / GB,
            "total_gib": self.total_bytes / GIB,
            "tensors": [
                {"name": t.name, "type": t.qtype.tag, "bytes": t.nbytes, **({"note": t.note} if t.note else {})}
                for t in self.per_tensor
            ],
        }


def _reduction(total: int, baseline: int) -> float:
    return 100.0 * (1.0 - total / baseline) if baseline else 0.0


def container_overhead(
    manifest: ModelManifest, per_tensor: Sequence[TensorSize], plan_name: str
) -> int:
    """Exact non-payload bytes of the GGUF file :func:`gguf_io.pack_model` would write.

    Formats GGUF cannot store (NF4) are counted with the same layout rules.
    """
    counts = Counter(t.qtype.tag for t in per_tensor)
    md = gguf_io.model_metadata(
        manifest.model_name, counts, plan_name, manifest.metadata, manifest.metadata.get("architecture", "llama")
    )
    shapes = {e.name: e.shape for e in manifest.entries}
    infos = [(t.name, shapes[t.name], t.qtype.ggml_type or 0) for t in per_tensor]
    sizes = [t.nbytes for t in per_tensor]
    return gguf_io.serialized_size(md, infos, sizes) - sum(sizes)


def estimate_size(manifest: ModelManifest, plan: QuantPlan) -> SizeReport:
    """Size of ``manifest`` stored under ``plan``, from shapes alone."""
    shapes = {e.name: e.shape for e in manifest.entries}
    per_tensor = tuple(
        TensorSize(a.name, a.qtype, a.qtype.nbytes(math.prod(shapes[a.name])), a.note)
        for a in assign_types(manifest, plan)
    )
    return SizeReport(
        model=manifest.model_name,
        plan=plan.name,
        per_tensor=per_tensor,
        overhead_bytes=container_overhead(manifest, per_tensor, plan.name),
        baseline_bytes=manifest.source_bytes,
        n_params=manifest.n_params,
    )


def baseline_report(manifest: ModelManifest) -> SizeReport:
    """The unquantized source model (payload only, no container)."""
    per_tensor = tuple(
        TensorSize(e.name, e.dtype.quant_type, e.n_elements * e.dtype.nbytes) for e in manifest.entries
    )
    return SizeReport(manifest.model_name, "source", per_tensor, 0, manifest.source_bytes, manifest.n_params)


# --- compression ladder ----------------------------------------------------

# storage bits of the integer payload alone, ignoring scales
NOMINAL_BITS = {
    QuantType.F32: 32,
    QuantType.F16: 16,
    QuantType.BF16: 16,
    QuantType.Q8_0: 8,
    QuantType.Q6_K: 6,
    QuantType.Q4_K: 4,
    QuantType.NF4: 4,
}


def ratio_ladder(target: QuantType, source_bits: int = 32, nominal: bool = False) -> float:
    """Compression factor of ``target`` against ``source_bits``-bit weights.

    ``nominal=True`` ignores per-block scale overhead (8-bit -> 4x, 4-bit -> 8x).
    """
    bits = NOMINAL_BITS[target] if nominal else target.bits_per_weight
    return source_bits / bits


def ladder_rows(source_bits: int = 32) -> list[dict[str, Any]]:
    return [
        {
            "type": qt.tag,
            "bits_per_weight": qt.bits_per_weight,
            "nominal_ratio": ratio_ladder(qt, source_bits, nominal=True),
            "ratio": ratio_ladder(qt, source_bits),
        }
        for qt in (QuantType.F16, QuantType.BF16, QuantType.Q8_0, QuantType.Q6_K, QuantType.Q4_K, QuantType.NF4)
    ]


# --- model diff ------------------------------------------------------------


@dataclass(frozen=True)
class TensorDiff:
    name: str
    shape: tuple[int, ...]
    type_a: str
    type_b: str
    bytes_a: int
    bytes_b: int
    stats: ErrorStats


@dataclass(frozen=True)
class DiffReport:
    tensors: tuple[TensorDiff, ...]
    bytes_a: int
    bytes_b: int

    @property
    def n_elements(self) -> int:
        return sum(t.stats.n_elements for t in self.tensors)

    @property
    def overall_rmse(self) -> float:
        n = self.n_elements
        return math.sqrt(math.fsum(t.stats.noise_power for t in self.tensors) / n) if n else 0.0

    @property
    def overall_sqnr_db(self) -> float:
        return _sqnr(
            math.fsum(t.stats.signal_power for t in self.tensors),
            math.fsum(t.stats.noise_power for t in self.tensors),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "overall_rmse": self.overall_rmse,
            "overall_sqnr_db": _finite_or_none(self.overall_sqnr_db),
            "n_elements": self.n_elements,
            "bytes_a": self.bytes_a,
            "bytes_b": self.bytes_b,
            "size_delta_bytes": self.bytes_b - self.bytes_a,
            "tensors": [
                {
                    "name": t.name,
                    "shape": list(t.shape),
                    "type_a": t.type_a,
                    "type_b": t.type_b,
                    **t.stats.to_json(),
                }
                for t in self.tensors
            ],
        }


def diff_models(a, b) -> DiffReport:
    """Compare two opened models (see :func:`quantforge.loader.open_model`) tensor by tensor."""
    names_a, names_b = list(a.names), set(b.names)
    problems = [f"only in {a.label}: {n}" for n in names_a if n not in names_b]
    problems += [f"only in {b.label}: {n}" for n in b.names if n not in set(names_a)]
    problems += [
        f"shape mismatch for {n}: {list(a.shape(n))} vs {list(b.shape(n))}"
        for n in names_a
        if n in names_b and tuple(a.shape(n)) != tuple(b.shape(n))
    ]
    if problems:
        raise DiffError(f"models differ structurally ({len(problems)} mismatches)", problems)
    rows = tuple(
        TensorDiff(n, tuple(a.shape(n)), a.type_tag(n), b.type_tag(n), a.nbytes(n), b.nbytes(n),
                   compare_tensors(a.load(n), b.load(n)))
        for n in names_a
    )
    return DiffReport(rows, a.file_bytes, b.file_bytes)


# --- rendering -------------------------------------------------------------


def _table(header: Sequence[str], rows: Iterable[Sequence[str]], right: Iterable[int] = ()) -> str:
    rows = [list(map(str, r)) for r in rows]
    right = set(right)
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows else len(str(h)) for i, h in enumerate(header)]

    def fmt(cells):
        return "  ".join(c.rjust(w) if i in right else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    lines = [fmt(list(map(str, header))), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(line.rstrip() for line in lines)


def stage_rows(stages: Sequence[tuple[str, int, int]]) -> list[dict[str, Any]]:
    """``(label, bytes, baseline_bytes)`` triples as report rows."""
    return [
        {
            "format": label,
            "bytes": n,
            "size_gb": n / GB,
            "size_gib": n / GIB,
            "reduction_pct": _reduction(n, base),
        }
        for label, n, base in stages
    ]


def render_stages(rows: Sequence[Mapping[str, Any]]) -> str:
    return _table(
        ("Format", "Bytes", "Size (GB)", "Size (GiB)", "Reduction %"),
        [
            (r["format"], f"{r['bytes']:,}", f"{r['size_gb']:.2f}", f"{r['size_gib']:.2f}", f"{r['reduction_pct']:.2f}")
            for r in rows
        ],
        right=(1, 2, 3, 4),
    )


def render_size(report: SizeReport, per_tensor: bool = False) -> str:
    out = []
    if per_tensor:
        out.append(
            _table(
                ("Tensor", "Type", "Bytes", "Note"),
                [(t.name, t.qtype.tag, t.nbytes, t.note or "") for t in report.per_tensor],
                right=(2,),
            )
        )
        out.append("")
    counts = ", ".join(f"{k}: {v}" for k, v in sorted(report.type_counts().items()))
    out.append(f"model {report.model}, plan {report.plan}, {report.n_params:,} parameters ({counts})")
    out.append(
        _table(
            ("", "Bytes", "GB", "GiB"),
            [
                ("baseline", report.baseline_bytes, f"{report.baseline_bytes / GB:.3f}", f"{report.baseline_bytes / GIB:.3f}"),
                ("tensors", report.tensor_bytes, f"{report.tensor_bytes / GB:.3f}", f"{report.tensor_bytes / GIB:.3f}"),
                ("overhead", report.overhead_bytes, "", ""),
                ("total", report.total_bytes, f"{report.total_bytes / GB:.3f}", f"{report.total_bytes / GIB:.3f}"),
            ],
            right=(1, 2, 3),
        )
    )
    out.append(f"reduction {report.reduction_pct:.2f}%, {report.bits_per_weight:.3f} bits/weight")
    return "\n".join(out)


def render_diff(report: DiffReport) -> str:
    def sq(x):
        return "inf" if x == math.inf else f"{x:.2f}"

    body = _table(
        ("Tensor", "A", "B", "RMSE", "Max abs", "SQNR dB", "Cosine"),
        [
            (t.name, t.type_a, t.type_b, f"{t.stats.rmse:.3e}", f"{t.stats.max_abs_err:.3e}",
             sq(t.stats.sqnr_db), f"{t.stats.cosine_sim:.6f}")
            for t in report.tensors
        ],
        right=(3, 4, 5, 6),
    )
    return (
        f"{body}\n\noverall rmse {report.overall_rmse:.4e}, sqnr {sq(report.overall_sqnr_db)} dB, "
        f"size {report.bytes_a} -> {report.bytes_b} bytes"
    )
