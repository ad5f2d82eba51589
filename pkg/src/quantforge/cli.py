"""Command-line front end.

    quantforge synth    MANIFEST --output model.safetensors [--seed N]
    quantforge quantize INPUT --output model.gguf [--plan P | --type T] [--jobs N] [--paper-pipeline]
    quantforge inspect  FILE
    quantforge diff     A B
    quantforge estimate MANIFEST [--plan P | --type T] [--all-stages]

MANIFEST is a preset name (llama-3.2-3b, llama-mini) or a manifest JSON file.
``quantize`` also accepts a manifest, synthesizing weights from ``--seed``.
With ``--report json`` exactly one JSON document goes to stdout; logs and
human-readable notes go to stderr.

Exit codes: 0 ok, 2 bad arguments, 3 format or corruption error,
4 unsupported type, 5 structural diff mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__, gguf_io, kernels, metrics, pipeline, plans, safetensors_io
from .core import QuantPlan, QuantType
from .errors import ArgumentError, QuantForgeError
from .loader import is_gguf, open_model
from .manifests import PRESETS, load_manifest

log = logging.getLogger("quantforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ArgumentError(message)


def _add_plan_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--plan", help=f"built-in plan ({', '.join(plans.BUILTIN)}) or plan JSON file")
    g.add_argument("--type", dest="qtype", help="quantize every tensor to this type (e.g. Q8_0)")


def _add_report_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--report", choices=("text", "json"), default="text", help="report format (default text)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quantforge", description="Post-training weight quantization to GGUF.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic safetensors model for a manifest")
    p.add_argument("manifest", help="preset name or manifest JSON")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_report_arg(p)

    p = sub.add_parser("quantize", help="quantize a safetensors model (or a synthesized manifest) to GGUF")
    p.add_argument("input", help="safetensors file, or a manifest/preset to synthesize from --seed")
    p.add_argument("--output", required=True)
    _add_plan_args(p)
    p.add_argument("--seed", type=int, default=0, help="seed when synthesizing from a manifest")
    p.add_argument("--jobs", type=int, default=1, help="worker threads (output does not depend on it)")
    p.add_argument("--paper-pipeline", action="store_true",
                   help="pass through an NF4 stage first, then convert to the plan's k-quants")
    _add_report_arg(p)

    p = sub.add_parser("inspect", help="list a GGUF or safetensors file")
    p.add_argument("path")
    _add_report_arg(p)

    p = sub.add_parser("diff", help="per-tensor error between two models")
    p.add_argument("a")
    p.add_argument("b")
    _add_report_arg(p)

    p = sub.add_parser("estimate", help="size of a manifest under a plan, without weights")
    p.add_argument("manifest", help="preset name or manifest JSON")
    _add_plan_args(p)
    p.add_argument("--all-stages", action="store_true",
                   help="baseline, nf4-linear-only and q4_k_m-default side by side")
    p.add_argument("--per-tensor", action="store_true", help="include the per-tensor table in text output")
    _add_report_arg(p)
    return parser


def _plan(args, default: str = "q4_k_m-default") -> QuantPlan:
    if getattr(args, "qtype", None):
        return plans.uniform_plan(QuantType.parse(args.qtype))
    return plans.resolve_plan(args.plan or default)


def _emit(args, doc, text: str) -> None:
    if args.report == "json":
        json.dump(doc, sys.stdout, indent=1, allow_nan=False)
        sys.stdout.write("\n")
    else:
        print(text)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_atomic(path: Path, write) -> int:
    """Write through a temporary file in the same directory; nothing is left behind on failure."""
    path = Path(path)
    if not path.parent.is_dir():
        raise ArgumentError(f"output directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            n = write(fh)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return n


# --- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = load_manifest(args.manifest)
    n = _write_atomic(Path(args.output), lambda fh: safetensors_io.write_fixture(manifest, args.seed, fh))
    doc = {"output": args.output, "bytes": n, "n_params": manifest.n_params, "seed": args.seed}
    _emit(args, doc, f"wrote {args.output}: {manifest.n_params:,} parameters, {n:,} bytes")
    return 0


def _source(path: str, seed: int):
    p = Path(path)
    if str(path) in PRESETS or (p.is_file() and p.suffix == ".json"):
        manifest = load_manifest(path)
        data = safetensors_io.synth_fixture(manifest, seed)
        manifest, accessor = safetensors_io.read_container(data, manifest.model_name)
        return manifest, accessor
    if not p.is_file():
        raise ArgumentError(f"input file not found: {path}")
    if is_gguf(p):
        raise ArgumentError(f"{path} is already GGUF; quantize takes a safetensors model")
    return safetensors_io.read_container(p)


def cmd_quantize(args) -> int:
    if args.jobs < 1:
        raise ArgumentError("--jobs must be at least 1")
    plan = _plan(args)
    manifest, accessor = _source(args.input, args.seed)
    t0 = time.perf_counter()
    gguf, result = pipeline.quantize_model(manifest, accessor.get, plan, args.jobs, args.paper_pipeline)
    n = _write_atomic(Path(args.output), lambda fh: gguf_io.write_gguf(gguf, fh))
    elapsed = time.perf_counter() - t0

    estimate = metrics.estimate_size(manifest, plan)
    stages = pipeline.stage_report(result, f"GGUF {plan.name}", n)
    doc = {
        "model": manifest.model_name,
        "plan": plan.name,
        "mode": "paper-pipeline" if args.paper_pipeline else "direct",
        "output": args.output,
        "baseline_bytes": manifest.source_bytes,
        "total_bytes": n,
        "estimated_bytes": estimate.total_bytes,
        "reduction_pct": stages[-1]["reduction_pct"],
        "estimated_reduction_pct": estimate.reduction_pct,
        "bits_per_weight": pipeline.bits_per_weight(result.tensors),
        "backend": kernels.BACKEND,
        "seconds": elapsed,
        "stages": stages,
        "tensors": [
            {"name": t.name, "type": t.dtype.tag, "bytes": t.nbytes,
             **({"note": a.note} if a.note else {})}
            for t, a in zip(result.tensors, result.assignments)
        ],
    }
    fallbacks = [a for a in result.assignments if a.note and not a.note.startswith("1-D")]
    for a in fallbacks:
        _note(f"fallback: {a.name}: {a.note}")
    text = (
        f"wrote {args.output} ({n:,} bytes, plan {plan.name}, {doc['mode']}, {elapsed:.1f}s)\n"
        + metrics.render_stages(stages)
    )
    _emit(args, doc, text)
    return 0


def _inspect_gguf(path: Path, args) -> int:
    f = gguf_io.read_gguf(path)
    size = path.stat().st_size
    rows, payload, n_params = [], 0, 0
    for t in f.tensors:
        nbytes = len(f.tensor_bytes(t.name))
        payload += nbytes
        n_params += t.n_elements
        tag = t.qtype.tag if t.qtype else f"opaque (ggml type {t.ggml_type})"
        rows.append({"name": t.name, "shape": list(t.shape), "type": tag, "bytes": nbytes, "offset": t.offset})
    doc = {
        "format": "gguf",
        "version": f.version,
        "file_bytes": size,
        "tensor_bytes": payload,
        "n_tensors": len(rows),
        "n_params": n_params,
        "bits_per_weight": 8 * payload / n_params if n_params else 0.0,
        "metadata": {k: _short(v.to_python()) for k, v in f.metadata.items()},
        "tensors": rows,
    }
    meta = "\n".join(f"  {k} = {_short(v.to_python())}" for k, v in f.metadata.items())
    table = metrics._table(
        ("Tensor", "Shape", "Type", "Bytes"),
        [(r["name"], "x".join(map(str, r["shape"])), r["type"], r["bytes"]) for r in rows],
        right=(3,),
    )
    text = (
        f"GGUF v{f.version}, {len(rows)} tensors, {len(f.metadata)} metadata keys\n{meta}\n\n{table}\n\n"
        f"total {size:,} bytes ({payload:,} tensor data), {n_params:,} parameters, "
        f"{doc['bits_per_weight']:.3f} bits/weight"
    )
    _emit(args, doc, text)
    return 0


def _short(v):
    if isinstance(v, list) and len(v) > 8:
        return v[:8] + [f"... {len(v) - 8} more"]
    return v


def _inspect_safetensors(path: Path, args) -> int:
    manifest, accessor = safetensors_io.read_container(path)
    rows = [{"name": e.name, "shape": list(e.shape), "type": e.dtype.tag, "bytes": len(accessor.raw(e.name))}
            for e in manifest.entries]
    doc = {
        "format": "safetensors",
        "file_bytes": path.stat().st_size,
        "tensor_bytes": manifest.source_bytes,
        "n_tensors": len(rows),
        "n_params": manifest.n_params,
        "bits_per_weight": 8 * manifest.source_bytes / manifest.n_params if manifest.n_params else 0.0,
        "metadata": dict(manifest.metadata),
        "tensors": rows,
    }
    table = metrics._table(
        ("Tensor", "Shape", "Type", "Bytes"),
        [(r["name"], "x".join(map(str, r["shape"])), r["type"], r["bytes"]) for r in rows],
        right=(3,),
    )
    text = (
        f"safetensors, {len(rows)} tensors\n\n{table}\n\n"
        f"total {doc['file_bytes']:,} bytes, {manifest.n_params:,} parameters, "
        f"{doc['bits_per_weight']:.3f} bits/weight"
    )
    _emit(args, doc, text)
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise ArgumentError(f"file not found: {path}")
    if is_gguf(path):
        return _inspect_gguf(path, args)
    return _inspect_safetensors(path, args)


def cmd_diff(args) -> int:
    report = metrics.diff_models(open_model(args.a), open_model(args.b))
    _emit(args, report.to_json(), metrics.render_diff(report))
    return 0


def cmd_estimate(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.all_stages:
        if args.plan or args.qtype:
            raise ArgumentError("--all-stages reports fixed plans; drop --plan/--type")
        reports = [metrics.estimate_size(manifest, p) for p in (plans.NF4_LINEAR_ONLY, plans.Q4_K_M_DEFAULT)]
        base = manifest.source_bytes
        rows = metrics.stage_rows(
            [(f"source ({_dtype_label(manifest)})", base, base)]
            + [(r.plan, r.total_bytes, base) for r in reports]
        )
        doc = {
            "model": manifest.model_name,
            "n_params": manifest.n_params,
            "baseline_bytes": base,
            "stages": rows,
            "plans": [r.to_json() for r in reports],
            "ladder": metrics.ladder_rows(),
        }
        _emit(args, doc, f"{manifest.model_name}, {manifest.n_params:,} parameters\n" + metrics.render_stages(rows))
        return 0
    report = metrics.estimate_size(manifest, _plan(args, "identity"))
    _emit(args, report.to_json(), metrics.render_size(report, args.per_tensor))
    return 0


def _dtype_label(manifest) -> str:
    tags = sorted({e.dtype.tag for e in manifest.entries})
    return "/".join(tags) if tags else "empty"


COMMANDS = {
    "synth": cmd_synth,
    "quantize": cmd_quantize,
    "inspect": cmd_inspect,
    "diff": cmd_diff,
    "estimate": cmd_estimate,
}


def _setup_logging() -> None:
    level = os.environ.get("QUANTFORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except QuantForgeError as exc:
        _note(f"quantforge: error: {exc}")
        for line in getattr(exc, "mismatches", []):
            _note(f"  {line}")
        return exc.exit_code
    except FileNotFoundError as exc:
        _note(f"quantforge: error: {exc}")
        return 2
    except BrokenPipeError:
        return 1


if __name__ == "__main__":
    sys.exit(main())
