"""Built-in quantization plans."""

from __future__ import annotations

from pathlib import Path

from .core import QuantPlan, QuantType
from .errors import ArgumentError

# Q4_K everywhere, Q6_K for the tensors llama.cpp's q4_k_m mix treats as
# sensitive: token embeddings / output head and attention value projections.
Q4_K_M_DEFAULT = QuantPlan(
    "q4_k_m-default",
    QuantType.Q4_K,
    (
        ("*embed_tokens*", QuantType.Q6_K),
        ("lm_head*", QuantType.Q6_K),
        ("output.weight", QuantType.Q6_K),
        ("*v_proj*", QuantType.Q6_K),
        ("*attn_v*", QuantType.Q6_K),
    ),
)

# 4-bit NF4 for the linear projections, F16 embeddings, norms F32 (1-D rule)
NF4_LINEAR_ONLY = QuantPlan("nf4-linear-only", QuantType.F16, (("*_proj.weight", QuantType.NF4),))

Q8_0_ALL = QuantPlan("q8_0-all", QuantType.Q8_0)
F16_ALL = QuantPlan("f16-all", QuantType.F16)
IDENTITY = QuantPlan("identity", None)

BUILTIN = {p.name: p for p in (Q4_K_M_DEFAULT, NF4_LINEAR_ONLY, Q8_0_ALL, F16_ALL, IDENTITY)}


def uniform_plan(qtype: QuantType) -> QuantPlan:
    return QuantPlan(f"{qtype.tag.lower()}-all", qtype)


def resolve_plan(spec: str) -> QuantPlan:
    """A built-in plan name or the path of a plan JSON file."""
    if spec in BUILTIN:
        return BUILTIN[spec]
    if Path(spec).is_file():
        return QuantPlan.load(spec)
    raise ArgumentError(f"unknown plan {spec!r}: not a built-in ({', '.join(BUILTIN)}) or a readable file")
