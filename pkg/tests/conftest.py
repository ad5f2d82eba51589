from __future__ import annotations

import numpy as np
import pytest

from quantforge.core import ManifestEntry, ModelManifest, ScalarType
from quantforge.manifests import LlamaConfig, llama_manifest

# criterion number -> (ok, detail), filled by test_acceptance.py
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# a few-tensor Llama-shaped model that quantizes in well under a second
TINY = LlamaConfig(hidden=256, layers=1, heads=4, kv_heads=2, ffn=512, vocab=512)


@pytest.fixture
def tiny_manifest() -> ModelManifest:
    return llama_manifest(TINY, "tiny", ScalarType.F32)


@pytest.fixture
def small_manifest() -> ModelManifest:
    return ModelManifest(
        "small",
        (
            ManifestEntry("embed.weight", (8, 256), ScalarType.F32),
            ManifestEntry("norm.weight", (256,), ScalarType.F32),
            ManifestEntry("proj.weight", (4, 512), ScalarType.BF16),
            ManifestEntry("odd.weight", (3, 100), ScalarType.F16),
        ),
        {"architecture": "llama"},
    )
