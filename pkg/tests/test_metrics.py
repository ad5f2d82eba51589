from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from quantforge import gguf_io, metrics, pipeline, plans, safetensors_io
from quantforge.core import ManifestEntry, ModelManifest, QuantType, ScalarType
from quantforge.errors import ArgumentError, DiffError
from quantforge.loader import open_model
from quantforge.manifests import load_manifest


class TestCompare:
    def test_identical(self):
        s = metrics.compare_tensors([1.0, -2.0, 3.0], [1.0, -2.0, 3.0])
        assert (s.rmse, s.max_abs_err, s.cosine_sim, s.sqnr_db) == (0.0, 0.0, 1.0, math.inf)
        assert s.to_json()["sqnr_db"] is None

    def test_orthogonal(self):
        s = metrics.compare_tensors([1, 0], [0, 1])
        assert s.cosine_sim == 0.0
        assert s.rmse == pytest.approx(1.0)
        assert s.max_abs_err == 1.0

    def test_relative_error_to_sqnr(self):
        s = metrics.compare_tensors([3, 4], np.array([3, 4]) * (1 + 1e-3))
        assert s.sqnr_db == pytest.approx(60.0, abs=0.1)

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            metrics.compare_tensors([1, 2], [1])
        with pytest.raises(ArgumentError):
            metrics.compare_tensors([], [])

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)),
           hnp.arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)))
    def test_ranges(self, a, b):
        s = metrics.compare_tensors(a, b)
        assert s.rmse >= 0 and -1 <= s.cosine_sim <= 1
        assert s.max_abs_err >= s.rmse * (1 - 1e-12)


class TestLadder:
    def test_values(self):
        assert metrics.ratio_ladder(QuantType.F16) == 2.0
        assert metrics.ratio_ladder(QuantType.Q8_0, nominal=True) == 4.0
        assert metrics.ratio_ladder(QuantType.Q4_K, nominal=True) == 8.0
        assert metrics.ratio_ladder(QuantType.Q8_0) == 32 / 8.5
        assert metrics.ratio_ladder(QuantType.Q4_K) == 32 / 4.5

    def test_rows(self):
        rows = {r["type"]: r for r in metrics.ladder_rows()}
        assert rows["Q6_K"]["bits_per_weight"] == 6.5625
        assert rows["NF4"]["ratio"] == 32 / 4.5


class TestEstimate:
    def test_identity_payload_unchanged(self, small_manifest):
        r = metrics.estimate_size(small_manifest, plans.IDENTITY)
        assert r.tensor_bytes == r.baseline_bytes
        assert r.payload_reduction_pct == 0.0
        assert r.overhead_bytes > 0 and r.total_bytes == r.tensor_bytes + r.overhead_bytes

    def test_empty_manifest(self):
        r = metrics.estimate_size(ModelManifest("e"), plans.Q4_K_M_DEFAULT)
        assert (r.tensor_bytes, r.baseline_bytes, r.reduction_pct, r.bits_per_weight) == (0, 0, 0.0, 0.0)

    @pytest.mark.parametrize("preset", ["llama-3.2-3b", "llama-mini"])
    def test_plan_ordering(self, preset):
        m = load_manifest(preset)
        nf4 = metrics.estimate_size(m, plans.NF4_LINEAR_ONLY).reduction_pct
        q4 = metrics.estimate_size(m, plans.Q4_K_M_DEFAULT).reduction_pct
        assert q4 > nf4 > 0

    def test_per_tensor_from_geometry(self):
        m = ModelManifest("g", (ManifestEntry("a.weight", (4, 512), ScalarType.BF16),
                                ManifestEntry("n", (512,), ScalarType.BF16)))
        r = metrics.estimate_size(m, plans.Q4_K_M_DEFAULT)
        assert [(t.qtype, t.nbytes) for t in r.per_tensor] == [(QuantType.Q4_K, 4 * 2 * 144), (QuantType.F32, 2048)]
        assert r.bits_per_weight == 8 * (1152 + 2048) / 2560

    def test_json_shape(self, small_manifest):
        doc = metrics.estimate_size(small_manifest, plans.Q8_0_ALL).to_json()
        for key in ("model", "plan", "baseline_bytes", "total_bytes", "reduction_pct", "bits_per_weight", "tensors"):
            assert key in doc
        odd = [t for t in doc["tensors"] if t["name"] == "odd.weight"][0]
        assert odd["type"] == "F16" and "note" in odd
        json.dumps(doc, allow_nan=False)

    @pytest.mark.parametrize("plan", [plans.Q4_K_M_DEFAULT, plans.Q8_0_ALL, plans.IDENTITY, plans.F16_ALL])
    def test_estimate_equals_written_file(self, tiny_manifest, plan):
        data = safetensors_io.synth_fixture(tiny_manifest, 5)
        manifest, acc = safetensors_io.read_container(data)
        assert manifest == tiny_manifest
        f, _ = pipeline.quantize_model(manifest, acc.get, plan)
        assert len(gguf_io.gguf_bytes(f)) == metrics.estimate_size(manifest, plan).total_bytes


def _write(tmp_path, name, manifest, acc, plan):
    f, _ = pipeline.quantize_model(manifest, acc.get, plan)
    path = tmp_path / name
    gguf_io.write_gguf(f, path)
    return path


class TestDiff:
    @pytest.fixture
    def fixture(self, tmp_path, tiny_manifest):
        path = tmp_path / "src.safetensors"
        safetensors_io.write_fixture(tiny_manifest, 11, path)
        manifest, acc = safetensors_io.read_container(path)
        return path, manifest, acc

    def test_self_diff_zero(self, fixture):
        path = fixture[0]
        r = metrics.diff_models(open_model(path), open_model(path))
        assert r.overall_rmse == 0.0 and r.overall_sqnr_db == math.inf
        assert all(t.stats.rmse == 0 for t in r.tensors)

    def test_q8_0_closer_than_q4_k(self, fixture, tmp_path):
        path, manifest, acc = fixture
        q8 = _write(tmp_path, "q8.gguf", manifest, acc, plans.uniform_plan(QuantType.Q8_0))
        q4 = _write(tmp_path, "q4.gguf", manifest, acc, plans.uniform_plan(QuantType.Q4_K))
        r8 = metrics.diff_models(open_model(path), open_model(q8))
        r4 = metrics.diff_models(open_model(path), open_model(q4))
        assert 0 < r8.overall_rmse < r4.overall_rmse
        assert r4.bytes_b < r8.bytes_b

    def test_weighted_rmse_pools_tensors(self, fixture, tmp_path):
        path, manifest, acc = fixture
        q4 = _write(tmp_path, "q4.gguf", manifest, acc, plans.Q4_K_M_DEFAULT)
        r = metrics.diff_models(open_model(path), open_model(q4))
        pooled = sum(t.stats.rmse**2 * t.stats.n_elements for t in r.tensors) / r.n_elements
        assert r.overall_rmse == pytest.approx(math.sqrt(pooled), rel=1e-12)

    def test_disjoint_models(self, tmp_path):
        a = ModelManifest("a", (ManifestEntry("x", (4,), ScalarType.F32),))
        b = ModelManifest("b", (ManifestEntry("y", (4,), ScalarType.F32),))
        pa, pb = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
        safetensors_io.write_fixture(a, 0, pa)
        safetensors_io.write_fixture(b, 0, pb)
        with pytest.raises(DiffError) as info:
            metrics.diff_models(open_model(pa), open_model(pb))
        assert len(info.value.mismatches) == 2

    def test_shape_mismatch(self, tmp_path):
        a = ModelManifest("a", (ManifestEntry("x", (4,), ScalarType.F32),))
        b = ModelManifest("b", (ManifestEntry("x", (2, 2), ScalarType.F32),))
        pa, pb = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
        safetensors_io.write_fixture(a, 0, pa)
        safetensors_io.write_fixture(b, 0, pb)
        with pytest.raises(DiffError, match="1 mismatches"):
            metrics.diff_models(open_model(pa), open_model(pb))


def test_render_stages():
    rows = metrics.stage_rows([("source", 6 * 2**30, 6 * 2**30), ("small", 2**30, 6 * 2**30)])
    text = metrics.render_stages(rows)
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["Format", "Bytes"]
    assert lines[2].split()[-1] == "0.00" and lines[3].split()[-1] == "83.33"
    assert rows[1]["size_gib"] == 1.0
