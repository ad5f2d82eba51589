"""Shape manifests for Llama-style decoder models.

Tensor names follow the Hugging Face checkpoint convention
(``model.layers.{i}.self_attn.q_proj.weight`` and so on).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import ManifestEntry, ModelManifest, ScalarType
from .errors import ArgumentError


@dataclass(frozen=True)
class LlamaConfig:
    hidden: int
    layers: int
    heads: int
    kv_heads: int
    ffn: int
    vocab: int
    tied_embeddings: bool = True

    @property
    def kv_dim(self) -> int:
        return self.hidden // self.heads * self.kv_heads


# public Llama 3.2 3B configuration
LLAMA_3_2_3B = LlamaConfig(hidden=3072, layers=28, heads=24, kv_heads=8, ffn=8192, vocab=128256)
# ~28.7M parameters with the same ratios: kv width hidden/3, ffn 8/3 hidden,
# embeddings about 12% of all parameters
LLAMA_MINI = LlamaConfig(hidden=768, layers=4, heads=12, kv_heads=4, ffn=2048, vocab=4608)


def llama_manifest(cfg: LlamaConfig, model_name: str, dtype: ScalarType = ScalarType.BF16) -> ModelManifest:
    h, kv, f = cfg.hidden, cfg.kv_dim, cfg.ffn
    entries = [ManifestEntry("model.embed_tokens.weight", (cfg.vocab, h), dtype)]
    for i in range(cfg.layers):
        p = f"model.layers.{i}."
        entries += [
            ManifestEntry(p + "input_layernorm.weight", (h,), dtype),
            ManifestEntry(p + "self_attn.q_proj.weight", (h, h), dtype),
            ManifestEntry(p + "self_attn.k_proj.weight", (kv, h), dtype),
            ManifestEntry(p + "self_attn.v_proj.weight", (kv, h), dtype),
            ManifestEntry(p + "self_attn.o_proj.weight", (h, h), dtype),
            ManifestEntry(p + "post_attention_layernorm.weight", (h,), dtype),
            ManifestEntry(p + "mlp.gate_proj.weight", (f, h), dtype),
            ManifestEntry(p + "mlp.up_proj.weight", (f, h), dtype),
            ManifestEntry(p + "mlp.down_proj.weight", (h, f), dtype),
        ]
    entries.append(ManifestEntry("model.norm.weight", (h,), dtype))
    if not cfg.tied_embeddings:
        entries.append(ManifestEntry("lm_head.weight", (cfg.vocab, h), dtype))
    metadata = {
        "architecture": "llama",
        "hidden_size": str(h),
        "num_hidden_layers": str(cfg.layers),
        "num_attention_heads": str(cfg.heads),
        "num_key_value_heads": str(cfg.kv_heads),
        "intermediate_size": str(f),
        "vocab_size": str(cfg.vocab),
        "tie_word_embeddings": str(cfg.tied_embeddings).lower(),
    }
    return ModelManifest(model_name, tuple(entries), metadata)


PRESETS = {
    "llama-3.2-3b": lambda: llama_manifest(LLAMA_3_2_3B, "Llama-3.2-3B"),
    "llama-mini": lambda: llama_manifest(LLAMA_MINI, "Llama-mini"),
}


def preset_path(name: str) -> Path:
    return Path(str(resources.files("quantforge") / "data" / f"{name}.json"))


def load_manifest(spec: str | Path) -> ModelManifest:
    """A preset name (``llama-3.2-3b``, ``llama-mini``) or a manifest JSON path."""
    if str(spec) in PRESETS:
        return PRESETS[str(spec)]()
    path = Path(spec)
    if not path.is_file():
        raise ArgumentError(f"no manifest file or preset named {str(spec)!r} (presets: {', '.join(PRESETS)})")
    return ModelManifest.load(path)


def write_preset_files(directory: Path) -> None:
    for name, build in PRESETS.items():
        (directory / f"{name}.json").write_text(json.dumps(build().to_json(), indent=1) + "\n")
