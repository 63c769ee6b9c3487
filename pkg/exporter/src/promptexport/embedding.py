"""Token-level prompt embedding into the simulator's embedding-file schema.

Embeddings are pre-backbone token representations (the insertion point for
the simulator's trainable prefixes): for HuggingFace encoders that is the
input-embedding table lookup, for the offline `hashed` encoder a
deterministic per-token hash expansion. Exported files are self-contained
JSON the simulator loads directly.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path

import numpy as np

from .errors import ExportError, ValidationError

PROMPT_TEMPLATE = "A photo of {name}: {description}"
HASHED_ENCODER = "hashed"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def build_prompt_texts(descriptions: dict[str, list[str]]) -> dict[str, list[str]]:
    return {
        name: [PROMPT_TEMPLATE.format(name=name, description=d) for d in descs]
        for name, descs in descriptions.items()
    }


def _hashed_token_vector(token: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-Gaussian vector from a blake2b expansion."""
    out = np.empty(dim)
    for i in range(dim):
        digest = hashlib.blake2b(
            f"{token}|{i}".encode(), digest_size=16, person=b"promptexp"
        ).digest()
        u1 = (int.from_bytes(digest[:8], "big") + 1) / (2**64 + 1)
        u2 = int.from_bytes(digest[8:], "big") / 2**64
        out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
    return out


class HashedEncoder:
    """Offline fallback encoder: shared tokens give shared embedding rows."""

    def __init__(self, dim: int = 16):
        if dim < 2:
            raise ValidationError(f"embed dim must be >= 2, got {dim}")
        self.dim = dim
        self._table: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            raise ValidationError(f"prompt tokenized to nothing: {text!r}")
        rows = []
        for tok in tokens:
            if tok not in self._table:
                self._table[tok] = _hashed_token_vector(tok, self.dim)
            rows.append(self._table[tok])
        return np.stack(rows)


class HuggingFaceEncoder:
    """Input-embedding lookup of a pretrained encoder (pre-backbone tokens)."""

    def __init__(self, name: str):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise ExportError(f"encoder '{name}' needs the transformers package: {exc}")
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(name)
            model = AutoModel.from_pretrained(name)
        except Exception as exc:
            raise ExportError(f"encoder '{name}' unavailable: {exc}") from exc
        self.table = model.get_input_embeddings().weight.detach().cpu().numpy()
        self.dim = int(self.table.shape[1])

    def encode(self, text: str) -> np.ndarray:
        ids = self.tokenizer(text, add_special_tokens=True)["input_ids"]
        if not ids:
            raise ValidationError(f"prompt tokenized to nothing: {text!r}")
        return self.table[np.asarray(ids)]


def make_encoder(name: str, embed_dim: int = 16):
    if name == HASHED_ENCODER:
        return HashedEncoder(embed_dim)
    return HuggingFaceEncoder(name)


def embed_prompts(descriptions: dict[str, list[str]], encoder) -> dict:
    """Per prompt, the n x d' token-embedding matrix, in the file schema."""
    prompts = build_prompt_texts(descriptions)
    classes = []
    dim = None
    for name, texts in prompts.items():
        entries = []
        for text in texts:
            mat = np.asarray(encoder.encode(text), dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] < 1:
                raise ExportError(f"class '{name}': encoder returned shape {mat.shape}")
            if dim is None:
                dim = int(mat.shape[1])
            elif mat.shape[1] != dim:
                raise ExportError(
                    f"class '{name}': embedding width {mat.shape[1]} does not "
                    f"match previous prompts ({dim})"
                )
            if not np.all(np.isfinite(mat)):
                raise ExportError(f"class '{name}': non-finite embedding values")
            entries.append({"text": text, "token_embeddings": mat.tolist()})
        classes.append({"name": name, "prompts": entries})
    return {"embed_dim": dim, "classes": classes}


def validate_payload(payload: dict) -> None:
    """Schema self-check mirroring what the simulator's loader enforces."""
    dim = payload.get("embed_dim")
    if not isinstance(dim, int) or dim < 2:
        raise ValidationError("embed_dim must be an integer >= 2")
    classes = payload.get("classes")
    if not isinstance(classes, list) or not classes:
        raise ValidationError("classes must be a nonempty list")
    for entry in classes:
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise ValidationError("every class needs a nonempty string name")
        prompts = entry.get("prompts")
        if not isinstance(prompts, list) or not prompts:
            raise ValidationError(f"class '{name}': prompts must be a nonempty list")
        for j, p in enumerate(prompts):
            mat = p.get("token_embeddings")
            if not isinstance(mat, list) or not mat:
                raise ValidationError(f"class '{name}' prompt {j}: empty token matrix")
            widths = {len(row) for row in mat}
            if widths != {dim}:
                raise ValidationError(
                    f"class '{name}' prompt {j}: token widths {sorted(widths)} "
                    f"!= embed_dim {dim}"
                )


def write_embedding_file(payload: dict, path: str | Path) -> None:
    validate_payload(payload)
    Path(path).write_text(json.dumps(payload), encoding="utf-8")
