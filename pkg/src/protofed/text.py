"""Server-side text pipeline: prompts, frozen encoder, trainable prefixes.

The frozen encoder is deliberately the smallest architecture in which prefix
rows interact with content rows: a single-head self-attention layer, mean
pooling over positions, and a frozen two-layer tanh MLP projecting to the
image feature dimension. Only the per-class prefix rows v_c are ever
trained; every encoder parameter is immutable after construction, and
serialization is canonical so freeze violations show up as byte diffs.

Token embeddings come either from the built-in hashing tokenizer (fixed
vocabulary, FNV-1a token hashing) or from an embedding file produced by an
external exporter, in which case the tokenizer is bypassed and the frozen
backbone still applies.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataFormatError,
    InsufficientClassesError,
    PromptTooShortError,
    ShapeError,
)
from .numerics import contrastive_alignment, stable_softmax
from .rng import RngStream, _fnv1a

PROMPT_TEMPLATE = "A photo of {name}: {description}"
DEFAULT_VOCAB = 4096
DEFAULT_EMBED_DIM = 16
DEFAULT_HIDDEN_DIM = 32

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric-run tokenization."""
    return _TOKEN_RE.findall(text.lower())


def token_id(token: str, vocab_size: int) -> int:
    """Deterministic FNV-1a hash into the fixed vocabulary; never fails."""
    return _fnv1a(token.encode()) % vocab_size


@dataclass
class FrozenEncoder:
    """Immutable embedding table plus attention/MLP backbone."""

    embed: np.ndarray | None
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    embed_dim: int
    out_dim: int
    vocab_size: int

    def to_bytes(self) -> bytes:
        """Canonical serialization used by the freeze-contract checks."""
        payload = {
            "embed": None if self.embed is None else self.embed.tolist(),
            "wq": self.wq.tolist(),
            "wk": self.wk.tolist(),
            "wv": self.wv.tolist(),
            "wo": self.wo.tolist(),
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "embed_dim": self.embed_dim,
            "out_dim": self.out_dim,
            "vocab_size": self.vocab_size,
        }
        return json.dumps(payload, sort_keys=True).encode()


def build_frozen_encoder(
    embed_dim: int,
    out_dim: int,
    hidden_dim: int,
    vocab_size: int,
    seed: int,
    with_embedding_table: bool = True,
) -> FrozenEncoder:
    scale = 1.0 / np.sqrt(embed_dim)
    embed = (
        RngStream(seed, "encoder-embed").matrix(vocab_size, embed_dim)
        if with_embedding_table
        else None
    )
    rng = RngStream(seed, "encoder-backbone")
    return FrozenEncoder(
        embed=embed,
        wq=rng.matrix(embed_dim, embed_dim, scale),
        wk=rng.matrix(embed_dim, embed_dim, scale),
        wv=rng.matrix(embed_dim, embed_dim, scale),
        wo=rng.matrix(embed_dim, embed_dim, scale),
        w1=rng.matrix(embed_dim, hidden_dim, scale),
        b1=np.zeros(hidden_dim),
        w2=rng.matrix(hidden_dim, out_dim, 1.0 / np.sqrt(hidden_dim)),
        b2=np.zeros(out_dim),
        embed_dim=embed_dim,
        out_dim=out_dim,
        vocab_size=vocab_size,
    )


@dataclass
class PromptBank:
    """Per-class embedded prompt sequences and their shared trainable prefixes."""

    class_names: list[str]
    prompts: list[list[str]]
    embedded: list[list[np.ndarray]]
    prefixes: list[np.ndarray]
    prefix_len: int
    prompts_per_class: int

    def clone(self) -> "PromptBank":
        return PromptBank(
            list(self.class_names),
            [list(p) for p in self.prompts],
            self.embedded,  # immutable by convention; prefixes carry all training state
            [v.copy() for v in self.prefixes],
            self.prefix_len,
            self.prompts_per_class,
        )

    def prefixes_to_json(self) -> str:
        return json.dumps(
            {name: v.tolist() for name, v in zip(self.class_names, self.prefixes)},
            sort_keys=True,
        )


@dataclass
class TextPrototypes:
    matrix: np.ndarray  # C x d, one pooled prototype per class
    per_class: list[np.ndarray]  # raw k x d features per class


def build_prompts(
    class_names: list[str],
    descriptions: dict[str, list[str]],
    k: int,
) -> list[list[str]]:
    """k template prompts per class: ``A photo of {name}: {description}``."""
    if k < 1:
        raise ConfigError(f"prompts per class must be >= 1, got {k}")
    out = []
    for name in class_names:
        descs = descriptions.get(name)
        if descs is None or len(descs) < k:
            have = 0 if descs is None else len(descs)
            raise ConfigError(
                f"class '{name}' needs {k} descriptions, found {have}"
            )
        row = []
        for d in descs[:k]:
            if not d.strip():
                warnings.warn(f"empty description for class '{name}'")
            row.append(PROMPT_TEMPLATE.format(name=name, description=d))
        out.append(row)
    return out


def tokenize_and_embed(
    prompts: list[list[str]], encoder: FrozenEncoder
) -> list[list[np.ndarray]]:
    """Embed each prompt as an n_j x d' sequence via hashing lookup."""
    if encoder.embed is None:
        raise ConfigError("encoder has no embedding table (file-backed mode)")
    out = []
    for class_prompts in prompts:
        seqs = []
        for p in class_prompts:
            ids = [token_id(t, encoder.vocab_size) for t in tokenize(p)]
            if not ids:
                raise ConfigError(f"prompt tokenized to nothing: {p!r}")
            seqs.append(encoder.embed[ids].copy())
        out.append(seqs)
    return out


def insert_trainable_prompts(
    sequences: list[np.ndarray], prefix: np.ndarray
) -> list[np.ndarray]:
    """Replace the first m rows of every sequence with the prefix rows.

    Inputs are never mutated; m = 0 returns copies unchanged.
    """
    m = prefix.shape[0]
    out = []
    for seq in sequences:
        if seq.shape[0] <= m:
            raise PromptTooShortError(
                f"sequence of {seq.shape[0]} tokens cannot host a prefix of {m}"
            )
        hat = seq.copy()
        if m:
            hat[:m] = prefix
        out.append(hat)
    return out


def build_prompt_bank(
    class_names: list[str],
    descriptions: dict[str, list[str]],
    k: int,
    prefix_len: int,
    encoder: FrozenEncoder,
) -> PromptBank:
    """Tokenize, embed, and warm-start each prefix from its first prompt."""
    prompts = build_prompts(class_names, descriptions, k)
    embedded = tokenize_and_embed(prompts, encoder)
    return _finish_bank(class_names, prompts, embedded, k, prefix_len)


def _finish_bank(class_names, prompts, embedded, k, prefix_len) -> PromptBank:
    if prefix_len < 0:
        raise ConfigError(f"prefix length must be >= 0, got {prefix_len}")
    for name, seqs in zip(class_names, embedded):
        for seq in seqs:
            if seq.shape[0] <= prefix_len:
                raise PromptTooShortError(
                    f"class '{name}': prompt has {seq.shape[0]} tokens, "
                    f"needs more than prefix length {prefix_len}"
                )
    prefixes = [seqs[0][:prefix_len].copy() for seqs in embedded]
    return PromptBank(list(class_names), prompts, embedded, prefixes, prefix_len, k)


# --- encoding ---------------------------------------------------------------


def _encode_sequence(encoder: FrozenEncoder, seq: np.ndarray, want_cache: bool):
    """Attention -> mean-pool -> tanh MLP. Returns (feature, cache | None)."""
    if seq.ndim != 2 or seq.shape[1] != encoder.embed_dim:
        raise ShapeError(f"sequence must be n x {encoder.embed_dim}, got {seq.shape}")
    inv_sqrt = 1.0 / np.sqrt(encoder.embed_dim)
    q = seq @ encoder.wq
    k = seq @ encoder.wk
    v = seq @ encoder.wv
    attn = stable_softmax(q @ k.T * inv_sqrt)
    ctx = attn @ v
    pooled = (ctx @ encoder.wo).mean(axis=0)
    hidden = np.tanh(pooled @ encoder.w1 + encoder.b1)
    feature = hidden @ encoder.w2 + encoder.b2
    cache = {"seq": seq, "q": q, "k": k, "v": v, "attn": attn, "hidden": hidden} if want_cache else None
    return feature, cache


def _backward_sequence(encoder: FrozenEncoder, cache: dict, d_feature: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the input sequence rows (chain rule only)."""
    n = cache["seq"].shape[0]
    inv_sqrt = 1.0 / np.sqrt(encoder.embed_dim)
    d_hidden = d_feature @ encoder.w2.T
    d_pooled = (d_hidden * (1.0 - cache["hidden"] ** 2)) @ encoder.w1.T
    d_out = np.tile(d_pooled / n, (n, 1))  # mean-pool spreads evenly
    d_ctx = d_out @ encoder.wo.T
    attn = cache["attn"]
    d_attn = d_ctx @ cache["v"].T
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    d_q = d_scores @ cache["k"] * inv_sqrt
    d_k = d_scores.T @ cache["q"] * inv_sqrt
    d_v = attn.T @ d_ctx
    return d_q @ encoder.wq.T + d_k @ encoder.wk.T + d_v @ encoder.wv.T


def _class_feature(
    encoder: FrozenEncoder, bank: PromptBank, c: int, want_cache: bool
):
    hats = insert_trainable_prompts(bank.embedded[c], bank.prefixes[c])
    feats, caches = [], []
    for hat in hats:
        f, cache = _encode_sequence(encoder, hat, want_cache)
        feats.append(f)
        caches.append(cache)
    per_class = np.stack(feats)
    return per_class.mean(axis=0), per_class, caches


def encode_text_prototypes(bank: PromptBank, encoder: FrozenEncoder) -> TextPrototypes:
    """Pure function of (bank, encoder): one pooled prototype per class."""
    rows, per_class = [], []
    for c in range(len(bank.class_names)):
        pooled, feats, _ = _class_feature(encoder, bank, c, want_cache=False)
        rows.append(pooled)
        per_class.append(feats)
    return TextPrototypes(np.stack(rows), per_class)


def server_alignment_loss(
    text_protos: np.ndarray,
    image_protos: np.ndarray,
    mask: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Mean contrastive loss of text prototypes against image prototypes.

    Sums run over present classes only. Returns (loss, grad w.r.t. the
    present rows of text_protos as a C x d array, zero on absent rows).
    """
    present = np.flatnonzero(mask)
    if present.size < 2:
        raise InsufficientClassesError(
            f"server loss needs >= 2 present classes, got {present.size}"
        )
    targets = image_protos[present]
    grad = np.zeros_like(text_protos)
    total = 0.0
    for pos, c in enumerate(present):
        loss, g_anchor, _ = contrastive_alignment(text_protos[c], targets, pos, tau)
        total += loss
        grad[c] = g_anchor / present.size
    return total / present.size, grad


def train_prompts(
    bank: PromptBank,
    encoder: FrozenEncoder,
    image_protos: np.ndarray,
    mask: np.ndarray,
    tau: float,
    lr: float,
    epochs: int,
) -> tuple[PromptBank, list[float]]:
    """Full-batch gradient descent on the server alignment loss, prefixes only.

    Gradients flow through the mean over k prompts and the frozen backbone
    into exactly the prefix rows; encoder parameters and non-prefix embedding
    rows are untouched. Returns the updated bank and the per-epoch loss
    (evaluated before each step). lr = 0 reports losses without updating.
    """
    if epochs < 1:
        raise ConfigError(f"server epochs must be >= 1, got {epochs}")
    if lr < 0.0:
        raise ConfigError(f"prompt learning rate must be >= 0, got {lr}")
    present = np.flatnonzero(np.asarray(mask, dtype=bool))
    if present.size < 2:
        raise InsufficientClassesError(
            f"prompt training needs >= 2 present classes, got {present.size}"
        )
    bank = bank.clone()
    k = bank.prompts_per_class
    history = []
    for _ in range(epochs):
        anchors = {}
        caches = {}
        for c in present:
            pooled, _, cache = _class_feature(encoder, bank, c, want_cache=True)
            anchors[c] = pooled
            caches[c] = cache
        text_rows = np.stack([anchors[c] for c in present])
        targets = image_protos[present]
        total = 0.0
        for pos, c in enumerate(present):
            loss, g_anchor, _ = contrastive_alignment(text_rows[pos], targets, pos, tau)
            total += loss
            if lr > 0.0 and bank.prefix_len > 0:
                d_feature = g_anchor / (present.size * k)
                grad_prefix = np.zeros_like(bank.prefixes[c])
                for cache in caches[c]:
                    d_seq = _backward_sequence(encoder, cache, d_feature)
                    grad_prefix += d_seq[: bank.prefix_len]
                bank.prefixes[c] = bank.prefixes[c] - lr * grad_prefix
        history.append(total / present.size)
    return bank, history


# --- embedding-file mode -----------------------------------------------------


def load_embedding_bank(
    path: str | Path,
    class_names: list[str],
    k: int,
    prefix_len: int,
) -> tuple[PromptBank, int]:
    """Build a PromptBank from exporter-supplied token embeddings.

    Returns (bank, embed_dim); the caller builds the frozen backbone at that
    width. The file must cover every dataset class with at least k prompts of
    consistent embedding width.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"embedding file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    embed_dim = raw.get("embed_dim")
    if not isinstance(embed_dim, int) or embed_dim < 2:
        raise DataFormatError(f"{path}: field 'embed_dim' must be an integer >= 2")
    classes = raw.get("classes")
    if not isinstance(classes, list):
        raise DataFormatError(f"{path}: field 'classes' must be a list")
    by_name = {}
    for entry in classes:
        name = entry.get("name")
        if not isinstance(name, str):
            raise DataFormatError(f"{path}: every class entry needs a string 'name'")
        by_name[name] = entry

    prompts: list[list[str]] = []
    embedded: list[list[np.ndarray]] = []
    for name in class_names:
        entry = by_name.get(name)
        if entry is None:
            raise DataFormatError(f"{path}: no embeddings for class '{name}'")
        plist = entry.get("prompts")
        if not isinstance(plist, list) or len(plist) < k:
            have = 0 if not isinstance(plist, list) else len(plist)
            raise DataFormatError(
                f"{path}: class '{name}' needs {k} prompts, found {have}"
            )
        texts, seqs = [], []
        for j, p in enumerate(plist[:k]):
            mat = np.asarray(p.get("token_embeddings"), dtype=np.float64)
            if mat.ndim != 2 or mat.shape[1] != embed_dim or mat.shape[0] < 1:
                raise DataFormatError(
                    f"{path}: class '{name}' prompt {j}: token_embeddings must be "
                    f"n x {embed_dim} with n >= 1"
                )
            if not np.all(np.isfinite(mat)):
                raise DataFormatError(
                    f"{path}: class '{name}' prompt {j}: non-finite embedding values"
                )
            texts.append(str(p.get("text", "")))
            seqs.append(mat)
        prompts.append(texts)
        embedded.append(seqs)
    bank = _finish_bank(class_names, prompts, embedded, k, prefix_len)
    return bank, embed_dim
