"""Class-description sourcing: manual template or cached LLM completions.

The cache is the contract: any completion fetched once is stored under a
content-addressed key, so reruns are fully offline and byte-identical. The
manual style never touches the network at all.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import ExportError, ValidationError

STYLES = ("manual", "short", "long")
MANUAL_TEMPLATE = "A photo of a {name}."

# our instruction templates; the upstream work does not publish its own
_STYLE_PROMPTS = {
    "short": (
        "List {k} different short visual descriptions of a {name}, one per "
        "line, each under 15 words and each focusing on a different visible "
        "trait. Output only the numbered list."
    ),
    "long": (
        "List {k} different detailed visual descriptions of a {name}, one per "
        "line, each 2-3 sentences covering shape, texture, and context, each "
        "focusing on a different aspect. Output only the numbered list."
    ),
}


@dataclass
class ExportRequest:
    class_names: list[str]
    k: int = 3
    style: str = "manual"
    encoder: str = "hashed"
    credentials_env: str = "OPENAI_API_KEY"
    cache_dir: Path | None = None
    model: str = field(default_factory=lambda: os.environ.get("EXPORT_LLM_MODEL", "gpt-4o-mini"))
    base_url: str = field(
        default_factory=lambda: os.environ.get("EXPORT_LLM_BASE_URL", "https://api.openai.com/v1")
    )

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.style not in STYLES:
            raise ValidationError(f"style must be one of {STYLES}, got {self.style!r}")
        if not self.class_names:
            raise ValidationError("no class names supplied")
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)


def _cache_key(request: ExportRequest, name: str) -> str:
    raw = f"{request.style}|{request.model}|{request.k}|{name}".encode()
    return hashlib.sha256(raw).hexdigest()


def _cache_path(request: ExportRequest, name: str) -> Path | None:
    if request.cache_dir is None:
        return None
    return request.cache_dir / f"{_cache_key(request, name)}.json"


def _parse_numbered_list(text: str, k: int, name: str) -> list[str]:
    lines = []
    for line in text.splitlines():
        stripped = line.strip().lstrip("-*").strip()
        # drop leading "1." / "2)" enumerators
        head = stripped.split(" ", 1)
        if head and head[0].rstrip(".):").isdigit():
            stripped = head[1].strip() if len(head) > 1 else ""
        if stripped:
            lines.append(stripped)
    if len(lines) < k:
        raise ValidationError(
            f"class '{name}': expected {k} descriptions, parsed {len(lines)} "
            f"from the response"
        )
    return lines[:k]


def _complete(request: ExportRequest, prompt: str, name: str) -> str:
    key = os.environ.get(request.credentials_env, "")
    if not key:
        raise ExportError(
            f"style '{request.style}' needs an API key in ${request.credentials_env} "
            f"(or a warm cache directory)"
        )
    url = f"{request.base_url.rstrip('/')}/chat/completions"
    body = {
        "model": request.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0.0,
    }
    last = None
    for attempt in range(3):
        try:
            resp = requests.post(
                url, json=body, timeout=60,
                headers={"Authorization": f"Bearer {key}"},
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            last = exc
            time.sleep(1.5 * (attempt + 1))
    raise ExportError(f"class '{name}': completion failed after 3 attempts: {last}")


def fetch_descriptions(request: ExportRequest) -> dict[str, list[str]]:
    """k descriptions per class; manual style never needs network or cache."""
    if request.style == "manual":
        return {name: [MANUAL_TEMPLATE.format(name=name)] * request.k
                for name in request.class_names}

    out: dict[str, list[str]] = {}
    for name in request.class_names:
        path = _cache_path(request, name)
        if path is not None and path.exists():
            response = json.loads(path.read_text(encoding="utf-8"))["response"]
        else:
            prompt = _STYLE_PROMPTS[request.style].format(k=request.k, name=name)
            response = _complete(request, prompt, name)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(
                    json.dumps({
                        "class": name,
                        "style": request.style,
                        "model": request.model,
                        "k": request.k,
                        "response": response,
                    }, indent=2),
                    encoding="utf-8",
                )
        out[name] = _parse_numbered_list(response, request.k, name)
    return out
