"""promptexport: offline textual-asset exporter for the protofed simulator.

Produces class descriptions (manual template or cached LLM completions) and
token-level prompt embeddings in the simulator's embedding-file schema.
"""

from .descriptions import ExportRequest, fetch_descriptions
from .embedding import (
    HashedEncoder,
    HuggingFaceEncoder,
    build_prompt_texts,
    embed_prompts,
    make_encoder,
    validate_payload,
    write_embedding_file,
)
from .errors import ExportError, ValidationError

__version__ = "0.1.0"
