class ExportError(Exception):
    """Export failed: encoder unavailable, API exhausted retries, or bad shapes."""


class ValidationError(ExportError):
    """A response or payload violates the expected structure."""
