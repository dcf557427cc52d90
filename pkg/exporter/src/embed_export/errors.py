class ExportError(Exception):
    """Base class for exporter failures."""


class ConfigError(ExportError):
    """Bad flag or configuration value (exit 2)."""


class SchemaError(ExportError):
    """Manifest or prompt-text input violates its schema (exit 3)."""
