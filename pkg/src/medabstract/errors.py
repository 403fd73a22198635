"""Shared exception types. Module-specific errors subclass these so the CLI
can map failures onto distinct exit codes."""


class MedabstractError(Exception):
    """Base class for all package errors."""


class ConfigError(MedabstractError):
    """Bad or missing configuration: unresolvable paths, unknown model ids,
    malformed registry or project files."""


class DataError(MedabstractError):
    """Input data violates a contract: unreadable corpus, invalid gold set,
    insufficient shot pool, prompt budget exceeded."""


class ProviderError(MedabstractError):
    """A completion backend failed."""
