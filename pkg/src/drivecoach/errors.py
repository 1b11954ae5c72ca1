"""Shared exception types mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or unresolvable configuration; exit code 2."""


class UsageError(RuntimeError):
    """API misuse such as stepping a finished episode; exit code 1."""
