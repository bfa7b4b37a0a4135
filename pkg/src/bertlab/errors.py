"""Exception hierarchy shared by all modules, with stable CLI exit codes."""


class BertlabError(Exception):
    """Base class; exit_code is what the CLI returns for this fault class."""

    exit_code = 1


class InputError(BertlabError):
    """Malformed or empty user input (corpora, datasets, dictionaries)."""

    exit_code = 2


class ConfigurationError(BertlabError):
    """Inconsistent configuration: vocab/model mismatch, bad preset, bad CF settings."""

    exit_code = 3


class NumericFault(BertlabError):
    """Non-finite values where finite ones are required (losses, gradients)."""

    exit_code = 4


class DimensionError(BertlabError):
    """Shape mismatch in a tensor operation."""

    exit_code = 4

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class IntegrityError(BertlabError):
    """Corrupt or truncated checkpoint container."""

    exit_code = 5


class ValidationError(BertlabError):
    """Dataset records that violate their schema; carries the offending items."""

    exit_code = 6

    def __init__(self, message: str, items=()):
        self.items = list(items)
        detail = ""
        if self.items:
            listing = "\n".join(f"  - {item}" for item in self.items)
            detail = f" ({len(self.items)} offending items):\n{listing}"
        super().__init__(message + detail)
