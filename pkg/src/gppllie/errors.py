"""Exception types shared across the package."""


class GppError(Exception):
    """Base class for all package errors."""


class DimensionError(GppError, ValueError):
    """Tensor/array shapes are incompatible with the requested operation."""


class ValidationError(GppError, ValueError):
    """A parameter or input value is outside its documented range."""


class ConfigurationError(GppError, ValueError):
    """A configuration object is internally inconsistent."""


class UsageError(GppError):
    """An API or CLI surface was called incorrectly."""


class FormatError(GppError):
    """A serialized artifact (checkpoint, tensor dump, image file) is malformed."""


class ImageIOError(GppError):
    """Image file could not be read or written; message carries the path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class ProviderError(GppError):
    """A perceptual-prior provider failed; carries how many retries were spent."""

    def __init__(self, message, retries=0, context=None):
        detail = f"{message} (retries={retries})"
        if context:
            detail = f"{detail} [{context}]"
        super().__init__(detail)
        self.retries = retries
        self.context = context
