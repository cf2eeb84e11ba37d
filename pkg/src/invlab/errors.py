"""Exception hierarchy shared by all invlab modules."""


class InvlabError(Exception):
    """Base class for every error raised by invlab."""


class InvalidInput(InvlabError, ValueError):
    pass


class LengthMismatch(InvlabError, ValueError):
    pass


class IngestError(InvlabError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class FormatError(InvlabError, ValueError):
    pass


class PolicyError(InvlabError, ValueError):
    pass


class PreprocessError(InvlabError, RuntimeError):
    pass


class SplitError(InvlabError, ValueError):
    pass


class RegistryError(InvlabError, ValueError):
    pass


class LayerError(InvlabError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(InvlabError, ValueError):
    pass


class DataError(InvlabError, ValueError):
    pass


class EvalError(InvlabError, ValueError):
    pass


class SpecError(InvlabError, ValueError):
    pass


class TrainError(InvlabError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class NumericError(InvlabError, ValueError):
    pass


class ShapeError(InvlabError, ValueError):
    pass


class UnsupportedLayer(InvlabError, TypeError):
    pass


class StageError(InvlabError, RuntimeError):
    """A pipeline stage failed; carries the stage name and manifest hash."""

    def __init__(self, stage, manifest_hash, cause):
        super().__init__(f"stage {stage!r} failed (manifest {manifest_hash[:12]}): {cause}")
        self.stage = stage
        self.manifest_hash = manifest_hash
        self.cause = cause
