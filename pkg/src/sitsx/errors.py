"""Exception types raised across the package.

The CLI maps the three base classes onto process exit codes
(``ConfigError`` -> 2, ``DataError`` -> 3, ``DivergenceError`` -> 4).
"""


class SitsxError(Exception):
    """Base class for every error raised by sitsx."""


class ConfigError(SitsxError, ValueError):
    pass


class DataError(SitsxError, ValueError):
    pass


class DivergenceError(SitsxError, RuntimeError):
    pass


# objectives / model
class ZeroNormEmbedding(DivergenceError):
    """An embedding with (near) zero norm reached the cosine distance."""


class SeriesTooShort(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyBatch(DataError):
    pass


class NonFiniteActivation(DivergenceError):
    pass


class NonFiniteLoss(DivergenceError):
    pass


class MissingPosterior(ConfigError):
    pass


class CheckpointMismatch(ConfigError):
    pass


# synthgen / ingest
class DegenerateMask(ConfigError):
    pass


class CorpusTooSmall(DataError):
    pass


class EmptyClass(DataError):
    pass


class UnreadableImage(DataError):
    pass


class SceneTooSmall(DataError):
    pass


class TooFewPatches(DataError):
    pass


class DataMissing(DataError):
    pass


class TestSplitAccess(DataError):
    """Raised when the test split is read while the access audit forbids it."""


# detection / baselines
class DegenerateLabels(DataError):
    pass


class EmptyList(DataError):
    pass
