"""Domain error types shared across the package.

Every error raised at a module boundary is a subclass of SucodeError so the
CLI can map them onto exit code 1 uniformly.
"""


class SucodeError(Exception):
    pass


class ConfigNotFound(SucodeError):
    pass


class ConfigInvalid(SucodeError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class SampleInvalid(SucodeError):
    pass


class CheckpointCorrupt(SucodeError):
    pass


class CheckpointIncomplete(SucodeError):
    pass


class DatasetWriteError(SucodeError):
    pass


class MaskInvalid(SucodeError):
    pass


class RemapInvalid(SucodeError):
    pass


class AggregateInvalid(SucodeError):
    pass


class ShapeError(SucodeError):
    pass


class LossSpecError(SucodeError):
    pass


class StagePrereqError(SucodeError):
    pass


class TrainingDiverged(SucodeError):
    pass


class EvalEmptyError(SucodeError):
    pass
