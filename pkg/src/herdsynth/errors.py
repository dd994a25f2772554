"""Exception hierarchy shared across pipeline stages."""


class HerdSynthError(Exception):
    pass


class GeometryError(HerdSynthError, ValueError):
    pass


class EmptyMask(GeometryError):
    pass


class SingularTransform(GeometryError):
    pass


class ParseError(HerdSynthError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.message = message
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class RangeError(ParseError):
    pass


class TooFewImages(HerdSynthError, ValueError):
    pass


class BoxOutOfBounds(HerdSynthError, ValueError):
    def __init__(self, index: int, box):
        self.index = index
        self.box = box
        super().__init__(f"box {index} {box} lies outside the image")


class MaskShapeError(HerdSynthError, ValueError):
    pass


class MaskTooSmall(HerdSynthError, ValueError):
    pass


class SegmentationEmpty(HerdSynthError):
    pass


class NoBorderAvailable(HerdSynthError):
    pass


class AngleOutOfRange(HerdSynthError, ValueError):
    pass


class ScheduleError(HerdSynthError, ValueError):
    pass


class TimestepError(HerdSynthError, ValueError):
    pass


class ShapeError(HerdSynthError, ValueError):
    pass


class TrainingDiverged(HerdSynthError, FloatingPointError):
    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:g}, grad_norm={grad_norm:g})"
        )


class SamplingDiverged(HerdSynthError, FloatingPointError):
    def __init__(self, t: int):
        self.t = t
        super().__init__(f"non-finite values in reverse process at t={t}")


class SpriteRejected(HerdSynthError):
    pass


class SceneInfeasible(HerdSynthError):
    pass


class SceneRejected(HerdSynthError):
    pass


class ConfigError(HerdSynthError):
    pass


class MissingStageInput(HerdSynthError):
    pass
