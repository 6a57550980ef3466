"""Exception hierarchy shared across the package.

The CLI reports failures by class name, so every error a stage can raise
derives from :class:`MpcNetError`.
"""


class MpcNetError(Exception):
    pass


class DimensionMismatch(MpcNetError, ValueError):
    pass


class SingularMatrix(MpcNetError):
    pass


class DidNotConverge(MpcNetError):
    pass


class NoConvergence(MpcNetError):
    """Raised when a fixed-point iteration hits its cap.

    ``result`` carries the last iterate (possibly ``None``) so callers can
    still inspect a non-certified answer.
    """

    def __init__(self, message, result=None, residual=None):
        super().__init__(message)
        self.result = result
        self.residual = residual


class EmptyPolytope(MpcNetError):
    pass


class UnboundedPolytope(MpcNetError):
    pass


class LinearProgramError(MpcNetError):
    pass


class DegenerateActiveSet(MpcNetError):
    pass


class InfeasibleState(MpcNetError):
    pass


class EmptyChord(MpcNetError):
    pass


class NotInterior(MpcNetError):
    pass


class GenerationStalled(MpcNetError):
    pass


class FormatError(MpcNetError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MetadataMismatch(MpcNetError):
    pass


class InfeasibleProjection(MpcNetError):
    pass


class NonFiniteLoss(MpcNetError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ZeroReference(MpcNetError):
    pass


class ZeroInitialState(MpcNetError):
    pass


class ControllerFailure(MpcNetError):
    pass


class NoFeasibleProposal(MpcNetError):
    pass


class ConfigError(MpcNetError):
    pass
