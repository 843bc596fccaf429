"""Exception hierarchy shared by every module of the package."""


class MFDynkinError(Exception):
    """Base class for all package errors."""


class ConfigError(MFDynkinError):
    """Invalid input data (grids, intensities, run configs)."""


class InvalidGrid(ConfigError):
    pass


class InvalidIntensity(ConfigError):
    pass


class InvalidParam(ConfigError):
    pass


class SingularRegression(MFDynkinError):
    """Normal equations of a regression are rank deficient."""


class ObstacleCross(MFDynkinError):
    """Lower obstacle exceeds the upper one at an evaluated point."""


class ImplicitDiverge(MFDynkinError):
    """Per-node implicit fixed point did not converge."""


class BackendUnsupported(MFDynkinError):
    pass


class TooLarge(MFDynkinError):
    """Exhaustive enumeration would exceed its cap."""


class NoConvergence(MFDynkinError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class InvalidTerminal(MFDynkinError):
    pass


class EmptySample(MFDynkinError):
    pass


class LengthMismatch(MFDynkinError):
    pass
