"""Exception and warning types shared across the package."""


class LSVError(Exception):
    """Base class for runtime failures inside the engine."""


class ValidationError(LSVError, ValueError):
    """Input failed a precondition check."""


class CertificateUnavailable(LSVError):
    """The small-range condition fails, so no ellipticity certificate exists."""

    def __init__(self, report):
        self.report = report
        super().__init__(
            f"small-range condition fails: min(kappa0, 1)={report.lhs:.6g} "
            f"<= beta_f={report.rhs:.6g}"
        )


class NumericalError(LSVError, ArithmeticError):
    """NaN or overflow detected during time stepping."""


class PicardWarning(RuntimeWarning):
    """Frozen-coefficient iteration hit its cap before reaching tolerance."""
