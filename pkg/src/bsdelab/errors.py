"""Exception types shared across the package."""


class BsdeLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BsdeLabError):
    """Invalid grid, batch or scenario configuration."""


class NumericalOverflowError(BsdeLabError):
    """Non-finite values encountered; message names the offending scenario/step."""


class IllPosedScenarioError(BsdeLabError):
    """Weighted norm of the data is not finite; the scenario is outside the theory."""


class CoreDomainError(BsdeLabError):
    """A density candidate leaves the admissible ball |q| <= nu."""


class DegenerateBasisError(BsdeLabError):
    """Regression design matrix produced non-finite coefficients."""


class DivergenceError(BsdeLabError):
    """Backward pass produced non-finite values; message carries the step index."""


class DegenerateInputError(BsdeLabError):
    """Operation called with inputs that make it ill-defined (e.g. V1 == V2)."""


class FDNonConvergenceError(BsdeLabError):
    """Nonlinear sweep of a finite-difference solver failed to converge."""


class DiscretizationError(BsdeLabError):
    """Finite-difference linear system is singular or inconsistent."""


class UsageError(BsdeLabError):
    """CLI/config usage error; maps to exit code 64."""
