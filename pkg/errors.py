class WorkbenchError(Exception):
    """Base class for failures the CLI maps to an exit code."""

    exit_code = 3


class InputError(WorkbenchError):
    """Missing, unparseable or inconsistent input files and parameters."""

    exit_code = 2


class InfeasibleError(WorkbenchError):
    """The search found no acceptable design point."""

    exit_code = 1

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


class NumericalError(WorkbenchError):
    exit_code = 3


class InsufficientTrialsError(NumericalError):
    """Too few Monte-Carlo trials survived count-failure exclusion."""

    def __init__(self, surviving: int, required: int = 100):
        super().__init__(
            f"only {surviving} MC trials survived count-failure exclusion (need >= {required}); "
            "improve count-limited yield first (raise w_min or improve processing)"
        )
        self.surviving = surviving
        self.required = required
