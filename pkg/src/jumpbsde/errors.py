"""Exception hierarchy shared by every module."""


class JumpBsdeError(Exception):
    """Base class for all errors raised by the package."""


class InvalidGrid(JumpBsdeError, ValueError):
    pass


class SimulationDiverged(JumpBsdeError, ArithmeticError):
    def __init__(self, path: int, step: int, detail: str = ""):
        self.path = path
        self.step = step
        msg = f"non-finite state on path {path} at step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class SingularVolatility(JumpBsdeError, ArithmeticError):
    pass


class InvalidJumpKernel(JumpBsdeError, ValueError):
    pass


class DegenerateJumpModel(JumpBsdeError, ValueError):
    pass


class DensityOverflow(JumpBsdeError, ArithmeticError):
    pass


class RegressionSingular(JumpBsdeError, ArithmeticError):
    pass


class PicardDiverged(JumpBsdeError, ArithmeticError):
    def __init__(self, history, message: str = "Picard iteration did not converge"):
        self.history = list(history)
        tail = ", ".join(f"{g:.3e}" for g in self.history[-5:])
        super().__init__(f"{message} after {len(self.history)} iterations (last gaps: {tail})")


class InvalidMarket(JumpBsdeError, ValueError):
    pass


class UnsupportedConfiguration(JumpBsdeError, ValueError):
    pass


class InvalidNumeraire(JumpBsdeError, ValueError):
    pass


class ConfigError(JumpBsdeError, ValueError):
    """Aggregated configuration problems; ``problems`` holds one string per issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
