class HJBError(Exception):
    pass


class MeshError(HJBError, ValueError):
    pass


class SpaceError(HJBError, ValueError):
    pass


class CordesError(HJBError):
    pass


class FamilyError(HJBError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(HJBError, ValueError):
    pass


class SolverError(HJBError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(SolverError):
    """Raised when an iteration exhausts its budget; `state` holds the last iterate."""

    def __init__(self, message, state=None, diagnostics=None):
        super().__init__(message, diagnostics)
        self.state = state
