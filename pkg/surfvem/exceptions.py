from typing import Any, Dict


class SurfVemError(Exception):
    """Base error carrying a structured context for error reports"""

    exit_code: int = 3

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context: Dict[str, Any] = context

    def to_dict(self) -> Dict[str, Any]:
        """Structured form written to error.json"""
        return {
            "error": type(self).__name__,
            "message": str(self),
            "exit_code": self.exit_code,
            "context": {key: _plain(value) for key, value in self.context.items()},
        }


def _plain(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return repr(value)


class ConfigError(SurfVemError):
    """Invalid experiment configuration"""
    exit_code = 2


class ParseError(SurfVemError):
    """Mesh or config file could not be parsed"""
    exit_code = 2


class UnsupportedOrder(SurfVemError):
    """Requested order or rule size outside the supported table"""
    exit_code = 2


class DomainError(SurfVemError):
    """Chart point outside the chart domain or invalid chart parameters"""


class SingularMetricError(SurfVemError):
    """Degenerate parametrization (vanishing tangent vector)"""


class TopologyError(SurfVemError):
    """Mesh violates a topological invariant"""


class GenerationError(SurfVemError):
    """Mesh generator could not produce a valid mesh"""


class GeometryError(SurfVemError):
    """Polygon is not simple"""


class SingularProjector(SurfVemError):
    """Projector system is numerically singular"""


class SolveError(SurfVemError):
    """Linear solve failed or residual too large"""
