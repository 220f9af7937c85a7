"""Exception hierarchy shared by all fluidcc modules."""


class FluidError(Exception):
    """Base class for every error raised by fluidcc."""


class TopologyError(FluidError):
    """Invalid network graph: dangling endpoints, duplicate ids, bad circuits."""


class HistoryUnderrun(FluidError):
    """A signal or delay map was evaluated before its retained history."""


class NotYetKnown(FluidError):
    """A forward (noncausal) operator needed values beyond the simulated horizon."""


class SolverError(FluidError):
    """Internal consistency failure while stepping the hybrid system."""


class DegenerateRatio(SolverError):
    """Congested buffer whose inputs vanish on an interval of positive length."""


class ProtocolError(SolverError):
    """A protocol hook returned a negative or non-finite window."""


class ScenarioError(FluidError):
    """Scenario file could not be parsed or failed validation."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if field is not None:
            prefix.append(field)
        super().__init__(f"{': '.join(prefix)}: {message}" if prefix else message)
