"""Exception types raised across the package."""


class WDNFaultError(Exception):
    """Base class for all package errors."""


class NetworkError(WDNFaultError, ValueError):
    """Invalid network definition."""


class UnknownPipe(NetworkError, KeyError):
    pass


class Disconnected(WDNFaultError):
    """A junction has no open path to any reservoir."""

    def __init__(self, nodes, step=None):
        self.nodes = list(nodes)
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"junctions cut off from every reservoir{where}: {self.nodes}")


class NonConvergence(WDNFaultError):
    def __init__(self, iterations, residual, step=None):
        self.iterations = iterations
        self.residual = residual
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"hydraulic solve did not converge in {iterations} iterations "
            f"(residual {residual:.3e}){where}"
        )


class ScenarioError(WDNFaultError, ValueError):
    pass


class SeriesTooShort(WDNFaultError, ValueError):
    pass


class NaNLoss(WDNFaultError, FloatingPointError):
    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


class EmptyTrainingSet(WDNFaultError, ValueError):
    pass


class EmptySample(WDNFaultError, ValueError):
    pass


class BufferNotFull(WDNFaultError, ValueError):
    pass


class ConfigError(WDNFaultError, ValueError):
    pass
