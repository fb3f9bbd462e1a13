from .node import (
    Circuit,
    CircuitBuildError,
    CircuitState,
    ClientConfig,
    ClientStream,
    OnionClient,
    PathConstraints,
    PathSelectionError,
    ResolveError,
    ResolveTimeout,
    StreamError,
    StreamState,
    is_fresh,
    select_path,
)
from .socks5 import Socks5Session, socks5_serve

__all__ = [
    "Circuit",
    "CircuitBuildError",
    "CircuitState",
    "ClientConfig",
    "ClientStream",
    "OnionClient",
    "PathConstraints",
    "PathSelectionError",
    "ResolveError",
    "ResolveTimeout",
    "Socks5Session",
    "StreamError",
    "StreamState",
    "is_fresh",
    "select_path",
    "socks5_serve",
]
