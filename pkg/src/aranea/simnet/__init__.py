from .engine import (
    MSS,
    ContentRecord,
    Link,
    LinkParams,
    Packet,
    SimConnection,
    SimError,
    SimNet,
    SimNode,
    Tap,
)
from .trace import TrafficTrace

__all__ = [
    "MSS",
    "ContentRecord",
    "Link",
    "LinkParams",
    "Packet",
    "SimConnection",
    "SimError",
    "SimNet",
    "SimNode",
    "Tap",
    "TrafficTrace",
]
