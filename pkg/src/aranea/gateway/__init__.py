from .config import ConfigError, GatewayConfig, emit_ap_configs
from .dhcp import Lease, LeaseTable, PoolExhausted
from .leak import LeakRecord, LeakReport, leak_audit
from .node import Gateway, LanDevice, ResolverService

__all__ = [
    "ConfigError",
    "Gateway",
    "GatewayConfig",
    "LanDevice",
    "Lease",
    "LeaseTable",
    "LeakRecord",
    "LeakReport",
    "PoolExhausted",
    "ResolverService",
    "emit_ap_configs",
    "leak_audit",
]
