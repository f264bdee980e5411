"""Protocol state machines for the control center, gateway, meters and user devices."""
from .common import AlarmKind, Identities, MeterSession, ProtocolError, Schedule, TimeRef, Timeouts
from .control import ControlCenter, ControlEnclave
from .gateway import Gateway, GatewayEnclave, GridConfig
from .meter import SmartMeter, UserDevice

__all__ = [
    "AlarmKind",
    "ControlCenter",
    "ControlEnclave",
    "Gateway",
    "GatewayEnclave",
    "GridConfig",
    "Identities",
    "MeterSession",
    "ProtocolError",
    "Schedule",
    "SmartMeter",
    "TimeRef",
    "Timeouts",
    "UserDevice",
]
