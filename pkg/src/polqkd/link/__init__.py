"""Endpoints, classical-channel wire format, transports and the CLI."""

from .session import SessionAborted, SessionReport, SessionResult, collect_statistics, run_session
from .transport import Tap, check_order
from .wire import LinkMessage, MsgType, frame_decode, frame_encode

__all__ = [
    "LinkMessage",
    "MsgType",
    "SessionAborted",
    "SessionReport",
    "SessionResult",
    "Tap",
    "check_order",
    "collect_statistics",
    "frame_decode",
    "frame_encode",
    "run_session",
]
