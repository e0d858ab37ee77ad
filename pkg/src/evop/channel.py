"""Broker control-channel messages and the in-process duplex channel.

Frames are UTF-8 JSON objects with a ``type`` discriminator:

    client -> broker   HELLO {model_id} | BYE {session_id} | PING {session_id}
    broker -> client   ASSIGN {session_id, address, epoch}
                       UPDATE {session_id, address, epoch, reason}
                       ERROR {code, detail}
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, fields
from typing import Callable, Union

from evop.errors import ProtocolError


@dataclass(frozen=True)
class Hello:
    model_id: str


@dataclass(frozen=True)
class Bye:
    session_id: str


@dataclass(frozen=True)
class Ping:
    session_id: str


@dataclass(frozen=True)
class Assign:
    session_id: str
    address: str
    epoch: int


@dataclass(frozen=True)
class Update:
    session_id: str
    address: str
    epoch: int
    reason: str


@dataclass(frozen=True)
class Error:
    code: str
    detail: str = ""


Message = Union[Hello, Bye, Ping, Assign, Update, Error]
_TYPES: dict[str, type] = {cls.__name__.upper(): cls for cls in (Hello, Bye, Ping, Assign, Update, Error)}
CLIENT_TO_BROKER = (Hello, Bye, Ping)


def encode(msg: Message) -> str:
    body = {"type": type(msg).__name__.upper(), **asdict(msg)}
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def decode(frame: str | bytes) -> Message:
    if isinstance(frame, bytes):
        try:
            frame = frame.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("frame is not UTF-8") from None
    try:
        body = json.loads(frame)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"frame is not JSON: {exc}") from None
    if not isinstance(body, dict):
        raise ProtocolError("frame must be an object")
    cls = _TYPES.get(body.pop("type", None))
    if cls is None:
        raise ProtocolError("unknown or missing frame type")
    expected = {f.name: f.type for f in fields(cls)}
    required = {f.name for f in fields(cls) if f.default is MISSING}
    missing = required - set(body)
    if missing:
        raise ProtocolError(f"{cls.__name__.upper()} missing {sorted(missing)}")
    extra = set(body) - set(expected)
    if extra:
        raise ProtocolError(f"{cls.__name__.upper()} has unexpected {sorted(extra)}")
    for name, value in body.items():
        want = int if expected[name] == "int" else str
        if isinstance(value, bool) or not isinstance(value, want):
            raise ProtocolError(f"{name} must be {want.__name__}")
    return cls(**body)


class ChannelClosed(ConnectionError):
    pass


class InProcessChannel:
    """Broker-side handle of a duplex channel to one client.

    ``deliver`` receives each encoded broker->client frame.
    """

    def __init__(self, deliver: Callable[[str], None], name: str = ""):
        self._deliver = deliver
        self.name = name
        self.closed = False
        self.sent: list[str] = []

    def send(self, msg: Message) -> None:
        if self.closed:
            raise ChannelClosed(self.name)
        text = encode(msg)
        self.sent.append(text)
        self._deliver(text)

    def close(self) -> None:
        self.closed = True
