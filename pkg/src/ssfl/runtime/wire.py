"""Message frames exchanged between the server manager and client managers.

Frame layout, little-endian::

    u16 version | u8 kind | u32 round | u32 sender | u64 payload_len | payload

The payload is a parameter archive (see ``ssl.checkpoint``): the global model for
``BROADCAST_MODEL``, the delta plus metadata for ``CLIENT_UPDATE``; ``SHUTDOWN`` has none.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Optional, Union

from ..fed.core import ClientUpdate
from ..params import ParameterSet
from ..ssl.checkpoint import ArchiveError, decode_archive, encode_archive

WIRE_VERSION = 1
HEADER = struct.Struct("<HBIIQ")
HEADER_SIZE = HEADER.size
SERVER_ID = 0xFFFFFFFF


class FrameError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Kind(enum.IntEnum):
    BROADCAST_MODEL = 1
    CLIENT_UPDATE = 2
    SHUTDOWN = 3


@dataclass
class Message:
    kind: Kind
    round: int
    sender: int
    payload: Union[ParameterSet, ClientUpdate, None] = None
    error: Optional[str] = None          # client-side failure report on CLIENT_UPDATE


def _payload_bytes(msg: Message) -> bytes:
    if msg.kind == Kind.SHUTDOWN:
        return b""
    if msg.kind == Kind.BROADCAST_MODEL:
        if not isinstance(msg.payload, dict):
            raise TypeError("broadcast_model carries a ParameterSet")
        return encode_archive(msg.payload)
    if msg.kind == Kind.CLIENT_UPDATE:
        u = msg.payload
        if msg.error is not None:
            return encode_archive({}, {"error": msg.error})
        if not isinstance(u, ClientUpdate):
            raise TypeError("client_update carries a ClientUpdate")
        loss = None if math.isnan(u.train_loss) else u.train_loss
        meta = {"client_id": u.client_id, "num_samples": u.num_samples, "train_loss": loss}
        return encode_archive(u.delta, meta)
    raise ValueError(f"unknown message kind {msg.kind!r}")


def serialize(msg: Message) -> bytes:
    payload = _payload_bytes(msg)
    return HEADER.pack(WIRE_VERSION, int(msg.kind), msg.round, msg.sender, len(payload)) + payload


def parse_header(buf: bytes) -> tuple[int, Kind, int, int, int]:
    if len(buf) < HEADER_SIZE:
        raise FrameError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
    version, kind, rnd, sender, plen = HEADER.unpack_from(buf, 0)
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported wire version {version}, expected {WIRE_VERSION}", 0)
    try:
        kind = Kind(kind)
    except ValueError:
        raise FrameError(f"unknown message kind {kind}", 2) from None
    return version, kind, rnd, sender, plen


def deserialize(buf: bytes) -> Message:
    _, kind, rnd, sender, plen = parse_header(buf)
    end = HEADER_SIZE + plen
    if len(buf) < end:
        raise FrameError(f"truncated payload: {len(buf) - HEADER_SIZE} of {plen} bytes", len(buf))
    if len(buf) > end:
        raise FrameError(f"{len(buf) - end} trailing bytes after frame", end)
    if kind == Kind.SHUTDOWN:
        if plen:
            raise FrameError("shutdown frame with a payload", HEADER_SIZE)
        return Message(kind, rnd, sender)
    try:
        tensors, meta = decode_archive(bytes(buf[HEADER_SIZE:end]))
    except ArchiveError as exc:
        raise FrameError(str(exc), HEADER_SIZE) from exc
    if kind == Kind.BROADCAST_MODEL:
        return Message(kind, rnd, sender, tensors)
    if "error" in meta:
        return Message(kind, rnd, sender, None, error=meta["error"])
    loss = meta.get("train_loss")
    update = ClientUpdate(meta["client_id"], tensors, meta["num_samples"],
                          float("nan") if loss is None else loss)
    return Message(kind, rnd, sender, update)
