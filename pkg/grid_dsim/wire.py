"""Wire format shared by every transport.

Frame layout (all integers big-endian)::

    +--------+---------+----------+------------+-------------+-----------+
    | "DSIM" | version | msg_type | context_id | payload_len | payload   |
    | 4B     | u8 (=1) | u8       | u64        | u32         | JSON text |
    +--------+---------+----------+------------+-------------+-----------+

The payload is canonical JSON (sorted keys, no whitespace).
"""

import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

from .events import SimEvent
from .exception import CodecError
from .sync import MessageKind, SyncMessage
from .typings import ContextId, Json
from .utils import canonical_json

MAGIC = b"DSIM"
VERSION = 1
HEADER = struct.Struct(">4sBBQI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024


class MsgType(IntEnum):
    EVENT = 0x01
    LVT_REQUEST = 0x02
    LVT_RESPONSE = 0x03
    JOB_PLACE = 0x04
    PERF_PUBLISH = 0x05
    REGISTER = 0x06
    HEARTBEAT = 0x07
    RESULT = 0x08
    CONTEXT_CREATE = 0x09
    CONTEXT_DESTROY = 0x0A
    NACK = 0x0B


SYNC_TYPES = {MsgType.EVENT, MsgType.LVT_REQUEST, MsgType.LVT_RESPONSE}


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    context_id: ContextId
    body: Json


def encode_frame(msg_type: MsgType, context_id: ContextId, body: Json) -> bytes:
    payload = canonical_json(body).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise CodecError(f"Payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")

    if not 0 <= context_id < 2**64:
        raise CodecError(f"Context id out of range: {context_id}")

    header = HEADER.pack(MAGIC, VERSION, int(msg_type), context_id, len(payload))
    return header + payload


def parse_header(header: bytes) -> "tuple[MsgType, ContextId, int]":
    if len(header) < HEADER_SIZE:
        raise CodecError(f"Short frame header ({len(header)} bytes)")

    magic, version, msg_type, context_id, length = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise CodecError(f"Bad magic {magic!r}")

    if version != VERSION:
        raise CodecError(f"Unsupported frame version {version}")

    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise CodecError(f"Unknown message type 0x{msg_type:02X}")

    if length > MAX_PAYLOAD:
        raise CodecError(f"Oversize payload ({length} bytes)")

    return kind, context_id, length


def decode_frame(data: bytes) -> Frame:
    msg_type, context_id, length = parse_header(data)
    payload = data[HEADER_SIZE:]
    if len(payload) != length:
        m = f"Payload length mismatch: header says {length}, got {len(payload)}"
        raise CodecError(m)

    return Frame(msg_type, context_id, decode_body(payload))


def decode_body(payload: bytes) -> Json:
    try:
        body = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CodecError(f"Malformed payload: {e}")

    if not isinstance(body, dict):
        raise CodecError("Payload is not a JSON object")

    return body


def read_frame(recv_exactly: Callable[[int], Optional[bytes]]) -> Optional[Frame]:
    """Read one frame from a stream. Returns None on a clean end of stream.

    :param recv_exactly: Returns exactly n bytes, or None if the stream ended.
    """
    header = recv_exactly(HEADER_SIZE)
    if header is None:
        return None

    msg_type, context_id, length = parse_header(header)
    payload = recv_exactly(length) if length else b""
    if payload is None:
        raise CodecError("Stream ended inside a frame")

    return Frame(msg_type, context_id, decode_body(payload))


##################
# Sync messages  #
##################


def sync_to_frame(m: SyncMessage) -> bytes:
    body: Json = {"sender": m.sender, "recipient": m.recipient, "seq": m.channel_seq}
    if m.kind == MessageKind.EVENT:
        assert m.event is not None
        body["event"] = m.event.to_json()
    elif m.kind == MessageKind.LVT_REQUEST:
        body["clock"] = m.requester_clock
        body["threshold"] = m.threshold
    else:
        body["guarantee"] = m.guarantee

    return encode_frame(MsgType(int(m.kind)), m.context_id, body)


def frame_to_sync(frame: Frame) -> SyncMessage:
    if frame.msg_type not in SYNC_TYPES:
        raise CodecError(f"{frame.msg_type.name} is not a synchronization message")

    b = frame.body
    try:
        kind = MessageKind(int(frame.msg_type))
        event = SimEvent.from_json(b["event"]) if kind == MessageKind.EVENT else None
        return SyncMessage(
            kind,
            frame.context_id,
            int(b["sender"]),
            int(b.get("recipient", 0)),
            event=event,
            requester_clock=int(b.get("clock", 0)),
            threshold=int(b.get("threshold", 0)),
            guarantee=int(b.get("guarantee", 0)),
            channel_seq=int(b.get("seq", -1)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CodecError(f"Malformed {frame.msg_type.name} body: {e}")
