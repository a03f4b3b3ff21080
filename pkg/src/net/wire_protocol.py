#!/usr/bin/env python3
"""
Wire Protocol for ScaRR

Self-delimiting frames carrying challenges, partial reports, outputs, alarms
and acknowledgements between prover and verifier. Frame payloads may be
compressed with one of four codecs; the 11-byte header never is.
"""

import bz2
import logging
import lzma
import socket
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple, Union

import zstandard as zstd

from core.errors import CodecError, ConfigError, FormatError, FrameError
from core.measurement_db import ByteReader
from core.prover_engine import NONCE_SIZE, PartialReport, decode_report, encode_report
from core.verifier_engine import Challenge

logger = logging.getLogger(__name__)

MAGIC = b"SCRR"
VERSION = 0x01
HEADER = struct.Struct("<4sBBBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30


class MessageType(IntEnum):
    CHALLENGE = 0x01
    PARTIAL_REPORT = 0x02
    OUTPUT = 0x03
    ALARM = 0x04
    ACK = 0x05


class Codec(IntEnum):
    NONE = 0x00
    ZIP = 0x01
    LZMA = 0x02
    BZ2 = 0x03
    ZSTD = 0x04

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "Codec":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown codec {name!r}; choose from "
                              f"{', '.join(c.label for c in cls)}") from None


@dataclass(frozen=True)
class Output:
    data: bytes = b""


@dataclass(frozen=True)
class Alarm:
    line: str


@dataclass(frozen=True)
class Ack:
    thread_id: int
    index: int


Message = Union[Challenge, PartialReport, Output, Alarm, Ack]


@dataclass(frozen=True)
class Frame:
    """A decoded frame; payload is already decompressed."""
    msg_type: MessageType
    codec: Codec
    payload: bytes


@dataclass(frozen=True)
class CodecMode:
    """Transfer mode: a codec plus the number of measurements per report."""
    codec: Codec
    batch: int

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.batch == 1 and self.codec is not Codec.NONE:
            raise ConfigError("single-measurement mode sends uncompressed frames")

    @property
    def name(self) -> str:
        if self.batch == 1:
            return "single"
        return "batch" if self.codec is Codec.NONE else self.codec.label


def compress(codec: Codec, data: bytes) -> bytes:
    if codec is Codec.NONE:
        return data
    if codec is Codec.ZIP:
        return zlib.compress(data)
    if codec is Codec.LZMA:
        return lzma.compress(data)
    if codec is Codec.BZ2:
        return bz2.compress(data)
    return zstd.ZstdCompressor().compress(data)


def decompress(codec: Codec, data: bytes) -> bytes:
    """Undo compress().

    Raises:
        CodecError: Corrupt or truncated compressed payload
    """
    try:
        if codec is Codec.NONE:
            return data
        if codec is Codec.ZIP:
            return zlib.decompress(data)
        if codec is Codec.LZMA:
            return lzma.decompress(data)
        if codec is Codec.BZ2:
            return bz2.decompress(data)
        return zstd.ZstdDecompressor().decompress(data)
    except (zlib.error, lzma.LZMAError, OSError, ValueError, EOFError, zstd.ZstdError) as e:
        raise CodecError(f"{codec.label} payload does not decompress: {e}") from e


# ---------------------------------------------------------------------------
# Message payloads
# ---------------------------------------------------------------------------

def encode_payload(message: Message) -> Tuple[MessageType, bytes]:
    if isinstance(message, Challenge):
        if len(message.nonce) != NONCE_SIZE:
            raise FrameError(f"challenge nonce must be {NONCE_SIZE} bytes")
        return MessageType.CHALLENGE, message.nonce + struct.pack("<I", len(message.input)) + message.input
    if isinstance(message, PartialReport):
        return MessageType.PARTIAL_REPORT, encode_report(message)
    if isinstance(message, Output):
        return MessageType.OUTPUT, message.data
    if isinstance(message, Alarm):
        return MessageType.ALARM, message.line.encode("utf-8")
    if isinstance(message, Ack):
        return MessageType.ACK, struct.pack("<IQ", message.thread_id, message.index)
    raise FrameError(f"cannot encode {type(message).__name__}")


def decode_payload(msg_type: MessageType, payload: bytes) -> Message:
    """Parse a decompressed payload of the given type.

    Raises:
        FrameError: Payload does not match its message type
    """
    try:
        if msg_type is MessageType.PARTIAL_REPORT:
            return decode_report(payload)
        if msg_type is MessageType.OUTPUT:
            return Output(payload)
        if msg_type is MessageType.ALARM:
            return Alarm(payload.decode("utf-8"))
        reader = ByteReader(payload, FrameError)
        if msg_type is MessageType.CHALLENGE:
            nonce = reader.read(NONCE_SIZE)
            message = Challenge(reader.read(reader.u32()), nonce)
        else:
            message = Ack(reader.u32(), reader.u64())
        reader.expect_end()
        return message
    except FormatError as e:
        raise FrameError(f"malformed {msg_type.name.lower()} payload: {e}") from e
    except UnicodeDecodeError as e:
        raise FrameError(f"alarm payload is not UTF-8: {e}") from e


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def pack_frame(msg_type: MessageType, payload: bytes, codec: Codec = Codec.NONE) -> bytes:
    body = compress(codec, payload)
    return HEADER.pack(MAGIC, VERSION, msg_type, codec, len(body)) + body


def encode_frame(message: Message, codec: Codec = Codec.NONE) -> bytes:
    msg_type, payload = encode_payload(message)
    return pack_frame(msg_type, payload, codec)


def parse_header(header: bytes) -> Tuple[MessageType, Codec, int]:
    """Validate an 11-byte header.

    Raises:
        FrameError: Bad magic, version, type, codec or length
    """
    if len(header) != HEADER_SIZE:
        raise FrameError(f"header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, version, raw_type, raw_codec, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    try:
        msg_type = MessageType(raw_type)
    except ValueError:
        raise FrameError(f"unknown message type 0x{raw_type:02x}") from None
    try:
        codec = Codec(raw_codec)
    except ValueError:
        raise FrameError(f"unknown codec 0x{raw_codec:02x}") from None
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    return msg_type, codec, length


def split_frame(data: bytes) -> Tuple[Frame, bytes]:
    """Take one frame off the front of data; returns (frame, rest)."""
    msg_type, codec, length = parse_header(bytes(data[:HEADER_SIZE]))
    end = HEADER_SIZE + length
    if len(data) < end:
        raise FrameError(f"frame announces {length} payload bytes, {len(data) - HEADER_SIZE} present")
    payload = decompress(codec, bytes(data[HEADER_SIZE:end]))
    return Frame(msg_type, codec, payload), data[end:]


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame."""
    frame, rest = split_frame(data)
    if rest:
        raise FrameError(f"{len(rest)} bytes after frame end")
    return decode_payload(frame.msg_type, frame.payload)


def decode_frames(data: bytes) -> List[Message]:
    """Decode a concatenation of frames."""
    messages = []
    while data:
        frame, data = split_frame(data)
        messages.append(decode_payload(frame.msg_type, frame.payload))
    return messages


# ---------------------------------------------------------------------------
# Socket transport
# ---------------------------------------------------------------------------

def recv_exact(sock: socket.socket, length: int) -> Optional[bytes]:
    """Read exactly length bytes; None if the peer closed first."""
    chunks = []
    got = 0
    while got < length:
        chunk = sock.recv(min(length - got, 1 << 20))
        if not chunk:
            return None
        got += len(chunk)
        chunks.append(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Optional[Frame]:
    """Read one frame from a socket.

    Returns:
        Frame, or None when the peer closed cleanly between frames

    Raises:
        FrameError: Bad header or connection closed mid-frame
        CodecError: Payload does not decompress
    """
    header = recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    msg_type, codec, length = parse_header(header)
    body = recv_exact(sock, length)
    if body is None:
        raise FrameError("peer disconnected in the middle of a frame")
    return Frame(msg_type, codec, decompress(codec, body))


def write_frame(sock: socket.socket, message: Message, codec: Codec = Codec.NONE) -> Tuple[int, int]:
    """Send one message.

    Returns:
        Tuple of (uncompressed frame size, bytes actually sent)
    """
    msg_type, payload = encode_payload(message)
    frame = pack_frame(msg_type, payload, codec)
    sock.sendall(frame)
    return HEADER_SIZE + len(payload), len(frame)
