"""Modbus TCP codec for the register-read subset a power meter needs.

Only function codes 0x03 (read holding registers) and 0x04 (read input
registers) are understood, plus their exception responses. Everything on
the wire is big-endian. Float values occupy two registers, high word first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

READ_HOLDING = 0x03
READ_INPUT = 0x04
READ_FUNCTIONS = (READ_HOLDING, READ_INPUT)

ILLEGAL_FUNCTION = 0x01
ILLEGAL_ADDRESS = 0x02
ILLEGAL_VALUE = 0x03
DEVICE_FAILURE = 0x04

MAX_QUANTITY = 125
MBAP_SIZE = 7
# length field covers unit id + PDU; largest legal PDU is 253 bytes
MAX_LENGTH = 254


class ModbusError(Exception):
    """Base class for codec failures."""


class EncodeError(ModbusError):
    pass


class DecodeError(ModbusError):
    """Base class for decode failures.

    ``header`` is set whenever the MBAP header itself parsed, so a server
    can still address an exception response to the right transaction.
    """

    def __init__(self, message: str, header: MbapHeader | None = None):
        super().__init__(message)
        self.header = header


class ShortFrameError(DecodeError):
    pass


class ProtocolIdError(DecodeError):
    def __init__(self, protocol_id: int, header: MbapHeader | None = None):
        super().__init__(f"protocol id {protocol_id:#06x} is not 0", header)
        self.protocol_id = protocol_id


class LengthMismatchError(DecodeError):
    pass


class UnknownFunctionError(DecodeError):
    def __init__(self, function: int, header: MbapHeader | None = None):
        super().__init__(f"unknown function code {function:#04x}", header)
        self.function = function


class MalformedPduError(DecodeError):
    """PDU body is inconsistent with its function code."""


class QuantityError(MalformedPduError):
    def __init__(self, quantity: int, header: MbapHeader | None = None, function: int = 0):
        super().__init__(f"quantity {quantity} outside 1..{MAX_QUANTITY}", header)
        self.quantity = quantity
        self.function = function


DECODE_ERRORS = (
    ShortFrameError,
    ProtocolIdError,
    LengthMismatchError,
    UnknownFunctionError,
    MalformedPduError,
    QuantityError,
)


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    unit_id: int = 1
    protocol_id: int = 0
    length: int = 0


@dataclass(frozen=True)
class ReadRequest:
    function: int
    start_address: int
    quantity: int


@dataclass(frozen=True)
class ReadResponse:
    function: int
    values: tuple[int, ...]

    @property
    def byte_count(self) -> int:
        return 2 * len(self.values)


@dataclass(frozen=True)
class ExceptionResponse:
    function: int  # the original (request) function code, without the 0x80 bit
    code: int


Pdu = Union[ReadRequest, ReadResponse, ExceptionResponse]


def _u16(value: int, name: str) -> int:
    if not 0 <= value <= 0xFFFF:
        raise EncodeError(f"{name} {value} does not fit in 16 bits")
    return value


def encode_pdu(pdu: Pdu) -> bytes:
    if isinstance(pdu, ReadRequest):
        if pdu.function not in READ_FUNCTIONS:
            raise EncodeError(f"unsupported function {pdu.function:#04x}")
        if not 1 <= pdu.quantity <= MAX_QUANTITY:
            raise EncodeError(f"quantity {pdu.quantity} outside 1..{MAX_QUANTITY}")
        _u16(pdu.start_address, "start address")
        if pdu.start_address + pdu.quantity > 0x10000:
            raise EncodeError("register range runs past address 0xFFFF")
        return struct.pack(">BHH", pdu.function, pdu.start_address, pdu.quantity)
    if isinstance(pdu, ReadResponse):
        if pdu.function not in READ_FUNCTIONS:
            raise EncodeError(f"unsupported function {pdu.function:#04x}")
        if not 1 <= len(pdu.values) <= MAX_QUANTITY:
            raise EncodeError(f"{len(pdu.values)} registers outside 1..{MAX_QUANTITY}")
        for v in pdu.values:
            _u16(v, "register value")
        return struct.pack(f">BB{len(pdu.values)}H", pdu.function, pdu.byte_count, *pdu.values)
    if isinstance(pdu, ExceptionResponse):
        if not 0 < pdu.function < 0x80:
            raise EncodeError(f"cannot build exception for function {pdu.function:#04x}")
        if not 0 <= pdu.code <= 0xFF:
            raise EncodeError(f"exception code {pdu.code} does not fit in 8 bits")
        return bytes((pdu.function | 0x80, pdu.code))
    raise EncodeError(f"not a PDU: {pdu!r}")


def encode_frame(header: MbapHeader, pdu: Pdu) -> bytes:
    """Serialize one ADU. The header's length field is always recomputed."""
    body = encode_pdu(pdu)
    _u16(header.transaction_id, "transaction id")
    if header.protocol_id != 0:
        raise EncodeError(f"protocol id must be 0, got {header.protocol_id}")
    if not 0 <= header.unit_id <= 0xFF:
        raise EncodeError(f"unit id {header.unit_id} does not fit in 8 bits")
    return struct.pack(">HHHB", header.transaction_id, 0, len(body) + 1, header.unit_id) + body


def decode_header(data: bytes) -> MbapHeader:
    if len(data) < MBAP_SIZE:
        raise ShortFrameError(f"need {MBAP_SIZE} header bytes, got {len(data)}")
    txid, proto, length, unit = struct.unpack_from(">HHHB", data)
    header = MbapHeader(transaction_id=txid, unit_id=unit, protocol_id=proto, length=length)
    if proto != 0:
        raise ProtocolIdError(proto, header)
    if not 2 <= length <= MAX_LENGTH:
        raise LengthMismatchError(f"length field {length} outside 2..{MAX_LENGTH}", header)
    return header


def decode_pdu(body: bytes, header: MbapHeader | None = None) -> Pdu:
    """Decode a PDU. Requests and normal responses are told apart by size:
    a read request is always 5 bytes, a read response always even-sized."""
    if not body:
        raise ShortFrameError("empty PDU", header)
    fc = body[0]
    if fc & 0x80:
        base = fc & 0x7F
        if base not in READ_FUNCTIONS:
            raise UnknownFunctionError(fc, header)
        if len(body) != 2:
            raise MalformedPduError(f"exception PDU must be 2 bytes, got {len(body)}", header)
        return ExceptionResponse(function=base, code=body[1])
    if fc not in READ_FUNCTIONS:
        raise UnknownFunctionError(fc, header)
    if len(body) == 5:
        _, start, qty = struct.unpack(">BHH", body)
        if not 1 <= qty <= MAX_QUANTITY:
            raise QuantityError(qty, header, fc)
        if start + qty > 0x10000:
            raise MalformedPduError("register range runs past address 0xFFFF", header)
        return ReadRequest(function=fc, start_address=start, quantity=qty)
    if len(body) < 2:
        raise ShortFrameError(f"PDU for {fc:#04x} truncated", header)
    byte_count = body[1]
    if byte_count == 0 or byte_count % 2 or byte_count > 2 * MAX_QUANTITY:
        raise MalformedPduError(f"bad byte count {byte_count}", header)
    if len(body) != 2 + byte_count:
        raise MalformedPduError(
            f"byte count {byte_count} disagrees with PDU size {len(body)}", header
        )
    values = struct.unpack(f">{byte_count // 2}H", body[2:])
    return ReadResponse(function=fc, values=values)


def decode_frame(data: bytes) -> tuple[MbapHeader, Pdu]:
    """Parse exactly one ADU. Total over arbitrary input: every failure is a
    ``DecodeError`` subclass."""
    header = decode_header(data)
    expected = MBAP_SIZE - 1 + header.length
    if len(data) < expected:
        raise ShortFrameError(f"frame announces {expected} bytes, got {len(data)}", header)
    if len(data) > expected:
        raise LengthMismatchError(
            f"frame announces {expected} bytes, got {len(data)}", header
        )
    return header, decode_pdu(data[MBAP_SIZE:], header)


def read_frame(sock) -> bytes:
    """Read one ADU from a stream socket. Returns b"" on clean EOF."""
    head = _recv_exact(sock, MBAP_SIZE)
    if not head:
        return b""
    if len(head) < MBAP_SIZE:
        raise ShortFrameError("connection closed inside MBAP header")
    header = decode_header(head)
    rest = _recv_exact(sock, header.length - 1)
    if len(rest) < header.length - 1:
        raise ShortFrameError("connection closed inside PDU", header)
    return head + rest


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)
