"""Meter register map: which PowerSample field lives at which address.

Every entry spans two 16-bit registers, high word first. ``f32`` entries
hold IEEE-754 binary32 values; ``u32`` entries hold unsigned integers.
The default map is this project's convention, not a vendor map; pass a
different ``RegisterMap`` to mimic a real device.

Entries with ``lag=k`` hold the snapshot ``k`` ticks before the current one,
so a master that missed a few ticks can still recover them from one atomic
read of the whole map.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .samples import PowerSample


class IllegalAddressError(Exception):
    """Requested registers are not (fully) covered by the map.
    Served as Modbus exception 0x02."""

    def __init__(self, start: int, quantity: int):
        super().__init__(f"registers {start:#06x}..{start + quantity - 1:#06x} not mapped")
        self.start = start
        self.quantity = quantity


@dataclass(frozen=True)
class RegisterEntry:
    address: int
    field: str
    encoding: str = "f32"
    unit: str = ""
    quantity: int = 2
    lag: int = 0


class RegisterMap:
    def __init__(self, entries):
        entries = sorted(entries, key=lambda e: e.address)
        for e in entries:
            if e.quantity != 2:
                raise ValueError(f"{e.field}: every entry spans exactly 2 registers")
            if e.encoding not in ("f32", "u32"):
                raise ValueError(f"{e.field}: unknown encoding {e.encoding!r}")
        for a, b in zip(entries, entries[1:]):
            if a.address + a.quantity > b.address:
                raise ValueError(f"entries {a.field} and {b.field} overlap")
        self.entries = tuple(entries)
        self._by_address = {e.address: e for e in entries}

    def covers(self, start: int, quantity: int) -> bool:
        covered = set()
        for e in self.entries:
            covered.update(range(e.address, e.address + e.quantity))
        return all(a in covered for a in range(start, start + quantity))

    @property
    def depth(self) -> int:
        return max(e.lag for e in self.entries)

    @property
    def span(self) -> tuple[int, int]:
        """(first address, register count) of the smallest block holding every entry."""
        first = self.entries[0].address
        last = self.entries[-1].address + self.entries[-1].quantity
        return first, last - first


_LAYOUT = (
    ("active_w", "f32", "W"),
    ("reactive_var", "f32", "var"),
    ("voltage_v", "f32", "V"),
    ("current_a", "f32", "A"),
    ("energy_wh", "f32", "Wh"),
    ("t_ms", "u32", "ms"),
)
SNAPSHOT_STRIDE = 2 * len(_LAYOUT)  # registers per snapshot block
HISTORY_DEPTH = 8  # previous snapshots kept after the current one


def history_map(depth: int = HISTORY_DEPTH) -> RegisterMap:
    """Current snapshot at 0x0000, the one ``k`` ticks older at ``k * 0x000C``."""
    return RegisterMap([
        RegisterEntry(lag * SNAPSHOT_STRIDE + 2 * i, f, enc, unit, lag=lag)
        for lag in range(depth + 1)
        for i, (f, enc, unit) in enumerate(_LAYOUT)
    ])


DEFAULT_MAP = history_map()


def float_to_words(value: float) -> tuple[int, int]:
    return struct.unpack(">HH", struct.pack(">f", value))


def words_to_float(hi: int, lo: int) -> float:
    return struct.unpack(">f", struct.pack(">HH", hi, lo))[0]


def encode_registers(sample: PowerSample, regmap: RegisterMap = DEFAULT_MAP,
                     history=()) -> dict[int, int]:
    """Return an address -> register value table for every mapped register.

    ``history`` lists earlier snapshots, newest first. A lag deeper than the
    history repeats the oldest snapshot available.
    """
    chain = [sample, *history]
    table = {}
    for e in regmap.entries:
        src = chain[min(e.lag, len(chain) - 1)]
        value = getattr(src, e.field)
        if e.encoding == "f32":
            hi, lo = float_to_words(value)
        else:
            hi, lo = divmod(int(value) & 0xFFFFFFFF, 0x10000)
        table[e.address] = hi
        table[e.address + 1] = lo
    return table


def read_block(table: dict[int, int], start: int, quantity: int) -> list[int]:
    try:
        return [table[a] for a in range(start, start + quantity)]
    except KeyError:
        raise IllegalAddressError(start, quantity) from None


def decode_registers(registers, regmap: RegisterMap = DEFAULT_MAP, start: int = 0,
                     lag: int = 0) -> PowerSample:
    """Inverse of ``encode_registers`` for a contiguous block beginning at ``start``.

    Fields the block does not cover are left at 0.
    """
    values = {"t_ms": 0, "active_w": 0.0, "reactive_var": 0.0, "voltage_v": 0.0,
              "current_a": 0.0, "energy_wh": 0.0}
    end = start + len(registers)
    for e in regmap.entries:
        if e.lag != lag or e.address < start or e.address + 2 > end:
            continue
        hi, lo = registers[e.address - start], registers[e.address - start + 1]
        if e.encoding == "f32":
            values[e.field] = words_to_float(hi, lo)
        else:
            values[e.field] = (hi << 16) | lo
    return PowerSample(**values)
