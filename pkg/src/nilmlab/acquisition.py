"""Modbus master: polls the meter on its simulated clock and logs to a store."""
from __future__ import annotations

import logging
import socket
import threading
import time

from . import modbus
from .registers import DEFAULT_MAP, RegisterMap, decode_registers
from .samples import Gap
from .store import SampleStore

log = logging.getLogger(__name__)

REQUEST_TIMEOUT_S = 0.5
RETRIES = 3
MAX_BACKOFF_S = 1.0


class MeterUnavailable(ConnectionError):
    pass


class ModbusExceptionReply(Exception):
    def __init__(self, function: int, code: int):
        super().__init__(f"meter answered function {function:#04x} with exception {code:#04x}")
        self.function = function
        self.code = code


class ModbusClient:
    def __init__(self, host: str, port: int, unit_id: int = 1, timeout: float = REQUEST_TIMEOUT_S,
                 regmap: RegisterMap = DEFAULT_MAP):
        self.host = host
        self.port = port
        self.unit_id = unit_id
        self.timeout = timeout
        self.regmap = regmap
        self._sock = None
        self._txid = 0

    def connect(self):
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def read_registers(self, start: int, quantity: int, function: int = modbus.READ_INPUT) -> list[int]:
        self.connect()
        self._txid = (self._txid + 1) & 0xFFFF
        request = modbus.encode_frame(modbus.MbapHeader(self._txid, self.unit_id),
                                      modbus.ReadRequest(function, start, quantity))
        try:
            self._sock.sendall(request)
            raw = modbus.read_frame(self._sock)
        except OSError:
            self.close()
            raise
        if not raw:
            self.close()
            raise ConnectionResetError("meter closed the connection")
        header, pdu = modbus.decode_frame(raw)
        if header.transaction_id != self._txid:
            self.close()
            raise modbus.MalformedPduError(f"reply for transaction {header.transaction_id}, "
                                           f"expected {self._txid}", header)
        if isinstance(pdu, modbus.ExceptionResponse):
            raise ModbusExceptionReply(pdu.function, pdu.code)
        if not isinstance(pdu, modbus.ReadResponse) or len(pdu.values) != quantity:
            raise modbus.MalformedPduError("reply does not match request", header)
        return list(pdu.values)

    def read_samples(self):
        """Return every snapshot the meter holds, oldest first, from one read."""
        start, count = self.regmap.span
        regs = self.read_registers(start, count)
        return tuple(decode_registers(regs, self.regmap, start, lag=lag)
                     for lag in range(self.regmap.depth, -1, -1))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Poller:
    """Keeps one sample per grid instant of the meter's simulated clock.

    The poller learns how fast simulated time runs from consecutive replies
    and sleeps until the next expected instant. Missed instants are written
    as gap markers, never interpolated.
    """

    def __init__(self, client: ModbusClient, store: SampleStore, rate_hz: float = 1.0,
                 retries: int = RETRIES):
        self.client = client
        self.store = store
        self.period_ms = 1000.0 / rate_hz
        self.retries = retries
        self.next_t: int | None = None
        self.last_t: int | None = None
        self._anchor = None  # (wall, sim_ms) of the first reply
        self._speed = None  # simulated ms per wall second
        self._offset = 0.0
        self.failures = 0
        self._resync = False  # set after a failed or dropped read

    def _observe(self, sim_ms: int):
        # A snapshot lags the meter clock by up to one period, so each reply
        # only bounds the clock from below; keep the tightest bound.
        now = time.monotonic()
        if self._anchor is None:
            self._anchor = (now, sim_ms)
            self._offset = float(sim_ms)
            return
        w0, t0 = self._anchor
        if sim_ms > t0 and now - w0 > 0:
            self._speed = (sim_ms - t0) / (now - w0)
        if self._speed:
            self._offset = max(self._offset, sim_ms - (now - w0) * self._speed)

    def estimated_now(self) -> int | None:
        if self._anchor is None or self._speed is None:
            return self.last_t
        return int(self._offset + (time.monotonic() - self._anchor[0]) * self._speed)

    def _read_with_retry(self):
        err = None
        for attempt in range(self.retries + 1):
            try:
                return self.client.read_samples()
            except (OSError, ConnectionError) as exc:
                err = exc
                self.client.close()
                # all retries together stay within about one poll period
                time.sleep(min(0.05 * 2 ** attempt, MAX_BACKOFF_S, self._period_wall() / (self.retries + 1)))
        raise MeterUnavailable(str(err))

    def _period_wall(self) -> float:
        speed = self._speed or 1000.0  # real time until the meter clock is learned
        return self.period_ms / speed

    def _grid(self, t: float) -> int:
        return int(round(t))

    def poll_once(self) -> float:
        """One poll attempt; returns how long to sleep (wall seconds)."""
        try:
            snapshots = self._read_with_retry()
        except MeterUnavailable as exc:
            self.failures += 1
            self._resync = True
            log.warning("meter unavailable: %s", exc)
            return min(0.1 * self.failures, MAX_BACKOFF_S, self._period_wall() / 2)
        except (modbus.DecodeError, ModbusExceptionReply) as exc:
            # drop the sample; the hole shows up as a gap once polling resumes
            log.warning("bad reply dropped: %s", exc)
            self._resync = True
            self.client.close()
            return self._sleep_hint(None)
        self.failures = 0
        sample = snapshots[-1]
        self._observe(sample.t_ms)
        if self.next_t is None:
            self.next_t = sample.t_ms
        if sample.t_ms < self.next_t:
            return self._sleep_hint(sample.t_ms)
        # Ticks missed on a healthy link are still in the meter's history
        # (older snapshots repeat when the history is short, hence the dict).
        # After a failure the history is not trusted: the hole becomes a gap.
        history = (sample,) if self._resync else snapshots
        self._resync = False
        pending = {s.t_ms: s for s in history if self.next_t <= s.t_ms <= sample.t_ms}
        for t in sorted(pending):
            if t > self.next_t:
                log.info("gap %d..%d ms", self.next_t, t)
                self.store.append_gap(Gap(self.next_t, t))
            self.store.append(pending[t])
            self.next_t = self._grid(t + self.period_ms)
        self.last_t = sample.t_ms
        return self._sleep_hint(sample.t_ms)

    def _sleep_hint(self, sim_ms: int | None) -> float:
        if self._speed is None or self._speed <= 0:
            return 0.005
        if sim_ms is None or self.next_t is None:
            return self.period_ms / self._speed / 4
        # the snapshot lags the meter clock by up to one period, so aim from
        # the estimated clock, just past the expected tick
        wait = (self.next_t - self.estimated_now()) / self._speed
        return max(0.001, min(wait + 0.1 * self.period_ms / self._speed,
                              0.5 * self.period_ms / self._speed))

    def close_out(self):
        """Record a trailing outage as a gap up to the estimated meter time."""
        if self.failures and self.next_t is not None:
            now = self.estimated_now()
            if now is not None and now > self.next_t:
                end = self.next_t + int((now - self.next_t) // self.period_ms) * self.period_ms
                if end > self.next_t:
                    self.store.append_gap(Gap(self.next_t, int(end)))


def poll_loop(client: ModbusClient, store: SampleStore, rate_hz: float = 1.0,
              stop: threading.Event | None = None, until_ms: int | None = None,
              give_up_s: float | None = None) -> Poller:
    """Poll until ``stop`` is set, the meter clock passes ``until_ms``, or the
    meter has been unreachable for ``give_up_s`` wall seconds."""
    stop = stop or threading.Event()
    poller = Poller(client, store, rate_hz)
    down_since = None
    try:
        while not stop.is_set():
            pause = poller.poll_once()
            if poller.failures:
                down_since = down_since or time.monotonic()
                if give_up_s is not None and time.monotonic() - down_since > give_up_s:
                    log.warning("giving up after %.1f s without meter", give_up_s)
                    break
            else:
                down_since = None
            if until_ms is not None and poller.last_t is not None and poller.last_t >= until_ms:
                break
            stop.wait(pause)
    finally:
        poller.close_out()
        client.close()
        store.sync()
    return poller
