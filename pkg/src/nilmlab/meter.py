"""Virtual smart meter: a simulated household behind a Modbus TCP slave.

Simulated time follows a wall clock scaled by ``accel``. Meter state moves
forward on a background tick at the sample rate and lazily on every read;
requests never change what the meter would report at a given instant.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import modbus
from .registers import DEFAULT_MAP, IllegalAddressError, RegisterMap, encode_registers, read_block
from .samples import PowerSample
from .sim import Household, Scenario, TruthEvent

log = logging.getLogger(__name__)

DEFAULT_PORT = 1502


class MeterClock:
    def __init__(self, accel: float = 1.0, origin_ms: int = 0, start: float | None = None):
        if accel < 1:
            raise ValueError("acceleration must be >= 1")
        self.accel = accel
        self.origin_ms = origin_ms
        self.start = time.monotonic() if start is None else start

    def now_ms(self) -> int:
        return self.origin_ms + int((time.monotonic() - self.start) * self.accel * 1000)

    def wall_delay(self, sim_ms: float) -> float:
        return sim_ms / 1000.0 / self.accel


@dataclass(frozen=True)
class MeterState:
    sample: PowerSample | None
    cursor: int  # number of samples consumed from the source
    registers: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def energy_wh(self) -> float:
        return 0.0 if self.sample is None else self.sample.energy_wh


class ScenarioSource:
    """Feeds a simulated household to the meter one sample at a time."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.house = Household(scenario)
        self.truth: list[TruthEvent] = []

    @property
    def period_ms(self) -> float:
        return self.scenario.period_ms

    def peek_time(self) -> int | None:
        if self.house.done:
            return None
        return self.scenario.sample_time_ms(self.house.index)

    def next(self) -> tuple[int, float, PowerSample | None]:
        frame = self.house.step()
        self.truth.extend(frame.events)
        return frame.t_ms, frame.aggregate, None


class ReplaySource:
    """Feeds a recorded series back; stored fields are served verbatim."""

    def __init__(self, samples, period_ms: float = 1000.0):
        self.samples = list(samples)
        self.period_ms = period_ms
        self._i = 0
        self.truth: list[TruthEvent] = []

    def peek_time(self) -> int | None:
        return self.samples[self._i].t_ms if self._i < len(self.samples) else None

    def next(self):
        s = self.samples[self._i]
        self._i += 1
        return s.t_ms, s.active_w, s


class VirtualMeter:
    """Owns the source and the energy integral. ``advance`` is the only writer;
    readers take ``state`` (an immutable snapshot) without locking."""

    def __init__(self, source, regmap: RegisterMap = DEFAULT_MAP):
        self.source = source
        self.regmap = regmap
        self._lock = threading.Lock()
        self._energy_j = 0.0
        self._prev: tuple[int, float] | None = None
        self._history = deque(maxlen=regmap.depth)  # earlier samples, newest first
        self.state = MeterState(None, 0)

    @property
    def finished(self) -> bool:
        return self.source.peek_time() is None

    def advance(self, to_ms: int) -> MeterState:
        """Consume every source sample with timestamp <= ``to_ms``."""
        with self._lock:
            state = self.state
            while True:
                t_next = self.source.peek_time()
                if t_next is None or t_next > to_ms:
                    break
                t, power, stored = self.source.next()
                if self._prev is not None:
                    t0, p0 = self._prev
                    # trapezoid in joules; exact for piecewise-constant integer loads
                    self._energy_j += (p0 + power) / 2.0 * ((t - t0) / 1000.0)
                self._prev = (t, power)
                if stored is not None:
                    sample = stored
                else:
                    sample = PowerSample.from_active(t, power, self._energy_j / 3600.0)
                if state.sample is not None:
                    self._history.appendleft(state.sample)
                registers = encode_registers(sample, self.regmap, self._history)
                state = MeterState(sample, state.cursor + 1, registers)
            self.state = state
            return state


def _exception(header, function, code) -> bytes:
    return modbus.encode_frame(modbus.MbapHeader(header.transaction_id, header.unit_id),
                               modbus.ExceptionResponse(function, code))


def handle_request(frame: bytes, state: MeterState) -> bytes | None:
    """Answer one request frame from a snapshot. ``None`` means the frame is
    unanswerable (bad MBAP header) and the connection should be dropped."""
    try:
        header, pdu = modbus.decode_frame(frame)
    except modbus.UnknownFunctionError as exc:
        if exc.header is None or exc.function & 0x80:
            return None
        return _exception(exc.header, exc.function, modbus.ILLEGAL_FUNCTION)
    except modbus.QuantityError as exc:
        return _exception(exc.header, exc.function, modbus.ILLEGAL_VALUE)
    except modbus.MalformedPduError as exc:
        body = frame[modbus.MBAP_SIZE:]
        if exc.header is None or not body or body[0] & 0x80:
            return None
        return _exception(exc.header, body[0], modbus.ILLEGAL_VALUE)
    except modbus.DecodeError:
        return None
    reply = modbus.MbapHeader(header.transaction_id, header.unit_id)
    if not isinstance(pdu, modbus.ReadRequest):
        return _exception(header, pdu.function, modbus.ILLEGAL_FUNCTION)
    if state.sample is None:
        return _exception(header, pdu.function, modbus.DEVICE_FAILURE)
    try:
        values = read_block(state.registers, pdu.start_address, pdu.quantity)
    except IllegalAddressError:
        return _exception(header, pdu.function, modbus.ILLEGAL_ADDRESS)
    return modbus.encode_frame(reply, modbus.ReadResponse(pdu.function, tuple(values)))


class _Handler(socketserver.BaseRequestHandler):
    def setup(self):
        self.server.track(self.request, add=True)

    def finish(self):
        self.server.track(self.request, add=False)

    def handle(self):
        peer = self.client_address
        service = self.server.service
        while True:
            try:
                frame = modbus.read_frame(self.request)
            except modbus.DecodeError as exc:
                log.info("dropping %s: %s", peer, exc)
                return
            except OSError as exc:
                log.info("client %s disconnected: %s", peer, exc)
                return
            if not frame:
                log.debug("client %s closed", peer)
                return
            state = service.read()
            reply = handle_request(frame, state)
            if reply is None:
                log.info("dropping %s: unanswerable frame %s", peer, frame[:16].hex())
                return
            try:
                self.request.sendall(reply)
            except OSError as exc:
                log.info("client %s disconnected: %s", peer, exc)
                return


class ModbusTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, service: "MeterService"):
        self.service = service
        self._conns = set()
        self._conns_lock = threading.Lock()
        super().__init__(address, _Handler)

    def track(self, sock, add: bool):
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(sock)

    def close_connections(self):
        with self._conns_lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class MeterService:
    """Clock-driven meter plus its network listener.

    ``start()`` runs everything on background threads; ``wait()`` blocks until
    the scenario is over (with ``exit_at_end``) or ``stop()`` is called.
    """

    def __init__(self, meter: VirtualMeter, clock: MeterClock, bind=("127.0.0.1", DEFAULT_PORT),
                 exit_at_end: bool = False, linger_s: float = 1.0):
        self.meter = meter
        self.clock = clock
        self.bind = bind
        self.exit_at_end = exit_at_end
        self.linger_s = linger_s
        self.stopped = threading.Event()
        self.server: ModbusTCPServer | None = None
        self._threads = []

    @property
    def address(self):
        return self.server.server_address

    def read(self) -> MeterState:
        self.meter.advance(self.clock.now_ms())
        return self.meter.state

    def _tick(self):
        period = self.clock.wall_delay(self.meter.source.period_ms)
        ended_at = None
        while not self.stopped.wait(period):
            self.meter.advance(self.clock.now_ms())
            if self.meter.finished and self.exit_at_end:
                ended_at = ended_at or time.monotonic()
                if time.monotonic() - ended_at >= self.linger_s:
                    log.info("scenario finished, shutting down")
                    self.stopped.set()
        self._stop_listener()

    def start_listener(self):
        try:
            self.server = ModbusTCPServer(self.bind, self)
        except OSError as exc:
            raise MeterStartupError(f"cannot bind {self.bind[0]}:{self.bind[1]}: {exc}") from exc
        t = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05},
                             name="modbus-listener", daemon=True)
        t.start()
        self._threads.append(t)
        log.info("meter listening on %s:%s", *self.server.server_address[:2])

    def _stop_listener(self):
        if self.server is not None:
            self.server.shutdown()
            self.server.close_connections()
            self.server.server_close()
            self.server = None

    def kill_listener(self):
        """Simulate a network outage: drop the listener and all clients while
        the meter keeps running."""
        self.bind = self.server.server_address[:2]
        self._stop_listener()

    def start(self) -> "MeterService":
        self.start_listener()
        self.meter.advance(self.clock.now_ms())
        t = threading.Thread(target=self._tick, name="meter-tick", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self):
        self.stopped.set()
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=5)

    def wait(self, timeout: float | None = None) -> bool:
        return self.stopped.wait(timeout)


class MeterStartupError(RuntimeError):
    pass


def serve(scenario: Scenario, bind=("127.0.0.1", DEFAULT_PORT), accel: float = 1.0,
          exit_at_end: bool = False, truth_out=None, stop: threading.Event | None = None,
          on_ready=None):
    """Run a virtual meter until the scenario ends (``exit_at_end``) or ``stop``
    is set. Returns the ground-truth events observed while serving."""
    from .files import atomic_write_lines
    from .sim import truth_lines

    source = ScenarioSource(scenario)
    service = MeterService(VirtualMeter(source), MeterClock(accel), bind, exit_at_end)
    service.start()
    if on_ready:
        on_ready(service)
    try:
        while not service.wait(0.2):
            if stop is not None and stop.is_set():
                break
    finally:
        service.stop()
        if truth_out is not None:
            atomic_write_lines(truth_out, truth_lines(source.truth))
    return source.truth
