"""Datagram transport in two flavours.

``SimRuntime`` + ``SimChannel`` form a deterministic discrete-event network
with an integer microsecond clock. ``RealRuntime`` drives real UDP sockets
from one background thread. Both offer the same surface, so protocol code
never knows which one it is talking through:

* ``runtime.now_us()`` / ``runtime.call_at()`` / ``runtime.wait_for()``
* ``net.open(address, handler)`` -> endpoint with ``send(data, dest)``

Handlers and timers always run on the runtime's own thread of execution
(the caller's thread for the simulator, the loop thread for real sockets),
serialised under the runtime lock.
"""

from __future__ import annotations

import contextlib
import heapq
import itertools
import logging
import random
import selectors
import socket
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field

from .errors import ConfigurationError, StartupError

log = logging.getLogger(__name__)

Address = tuple[str, int]
Handler = Callable[[bytes, Address], None]

# Deliveries sort before timers at the same instant, so a scan scheduled at t
# sees every datagram that arrives at t.
PRIO_DELIVERY = 0
PRIO_TIMER = 1

EPHEMERAL_BASE = 49152


@dataclass(order=True)
class _Event:
    time: int
    priority: int
    seq: int
    fn: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)

    def cancel(self) -> None:
        self.cancelled = True


class SimRuntime:
    """Single-threaded event loop over a simulated microsecond clock."""

    mode = "simulated"

    def __init__(self) -> None:
        self._now = 0
        self._queue: list[_Event] = []
        self._seq = itertools.count()

    @property
    def runtime(self) -> SimRuntime:
        return self

    def now_us(self) -> int:
        return self._now

    def call_at(self, at_us: int, fn: Callable[[], None], *, priority: int = PRIO_TIMER) -> _Event:
        if at_us < self._now:
            raise ValueError(f"cannot schedule in the past ({at_us} < {self._now})")
        ev = _Event(int(at_us), priority, next(self._seq), fn)
        heapq.heappush(self._queue, ev)
        return ev

    def call_later(self, delay_us: int, fn: Callable[[], None], *, priority: int = PRIO_TIMER) -> _Event:
        return self.call_at(self._now + delay_us, fn, priority=priority)

    def step(self) -> bool:
        """Run the next event; False when nothing is scheduled."""
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self._now = ev.time
            ev.fn()
            return True
        return False

    def run_until(self, t_us: int) -> None:
        while self._queue and self._queue[0].time <= t_us:
            self.step()
        self._now = max(self._now, t_us)

    def wait_for(self, predicate: Callable[[], bool], timeout_us: int) -> bool:
        deadline = self._now + timeout_us
        while not predicate():
            while self._queue and self._queue[0].cancelled:
                heapq.heappop(self._queue)
            if not self._queue or self._queue[0].time > deadline:
                self._now = max(self._now, deadline)
                return False
            self.step()
        return True

    def sleep(self, duration_us: int) -> None:
        self.run_until(self._now + duration_us)

    def locked(self) -> contextlib.nullcontext:
        return contextlib.nullcontext()

    def close(self) -> None:
        self._queue.clear()


class SimEndpoint:
    def __init__(self, channel: SimChannel, address: Address, handler: Handler | None, overhead_us: int) -> None:
        self.channel = channel
        self.address = address
        self.handler = handler
        self.overhead_us = overhead_us
        self.closed = False

    def send(self, data: bytes, dest: Address) -> None:
        self.channel._transmit(self, bytes(data), dest)

    def close(self) -> None:
        self.closed = True
        self.channel._endpoints.pop(self.address, None)


class SimChannel:
    """Simulated datagram network with a fixed one-way delay.

    Delivery time is ``send + one_way_delay + U[0, jitter] + server overhead``,
    clamped so that each (sender, receiver) pair stays FIFO. ``overhead_us``
    maps a protocol id to extra latency added to every datagram sent by an
    endpoint opened with that protocol (the emulator's server endpoints).
    """

    def __init__(
        self,
        runtime: SimRuntime | None = None,
        *,
        one_way_delay_us: int = 1000,
        jitter_us: int = 0,
        overhead_us: dict[str, int] | None = None,
        seed: int = 0,
    ) -> None:
        if one_way_delay_us < 0 or jitter_us < 0:
            raise ConfigurationError("delays must be non-negative")
        self.runtime = runtime or SimRuntime()
        self.one_way_delay_us = int(one_way_delay_us)
        self.jitter_us = int(jitter_us)
        self.overhead_us = dict(overhead_us or {})
        self._rng = random.Random(seed)
        self._endpoints: dict[Address, SimEndpoint] = {}
        self._last_delivery: dict[tuple[Address, Address], int] = {}
        self._next_port: dict[str, int] = {}
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def open(self, address: Address, handler: Handler | None = None, *, protocol: str | None = None) -> SimEndpoint:
        host, port = address
        if port == 0:
            port = self._next_port.get(host, EPHEMERAL_BASE)
            while (host, port) in self._endpoints:
                port += 1
            self._next_port[host] = port + 1
        address = (host, port)
        if address in self._endpoints:
            raise StartupError(f"address {host}:{port} already in use")
        ep = SimEndpoint(self, address, handler, self.overhead_us.get(protocol, 0) if protocol else 0)
        self._endpoints[address] = ep
        return ep

    def _transmit(self, src: SimEndpoint, data: bytes, dest: Address) -> None:
        now = self.runtime.now_us()
        delay = self.one_way_delay_us + src.overhead_us
        if self.jitter_us:
            delay += self._rng.randint(0, self.jitter_us)
        key = (src.address, dest)
        at = max(now + delay, self._last_delivery.get(key, 0))
        self._last_delivery[key] = at
        self.sent += 1
        self.runtime.call_at(at, lambda: self._deliver(src.address, dest, data), priority=PRIO_DELIVERY)

    def inject(self, src: Address, dest: Address, data: bytes, at_us: int) -> None:
        """Schedule a datagram outside the FIFO discipline (fault injection)."""
        self.runtime.call_at(at_us, lambda: self._deliver(src, dest, bytes(data)), priority=PRIO_DELIVERY)

    def _deliver(self, src: Address, dest: Address, data: bytes) -> None:
        ep = self._endpoints.get(dest)
        if ep is None or ep.closed or ep.handler is None:
            self.dropped += 1
            return
        self.delivered += 1
        ep.handler(data, src)


class UdpEndpoint:
    def __init__(self, runtime: RealRuntime, sock: socket.socket, handler: Handler | None) -> None:
        self.runtime = runtime
        self.sock = sock
        self.handler = handler
        self.address: Address = sock.getsockname()[:2]
        self.closed = False

    def send(self, data: bytes, dest: Address) -> None:
        try:
            self.sock.sendto(data, dest)
        except OSError as exc:
            log.debug("sendto %s failed: %s", dest, exc)

    def _drain(self) -> None:
        while True:
            try:
                data, src = self.sock.recvfrom(65535)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as exc:
                log.debug("recvfrom failed: %s", exc)
                return
            if self.handler is not None:
                try:
                    self.handler(data, src[:2])
                except Exception:
                    log.exception("datagram handler failed")

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.runtime._unregister(self)


class RealRuntime:
    """Wall-clock runtime: one loop thread owning timers and UDP sockets.

    Callers block in ``wait_for`` on a condition that the loop notifies after
    every batch of handler/timer callbacks.
    """

    mode = "loopback"

    def __init__(self, name: str = "plcbench-loop") -> None:
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        # select() takes float timeouts; epoll/poll round up to whole ms.
        self._selector = selectors.SelectSelector()
        self._timers: list[_Event] = []
        self._seq = itertools.count()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._selector.register(self._wake_r, selectors.EVENT_READ, None)
        self._endpoints: list[UdpEndpoint] = []
        self._closing: list[UdpEndpoint] = []
        self._running = True
        self._thread = threading.Thread(target=self._loop, name=name, daemon=True)
        self._thread.start()

    @property
    def runtime(self) -> RealRuntime:
        return self

    @staticmethod
    def now_us() -> int:
        return time.monotonic_ns() // 1000

    def call_at(self, at_us: int, fn: Callable[[], None], *, priority: int = PRIO_TIMER) -> _Event:
        ev = _Event(int(at_us), priority, next(self._seq), fn)
        with self._lock:
            heapq.heappush(self._timers, ev)
        self._wake()
        return ev

    def call_later(self, delay_us: int, fn: Callable[[], None], *, priority: int = PRIO_TIMER) -> _Event:
        return self.call_at(self.now_us() + delay_us, fn, priority=priority)

    def open(self, address: Address, handler: Handler | None = None, *, protocol: str | None = None) -> UdpEndpoint:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.bind(address)
        except OSError as exc:
            sock.close()
            raise StartupError(f"cannot bind UDP {address[0]}:{address[1]}: {exc}") from exc
        sock.setblocking(False)
        ep = UdpEndpoint(self, sock, handler)
        with self._lock:
            self._endpoints.append(ep)
            self._selector.register(sock, selectors.EVENT_READ, ep)
        self._wake()
        return ep

    def _unregister(self, ep: UdpEndpoint) -> None:
        # The loop may be inside select() on this socket; let it do the close.
        with self._lock:
            if ep in self._endpoints:
                self._endpoints.remove(ep)
            if self._running and threading.current_thread() is not self._thread:
                self._closing.append(ep)
                self._wake()
                return
        self._release(ep)

    def _release(self, ep: UdpEndpoint) -> None:
        try:
            self._selector.unregister(ep.sock)
        except (KeyError, ValueError):
            pass
        ep.sock.close()

    def wait_for(self, predicate: Callable[[], bool], timeout_us: int) -> bool:
        with self._cond:
            return self._cond.wait_for(predicate, timeout_us / 1e6)

    def sleep(self, duration_us: int) -> None:
        time.sleep(duration_us / 1e6)

    def locked(self) -> threading.RLock:
        """The lock serialising handlers; hold it to touch handler-owned state."""
        return self._lock

    def _wake(self) -> None:
        try:
            self._wake_w.send(b"\0")
        except OSError:
            pass

    def _loop(self) -> None:
        while self._running:
            with self._lock:
                for ep in self._closing:
                    self._release(ep)
                self._closing.clear()
                while self._timers and self._timers[0].cancelled:
                    heapq.heappop(self._timers)
                timeout = None
                if self._timers:
                    timeout = max(0.0, (self._timers[0].time - self.now_us()) / 1e6)
            events = self._selector.select(timeout)
            with self._lock:
                for key, _ in events:
                    if key.data is None:
                        try:
                            while self._wake_r.recv(4096):
                                pass
                        except (BlockingIOError, InterruptedError):
                            pass
                    elif not key.data.closed:
                        key.data._drain()
                now = self.now_us()
                while self._timers and self._timers[0].time <= now:
                    ev = heapq.heappop(self._timers)
                    if not ev.cancelled:
                        try:
                            ev.fn()
                        except Exception:  # keep the loop alive for other users
                            log.exception("timer callback failed")
                self._cond.notify_all()

    def close(self) -> None:
        if not self._running:
            return
        self._running = False
        self._wake()
        self._thread.join(timeout=2.0)
        for ep in self._closing + self._endpoints:
            self._release(ep)
        self._closing.clear()
        self._endpoints.clear()
        self._selector.close()
        self._wake_r.close()
        self._wake_w.close()
