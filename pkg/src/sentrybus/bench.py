"""Latency and throughput measurement, timed entirely on the publisher.

Latency: send a fresh random payload on topic1, wait for the identical bytes
on topic2, and report half the round trip.

Throughput: bracket ``d`` payloads between START and DONE control messages,
sleeping a cooling-off period after each send.  The counter responder
replies with how many it saw (rPKT) and the publisher reports
rPKT * size * 8 / clock.
"""
from __future__ import annotations

import enum
import gc
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from .crypto_core import HmacDrbg
from .pubsub import NotConnected, Participant, PayloadTooLarge, SecurityProfile

log = logging.getLogger(__name__)

START = b"START"
DONE = b"DONE"
MIN_PAYLOAD = 16
MAX_PAYLOAD = 12000
DEFAULT_TOPIC1 = "sentrybus/bench/out"
DEFAULT_TOPIC2 = "sentrybus/bench/back"


class BenchError(Exception):
    pass


class PeerUnavailable(BenchError):
    pass


class ResultTimeout(BenchError):
    pass


class ZeroElapsed(BenchError, ValueError):
    pass


class Metric(enum.Enum):
    LATENCY = "latency"
    THROUGHPUT = "throughput"


@dataclass(frozen=True)
class BenchConfig:
    profile: SecurityProfile
    payload_sizes: tuple[int, ...] = (16, 1024, 12000)
    latency_repetitions: int = 1000
    throughput_packets: int = 100
    throughput_repetitions: int = 100
    cooling_off: float = 0.001
    guard_sleep: float = 0.1
    topic1: str = DEFAULT_TOPIC1
    topic2: str = DEFAULT_TOPIC2
    timeout: float = 0.25
    result_timeout: float = 2.0
    max_attempts: int = 3

    def __post_init__(self):
        object.__setattr__(self, "payload_sizes", tuple(self.payload_sizes))
        for size in self.payload_sizes:
            if not MIN_PAYLOAD <= size <= MAX_PAYLOAD:
                raise ValueError(f"payload size {size} outside [{MIN_PAYLOAD}, {MAX_PAYLOAD}]")
        if self.cooling_off <= 0:
            raise ValueError("cooling-off period must be positive")
        if self.latency_repetitions < 1 or self.throughput_repetitions < 1 or self.throughput_packets < 1:
            raise ValueError("repetition and packet counts must be positive")
        if self.timeout <= 0 or self.result_timeout <= 0 or self.guard_sleep < 0:
            raise ValueError("timeouts must be positive")


@dataclass(frozen=True)
class BenchRecord:
    """One latency round trip or one throughput test.

    ``value`` is microseconds for latency and bits per second for
    throughput; it is None for a dropped latency repetition.
    """

    profile: str
    payload_size: int
    metric: Metric
    value: Optional[float]
    packets_sent: int
    packets_received: int
    repetition_index: int
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if not 0 <= self.packets_received <= self.packets_sent:
            raise ValueError("packets_received must lie in [0, packets_sent]")
        if self.value is not None and self.value < 0:
            raise ValueError("value must be non-negative")

    @property
    def dropped(self) -> bool:
        return self.value is None


def estimate_latency(t1_ns: int, t2_ns: int) -> float:
    """Half the round trip, in microseconds, from two nanosecond timestamps."""
    return (t2_ns - t1_ns) / 2000


def calculate_bps(size: int, received: int, elapsed: float) -> float:
    """Bits per second for ``received`` packets of ``size`` bytes over ``elapsed`` seconds."""
    if elapsed <= 0:
        raise ZeroElapsed("elapsed time must be positive")
    return received * size * 8 / elapsed


@contextmanager
def _gc_paused():
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


# ---------------------------------------------------------------- latency


def latency_publisher(
    cfg: BenchConfig, p: Participant, drbg: Optional[HmacDrbg] = None, sizes: Optional[list[int]] = None
) -> list[BenchRecord]:
    drbg = drbg or HmacDrbg()
    state = {"expect": None, "t2": None, "stale": 0}

    def on_echo(payload: bytes) -> None:
        if payload == state["expect"]:
            state["t2"] = time.perf_counter_ns()
            state["expect"] = None
        else:
            state["stale"] += 1

    records = []
    p.subscribe(cfg.topic2, on_echo)
    try:
        with _gc_paused():
            for size in sizes or cfg.payload_sizes:
                batch = []
                for rep in range(cfg.latency_repetitions):
                    payload = drbg.generate(size)
                    state["expect"], state["t2"] = payload, None
                    t1 = time.perf_counter_ns()
                    p.publish(cfg.topic1, payload)
                    if p.wait_for(lambda: state["t2"] is not None, cfg.timeout):
                        value, received = estimate_latency(t1, state["t2"]), 1
                    else:
                        state["expect"] = None
                        value, received = None, 0
                    batch.append(BenchRecord(cfg.profile.label, size, Metric.LATENCY, value, 1, received, rep))
                if all(r.dropped for r in batch):
                    raise PeerUnavailable(f"no echoes for {size}-byte payloads")
                records += batch
    finally:
        p.unsubscribe(cfg.topic2)
    if state["stale"]:
        log.info("ignored %d late or mismatched echoes", state["stale"])
    return records


def latency_responder(p: Participant, topic1: str, topic2: str, *, block: bool = True) -> None:
    """Echo every payload on topic1 back to its sender on topic2."""

    def echo(payload: bytes) -> None:
        try:
            p.publish(topic2, payload, to=p.current_sender)
        except (NotConnected, PayloadTooLarge, OSError) as exc:
            log.debug("echo dropped: %s", exc)

    p.subscribe(topic1, echo)
    if block:
        p.run_receive_loop()


# ---------------------------------------------------------------- throughput


def throughput_publisher(
    cfg: BenchConfig, p: Participant, drbg: Optional[HmacDrbg] = None, sizes: Optional[list[int]] = None
) -> list[BenchRecord]:
    drbg = drbg or HmacDrbg()
    state: dict = {"count": None}

    def on_result(payload: bytes) -> None:
        try:
            state["count"] = int(payload.decode("ascii"))
        except ValueError:
            log.debug("ignoring malformed rPKT reply %r", payload[:32])

    d = cfg.throughput_packets
    records = []
    p.subscribe(cfg.topic2, on_result)
    try:
        for size in sizes or cfg.payload_sizes:
            for rep in range(cfg.throughput_repetitions):
                for attempt in range(cfg.max_attempts):
                    msg = drbg.generate(size)
                    with _gc_paused():
                        p.publish(cfg.topic1, START)
                        time.sleep(cfg.guard_sleep)
                        start = time.perf_counter_ns()
                        for _ in range(d):
                            p.publish(cfg.topic1, msg)
                            time.sleep(cfg.cooling_off)
                        clock = (time.perf_counter_ns() - start) / 1e9
                    time.sleep(cfg.guard_sleep)
                    state["count"] = None
                    p.publish(cfg.topic1, DONE)
                    if p.wait_for(lambda: state["count"] is not None, cfg.result_timeout) and state["count"] <= d:
                        rpkt = state["count"]
                        break
                    log.info("no usable rPKT for size %d rep %d (attempt %d)", size, rep, attempt + 1)
                else:
                    raise ResultTimeout(f"no rPKT reply after {cfg.max_attempts} attempts")
                value = calculate_bps(size, rpkt, clock)
                records.append(BenchRecord(cfg.profile.label, size, Metric.THROUGHPUT, value, d, rpkt, rep))
    finally:
        p.unsubscribe(cfg.topic2)
    return records


class CounterState:
    def __init__(self):
        self.rpkt = 0
        self.reports: list[int] = []


def throughput_responder(p: Participant, topic1: str, topic2: str, *, block: bool = True) -> CounterState:
    """Count payloads between START and DONE; answer DONE with the count on topic2."""
    state = CounterState()

    def count(payload: bytes) -> None:
        if payload == START:
            state.rpkt = 0
        elif payload == DONE:
            state.reports.append(state.rpkt)
            try:
                p.publish(topic2, str(state.rpkt).encode("ascii"), to=p.current_sender)
            except (NotConnected, OSError) as exc:
                log.debug("rPKT reply dropped: %s", exc)
            state.rpkt = 0
        else:
            state.rpkt += 1

    p.subscribe(topic1, count)
    if block:
        p.run_receive_loop()
    return state
