"""Deterministic discrete-event engine, network timing model and traffic logs.

Time is integer milliseconds. Events run in ``(time, insertion order)`` order
and may only schedule at or after the current time. Actors are written as
generators that yield :class:`Future` objects (or an ``int`` number of
milliseconds to sleep) and are resumed with the future's value.
"""
from __future__ import annotations

import hashlib
import heapq
import io
import itertools
import json
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable

MS = 1
SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR


class ScenarioError(Exception):
    """Fatal scenario problem (bad schedule, unknown actor, ...)."""


class ScheduleInPastError(ScenarioError):
    pass


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class Future:
    __slots__ = ("value", "done", "_callbacks")

    def __init__(self) -> None:
        self.value: Any = None
        self.done = False
        self._callbacks: list[Callable[[Any], None]] = []

    def resolve(self, value: Any = None) -> None:
        if self.done:
            raise RuntimeError("future resolved twice")
        self.value = value
        self.done = True
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(value)

    def add_callback(self, cb: Callable[[Any], None]) -> None:
        if self.done:
            cb(self.value)
        else:
            self._callbacks.append(cb)


class Process:
    """Drives a generator; finishes with the generator's return value in ``result``."""

    def __init__(self, sim: "Simulation", gen: Generator, name: str = "") -> None:
        self.sim = sim
        self.gen = gen
        self.name = name
        self.result = Future()
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def _step(self, value: Any = None) -> None:
        while not self.cancelled:
            try:
                yielded = self.gen.send(value)
            except StopIteration as stop:
                self.result.resolve(stop.value)
                return
            if isinstance(yielded, int):
                yielded = self.sim.sleep(yielded)
            if yielded.done:
                value = yielded.value
                continue
            yielded.add_callback(self._step)
            return


class Simulation:
    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.now = 0
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = itertools.count()
        self._streams: dict[str, random.Random] = {}
        self.processed = 0

    def stream(self, name: str) -> random.Random:
        """Named child generator of the root seed; unrelated actors never share a stream."""
        rng = self._streams.get(name)
        if rng is None:
            rng = self._streams[name] = random.Random(derive_seed(self.seed, name))
        return rng

    def call_at(self, time: int, fn: Callable, *args: Any) -> None:
        if time < self.now:
            raise ScheduleInPastError(f"event at {time} ms scheduled from {self.now} ms")
        heapq.heappush(self._queue, (time, next(self._seq), fn, args))

    def call_later(self, delay: int, fn: Callable, *args: Any) -> None:
        self.call_at(self.now + delay, fn, *args)

    def sleep(self, delay: int) -> Future:
        fut = Future()
        self.call_at(self.now + max(0, int(delay)), fut.resolve, None)
        return fut

    def spawn(self, gen: Generator, name: str = "", delay: int = 0) -> Process:
        proc = Process(self, gen, name)
        self.call_later(delay, proc._step, None)
        return proc

    def peek(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                break
            time, _, fn, args = heapq.heappop(q)
            self.now = time
            fn(*args)
            self.processed += 1
            if stop is not None and stop():
                return
        if until is not None and until > self.now:
            self.now = until


# --------------------------------------------------------------------------
# logs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    time: int
    actor: str
    kind: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "actor": self.actor, "kind": self.kind, **self.payload},
                          sort_keys=True, separators=(",", ":"))


class EventTimeline:
    """Simulation log; every reported metric is derivable from it.

    ``detail=False`` drops per-request records (fetches, empty bundles) and
    keeps state changes, which is what long sweeps need.
    """

    PER_REQUEST = frozenset({"fetch", "bundle", "unavailable", "rate-limited"})

    def __init__(self, detail: bool = True) -> None:
        self.detail = detail
        self.events: list[Event] = []

    def record(self, time: int, actor: str, kind: str, **payload: Any) -> None:
        if not self.detail and kind in self.PER_REQUEST:
            return
        self.events.append(Event(time, actor, kind, payload))

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_ndjson(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


@dataclass(frozen=True)
class ChannelEntry:
    time: int
    sender: str
    receiver: str
    kind: str
    payload: Any


class ChannelLog:
    """Append-only record of what crossed the server; the eavesdropper's view.

    Binary export: each record is ``u32 length || record``; a record is five
    ``u32``-length-prefixed fields: time (ASCII ms), sender, receiver, kind,
    payload bytes (envelope wire format or canonical JSON).
    """

    def __init__(self, server_messages: bool = True) -> None:
        self.server_messages = server_messages
        self._entries: list[ChannelEntry] = []

    def append(self, time: int, sender: str, receiver: str, kind: str, payload: Any) -> None:
        if kind != "envelope" and not self.server_messages:
            return
        self._entries.append(ChannelEntry(time, sender, receiver, kind, payload))

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(tuple(self._entries))

    def view(self) -> tuple[ChannelEntry, ...]:
        return tuple(self._entries)

    def envelopes(self, receiver: str | None = None) -> list:
        return [e.payload for e in self._entries
                if e.kind == "envelope" and (receiver is None or e.receiver == receiver)]

    @staticmethod
    def _payload_bytes(entry: ChannelEntry) -> bytes:
        p = entry.payload
        if hasattr(p, "to_bytes"):
            return p.to_bytes()
        if hasattr(p, "to_record"):
            p = p.to_record()
        return json.dumps(p, sort_keys=True, separators=(",", ":"), default=str).encode()

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        for e in self._entries:
            fields = [str(e.time).encode(), e.sender.encode(), e.receiver.encode(), e.kind.encode(),
                      self._payload_bytes(e)]
            record = b"".join(struct.pack(">I", len(f)) + f for f in fields)
            out.write(struct.pack(">I", len(record)) + record)
        return out.getvalue()

    @staticmethod
    def parse(data: bytes) -> list[tuple[int, str, str, str, bytes]]:
        out, pos = [], 0
        while pos < len(data):
            (n,) = struct.unpack_from(">I", data, pos)
            record, pos = data[pos + 4:pos + 4 + n], pos + 4 + n
            fields, rp = [], 0
            while rp < len(record):
                (m,) = struct.unpack_from(">I", record, rp)
                fields.append(record[rp + 4:rp + 4 + m])
                rp += 4 + m
            out.append((int(fields[0]), fields[1].decode(), fields[2].decode(), fields[3].decode(), fields[4]))
        return out


# --------------------------------------------------------------------------
# load and timing
# --------------------------------------------------------------------------

class LoadModel:
    """Per-target request counter over a sliding 1 s window."""

    WINDOW = SECOND

    def __init__(self, soft_rps: float = 50, hard_rps: float = 2000) -> None:
        if not soft_rps < hard_rps:
            raise ValueError("soft overload threshold must be below the hard threshold")
        self.soft_rps = soft_rps
        self.hard_rps = hard_rps
        self._arrivals: dict[Any, deque] = {}

    def record(self, target: Any, now: int) -> int:
        """Count this arrival and return the number of arrivals in ``(now - 1 s, now]``."""
        q = self._arrivals.get(target)
        if q is None:
            q = self._arrivals[target] = deque()
        q.append(now)
        cutoff = now - self.WINDOW
        while q[0] <= cutoff:
            q.popleft()
        return len(q)

    def current(self, target: Any, now: int) -> int:
        q = self._arrivals.get(target, ())
        return sum(1 for t in q if t > now - self.WINDOW)

    def unavailable_probability(self, rate: float) -> float:
        """Linear ramp: 0 at the soft threshold, 1 at the hard threshold."""
        if rate >= self.hard_rps:
            return 1.0
        if rate <= self.soft_rps:
            return 0.0
        return (rate - self.soft_rps) / (self.hard_rps - self.soft_rps)


@dataclass
class NetworkConfig:
    # round-trip times per link class, milliseconds
    rtt_ms: dict[str, int] = field(default_factory=lambda: {"attacker": 50, "wifi": 30, "cellular": 70, "client": 80})
    rtt_jitter: float = 0.0
    rtt_load_slope: float = 0.0
    # per-request server processing time; spans sync depletion of 812 keys
    # from ~49 s (idle) to ~118 s (fully loaded)
    service_min_ms: int = 10
    service_max_ms: int = 95
    background_load: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.background_load <= 1.0:
            raise ValueError("background_load must be in [0, 1]")


class NetworkModel:
    def __init__(self, config: NetworkConfig, rng: random.Random) -> None:
        self.config = config
        self.rng = rng

    def sample_rtt(self, link: str, load_factor: float = 0.0) -> int:
        try:
            base = self.config.rtt_ms[link]
        except KeyError:
            raise ScenarioError(f"unknown link class {link!r}") from None
        rtt = base * (1.0 + self.config.rtt_load_slope * load_factor)
        if self.config.rtt_jitter:
            rtt *= 1.0 + self.config.rtt_jitter * (2.0 * self.rng.random() - 1.0)
        return max(0, round(rtt))

    def sample_service(self, load: float | None = None) -> int:
        load = self.config.background_load if load is None else load
        load = min(max(load, 0.0), 1.0)
        c = self.config
        return round(c.service_min_ms + (c.service_max_ms - c.service_min_ms) * load)


# --------------------------------------------------------------------------
# network frontend
# --------------------------------------------------------------------------

class Network:
    """Carries requests between actors and the prekey server.

    One-way delay is half the sampled RTT in each direction. Requests for the
    same device are served one at a time; rejected requests (overload, rate
    limit) answer immediately without occupying the device's record.
    """

    def __init__(self, sim: Simulation, server, model: NetworkModel,
                 timeline: EventTimeline | None = None, channel: ChannelLog | None = None) -> None:
        self.sim = sim
        self.server = server
        self.model = model
        self.timeline = timeline if timeline is not None else EventTimeline()
        self.channel = channel if channel is not None else ChannelLog()
        self._busy_until: dict[Any, int] = {}
        self._mailboxes: dict[str, Callable[[Any], bool]] = {}
        self._undelivered: dict[str, deque] = {}

    def _served_at(self, target: Any, arrival: int) -> int:
        start = max(arrival, self._busy_until.get(target, 0))
        done = start + self.model.sample_service()
        self._busy_until[target] = done
        return done

    def _respond(self, fut: Future, when: int, value: Any) -> None:
        self.sim.call_at(when, fut.resolve, value)

    def fetch_bundle(self, requester: str, target, link: str = "client") -> Future:
        fut = Future()
        half = self.model.sample_rtt(link) // 2
        self.sim.call_later(half, self._fetch_arrive, requester, target, link, fut)
        return fut

    def _fetch_arrive(self, requester: str, target, link: str, fut: Future) -> None:
        now = self.sim.now
        resp = self.server.fetch_bundle(requester, target, now)
        half = self.model.sample_rtt(link) // 2
        kind = getattr(resp, "kind", "bundle")
        if kind == "bundle":
            done = self._served_at(target, now)
        else:
            done = now
        self.timeline.record(now, requester, "fetch", target=str(target), result=kind)
        self.channel.append(done, "server", requester, kind, resp)
        self._respond(fut, done + half, resp)

    def query_devices(self, requester: str, phone: str, link: str = "client") -> Future:
        fut = Future()
        half = self.model.sample_rtt(link) // 2

        def arrive() -> None:
            ids = self.server.query_devices(requester, phone)
            self._respond(fut, self.sim.now + half, ids)

        self.sim.call_later(half, arrive)
        return fut

    def upload_prekeys(self, device, batch, link: str, signed_prekey=None) -> Future:
        fut = Future()
        half = self.model.sample_rtt(link) // 2

        def arrive() -> None:
            now = self.sim.now
            done = self._served_at(device, now)
            resp = self.server.upload_prekeys(device, batch, now, signed_prekey=signed_prekey)
            self._respond(fut, done + half, resp)

        self.sim.call_later(half, arrive)
        return fut

    def rotate_signed_prekey(self, device, signed_prekey, link: str) -> Future:
        fut = Future()
        half = self.model.sample_rtt(link) // 2

        def arrive() -> None:
            now = self.sim.now
            done = self._served_at(device, now)
            resp = self.server.rotate_signed_prekey(device, signed_prekey, now)
            self._respond(fut, done + half, resp)

        self.sim.call_later(half, arrive)
        return fut

    # ---- store-and-forward message relay ---------------------------------

    def register_mailbox(self, address: str, deliver: Callable[[Any], bool]) -> None:
        """``deliver(item)`` returns False when the recipient is offline."""
        self._mailboxes[address] = deliver
        self._undelivered.setdefault(address, deque())

    def send_envelope(self, sender: str, receiver: str, envelope, link: str = "client") -> None:
        half = self.model.sample_rtt(link) // 2
        self.sim.call_later(half, self._relay, sender, receiver, envelope)

    def _relay(self, sender: str, receiver: str, envelope) -> None:
        self.channel.append(self.sim.now, sender, receiver, "envelope", envelope)
        self._undelivered.setdefault(receiver, deque()).append((sender, envelope))
        self.flush(receiver)

    def flush(self, receiver: str) -> None:
        """Hand queued envelopes to ``receiver`` while it accepts them."""
        q = self._undelivered.get(receiver)
        deliver = self._mailboxes.get(receiver)
        if not q or deliver is None:
            return
        while q:
            sender, env = q[0]
            if not deliver((sender, env)):
                return
            q.popleft()

    def pending_for(self, receiver: str) -> int:
        return len(self._undelivered.get(receiver, ()))
