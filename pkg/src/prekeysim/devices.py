"""Behavioural models of official clients and of honest session initiators.

A :class:`Device` is a single-threaded actor: it reacts to low-watermark
notifications with a refill after a state-dependent delay, rotates its
signed prekey on a schedule, answers initial messages and can reply inside a
session. It only talks to the server and the message relay through the
world's :class:`~prekeysim.simnet.Network`.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .crypto import (
    AuthenticationError,
    CryptoError,
    IdentityKeyPair,
    OneTimePrekeyPair,
    SessionState,
    StaleBundleError,
    decrypt,
    encrypt_next,
    generate_signed_prekey,
    one_time_prekey_from_secret,
    x25519_public,
    x3dh_initiate,
    x3dh_respond,
)
from .server import (
    InitialUpload,
    Jid,
    OneTimeKey,
    SignedPrekeyRecord,
    hashed_key_id,
)
from .simnet import DAY, HOUR, MINUTE, SECOND, Future

if TYPE_CHECKING:  # pragma: no cover
    from .world import World

ID_SPACE = 0xFFFFFF           # key ids live in 24 bits
RANDOM_ID_FLOOR = 0x10000     # random initialisation never lands on a small counter value
REFILL_RETRY_MS = 5 * SECOND
BYTES_PER_KEY = 41            # 32-byte public + 3-byte id + per-key framing
BATTERY_PERCENT_PER_HOUR = 2.0


class OsKind(str, Enum):
    ANDROID = "Android"
    IPHONE = "iPhone"
    WEB = "Web"
    MAC = "DesktopMac"
    WINDOWS = "DesktopWindows"


POWER_STATES = ("standby", "screen-on", "offline")
LINKS = ("wifi", "cellular")


def cell_name(power: str, link: str) -> str:
    return f"{power}-{link}"


def parse_state(text: str) -> tuple[str, str]:
    """``"standby-wifi"`` / ``"screen-on-4g"`` -> ``(power, link)``."""
    text = text.strip().lower()
    for power in ("standby", "screen-on"):
        if text.startswith(power + "-"):
            link = text[len(power) + 1:]
            link = {"4g": "cellular", "lte": "cellular"}.get(link, link)
            if link in LINKS:
                return power, link
    raise ValueError(f"unknown device state {text!r}; expected e.g. standby-wifi or screen-on-cellular")


# ---- catalog ----------------------------------------------------------------

class DeviceProfile(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = ""
    os_kind: OsKind
    registration_init: Literal["random", "randomMasked"]
    signed_pk_id_init: Literal["0", "1", "random"]
    otpk_id_init: Literal["1", "random"]
    initial_batch: int = Field(gt=0)
    refill_batch: int = Field(812, gt=0)
    refill_trigger: int = Field(10, ge=0)
    id_skip_per_refill: int = Field(0, ge=0)
    companion: bool


class LatencyCell(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    target: float | None = Field(None, ge=0.0, le=1.0)
    mu: float
    sigma: float = Field(gt=0.0)

    def sample_ms(self, rng: random.Random) -> int:
        return round(1000.0 * rng.lognormvariate(self.mu, self.sigma))

    def quantile_ms(self, q: float) -> float:
        from scipy.stats import norm
        return 1000.0 * math.exp(self.mu + self.sigma * norm.ppf(q))


class HardwareModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    label: str
    os: str
    cells: dict[str, LatencyCell]

    @field_validator("cells")
    @classmethod
    def _cells_complete(cls, cells: dict[str, LatencyCell]) -> dict[str, LatencyCell]:
        expected = {cell_name(p, l) for p in ("standby", "screen-on") for l in LINKS}
        if set(cells) != expected:
            raise ValueError(f"cells must be exactly {sorted(expected)}")
        return cells


class Catalog(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    os_profiles: dict[str, DeviceProfile]
    default_latency: LatencyCell
    hardware: dict[str, HardwareModel]

    def profile(self, name: str) -> DeviceProfile:
        try:
            return self.os_profiles[name]
        except KeyError:
            raise KeyError(f"unknown device profile {name!r}; known: {sorted(self.os_profiles)}") from None

    def hardware_model(self, name: str) -> HardwareModel:
        try:
            return self.hardware[name]
        except KeyError:
            raise KeyError(f"unknown hardware model {name!r}; known: {sorted(self.hardware)}") from None

    def latency_pool_quantile(self, q: float, samples: int = 20000, seed: int = 0) -> float:
        """Quantile (ms) of the reaction time pooled over every measured cell."""
        rng = random.Random(seed)
        cells = [c for hw in self.hardware.values() for c in hw.cells.values()]
        draws = sorted(rng.choice(cells).sample_ms(rng) for _ in range(samples))
        return float(draws[min(len(draws) - 1, int(q * len(draws)))])


def _catalog_from_mapping(raw: dict) -> Catalog:
    profiles = {k: {"name": k, **v} for k, v in raw.get("os_profiles", {}).items()}
    return Catalog(os_profiles=profiles, default_latency=raw["default_latency"], hardware=raw["hardware"])


@lru_cache(maxsize=None)
def _default_catalog() -> Catalog:
    text = resources.files("prekeysim").joinpath("data/profiles.yaml").read_text()
    return _catalog_from_mapping(yaml.safe_load(text))


def load_catalog(path: str | Path | None = None) -> Catalog:
    if path is None:
        return _default_catalog()
    return _catalog_from_mapping(yaml.safe_load(Path(path).read_text()))


# ---- schedules --------------------------------------------------------------

def _clock(text: str) -> int:
    hh, mm = text.split(":")
    h, m = int(hh), int(mm)
    if not (0 <= h <= 24 and 0 <= m < 60) or (h == 24 and m):
        raise ValueError(f"bad time of day {text!r}")
    return h * HOUR + m * MINUTE


@dataclass(frozen=True)
class OnlineSchedule:
    """Power state over time.

    ``intervals`` are ``(start_ms, end_ms, state)`` with ``end`` exclusive;
    with ``period`` set they repeat every period. Uncovered time takes
    ``default``.
    """

    intervals: tuple[tuple[int, int, str], ...] = ()
    default: str = "standby"
    period: int | None = None

    def __post_init__(self) -> None:
        for start, end, state in self.intervals:
            if state not in POWER_STATES:
                raise ValueError(f"unknown power state {state!r}")
            if not 0 <= start < end:
                raise ValueError("schedule intervals need 0 <= start < end")
            if self.period is not None and end > self.period:
                raise ValueError("repeating intervals must fit inside one period")
        if self.default not in POWER_STATES:
            raise ValueError(f"unknown power state {self.default!r}")
        ordered = sorted(self.intervals)
        for a, b in zip(ordered, ordered[1:]):
            if b[0] < a[1]:
                raise ValueError("schedule intervals overlap")

    @classmethod
    def always(cls, state: str = "standby") -> "OnlineSchedule":
        return cls((), state)

    @classmethod
    def daily(cls, start: str, end: str, state: str = "screen-on", off_state: str = "offline") -> "OnlineSchedule":
        s, e = _clock(start), _clock(end)
        if s < e:
            return cls(((s, e, state),), off_state, DAY)
        return cls(((0, e, state), (s, DAY, state)) if e else ((s, DAY, state),), off_state, DAY)

    def state_at(self, t: int) -> str:
        local = t % self.period if self.period else t
        for start, end, state in self.intervals:
            if start <= local < end:
                return state
        return self.default

    def changes(self) -> Iterator[tuple[int, str]]:
        """Instants where the state changes, in order (infinite when repeating)."""
        marks = sorted({p for s, e, _ in self.intervals for p in (s, e)})
        if not marks:
            return
        offsets = itertools.count() if self.period else [0]
        prev = self.state_at(0)
        for k in offsets:
            base = k * self.period if self.period else 0
            for m in marks:
                t = base + m
                if t == 0:
                    continue
                st = self.state_at(t)
                if st != prev:
                    yield t, st
                    prev = st


# ---- key material -----------------------------------------------------------

class KeyBatch:
    """One-time prekeys derived from a batch seed; publics are computed on demand."""

    def __init__(self, seed: bytes) -> None:
        self.seed = seed
        self._public: dict[int, bytes] = {}
        self._index: dict[int, int] = {}

    def _secret_at(self, index: int) -> bytes:
        return hashlib.sha256(self.seed + index.to_bytes(8, "big")).digest()

    def bind(self, key_id: int, index: int) -> None:
        self._index[key_id] = index

    def secret(self, key_id: int) -> bytes:
        return self._secret_at(self._index.get(key_id, key_id))

    def public(self, key_id: int) -> bytes:
        pub = self._public.get(key_id)
        if pub is None:
            pub = self._public[key_id] = x25519_public(self.secret(key_id))
        return pub


@dataclass
class SignedPrekeyLifetime:
    key_id: int
    created_ms: int
    superseded_ms: int | None = None
    erased_ms: int | None = None
    reason: str = "initial"


@dataclass
class CostCounters:
    uploads: int = 0
    bytes: int = 0
    refill_events: int = 0
    rejected_uploads: int = 0
    rotations: int = 0

    def battery_percent(self, hours: float) -> float:
        return BATTERY_PERCENT_PER_HOUR * hours


@dataclass
class DeviceState:
    power_state: str = "standby"
    link: str = "wifi"
    schedule: OnlineSchedule | None = None
    next_otpk_id: int = 1
    next_signed_id: int = 0
    pending_notification: bool = False
    costs: CostCounters = field(default_factory=CostCounters)

    @property
    def online(self) -> bool:
        return self.power_state != "offline"


@dataclass
class DevicePolicy:
    """Countermeasure and behaviour switches applied on the client side."""

    signed_rotation_interval_ms: int | None = 30 * DAY
    signed_retention_ms: int | None = None        # None: one rotation interval
    on_demand_min_validity_ms: int | None = None  # None: on-demand rotation off
    hash_key_ids: bool = False
    uniform_initial_batch: int | None = None
    refill_retry_ms: int = REFILL_RETRY_MS
    reply_delay_ms: int | None = None             # auto-reply to new sessions

    @property
    def retention_ms(self) -> int:
        if self.signed_retention_ms is not None:
            return self.signed_retention_ms
        return self.signed_rotation_interval_ms or 0


@dataclass
class ReceivedMessage:
    time: int
    sender: str
    plaintext: bytes
    used_one_time_prekey: bool


# ---- device -----------------------------------------------------------------

class Device:
    def __init__(self, profile: DeviceProfile, rng: random.Random, *, policy: DevicePolicy | None = None,
                 hardware: HardwareModel | None = None, default_latency: LatencyCell | None = None,
                 name: str = "") -> None:
        self.profile = profile
        self.rng = rng
        self.policy = policy or DevicePolicy()
        self.hardware = hardware
        self.default_latency = default_latency or _default_catalog().default_latency
        self.name = name or profile.name
        self.identity = IdentityKeyPair.from_seed(rng.randbytes(32))
        if profile.registration_init == "randomMasked":
            self.registration_id = rng.getrandbits(32) & 0x3FFF
        else:
            self.registration_id = rng.randrange(1, 16381)

        self.state = DeviceState()
        if profile.signed_pk_id_init == "random":
            self.state.next_signed_id = rng.randrange(RANDOM_ID_FLOOR, ID_SPACE + 1)
        else:
            self.state.next_signed_id = int(profile.signed_pk_id_init)
        if profile.otpk_id_init == "random":
            self.state.next_otpk_id = rng.randrange(RANDOM_ID_FLOOR, ID_SPACE - 1_000_000)
        else:
            self.state.next_otpk_id = int(profile.otpk_id_init)
        self.otpk_id_origin = self.state.next_otpk_id

        self.signed: dict[int, object] = {}
        self.signed_history: list[SignedPrekeyLifetime] = []
        self.current_signed_id: int = -1
        self._key_batches: dict[int, KeyBatch] = {}
        self._consumed: set[int] = set()
        self.refill_batches: list[list[int]] = []
        self.sessions: dict[tuple[bytes, bytes], SessionState] = {}
        self._peer_session: dict[str, SessionState] = {}
        self.received: list[ReceivedMessage] = []
        self.stale_errors = 0
        self.failed_decryptions = 0

        self.world: World | None = None
        self.jid: Jid | None = None
        self._refill_pending_timer = False
        self._inflight_batch: list[OneTimeKey] | None = None
        self._rotation_due = False
        self._on_demand_timer = False
        self._on_demand_wanted = False
        self._initial_upload = self._build_initial_upload()

    # ---- key generation ---------------------------------------------------

    def _new_signed(self, now: int, reason: str):
        if self.policy.hash_key_ids:
            pair = generate_signed_prekey(self.identity, 0, self.rng)
            pair.key_id = hashed_key_id(pair.public)
        else:
            pair = generate_signed_prekey(self.identity, self.state.next_signed_id, self.rng)
            self.state.next_signed_id = (self.state.next_signed_id + 1) & ID_SPACE
        self.signed[pair.key_id] = pair
        self.signed_history.append(SignedPrekeyLifetime(pair.key_id, now, reason=reason))
        return pair

    def _make_batch(self, count: int) -> list[OneTimeKey]:
        batch = KeyBatch(self.rng.randbytes(32))
        keys: list[OneTimeKey] = []
        if self.policy.hash_key_ids:
            seen: set[int] = set()
            index = 0
            while len(keys) < count:
                pub = x25519_public(batch._secret_at(index))
                key_id = hashed_key_id(pub)
                if key_id not in seen and key_id not in self._key_batches:
                    seen.add(key_id)
                    batch.bind(key_id, index)
                    keys.append(OneTimeKey(key_id, pub))
                    self._key_batches[key_id] = batch
                index += 1
            return keys
        start = self.state.next_otpk_id
        for key_id in range(start, start + count):
            keys.append(OneTimeKey(key_id, source=batch))
            self._key_batches[key_id] = batch
        self.state.next_otpk_id = start + count
        return keys

    def _build_initial_upload(self) -> InitialUpload:
        spk = self._new_signed(0, "initial")
        self.current_signed_id = spk.key_id
        size = self.policy.uniform_initial_batch or self.profile.initial_batch
        keys = self._make_batch(size)
        self.refill_batches.append([k.key_id for k in keys])
        return InitialUpload(self.registration_id, self.identity.public,
                             SignedPrekeyRecord(spk.key_id, spk.public, spk.signature), keys)

    def initial_upload(self) -> InitialUpload:
        return self._initial_upload

    def next_refill_batch(self) -> list[OneTimeKey]:
        """Allocate the next refill: skip the profile's id gap, then ``refill_batch`` keys."""
        if not self.policy.hash_key_ids:
            self.state.next_otpk_id += self.profile.id_skip_per_refill
        keys = self._make_batch(self.profile.refill_batch)
        self.refill_batches.append([k.key_id for k in keys])
        return keys

    def one_time_pair(self, key_id: int) -> OneTimePrekeyPair | None:
        batch = self._key_batches.get(key_id)
        if batch is None or key_id in self._consumed:
            return None
        return one_time_prekey_from_secret(batch.secret(key_id), key_id)

    def live_signed_prekeys(self) -> list:
        return [p for p in self.signed.values() if not p.erased]

    @property
    def current_signed(self):
        return self.signed[self.current_signed_id]

    @property
    def address(self) -> str:
        return str(self.jid) if self.jid is not None else self.name

    @property
    def online(self) -> bool:
        return self.state.online

    # ---- world wiring -----------------------------------------------------

    def attach(self, world: "World", jid: Jid, schedule: OnlineSchedule | None,
               power: str = "standby", link: str = "wifi") -> None:
        self.world = world
        self.jid = jid
        self.state.link = link
        self.state.schedule = schedule
        self.state.power_state = schedule.state_at(world.sim.now) if schedule else power
        world.network.register_mailbox(self.address, self._deliver)
        if schedule is not None:
            world.sim.spawn(self._follow_schedule(schedule), f"{self.address}/schedule")
        if self.policy.signed_rotation_interval_ms:
            world.sim.spawn(self._rotation_loop(), f"{self.address}/rotation")

    def _log(self, kind: str, **payload) -> None:
        if self.world is not None:
            self.world.timeline.record(self.world.sim.now, self.address, kind, **payload)

    def latency_cell(self) -> LatencyCell:
        if self.hardware is not None and self.state.online:
            return self.hardware.cells[cell_name(self.state.power_state, self.state.link)]
        return self.default_latency

    def set_power(self, power: str, link: str | None = None) -> None:
        if power not in POWER_STATES:
            raise ValueError(f"unknown power state {power!r}")
        was_online = self.online
        self.state.power_state = power
        if link is not None:
            self.state.link = link
        self._log("power", state=power, link=self.state.link)
        if self.online and not was_online:
            self._on_reconnect()

    def _follow_schedule(self, schedule: OnlineSchedule):
        sim = self.world.sim
        for when, state in schedule.changes():
            if when > sim.now:
                yield when - sim.now
            self.set_power(state)

    def _on_reconnect(self) -> None:
        if self.state.pending_notification:
            self._schedule_refill()
        if self._rotation_due:
            self._rotation_due = False
            self.rotate_signed_prekey("scheduled")
        if self._on_demand_wanted:
            self._on_demand_wanted = False
            self._request_on_demand_rotation()
        self.world.network.flush(self.address)

    # ---- refill -----------------------------------------------------------

    def handle_low_watermark(self) -> None:
        """Server notification: the store dropped below the watermark."""
        self.state.pending_notification = True
        self._log("notification", online=self.online)
        if self.online:
            self._schedule_refill()

    def _schedule_refill(self) -> None:
        if self._refill_pending_timer:
            return
        self._refill_pending_timer = True
        delay = self.latency_cell().sample_ms(self.rng)
        self.world.sim.call_later(delay, self._upload_refill)

    def _upload_refill(self) -> None:
        self._refill_pending_timer = False
        if not self.online or not self.state.pending_notification:
            return
        if self._inflight_batch is None:
            self._inflight_batch = self.next_refill_batch()
        batch = self._inflight_batch
        costs = self.state.costs
        costs.uploads += 1
        costs.bytes += BYTES_PER_KEY * len(batch)
        fut = self.world.network.upload_prekeys(self.jid, batch, self.state.link)
        fut.add_callback(self._upload_done)

    def _upload_done(self, resp) -> None:
        if getattr(resp, "kind", "") == "unavailable":
            self.state.costs.rejected_uploads += 1
            self._log("refill-rejected")
            self._refill_pending_timer = True
            self.world.sim.call_later(self.policy.refill_retry_ms, self._upload_refill)
            return
        batch = self._inflight_batch
        self._inflight_batch = None
        self.state.pending_notification = False
        self.state.costs.refill_events += 1
        self._log("refill", count=len(batch), first_id=batch[0].key_id, last_id=batch[-1].key_id)

    def refill_now(self, now: int | None = None) -> None:
        """Upload a refill immediately and synchronously (setup helper for aged fixtures)."""
        server = self.world.server
        now = self.world.sim.now if now is None else now
        batch = self.next_refill_batch()
        server.upload_prekeys(self.jid, batch, now)
        self.state.costs.uploads += 1
        self.state.costs.refill_events += 1
        self.state.costs.bytes += BYTES_PER_KEY * len(batch)
        self.state.pending_notification = False

    # ---- signed prekey rotation ------------------------------------------

    def _rotation_loop(self):
        interval = self.policy.signed_rotation_interval_ms
        while True:
            yield interval
            if self.online:
                self.rotate_signed_prekey("scheduled")
            else:
                self._rotation_due = True

    def rotate_signed_prekey(self, reason: str = "scheduled", retention_ms: int | None = None) -> Future:
        """Create and upload a new signed prekey; the old secret is erased after its retention."""
        now = self.world.sim.now
        old_id = self.current_signed_id
        pair = self._new_signed(now, reason)
        record = SignedPrekeyRecord(pair.key_id, pair.public, pair.signature)
        retention = self.policy.retention_ms if retention_ms is None else retention_ms
        self.state.costs.rotations += 1
        fut = self.world.network.rotate_signed_prekey(self.jid, record, self.state.link)

        def acked(_resp) -> None:
            t = self.world.sim.now
            self.current_signed_id = pair.key_id
            for life in self.signed_history:
                if life.key_id == old_id and life.superseded_ms is None:
                    life.superseded_ms = t
            self._log("rotate", old_id=old_id, new_id=pair.key_id, reason=reason)
            if retention <= 0:
                self._erase_signed(old_id)
            else:
                self.world.sim.call_later(retention, self._erase_signed, old_id)

        fut.add_callback(acked)
        return fut

    def _erase_signed(self, key_id: int) -> None:
        pair = self.signed.get(key_id)
        if pair is None or pair.erased or key_id == self.current_signed_id:
            return
        pair.erase()
        now = self.world.sim.now
        for life in self.signed_history:
            if life.key_id == key_id and life.erased_ms is None:
                life.erased_ms = now
        self._log("erase-signed", key_id=key_id)

    def _request_on_demand_rotation(self) -> None:
        if self._on_demand_timer:
            return
        if not self.online:
            self._on_demand_wanted = True
            return
        created = next(l.created_ms for l in reversed(self.signed_history) if l.key_id == self.current_signed_id)
        at = max(self.world.sim.now, created + self.policy.on_demand_min_validity_ms)
        self._on_demand_timer = True
        self.world.sim.call_at(at, self._on_demand_fire)

    def _on_demand_fire(self) -> None:
        self._on_demand_timer = False
        if not self.online:
            self._on_demand_wanted = True
            return
        self.rotate_signed_prekey("on-demand", retention_ms=self.policy.on_demand_min_validity_ms)

    # ---- messaging --------------------------------------------------------

    def _deliver(self, item) -> bool:
        if not self.online:
            return False
        sender, envelope = item
        self.receive(sender, envelope)
        return True

    def receive(self, sender: str, envelope) -> bytes | None:
        now = self.world.sim.now if self.world else 0
        header = envelope.prekey
        fresh = False
        if header is not None:
            slot = (envelope.sender_identity, header.ephemeral_public)
            session = self.sessions.get(slot)
            if session is None:
                try:
                    session, plaintext = self._accept_initial(envelope)
                except StaleBundleError as exc:
                    self.stale_errors += 1
                    self._log("stale-bundle", sender=sender, reason=str(exc))
                    return None
                except (AuthenticationError, CryptoError) as exc:
                    self.failed_decryptions += 1
                    self._log("decrypt-failed", sender=sender, reason=str(exc))
                    return None
                self.sessions[slot] = session
                self._peer_session[sender] = session
                fresh = True
            else:
                plaintext = self._decrypt(session, sender, envelope)
        else:
            session = self._peer_session.get(sender)
            if session is None:
                self.failed_decryptions += 1
                self._log("decrypt-failed", sender=sender, reason="no session")
                return None
            plaintext = self._decrypt(session, sender, envelope)
        if plaintext is None:
            return None
        used = session.used_one_time_prekey_id is not None
        self.received.append(ReceivedMessage(now, sender, plaintext, used))
        if fresh:
            self._log("session", peer=sender, one_time_prekey=session.used_one_time_prekey_id)
            if not used and self.policy.on_demand_min_validity_ms is not None and self.world:
                self._request_on_demand_rotation()
            if self.policy.reply_delay_ms is not None and self.world:
                self.world.sim.call_later(self.policy.reply_delay_ms, self.respond_in_session, sender)
        return plaintext

    def _accept_initial(self, envelope):
        header = envelope.prekey
        spk = self.signed.get(header.signed_prekey_id)
        if spk is None or spk.erased:
            raise StaleBundleError(f"signed prekey {header.signed_prekey_id} no longer held")
        otpk = None
        if header.one_time_prekey_id is not None:
            otpk = self.one_time_pair(header.one_time_prekey_id)
            if otpk is None:
                raise StaleBundleError(f"one-time prekey {header.one_time_prekey_id} not held")
        session, plaintext = x3dh_respond(self.identity, spk, otpk, envelope, envelope.sender_identity)
        if otpk is not None:
            self._consumed.add(otpk.key_id)
            otpk.erase()
        return session, plaintext

    def _decrypt(self, session: SessionState, sender: str, envelope) -> bytes | None:
        try:
            return decrypt(session, envelope)
        except (AuthenticationError, CryptoError) as exc:
            self.failed_decryptions += 1
            self._log("decrypt-failed", sender=sender, reason=str(exc))
            return None

    def respond_in_session(self, peer: str, text: bytes = b"reply") -> object | None:
        """Reply to ``peer``; the first reply runs the asymmetric ratchet step."""
        session = self._peer_session.get(peer)
        if session is None or not self.online:
            return None
        envelope = encrypt_next(session, text, self.rng)
        self._log("reply", peer=peer, fs_restored=session.fs_restored)
        self.world.network.send_envelope(self.address, peer, envelope, self.state.link)
        return envelope


def init_device(profile: DeviceProfile, seed: int | random.Random, *,
                policy: DevicePolicy | None = None, hardware: HardwareModel | None = None) -> tuple[InitialUpload, Device]:
    """Fresh install of ``profile``: returns the server upload and the device holding the secrets."""
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    device = Device(profile, rng, policy=policy, hardware=hardware)
    return device.initial_upload(), device


# ---- honest initiators --------------------------------------------------------

@dataclass
class InitiatedSession:
    target: Jid
    fetched_ms: int
    one_time_prekey_id: int | None
    session: SessionState
    sent: list = field(default_factory=list)
    replies: list = field(default_factory=list)
    pfs_warning: bool = False

    @property
    def without_one_time_prekey(self) -> bool:
        return self.one_time_prekey_id is None


class Contact:
    """A user who opens sessions with targets (Alice in the attack stories)."""

    def __init__(self, world: "World", name: str, rng: random.Random, link: str = "client",
                 pfs_ui_notification: bool = False) -> None:
        self.world = world
        self.name = name
        self.rng = rng
        self.link = link
        self.identity = IdentityKeyPair.from_seed(rng.randbytes(32))
        self.pfs_ui_notification = pfs_ui_notification
        self.sessions: dict[str, InitiatedSession] = {}
        self.history: list[InitiatedSession] = []
        self.queued: list[tuple[Jid, list[bytes]]] = []
        self.failures: list[tuple[int, str]] = []
        world.network.register_mailbox(name, self._deliver)

    def _deliver(self, item) -> bool:
        sender, envelope = item
        rec = self.sessions.get(sender)
        if rec is not None:
            try:
                rec.replies.append(decrypt(rec.session, envelope))
            except (AuthenticationError, CryptoError):
                self.world.timeline.record(self.world.sim.now, self.name, "decrypt-failed", sender=sender)
        return True

    def open_session(self, target: Jid, messages: list[bytes]):
        """Generator: fetch a bundle, run the handshake, send ``messages``.

        Returns the :class:`InitiatedSession`, or the failing response.
        """
        net = self.world.network
        resp = yield net.fetch_bundle(self.name, target, self.link)
        now = self.world.sim.now
        if getattr(resp, "kind", "") != "bundle":
            self.failures.append((now, resp.kind))
            self.world.timeline.record(now, self.name, "fetch-failed", target=str(target), result=resp.kind)
            return resp
        session = x3dh_initiate(self.identity, resp, self.rng)
        rec = InitiatedSession(target, now, session.used_one_time_prekey_id, session)
        if rec.without_one_time_prekey and self.pfs_ui_notification:
            rec.pfs_warning = True
            self.world.timeline.record(now, self.name, "pfs-notification", target=str(target))
        self.sessions[str(target)] = rec
        self.history.append(rec)
        for text in messages:
            rec.sent.append(self.send(target, text))
        return rec

    def send(self, target: Jid, text: bytes):
        rec = self.sessions[str(target)]
        envelope = encrypt_next(rec.session, text, self.rng)
        self.world.network.send_envelope(self.name, str(target), envelope, self.link)
        return envelope

    def send_message(self, target: Jid, text: bytes) -> None:
        """Queue a message; it goes out once a session exists. No automatic retry."""
        if str(target) in self.sessions:
            self.send(target, text)
            return
        self.queued.append((target, [text]))
        self.world.sim.spawn(self._flush_queue(), f"{self.name}/send")

    def restart(self) -> None:
        """App restart: queued messages get one more delivery attempt."""
        self.world.timeline.record(self.world.sim.now, self.name, "restart")
        self.world.sim.spawn(self._flush_queue(), f"{self.name}/restart")

    def _flush_queue(self):
        pending, self.queued = self.queued, []
        for target, texts in pending:
            result = yield from self.open_session(target, texts)
            if not isinstance(result, InitiatedSession):
                self.queued.append((target, texts))
