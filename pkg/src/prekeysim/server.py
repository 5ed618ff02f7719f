"""Prekey distribution server.

Stores one record per device (identity key, signed prekey, one-time prekey
store), hands out bundles, pops each one-time prekey at most once, raises a
low-watermark notification when the store runs low, and models overload.
Requests for a single device serialize on that device's lock, so the
interface is linearizable under real threads as well as in the simulator.
"""
from __future__ import annotations

import hashlib
import json
import random
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .crypto import verify_prekey
from .simnet import LoadModel

SERVER_NAME = "s.whatsapp.net"
KEY_TYPE_DJB = 0x05
EPOCH_ORIGIN = 1740182155

_JID_RE = re.compile(r"^(?P<phone>\d+)(?::(?P<dev>\d+))?(?:@(?P<server>[\w.\-]+))?$")


class ServerError(Exception):
    pass


class UnknownJidError(ServerError):
    pass


class DuplicateMainDevice(ServerError):
    pass


class ProtocolError(ServerError):
    pass


class InvalidSignatureError(ServerError):
    pass


@dataclass(frozen=True, order=True)
class Jid:
    phone: str
    device_id: int = 0
    server: str = SERVER_NAME

    def __post_init__(self) -> None:
        if not self.phone.isdigit():
            raise ValueError(f"phone number must be digits, got {self.phone!r}")
        if self.device_id < 0:
            raise ValueError("device id must be non-negative")

    def __str__(self) -> str:
        if self.device_id == 0:
            return f"{self.phone}@{self.server}"
        return f"{self.phone}:{self.device_id}@{self.server}"

    @property
    def is_main(self) -> bool:
        return self.device_id == 0

    @classmethod
    def parse(cls, text: str) -> "Jid":
        m = _JID_RE.match(text.strip())
        if not m:
            raise ValueError(f"not a JID: {text!r}")
        if m["server"] is None:
            return cls(m["phone"], int(m["dev"] or 0))
        return cls(m["phone"], int(m["dev"] or 0), m["server"])


@dataclass(frozen=True)
class SignedPrekeyRecord:
    key_id: int
    public: bytes
    signature: bytes


class OneTimeKey:
    """Public one-time prekey; ``value`` may be materialized lazily from its source."""

    __slots__ = ("key_id", "_value", "_source")

    def __init__(self, key_id: int, value: bytes | None = None, source=None) -> None:
        if value is None and source is None:
            raise ValueError("one-time key needs a value or a source")
        self.key_id = key_id
        self._value = value
        self._source = source

    @property
    def value(self) -> bytes:
        if self._value is None:
            self._value = self._source.public(self.key_id)
        return self._value

    def __repr__(self) -> str:
        return f"OneTimeKey({self.key_id})"


@dataclass
class InitialUpload:
    registration_id: int
    identity: bytes
    signed_prekey: SignedPrekeyRecord
    one_time_keys: Sequence[OneTimeKey]


# ---- responses --------------------------------------------------------------

def _hex_id(value: int, width: int) -> str:
    return format(value, f"0{width}x")


@dataclass(frozen=True)
class PrekeyBundle:
    jid: Jid
    t: int
    registration: int
    identity: bytes
    skey: SignedPrekeyRecord
    key: OneTimeKey | None
    key_type: int = KEY_TYPE_DJB

    kind = "bundle"

    # adapter for crypto.x3dh_initiate
    @property
    def signed_prekey_id(self) -> int:
        return self.skey.key_id

    @property
    def signed_prekey(self) -> bytes:
        return self.skey.public

    @property
    def signed_prekey_signature(self) -> bytes:
        return self.skey.signature

    @property
    def one_time_prekey(self) -> tuple[int, bytes] | None:
        return None if self.key is None else (self.key.key_id, self.key.value)

    @property
    def has_one_time_prekey(self) -> bool:
        return self.key is not None

    def to_record(self) -> dict:
        rec = {
            "jid": str(self.jid),
            "t": str(self.t),
            "registration": format(self.registration, "08X"),
            "type": format(self.key_type, "02x"),
            "identity": self.identity.hex(),
            "skey": {
                "id": _hex_id(self.skey.key_id, 6),
                "value": self.skey.public.hex(),
                "signature": self.skey.signature.hex(),
            },
        }
        if self.key is not None:
            rec["key"] = {"id": _hex_id(self.key.key_id, 5), "value": self.key.value.hex()}
        return rec

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_record(), indent=indent)

    @classmethod
    def from_record(cls, rec: dict) -> "PrekeyBundle":
        try:
            key = rec.get("key")
            return cls(
                jid=Jid.parse(rec["jid"]),
                t=int(rec["t"]),
                registration=int(rec["registration"], 16),
                key_type=int(rec["type"], 16),
                identity=bytes.fromhex(rec["identity"]),
                skey=SignedPrekeyRecord(int(rec["skey"]["id"], 16), bytes.fromhex(rec["skey"]["value"]),
                                        bytes.fromhex(rec["skey"]["signature"])),
                key=None if key is None else OneTimeKey(int(key["id"], 16), bytes.fromhex(key["value"])),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"malformed bundle record: {exc}") from None


@dataclass(frozen=True)
class ServiceUnavailable:
    reason: str = "overload"
    status: int = 503
    kind = "unavailable"


@dataclass(frozen=True)
class RateLimited:
    retry_after_ms: int
    kind = "rate-limited"


@dataclass(frozen=True)
class Forbidden:
    kind = "forbidden"


@dataclass(frozen=True)
class Ack:
    t: int
    kind = "ack"


# ---- configuration ----------------------------------------------------------

@dataclass
class RateLimit:
    bundles_per_window: int
    window_ms: int

    def __post_init__(self) -> None:
        if self.bundles_per_window < 1 or self.window_ms <= 0:
            raise ValueError("rate limit needs a positive budget and window")


@dataclass
class FaultModes:
    double_handout_probability: float = 0.0
    refill_reject_probability: float = 0.0


@dataclass
class ServerConfig:
    watermark_threshold: int = 11
    overload_soft_rps: float = 50
    overload_hard_rps: float = 2000
    rate_limit: RateLimit | None = None
    fault_modes: FaultModes = field(default_factory=FaultModes)
    block_list_effect: bool = False
    hash_key_ids: bool = False
    epoch_origin: int = EPOCH_ORIGIN

    def __post_init__(self) -> None:
        if not self.overload_soft_rps < self.overload_hard_rps:
            raise ValueError("overload_soft_rps must be below overload_hard_rps")


# ---- state ------------------------------------------------------------------

class _KeyStore:
    """One-time prekeys with O(1) uniform random removal."""

    __slots__ = ("ids", "keys")

    def __init__(self) -> None:
        self.ids: list[int] = []
        self.keys: dict[int, OneTimeKey] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def replace(self, batch: Iterable[OneTimeKey]) -> None:
        self.keys = {k.key_id: k for k in batch}
        self.ids = list(self.keys)

    def pop_random(self, rng: random.Random) -> OneTimeKey:
        ids = self.ids
        i = rng.randrange(len(ids))
        key_id = ids[i]
        ids[i] = ids[-1]
        ids.pop()
        return self.keys.pop(key_id)


@dataclass
class DeviceRecord:
    jid: Jid
    registration_id: int
    identity: bytes
    signed_prekey: SignedPrekeyRecord
    last_update_ms: int
    profile_handle: str | None = None
    store: _KeyStore = field(default_factory=_KeyStore)
    max_seen_id: int = -1
    pending_notification: bool = False
    recent_handouts: list = field(default_factory=list)
    empty_since: int | None = None
    empty_ms: int = 0
    handouts: int = 0
    empty_bundles: int = 0
    uploads: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def one_time_ids(self) -> list[int]:
        return sorted(self.store.ids)


@dataclass
class _Account:
    next_device_id: int = 1
    devices: dict[int, DeviceRecord] = field(default_factory=dict)


def hashed_key_id(public: bytes) -> int:
    """Key id derived from the public key (truncated SHA-256, 32 bits)."""
    return int.from_bytes(hashlib.sha256(public).digest()[:4], "big")


class PrekeyServer:
    def __init__(self, config: ServerConfig | None = None, rng: random.Random | None = None,
                 load: LoadModel | None = None) -> None:
        self.config = config or ServerConfig()
        self.rng = rng or random.Random(0)
        self.load = load or LoadModel(self.config.overload_soft_rps, self.config.overload_hard_rps)
        self._accounts: dict[str, _Account] = {}
        self._blocks: dict[str, set[str]] = {}
        self._registry_lock = threading.Lock()
        self._rate: dict[tuple[str, Jid], deque] = {}
        self.on_low_watermark: Callable[[Jid, int], None] | None = None
        self.on_event: Callable[[int, str, Jid, dict], None] | None = None

    # ---- registration -----------------------------------------------------

    def _validate_batch(self, batch: Sequence[OneTimeKey], floor: int) -> None:
        ids = [k.key_id for k in batch]
        if self.config.hash_key_ids:
            if len(set(ids)) != len(ids):
                raise ProtocolError("duplicate key ids in batch")
            return
        prev = floor
        for i in ids:
            if i <= prev:
                raise ProtocolError(f"one-time prekey id {i} not above {prev}")
            prev = i

    def _new_record(self, jid: Jid, upload: InitialUpload, now: int, profile: str | None) -> DeviceRecord:
        self._validate_batch(upload.one_time_keys, -1)
        rec = DeviceRecord(jid, upload.registration_id, upload.identity, upload.signed_prekey, now, profile)
        rec.store.replace(upload.one_time_keys)
        if upload.one_time_keys:
            rec.max_seen_id = max(k.key_id for k in upload.one_time_keys)
        return rec

    def register_device(self, phone: str, upload: InitialUpload, now: int = 0, *,
                        companion: bool = False, profile: str | None = None) -> Jid:
        with self._registry_lock:
            acct = self._accounts.get(phone)
            if not companion:
                if acct is not None and 0 in acct.devices:
                    raise DuplicateMainDevice(f"{phone} already has a main device")
                acct = self._accounts.setdefault(phone, _Account())
                jid = Jid(phone, 0)
            else:
                if acct is None or 0 not in acct.devices:
                    raise ServerError(f"{phone} has no main device to link a companion to")
                jid = Jid(phone, acct.next_device_id)
                acct.next_device_id += 1
            acct.devices[jid.device_id] = self._new_record(jid, upload, now, profile)
        self._emit(now, "register", jid, {})
        return jid

    def setup_main_device(self, phone: str, upload: InitialUpload, now: int = 0, *,
                          profile: str | None = None) -> Jid:
        """Fresh install on the phone: new key material, companions dropped, index restarts."""
        with self._registry_lock:
            acct = self._accounts[phone] = _Account()
            jid = Jid(phone, 0)
            acct.devices[0] = self._new_record(jid, upload, now, profile)
        self._emit(now, "register", jid, {"reset": True})
        return jid

    def unlink_device(self, jid: Jid) -> None:
        with self._registry_lock:
            acct = self._accounts.get(jid.phone)
            if acct is None or jid.device_id not in acct.devices:
                raise UnknownJidError(str(jid))
            if jid.is_main:
                raise ServerError("the main device cannot be unlinked")
            del acct.devices[jid.device_id]

    def record(self, jid: Jid) -> DeviceRecord:
        acct = self._accounts.get(jid.phone)
        if acct is None or jid.device_id not in acct.devices:
            raise UnknownJidError(str(jid))
        return acct.devices[jid.device_id]

    def devices(self) -> list[Jid]:
        return sorted(r.jid for a in self._accounts.values() for r in a.devices.values())

    # ---- block list -------------------------------------------------------

    def block(self, owner_phone: str, blocked: str) -> None:
        self._blocks.setdefault(owner_phone, set()).add(_phone_of(blocked))

    def _is_blocked(self, requester: str, owner_phone: str) -> bool:
        return (self.config.block_list_effect
                and _phone_of(requester) in self._blocks.get(owner_phone, ()))

    # ---- queries ----------------------------------------------------------

    def query_devices(self, requester: str, phone: str) -> list[int]:
        acct = self._accounts.get(phone)
        if acct is None or self._is_blocked(requester, phone):
            return []
        return sorted(acct.devices)

    def fetch_bundle(self, requester: str, target: Jid, now: int):
        rec = self.record(target)
        cfg = self.config
        with rec.lock:
            rate = self.load.record(target, now)
            if rate >= cfg.overload_hard_rps:
                return ServiceUnavailable("overload")
            p = self.load.unavailable_probability(rate)
            if p > 0.0 and self.rng.random() < p:
                return ServiceUnavailable("overload")
            if self._is_blocked(requester, target.phone):
                return Forbidden()
            if cfg.rate_limit is not None:
                limited = self._rate_check(requester, target, now)
                if limited is not None:
                    return limited
            key = self._pop(rec, now)
            bundle = PrekeyBundle(
                jid=target,
                t=cfg.epoch_origin + rec.last_update_ms // 1000,
                registration=rec.registration_id,
                identity=rec.identity,
                skey=rec.signed_prekey,
                key=key,
            )
        return bundle

    def _rate_check(self, requester: str, target: Jid, now: int) -> RateLimited | None:
        rl = self.config.rate_limit
        q = self._rate.get((requester, target))
        if q is None:
            q = self._rate[(requester, target)] = deque()
        while q and q[0] <= now - rl.window_ms:
            q.popleft()
        if len(q) >= rl.bundles_per_window:
            return RateLimited(q[0] + rl.window_ms - now)
        q.append(now)
        return None

    def _pop(self, rec: DeviceRecord, now: int) -> OneTimeKey | None:
        store = rec.store
        before = len(store)
        if before == 0:
            rec.empty_bundles += 1
            return None
        p_dup = self.config.fault_modes.double_handout_probability
        if p_dup and rec.recent_handouts and self.rng.random() < p_dup:
            rec.handouts += 1
            return rec.recent_handouts[self.rng.randrange(len(rec.recent_handouts))]
        key = store.pop_random(self.rng)
        rec.handouts += 1
        if p_dup:
            rec.recent_handouts.append(key)
        after = before - 1
        if after == 0:
            rec.empty_since = now
            self._emit(now, "store-empty", rec.jid, {})
        threshold = self.config.watermark_threshold
        if before >= threshold > after and not rec.pending_notification:
            rec.pending_notification = True
            self._emit(now, "low-watermark", rec.jid, {"remaining": after})
            if self.on_low_watermark is not None:
                self.on_low_watermark(rec.jid, now)
        return key

    # ---- uploads ----------------------------------------------------------

    def upload_prekeys(self, device: Jid, batch: Sequence[OneTimeKey], now: int, *,
                       signed_prekey: SignedPrekeyRecord | None = None):
        rec = self.record(device)
        with rec.lock:
            p_rej = self.config.fault_modes.refill_reject_probability
            if p_rej and self.rng.random() < p_rej:
                self._emit(now, "upload-rejected", device, {})
                return ServiceUnavailable("refill rejected")
            self._validate_batch(batch, rec.max_seen_id)
            if signed_prekey is not None:
                self._check_signed(rec, signed_prekey)
            if rec.empty_since is not None and batch:
                rec.empty_ms += now - rec.empty_since
                rec.empty_since = None
            discarded = len(rec.store)
            rec.store.replace(batch)
            rec.recent_handouts = []
            if batch and not self.config.hash_key_ids:
                rec.max_seen_id = batch[-1].key_id
            if signed_prekey is not None:
                rec.signed_prekey = signed_prekey
            rec.last_update_ms = max(rec.last_update_ms, now)
            rec.pending_notification = False
            rec.uploads += 1
        self._emit(now, "upload", device, {"count": len(batch), "discarded": discarded,
                                           "rotated": signed_prekey is not None})
        return Ack(self.config.epoch_origin + rec.last_update_ms // 1000)

    def _check_signed(self, rec: DeviceRecord, spk: SignedPrekeyRecord) -> None:
        old = rec.signed_prekey.key_id
        if self.config.hash_key_ids:
            if spk.key_id == old:
                raise ProtocolError("signed prekey id must change on rotation")
        elif spk.key_id <= old:
            raise ProtocolError(f"signed prekey id {spk.key_id} not above {old}")
        if not verify_prekey(rec.identity, spk.public, spk.signature):
            raise InvalidSignatureError("signed prekey signature does not verify")

    def rotate_signed_prekey(self, device: Jid, spk: SignedPrekeyRecord, now: int) -> Ack:
        rec = self.record(device)
        with rec.lock:
            self._check_signed(rec, spk)
            rec.signed_prekey = spk
            rec.last_update_ms = max(rec.last_update_ms, now)
        self._emit(now, "rotate", device, {"signed_prekey_id": spk.key_id})
        return Ack(self.config.epoch_origin + rec.last_update_ms // 1000)

    # ---- inspection -------------------------------------------------------

    def pending_notification(self, jid: Jid) -> bool:
        return self.record(jid).pending_notification

    def store_size(self, jid: Jid) -> int:
        return len(self.record(jid).store)

    def empty_time(self, jid: Jid, now: int) -> int:
        """Milliseconds the device's store has been empty up to ``now``."""
        rec = self.record(jid)
        extra = now - rec.empty_since if rec.empty_since is not None else 0
        return rec.empty_ms + extra

    def _emit(self, now: int, kind: str, jid: Jid, payload: dict) -> None:
        if self.on_event is not None:
            self.on_event(now, kind, jid, payload)

    # ---- snapshots --------------------------------------------------------

    def snapshot(self) -> dict:
        """Plain-data dump of all device records (materializes lazy key values)."""
        devices = []
        for acct_phone, acct in sorted(self._accounts.items()):
            for dev_id, rec in sorted(acct.devices.items()):
                devices.append({
                    "jid": str(rec.jid),
                    "registration": rec.registration_id,
                    "identity": rec.identity.hex(),
                    "skey": {"id": rec.signed_prekey.key_id, "value": rec.signed_prekey.public.hex(),
                             "signature": rec.signed_prekey.signature.hex()},
                    "keys": [[k, rec.store.keys[k].value.hex()] for k in sorted(rec.store.ids)],
                    "last_update_ms": rec.last_update_ms,
                    "max_seen_id": rec.max_seen_id,
                    "pending": rec.pending_notification,
                    "profile": rec.profile_handle,
                })
        return {
            "version": 1,
            "next_device_ids": {p: a.next_device_id for p, a in sorted(self._accounts.items())},
            "devices": devices,
        }

    @classmethod
    def from_snapshot(cls, snap: dict, config: ServerConfig | None = None,
                      rng: random.Random | None = None) -> "PrekeyServer":
        if snap.get("version") != 1:
            raise ProtocolError("unsupported snapshot version")
        srv = cls(config, rng)
        for phone, nxt in snap["next_device_ids"].items():
            srv._accounts[phone] = _Account(next_device_id=nxt)
        for d in snap["devices"]:
            jid = Jid.parse(d["jid"])
            skey = SignedPrekeyRecord(d["skey"]["id"], bytes.fromhex(d["skey"]["value"]),
                                      bytes.fromhex(d["skey"]["signature"]))
            rec = DeviceRecord(jid, d["registration"], bytes.fromhex(d["identity"]), skey,
                               d["last_update_ms"], d["profile"])
            rec.store.replace(OneTimeKey(k, bytes.fromhex(v)) for k, v in d["keys"])
            rec.max_seen_id = d["max_seen_id"]
            rec.pending_notification = d["pending"]
            srv._accounts.setdefault(jid.phone, _Account()).devices[jid.device_id] = rec
        return srv


def _phone_of(address: str) -> str:
    address = str(address)
    if "@" in address:
        return Jid.parse(address).phone
    return address
