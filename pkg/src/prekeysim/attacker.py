"""Attacks that only ever talk to the prekey server.

Depletion, fingerprinting, online-status monitoring, activity scoring, DoS
clogging and the no-OTPK success-rate experiment. Every operation has a
generator form (``*_process``) that composes inside a running simulation and
a blocking form that drives the world until the result is ready.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

from .calibration import CycleTiming, mean_cycle_s
from .crypto import ErasedSecretError, compromise_oracle
from .devices import (
    ID_SPACE,
    Catalog,
    DevicePolicy,
    InitiatedSession,
    OnlineSchedule,
    OsKind,
    load_catalog,
    parse_state,
)
from .server import Jid, ServerConfig
from .simnet import SECOND, NetworkConfig
from .world import World

REFILL_BATCH = 812
RANDOM_ID_THRESHOLD = 10000
COMPANION_BATCHES = {50: OsKind.WINDOWS, 200: OsKind.WEB}
MAIN_CLASSES = (OsKind.ANDROID, OsKind.IPHONE)
COMPANION_CLASSES = (OsKind.MAC, OsKind.WINDOWS, OsKind.WEB)


def _csv(rows: Iterable[dict]) -> str:
    rows = list(rows)
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---- reports ------------------------------------------------------------------

@dataclass
class DepletionReport:
    target: str
    mode: str
    started_ms: int
    duration_ms: int = 0
    bundle_count: int = 0
    empty_bundle_count: int = 0
    unavailable_count: int = 0
    rate_limited_count: int = 0
    requests: int = 0
    ids: list[int] = field(default_factory=list)
    duplicate_ids: list[int] = field(default_factory=list)
    signed_prekey_id: int | None = None
    first_t: int | None = None
    last_t: int | None = None
    refills_seen: int = 0

    @property
    def min_otpk_id(self) -> int | None:
        return min(self.ids) if self.ids else None

    @property
    def max_otpk_id(self) -> int | None:
        return max(self.ids) if self.ids else None

    def summary(self) -> str:
        secs = round(self.duration_ms / 1000)
        lines = []
        if self.bundle_count == 0:
            lines.append("no one-time prekeys available")
        elif self.empty_bundle_count:
            lines.append(f"All prekeys depleted, consumed {self.bundle_count} bundles in {secs}s.")
        else:
            lines.append(f"Stopped before depletion, consumed {self.bundle_count} bundles in {secs}s.")
        lines.append(f"[Prekey Stats] Cnt: {self.bundle_count}, MinID: {self.min_otpk_id}, MaxID: {self.max_otpk_id}")
        if self.rate_limited_count:
            lines.append(f"Rate limited requests: {self.rate_limited_count}")
        if self.unavailable_count:
            lines.append(f"503 responses: {self.unavailable_count}")
        if self.duplicate_ids:
            lines.append(f"Duplicate ids handed out: {len(self.duplicate_ids)}")
        return "\n".join(lines)

    def csv_row(self) -> dict:
        return {
            "target": self.target, "mode": self.mode, "started_ms": self.started_ms,
            "duration_ms": self.duration_ms, "bundle_count": self.bundle_count,
            "min_otpk_id": self.min_otpk_id, "max_otpk_id": self.max_otpk_id,
            "empty_bundle_count": self.empty_bundle_count, "unavailable_count": self.unavailable_count,
            "rate_limited_count": self.rate_limited_count, "duplicate_count": len(self.duplicate_ids),
            "requests": self.requests, "signed_prekey_id": self.signed_prekey_id,
        }


@dataclass(frozen=True)
class FingerprintVerdict:
    os_guess: OsKind
    confidence: float
    evidence: tuple[tuple[str, object, str], ...]

    def features(self) -> dict:
        return {name: value for name, value, _ in self.evidence}

    def csv_row(self) -> dict:
        return {"os_guess": self.os_guess.value, "confidence": round(self.confidence, 4),
                "evidence": "; ".join(f"{n}={v}" for n, v, _ in self.evidence)}


@dataclass(frozen=True)
class OnlineObservation:
    time_ms: int
    state: str
    basis: str


@dataclass
class OnlineTimeline:
    target: str
    response_window_ms: int
    entries: list[OnlineObservation] = field(default_factory=list)
    clogging_backoffs: int = 0

    def add(self, time_ms: int, state: str, basis: str) -> None:
        if self.entries and self.entries[-1].state == state:
            return
        self.entries.append(OnlineObservation(time_ms, state, basis))

    def intervals(self, end_ms: int) -> list[tuple[int, int, str]]:
        out = []
        for a, b in zip(self.entries, self.entries[1:] + [None]):
            out.append((a.time_ms, b.time_ms if b else end_ms, a.state))
        return out

    def state_at(self, t: int) -> str:
        state = "unknown"
        for e in self.entries:
            if e.time_ms > t:
                break
            state = e.state
        return state

    def csv_rows(self) -> list[dict]:
        return [{"time_ms": e.time_ms, "state": e.state, "basis": e.basis} for e in self.entries]


@dataclass(frozen=True)
class ActivityScore:
    used_since_refill: int
    total_used_estimate: int | None
    refills_inferred: int | None


@dataclass
class DosReport:
    target: str
    rate: float
    duration_ms: int
    attack_requests: int = 0
    attack_unavailable: int = 0
    probe_attempts: int = 0
    probe_failures: int = 0
    delivered_before_restart: bool = False
    legit_session_established: bool = False

    @property
    def victim_fetch_failure_rate(self) -> float:
        return self.probe_failures / self.probe_attempts if self.probe_attempts else 0.0

    def csv_row(self) -> dict:
        return {"target": self.target, "rate": self.rate, "duration_ms": self.duration_ms,
                "attack_requests": self.attack_requests, "attack_unavailable": self.attack_unavailable,
                "probe_attempts": self.probe_attempts, "probe_failures": self.probe_failures,
                "victim_fetch_failure_rate": round(self.victim_fetch_failure_rate, 4),
                "delivered_before_restart": self.delivered_before_restart,
                "legit_session_established": self.legit_session_established}


# ---- fingerprint decision procedure ---------------------------------------------

def infer_initial_batch(min_id: int, max_id: int, otpk_id_init: int = 1,
                        candidates: Iterable[int] = tuple(COMPANION_BATCHES)) -> int:
    """Initial batch size from the id range of the current batch.

    Refills are always 812 keys, so ``max_id - otpk_id_init + 1`` and
    ``min_id - otpk_id_init`` are congruent to the initial batch modulo 812
    (the first only when the batch is complete, the second once a refill
    happened). The candidate closest to either residue wins.
    """
    def circ(a: int, b: int) -> int:
        d = (a - b) % REFILL_BATCH
        return min(d, REFILL_BATCH - d)

    residues = [(max_id - otpk_id_init + 1) % REFILL_BATCH]
    if min_id > otpk_id_init:
        residues.append((min_id - otpk_id_init) % REFILL_BATCH)
    else:
        residues = [max_id - otpk_id_init + 1]
    return min(candidates, key=lambda c: (min(circ(r, c) for r in residues), c))


def id_space(ids: Iterable[int], signed_id: int | None) -> str:
    """``hashed`` when ids cannot come from 24-bit counters, else ``counter``."""
    ids = list(ids)
    if any(i > ID_SPACE for i in ids) or (signed_id is not None and signed_id > ID_SPACE):
        return "hashed"
    if len(ids) > 1 and max(ids) - min(ids) > 2 * REFILL_BATCH:
        return "hashed"
    return "counter"


def decide(features: dict, threshold: int = RANDOM_ID_THRESHOLD) -> tuple[OsKind, float]:
    """Pure decision rule over fingerprint features; verdicts are recomputable from evidence."""
    companion = features["device_id"] > 0
    if features.get("key_id_space") == "hashed":
        classes = COMPANION_CLASSES if companion else MAIN_CLASSES
        return classes[0], 1.0 / len(classes)
    random_signed = features["signed_prekey_id"] > threshold
    if not companion:
        return (OsKind.IPHONE if random_signed else OsKind.ANDROID), 1.0
    if random_signed:
        return OsKind.MAC, 1.0
    batch = features.get("initial_batch")
    if batch in COMPANION_BATCHES:
        return COMPANION_BATCHES[batch], 1.0
    return OsKind.WEB, 0.5


def _absorb(rep: DepletionReport, seen: set[int], resp) -> bool:
    """Fold one response into ``rep``; True when it was a bundle without a one-time prekey."""
    kind = resp.kind
    if kind == "bundle":
        if rep.last_t is not None and resp.t != rep.last_t:
            rep.refills_seen += 1
        rep.first_t = resp.t if rep.first_t is None else rep.first_t
        rep.last_t = resp.t
        rep.signed_prekey_id = resp.skey.key_id
        if resp.key is None:
            rep.empty_bundle_count += 1
            return True
        key_id = resp.key.key_id
        if key_id in seen:
            rep.duplicate_ids.append(key_id)
        else:
            seen.add(key_id)
        rep.ids.append(key_id)
        rep.bundle_count += 1
    elif kind == "unavailable":
        rep.unavailable_count += 1
    elif kind == "rate-limited":
        rep.rate_limited_count += 1
    return False


# ---- attacker -------------------------------------------------------------------

class Attacker:
    def __init__(self, world: World, name: str = "attacker", link: str = "attacker") -> None:
        self.world = world
        self.name = name
        self.link = link
        self._backoff_ms = 0
        self.clogging_backoffs = 0

    # ---- primitives -------------------------------------------------------

    def _epoch_to_ms(self, t: int) -> int:
        return (t - self.world.server.config.epoch_origin) * SECOND

    def _fetch_bundle(self, target: Jid, max_tries: int = 1000):
        """Fetch until a bundle arrives, backing off on 503 and honouring rate limits."""
        net = self.world.network
        for _ in range(max_tries):
            if self._backoff_ms:
                yield self._backoff_ms
            resp = yield net.fetch_bundle(self.name, target, self.link)
            kind = resp.kind
            if kind == "bundle":
                self._backoff_ms = max(0, self._backoff_ms // 2 - 1)
                return resp
            if kind == "unavailable":
                self.clogging_backoffs += 1
                self._backoff_ms = min(10 * SECOND, max(100, 2 * self._backoff_ms))
            elif kind == "rate-limited":
                yield max(1, resp.retry_after_ms)
            else:
                return resp
        return None

    def query_devices(self, phone: str) -> list[int]:
        fut = self.world.network.query_devices(self.name, phone, self.link)

        def wait():
            return (yield fut)
        return self.world.run_process(wait(), f"{self.name}/usync")

    # ---- depletion ----------------------------------------------------------

    def deplete_process(self, target: Jid, mode: str = "sync", rate: int = 100, stop_when_empty: bool = True,
                        max_requests: int | None = None, until: int | None = None, empty_poll_ms: int = 0):
        if mode not in ("sync", "async"):
            raise ValueError("mode must be sync or async")
        if mode == "async" and rate < 1:
            raise ValueError("async depletion needs at least one outstanding request")
        sim, net = self.world.sim, self.world.network
        rep = DepletionReport(str(target), mode, sim.now)
        seen: set[int] = set()
        flags = {"stop": False, "stopped_at": None}

        def absorb(resp) -> bool:
            return _absorb(rep, seen, resp)

        def worker():
            while not flags["stop"]:
                if max_requests is not None and rep.requests >= max_requests:
                    break
                if until is not None and sim.now >= until:
                    break
                rep.requests += 1
                resp = yield net.fetch_bundle(self.name, target, self.link)
                empty = absorb(resp)
                if empty and stop_when_empty:
                    if not flags["stop"]:
                        flags["stop"], flags["stopped_at"] = True, sim.now
                    break
                if resp.kind == "rate-limited":
                    yield max(1, resp.retry_after_ms)
                elif empty and empty_poll_ms:
                    yield empty_poll_ms

        if mode == "sync":
            yield from worker()
        else:
            procs = [sim.spawn(worker(), f"{self.name}/w{i}") for i in range(rate)]
            for p in procs:
                yield p.result
        end = flags["stopped_at"] if flags["stopped_at"] is not None else sim.now
        rep.duration_ms = end - rep.started_ms
        self.world.timeline.record(sim.now, self.name, "depletion", target=str(target),
                                   bundles=rep.bundle_count, duration_ms=rep.duration_ms)
        return rep

    def paced_process(self, target: Jid, rps: float, until: int):
        """Open-loop requests at a constant rate, regardless of responses."""
        if rps <= 0:
            raise ValueError("rate must be positive")
        sim, net = self.world.sim, self.world.network
        rep = DepletionReport(str(target), "paced", sim.now)
        seen: set[int] = set()
        step = 1000.0 / rps
        due = float(sim.now)
        while sim.now < until:
            rep.requests += 1
            net.fetch_bundle(self.name, target, self.link).add_callback(
                lambda resp: _absorb(rep, seen, resp))
            due += step
            yield max(0, round(due) - sim.now)
        rep.duration_ms = sim.now - rep.started_ms
        return rep

    def deplete(self, target: Jid, mode: str = "sync", rate: int = 100, stop_when_empty: bool = True,
                max_requests: int | None = None, until: int | None = None, empty_poll_ms: int = 0) -> DepletionReport:
        return self.world.run_process(
            self.deplete_process(target, mode, rate, stop_when_empty, max_requests, until, empty_poll_ms),
            f"{self.name}/deplete")

    # ---- fingerprinting ------------------------------------------------------------

    def fingerprint_process(self, target: Jid, allow_depletion: bool = True,
                            threshold: int = RANDOM_ID_THRESHOLD):
        bundle = yield from self._fetch_bundle(target)
        if bundle is None or bundle.kind != "bundle":
            raise RuntimeError(f"no bundle obtainable for {target}")
        ids = [bundle.key.key_id] if bundle.key is not None else []
        signed_id = bundle.skey.key_id
        evidence: list[tuple[str, object, str]] = [
            ("device_id", target.device_id, "0 is the main device, >0 a companion"),
            ("signed_prekey_id", signed_id, f"> {threshold} means randomly initialised"),
        ]
        space = id_space(ids, signed_id)
        if (space == "counter" and target.device_id > 0 and signed_id <= threshold and allow_depletion):
            rep = yield from self.deplete_process(target, stop_when_empty=True, max_requests=4 * REFILL_BATCH)
            ids.extend(rep.ids)
            space = id_space(ids, signed_id)
            if space == "counter" and ids:
                lo, hi = min(ids), max(ids)
                evidence.append(("min_otpk_id", lo, "smallest id in the drained batch"))
                evidence.append(("max_otpk_id", hi, "largest id in the drained batch"))
                evidence.append(("initial_batch", infer_initial_batch(lo, hi),
                                 "id residue modulo the 812-key refill: 50 Windows, 200 Web"))
        if space == "hashed":
            evidence.append(("key_id_space", "hashed",
                             "ids are key hashes: id-based features removed, guess at chance"))
        else:
            evidence.append(("key_id_space", "counter", "ids fit sequential 24-bit counters"))
        os_guess, confidence = decide({n: v for n, v, _ in evidence}, threshold)
        verdict = FingerprintVerdict(os_guess, confidence, tuple(evidence))
        self.world.timeline.record(self.world.sim.now, self.name, "fingerprint", target=str(target),
                                   os=os_guess.value, confidence=confidence)
        return verdict

    def fingerprint(self, target: Jid, allow_depletion: bool = True,
                    threshold: int = RANDOM_ID_THRESHOLD) -> FingerprintVerdict:
        return self.world.run_process(self.fingerprint_process(target, allow_depletion, threshold),
                                      f"{self.name}/fingerprint")

    # ---- online monitoring ------------------------------------------------------------

    def default_response_window(self) -> int:
        return round(3 * self.world.catalog.latency_pool_quantile(0.95))

    def monitor_process(self, target: Jid, poll_interval_ms: int, horizon_ms: int,
                        response_window_ms: int | None = None, check_interval_ms: int = 2 * SECOND):
        sim = self.world.sim
        window = response_window_ms if response_window_ms is not None else self.default_response_window()
        timeline = OnlineTimeline(str(target), window)
        end = sim.now + horizon_ms
        last_t: int | None = None
        believed = "unknown"

        def observe(b) -> bool:
            nonlocal last_t, believed
            if last_t is None:
                last_t = b.t
                return False
            if b.t > last_t:
                last_t = b.t
                timeline.add(self._epoch_to_ms(b.t), "online", "refill-observed")
                believed = "online"
                return True
            return False

        while sim.now < end:
            poll_start = sim.now
            b = yield from self._fetch_bundle(target)
            if b is None:
                break
            first = last_t is None
            refilled = observe(b)
            if first:
                timeline.add(self._epoch_to_ms(b.t), "online", "timestamp")
                believed = "online"
            armed_at = None
            if believed != "offline" or refilled:
                # drain until the store is empty (notification pending) or a refill shows up
                while b.key is not None and sim.now < end:
                    b = yield from self._fetch_bundle(target)
                    if b is None or observe(b):
                        break
                if b is not None and b.key is None:
                    armed_at = sim.now
            if armed_at is not None:
                answered = False
                while sim.now < min(armed_at + window, end):
                    yield check_interval_ms
                    b = yield from self._fetch_bundle(target)
                    if b is not None and observe(b):
                        answered = True
                        break
                if not answered and sim.now >= armed_at + window:
                    last_seen = self._epoch_to_ms(last_t)
                    timeline.add((last_seen + armed_at) // 2, "offline", "refill-missing")
                    believed = "offline"
            next_poll = min(poll_start + poll_interval_ms, end)
            if next_poll > sim.now:
                yield next_poll - sim.now
        timeline.clogging_backoffs = self.clogging_backoffs
        return timeline

    def monitor_online(self, target: Jid, poll_interval_ms: int, horizon_ms: int,
                       response_window_ms: int | None = None) -> OnlineTimeline:
        # every loop in the process checks the horizon, so it ends shortly after it
        return self.world.run_process(
            self.monitor_process(target, poll_interval_ms, horizon_ms, response_window_ms),
            f"{self.name}/monitor")

    # ---- activity ---------------------------------------------------------------------

    @staticmethod
    def activity_score(report: DepletionReport, verdict: FingerprintVerdict) -> ActivityScore:
        """Keys used since the last refill, and in total where ids are predictable."""
        used = REFILL_BATCH - report.bundle_count
        if verdict.os_guess is OsKind.ANDROID or report.max_otpk_id is None:
            return ActivityScore(used, None, None)
        initial = verdict.features().get("initial_batch")
        if initial is None:
            initial = 812 if verdict.os_guess is OsKind.IPHONE else infer_initial_batch(
                report.min_otpk_id, report.max_otpk_id)
        refills = (report.max_otpk_id - initial) // REFILL_BATCH
        if refills <= 0:
            return ActivityScore(initial - report.bundle_count, initial - report.bundle_count, 0)
        # each refill discarded the 10 keys left at the watermark
        total = (initial - 10) + (refills - 1) * (REFILL_BATCH - 10) + used
        return ActivityScore(used, total, refills)

    # ---- denial of service ----------------------------------------------------------------

    def dos_clog_process(self, target: Jid, rate: float, duration_ms: int, legit=None,
                         probes: int = 100, message: bytes | None = b"hello",
                         restart_after_ms: int = 30 * SECOND, warmup_ms: int = 1500):
        sim, net = self.world.sim, self.world.network
        start = sim.now
        rep = DosReport(str(target), rate, duration_ms)
        per_ms = rate / 1000.0

        def count(resp) -> None:
            if resp.kind == "unavailable":
                rep.attack_unavailable += 1

        def flood():
            acc = 0.0
            while sim.now < start + duration_ms:
                acc += per_ms
                n = int(acc)
                acc -= n
                for _ in range(n):
                    rep.attack_requests += 1
                    net.fetch_bundle(self.name, target, self.link).add_callback(count)
                yield 1

        if legit is None:
            legit = self.world.add_contact("legit-client")
        rng = self.world.rng(f"{self.name}/dos-probes")
        lo = min(warmup_ms, duration_ms // 2)
        probe_times = sorted(start + lo + rng.random() * (duration_ms - lo) for _ in range(probes))

        def probe(at: float):
            yield max(0, round(at) - sim.now)
            resp = yield net.fetch_bundle(f"{legit.name}/probe", target, legit.link)
            rep.probe_attempts += 1
            if resp.kind != "bundle":
                rep.probe_failures += 1

        for t in probe_times:
            sim.spawn(probe(t), f"{legit.name}/probe")
        if message is not None:
            sim.call_at(start + duration_ms // 2, legit.send_message, target, message)
        yield sim.spawn(flood(), f"{self.name}/flood").result
        # let in-flight traffic settle, then check the queued message is still stuck
        yield restart_after_ms
        device = self.world.devices.get(target)
        if message is not None:
            rep.delivered_before_restart = _delivered(device, legit.name, message)
            legit.restart()
            yield 10 * SECOND
            rep.legit_session_established = (str(target) in legit.sessions
                                             and _delivered(device, legit.name, message))
        return rep

    def dos_clog(self, target: Jid, rate: float, duration_ms: int, legit=None, probes: int = 100,
                 message: bytes | None = b"hello") -> DosReport:
        return self.world.run_process(
            self.dos_clog_process(target, rate, duration_ms, legit, probes, message), f"{self.name}/dos")


def _delivered(device, sender: str, text: bytes) -> bool:
    if device is None:
        return False
    return any(m.sender == sender and m.plaintext == text for m in device.received)


# ---- no-OTPK success-rate experiment ---------------------------------------------------------

@dataclass
class PfsResult:
    hardware: str
    state: str
    trials: int
    sessions: int
    no_otpk_sessions: int
    target: float | None
    oracle_checked: bool
    oracle_precision: float | None = None
    oracle_recall: float | None = None
    oracle_exact: bool | None = None
    simulated_ms: int = 0
    refills: int = 0

    @property
    def success_rate(self) -> float:
        return self.no_otpk_sessions / self.sessions if self.sessions else 0.0

    def csv_row(self) -> dict:
        return {"hardware": self.hardware, "state": self.state, "trials": self.trials,
                "sessions": self.sessions, "no_otpk_sessions": self.no_otpk_sessions,
                "success_rate": round(self.success_rate, 4),
                "target": self.target, "oracle_precision": self.oracle_precision,
                "oracle_recall": self.oracle_recall, "oracle_exact": self.oracle_exact,
                "refills": self.refills, "simulated_ms": self.simulated_ms}


def pfs_experiment(hardware: str, state: str, trials: int = 500, seed: int = 0, *, cycles: int = 60,
                   verify: bool = True, victim_online: bool = True, catalog: Catalog | None = None,
                   server_config: ServerConfig | None = None, network_config: NetworkConfig | None = None,
                   reply_delay_ms: int = 2 * SECOND, empty_poll_ms: int = SECOND) -> PfsResult:
    """Fraction of honest initiations that get a bundle without a one-time prekey.

    The attacker depletes synchronously for the whole run; initiators arrive
    at stratified uniform times spread over roughly ``cycles`` refill cycles.
    With ``verify`` the recorded traffic is run through the compromise oracle
    and the decrypted set is compared with the sessions that lacked a key.
    """
    catalog = catalog or load_catalog()
    power, link = parse_state(state)
    hw = catalog.hardware_model(hardware)
    cell = hw.cells[f"{power}-{link}"]
    world = World(seed, server_config=server_config, network_config=network_config, catalog=catalog,
                  detail=False, log_server_messages=False)
    policy = DevicePolicy(reply_delay_ms=reply_delay_ms)
    bob = world.add_device("4915100000001", hw.os, hardware=hardware, link=link, policy=policy,
                           power=power if victim_online else "offline")
    rtt_s = world.network.model.config.rtt_ms[link] / 1000.0
    timing = CycleTiming(tau_s=(world.network.model.config.rtt_ms["attacker"]
                                + world.network.model.config.service_min_ms) / 1000.0,
                         empty_poll_s=empty_poll_ms / 1000.0)
    cycle_ms = round(1000 * mean_cycle_s(cell.mu, cell.sigma, rtt_s, timing))
    warmup = cycle_ms + 10 * SECOND
    span = cycles * cycle_ms
    attacker = Attacker(world)
    world.sim.spawn(attacker.deplete_process(bob.jid, stop_when_empty=False, until=warmup + span,
                                             empty_poll_ms=empty_poll_ms), "attacker/deplete")

    rng = world.rng("trials")
    width = span / trials
    records: list[InitiatedSession] = []
    post_reply: list = []
    msg_rng = world.rng("trial-messages")

    def initiator(i: int, at: int):
        yield at - world.sim.now
        alice = world.add_contact(f"alice-{i}")
        n = msg_rng.randint(1, 3)
        rec = yield from alice.open_session(bob.jid, [f"pre {i}/{k}".encode() for k in range(n)])
        if not isinstance(rec, InitiatedSession):
            return
        records.append(rec)
        for _ in range(30):
            if rec.replies:
                post_reply.append(alice.send(bob.jid, f"post {i}".encode()))
                return
            yield SECOND

    for i in range(trials):
        at = warmup + round((i + rng.random()) * width)
        world.sim.spawn(initiator(i, at), f"alice-{i}")
    world.run(until=warmup + span + 60 * SECOND)

    sessions = len(records)
    no_otpk = sum(1 for r in records if r.without_one_time_prekey)
    result = PfsResult(hardware, state, trials, sessions, no_otpk, cell.target, verify,
                       simulated_ms=world.sim.now, refills=bob.state.costs.refill_events)
    if verify:
        expected = {id(e) for r in records if r.without_one_time_prekey for e in r.sent}
        recorded = world.channel.envelopes()
        try:
            results = compromise_oracle(recorded, bob.identity, bob.live_signed_prekeys())
        except ErasedSecretError:
            results = []
        got = {id(recorded[r.index]) for r in results if r.decrypted}
        tp = len(expected & got)
        result.oracle_precision = tp / len(got) if got else (1.0 if not expected else 0.0)
        result.oracle_recall = tp / len(expected) if expected else 1.0
        result.oracle_exact = expected == got
    return result


CELL_STATES = ("standby-wifi", "standby-cellular", "screen-on-wifi", "screen-on-cellular")


def pfs_matrix(trials: int = 500, seed: int = 0, *, cycles: int = 60, verify: bool = True,
               hardware: Iterable[str] | None = None, catalog: Catalog | None = None) -> list[PfsResult]:
    catalog = catalog or load_catalog()
    names = list(hardware) if hardware is not None else list(catalog.hardware)
    out = []
    for n, name in enumerate(names):
        for k, state in enumerate(CELL_STATES):
            out.append(pfs_experiment(name, state, trials, seed * 1000 + n * 10 + k, cycles=cycles,
                                      verify=verify, catalog=catalog))
    return out


def reports_csv(rows: Iterable[dict]) -> str:
    return _csv(rows)
