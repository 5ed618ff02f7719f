"""Experiment drivers for timing, countermeasures and cost accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .attacker import Attacker, DepletionReport
from .calibration import CycleTiming, mean_cycle_s
from .crypto import ErasedSecretError, compromise_oracle
from .devices import (
    BATTERY_PERCENT_PER_HOUR,
    BYTES_PER_KEY,
    DevicePolicy,
    InitiatedSession,
    OnlineSchedule,
    load_catalog,
    parse_state,
)
from .server import RateLimit, ServerConfig
from .simnet import DAY, HOUR, MINUTE, SECOND, NetworkConfig
from .world import World

DEFAULT_LOAD_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


def _offline_target(world: World, profile: str = "android"):
    return world.add_device("4915100000002", profile, schedule=OnlineSchedule.always("offline"))


# ---- depletion timing -------------------------------------------------------------

def depletion_duration(seed: int = 0, *, mode: str = "sync", rate: int = 100,
                       network_config: NetworkConfig | None = None) -> DepletionReport:
    """Drain a full, offline 812-key store once."""
    world = World(seed, network_config=network_config, detail=False)
    bob = _offline_target(world)
    return Attacker(world).deplete(bob.jid, mode=mode, rate=rate)


def load_sweep(seed: int = 0, loads=DEFAULT_LOAD_SWEEP) -> list[tuple[float, DepletionReport]]:
    return [(load, depletion_duration(seed, network_config=NetworkConfig(background_load=load)))
            for load in loads]


# ---- rate limiting -------------------------------------------------------------------

@dataclass
class EmptyWindowResult:
    horizon_ms: int
    empty_ms: int
    bundles: int
    rate_limited: int

    @property
    def empty_fraction(self) -> float:
        return self.empty_ms / self.horizon_ms


def empty_window_under_attack(seed: int = 0, *, rate_limit: RateLimit | None = None, horizon_ms: int = 24 * HOUR,
                              hardware: str = "galaxy-a54", state: str = "standby-wifi") -> EmptyWindowResult:
    """Fraction of time an always-online target's store is empty under continuous sync depletion."""
    power, link = parse_state(state)
    world = World(seed, server_config=ServerConfig(rate_limit=rate_limit), detail=False,
                  log_server_messages=False)
    bob = world.add_device("4915100000003", "android", hardware=hardware, power=power, link=link)
    attacker = Attacker(world)
    proc = world.sim.spawn(attacker.deplete_process(bob.jid, stop_when_empty=False, until=horizon_ms,
                                                    empty_poll_ms=SECOND), "attacker/deplete")
    world.run(until=horizon_ms)
    empty = world.server.empty_time(bob.jid, horizon_ms)
    world.run(until=horizon_ms + 2 * MINUTE)
    rep = proc.result.value
    return EmptyWindowResult(horizon_ms, empty, rep.bundle_count, rep.rate_limited_count)


# ---- signed prekey lifetime ------------------------------------------------------------

@dataclass
class ExposureResult:
    lifetime_ms: int
    sessions: int
    exposures_ms: list[int] = field(default_factory=list)
    decrypted_before_erasure: int = 0
    refused_after_erasure: int = 0

    @property
    def mean_exposure_ms(self) -> float:
        return sum(self.exposures_ms) / len(self.exposures_ms) if self.exposures_ms else math.nan


def signed_lifetime_exposure(lifetime_days: float, sessions: int = 60, seed: int = 0) -> ExposureResult:
    """How long a recorded no-OTPK session stays decryptable after compromise.

    The session's exposure ends when the victim erases the signed prekey it
    was built on: one rotation interval after that key was superseded.
    Sessions start at stratified times over three lifetimes; before each one
    the attacker empties the store so the initiator gets no one-time prekey.
    """
    lifetime = round(lifetime_days * DAY)
    world = World(seed, detail=False, log_server_messages=False)
    policy = DevicePolicy(signed_rotation_interval_ms=lifetime)
    bob = world.add_device("4915100000004", "iphone", hardware="iphone-se", power="standby",
                           link="cellular", policy=policy)
    attacker = Attacker(world)
    result = ExposureResult(lifetime, sessions)
    rng = world.rng("sessions")
    span = 3 * lifetime
    records: list[tuple[InitiatedSession, object]] = []

    def alive_check(env, spk_id: int) -> None:
        pair = bob.signed[spk_id]
        if not pair.erased and compromise_oracle([env], bob.identity, pair)[0].decrypted:
            result.decrypted_before_erasure += 1

    def session(i: int, at: int):
        yield at - world.sim.now
        yield from attacker.deplete_process(bob.jid, stop_when_empty=True, max_requests=2000)
        alice = world.add_contact(f"alice-{i}")
        rec = yield from alice.open_session(bob.jid, [b"initial message"])
        if isinstance(rec, InitiatedSession) and rec.without_one_time_prekey:
            env = rec.sent[0]
            records.append((rec, env))
            world.sim.call_later(MINUTE, alive_check, env, env.prekey.signed_prekey_id)

    for i in range(sessions):
        world.sim.spawn(session(i, round((i + rng.random()) * span / sessions)), f"session-{i}")
    world.run(until=span + 3 * lifetime)

    for rec, env in records:
        spk_id = env.prekey.signed_prekey_id
        life = next(l for l in bob.signed_history if l.key_id == spk_id)
        if life.erased_ms is None:
            continue
        result.exposures_ms.append(life.erased_ms - rec.fetched_ms)
        try:
            compromise_oracle([env], bob.identity, bob.signed[spk_id])
        except ErasedSecretError:
            result.refused_after_erasure += 1
    return result


# ---- on-demand rotation ----------------------------------------------------------------

@dataclass
class OnDemandResult:
    min_validity_ms: int
    sessions: int
    established: int
    no_otpk_sessions: int
    stale_errors: int
    rotations: int


def on_demand_rotation(min_validity_ms: int, sessions: int = 1000, seed: int = 0, *,
                       horizon_ms: int = HOUR, hardware: str = "iphone-se",
                       state: str = "standby-cellular") -> OnDemandResult:
    """Honest initiators against a target that rotates its signed prekey after no-OTPK sessions."""
    power, link = parse_state(state)
    world = World(seed, detail=False, log_server_messages=False)
    policy = DevicePolicy(on_demand_min_validity_ms=min_validity_ms, reply_delay_ms=2 * SECOND)
    bob = world.add_device("4915100000006", "iphone", hardware=hardware, power=power, link=link, policy=policy)
    attacker = Attacker(world)
    world.sim.spawn(attacker.deplete_process(bob.jid, stop_when_empty=False, until=horizon_ms,
                                             empty_poll_ms=SECOND), "attacker/deplete")
    rng = world.rng("initiators")
    records: list[InitiatedSession] = []

    def initiator(i: int, at: int):
        yield at - world.sim.now
        rec = yield from world.add_contact(f"alice-{i}").open_session(bob.jid, [b"hi"])
        if isinstance(rec, InitiatedSession):
            records.append(rec)

    for i in range(sessions):
        world.sim.spawn(initiator(i, round((i + rng.random()) * horizon_ms / sessions)), f"alice-{i}")
    world.run(until=horizon_ms + MINUTE)
    return OnDemandResult(min_validity_ms, sessions, len(records),
                          sum(1 for r in records if r.without_one_time_prekey),
                          bob.stale_errors, bob.state.costs.rotations)


# ---- cost accounting ----------------------------------------------------------------

@dataclass
class CostResult:
    hours: float
    refills: int
    bytes_uploaded: int
    mean_cycle_s: float
    battery_percent: float

    @property
    def megabytes_per_hour(self) -> float:
        return self.bytes_uploaded / 1e6 / self.hours


def cost_under_attack(cycle_s: float = 15.0, hours: float = 1.0, seed: int = 0, *,
                      hardware: str = "galaxy-a54", state: str = "standby-cellular") -> CostResult:
    """Refill traffic when an attacker paces depletion to one refill every ``cycle_s``.

    The attacker sends at a constant rate chosen so that 802 pops plus the
    target's mean reaction time add up to ``cycle_s``.
    """
    catalog = load_catalog()
    power, link = parse_state(state)
    cell = catalog.hardware_model(hardware).cells[f"{power}-{link}"]
    world = World(seed, detail=False, log_server_messages=False)
    bob = world.add_device("4915100000007", "android", hardware=hardware, power=power, link=link)
    rtt_s = world.network.model.config.rtt_ms[link] / 1000.0
    reaction_s = rtt_s + math.exp(cell.mu + cell.sigma ** 2 / 2)
    pops = bob.profile.refill_batch - bob.profile.refill_trigger
    if cycle_s <= reaction_s:
        raise ValueError("cycle shorter than the target's reaction time")
    rps = pops / (cycle_s - reaction_s)
    horizon = round(hours * HOUR)
    attacker = Attacker(world)
    world.sim.spawn(attacker.paced_process(bob.jid, rps, until=horizon), "attacker/paced")
    world.run(until=horizon)
    costs = bob.state.costs
    refills = costs.refill_events
    return CostResult(hours, refills, costs.bytes, hours * 3600 / refills if refills else math.inf,
                      BATTERY_PERCENT_PER_HOUR * hours)
