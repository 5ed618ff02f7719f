"""Acceptance criteria 1-10.

Each test records one ``criterion N: PASS|FAIL ...`` line; the lines are
printed together at the end of the pytest run (see conftest.py) and when the
file is executed directly.
"""
import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from helpers import TRUTH, fingerprint_world
from prekeysim import crypto as c
from prekeysim.attacker import Attacker, pfs_matrix
from prekeysim.devices import OnlineSchedule, init_device, load_catalog
from prekeysim.experiments import (
    cost_under_attack,
    depletion_duration,
    empty_window_under_attack,
    load_sweep,
    on_demand_rotation,
    signed_lifetime_exposure,
)
from prekeysim.server import FaultModes, PrekeyServer, RateLimit, ServerConfig
from prekeysim.simnet import HOUR, MINUTE, SECOND
from prekeysim.world import World

RESULTS: list[str] = []
CATALOG = load_catalog()


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---- 1: handshake agreement --------------------------------------------------------------

class _RootTap:
    """Captures rk0 from both sides by wrapping the root-init KDF."""

    def __init__(self) -> None:
        self.seen: list[bytes] = []
        self._orig = c.kdf_root_init

    def __call__(self, material: bytes) -> bytes:
        out = self._orig(material)
        self.seen.append(out)
        return out


def _agreement_trial(rng: random.Random, with_otpk: bool, tap: _RootTap) -> bool:
    ik_a = c.IdentityKeyPair.from_seed(rng.randbytes(32))
    ik_b = c.IdentityKeyPair.from_seed(rng.randbytes(32))
    spk = c.generate_signed_prekey(ik_b, rng.randrange(1 << 24), rng)
    otpk = c.generate_keypair(c.KeyRole.ONE_TIME_PREKEY, rng, key_id=rng.randrange(1 << 24))

    class Bundle:
        identity = ik_b.public
        signed_prekey_id = spk.key_id
        signed_prekey = spk.public
        signed_prekey_signature = spk.signature
        one_time_prekey = (otpk.key_id, otpk.public) if with_otpk else None

    tap.seen.clear()
    alice = c.x3dh_initiate(ik_a, Bundle, rng)
    e0 = c.encrypt_next(alice, b"first", rng)
    e1 = c.encrypt_next(alice, b"second", rng)
    # delivering the second message first leaves mk_{0,0} in Bob's skipped-key store
    bob, pt1 = c.x3dh_respond(ik_b, spk, otpk if with_otpk else None, e1, ik_a.public)
    bob_mk00 = bob.skipped[(e1.ratchet_public, 0)].key
    pt0 = c.decrypt(bob, e0)
    rk0_a, rk0_b = tap.seen
    return (rk0_a == rk0_b and alice.root_key == bob.root_key
            and alice.send_chain.key == bob.recv_chain.key
            and alice.emitted_keys[0].key == bob_mk00
            and (pt0, pt1) == (b"first", b"second")
            and alice.handshake_dh_count == bob.handshake_dh_count == (4 if with_otpk else 3))


def test_criterion_01_handshake_agreement(monkeypatch):
    tap = _RootTap()
    monkeypatch.setattr(c, "kdf_root_init", tap)
    rng = random.Random(2024)
    start = time.perf_counter()
    agree = {v: sum(_agreement_trial(rng, v, tap) for _ in range(1000)) for v in (True, False)}
    elapsed = time.perf_counter() - start
    ok = agree == {True: 1000, False: 1000} and elapsed < 10
    record(1, ok, f"agreement with OTPK {agree[True]}/1000, without {agree[False]}/1000, {elapsed:.1f} s")


# ---- 2: PFS witness -----------------------------------------------------------------------------

def test_criterion_02_pfs_witness():
    rng = random.Random(7)
    ik_b = c.IdentityKeyPair.from_seed(rng.randbytes(32))
    spk = c.generate_signed_prekey(ik_b, 1, rng)
    recorded, expected = [], set()
    for n in range(200):
        with_otpk = n % 2 == 0
        otpk = c.generate_keypair(c.KeyRole.ONE_TIME_PREKEY, rng, key_id=n + 1)
        ik_a = c.IdentityKeyPair.from_seed(rng.randbytes(32))

        class Bundle:
            identity = ik_b.public
            signed_prekey_id = spk.key_id
            signed_prekey = spk.public
            signed_prekey_signature = spk.signature
            one_time_prekey = (otpk.key_id, otpk.public) if with_otpk else None

        alice = c.x3dh_initiate(ik_a, Bundle, rng)
        pre = [c.encrypt_next(alice, b"pre %d/%d" % (n, i), rng) for i in range(rng.randint(1, 5))]
        bob, _ = c.x3dh_respond(ik_b, spk, otpk if with_otpk else None, pre[0], ik_a.public)
        for env in pre[1:]:
            c.decrypt(bob, env)
        reply = c.encrypt_next(bob, b"reply", rng)
        c.decrypt(alice, reply)
        post = [c.encrypt_next(alice, b"post %d/%d" % (n, i), rng) for i in range(5)]
        for env in post:
            c.decrypt(bob, env)
        for env in pre:
            if not with_otpk:
                expected.add(len(recorded))
            recorded.append(env)
        recorded.append(reply)
        recorded.extend(post)
    got = {r.index for r in c.compromise_oracle(recorded, ik_b, spk) if r.decrypted}
    tp = len(got & expected)
    precision = tp / len(got) if got else 0.0
    recall = tp / len(expected)
    record(2, precision == recall == 1.0,
           f"{len(recorded)} envelopes, {len(expected)} expected, precision {precision:.3f} recall {recall:.3f}")


# ---- 3: single handout ------------------------------------------------------------------------------

def _fresh_server(seed: int, config: ServerConfig):
    srv = PrekeyServer(config, rng=random.Random(seed))
    upload, device = init_device(CATALOG.profile("iphone"), seed)
    return srv, srv.register_device("4919" + str(seed), upload, 0), device


def test_criterion_03_single_handout():
    no_overload = dict(overload_soft_rps=1e9, overload_hard_rps=2e9)
    clean = 0
    for seed in range(50):
        srv, jid, _ = _fresh_server(seed, ServerConfig(**no_overload))
        got, lock = [], threading.Lock()

        def worker():
            while (b := srv.fetch_bundle("eve", jid, 0)).key is not None:
                with lock:
                    got.append(b.key.key_id)

        with ThreadPoolExecutor(100) as pool:
            for _ in range(100):
                pool.submit(worker)
        clean += len(got) == 812 and set(got) == set(range(1, 813))

    p, fetches = 0.005, 10_000
    srv, jid, device = _fresh_server(99, ServerConfig(fault_modes=FaultModes(double_handout_probability=p),
                                                      **no_overload))
    dups, seen = 0, set()
    for i in range(fetches):
        b = srv.fetch_bundle("eve", jid, i)
        if b.key is None:
            srv.upload_prekeys(jid, device.next_refill_batch(), i)
            seen.clear()
            b = srv.fetch_bundle("eve", jid, i)
        dups += b.key.key_id in seen
        seen.add(b.key.key_id)
    mean, sd = fetches * p, math.sqrt(fetches * p * (1 - p))
    ok = clean == 50 and abs(dups - mean) <= 3 * sd
    record(3, ok, f"{clean}/50 seeds exact; {dups} duplicates vs {mean:.0f} +- {3 * sd:.1f}")


# ---- 4: refill mechanics ---------------------------------------------------------------------------

def test_criterion_04_refill_mechanics():
    problems = []
    for n, profile in enumerate(sorted(TRUTH)):
        world = World(n, detail=False)
        if profile in ("web", "macos", "windows"):
            world.add_device("4918000000000", "android", schedule=OnlineSchedule.always("offline"))
        dev = world.add_device("4918000000000", profile, power="standby", link="wifi")
        at_notification = []
        inner = world.server.on_low_watermark
        world.server.on_low_watermark = lambda j, now, inner=inner: (
            at_notification.append(world.server.store_size(j)), inner(j, now))
        Attacker(world).deplete(dev.jid, stop_when_empty=False, until=10 * MINUTE, empty_poll_ms=SECOND)
        world.run(until=20 * MINUTE)
        uploads = [e for e in world.timeline.of_kind("upload") if e.payload["count"] and e.time > 0]
        if not uploads or set(at_notification) != {10}:
            problems.append(f"{profile}: notified at {sorted(set(at_notification))}")
        if any(e.payload["count"] != 812 for e in uploads):
            problems.append(f"{profile}: upload sizes {sorted({e.payload['count'] for e in uploads})}")
        batches = dev.refill_batches
        gaps = {b[0] - a[-1] - 1 for a, b in zip(batches, batches[1:])}
        if gaps != {2 if profile == "android" else 0}:
            problems.append(f"{profile}: id gaps {gaps}")
        # right after each upload the store holds exactly the new batch
        srv_rec = world.server.record(dev.jid)
        if world.server.store_size(dev.jid) > 812 or srv_rec.uploads != len(uploads):
            problems.append(f"{profile}: store {world.server.store_size(dev.jid)}")
        if any(e.payload["discarded"] > 10 for e in uploads):
            problems.append(f"{profile}: discarded more than the watermark remainder")
    # leftover invalidation in isolation
    world = World(50)
    dev = world.add_device("4918100000000", "iphone", power="offline")
    dev.refill_now()
    if world.server.store_size(dev.jid) != 812 or min(world.server.record(dev.jid).store.ids) != 813:
        problems.append("leftover keys survived an upload")
    record(4, not problems, "; ".join(problems) or
           "trigger at 10 keys, 812-key uploads, Android gap 2, leftovers replaced for all 5 profiles")


# ---- 5: fingerprinting ----------------------------------------------------------------------------------

def test_criterion_05_fingerprinting():
    correct = total = 0
    for profile in sorted(TRUTH):
        for seed in range(50):
            world, dev = fingerprint_world(profile, seed, age_refills=seed % 4)
            correct += Attacker(world).fingerprint(dev.jid).os_guess.value == TRUTH[profile]
            total += 1
    hashed_correct = hashed_total = 0
    for profile in ("macos", "windows", "web"):
        for seed in range(50):
            world, dev = fingerprint_world(profile, seed, age_refills=seed % 4, hash_ids=True,
                                           uniform_batch=812)
            hashed_correct += Attacker(world).fingerprint(dev.jid).os_guess.value == TRUTH[profile]
            hashed_total += 1
    accuracy, hashed = correct / total, hashed_correct / hashed_total
    record(5, accuracy == 1.0 and hashed <= 0.40,
           f"default {correct}/{total}; hashed ids + uniform batch companions {hashed:.1%} (<= 40%)")


# ---- 6: depletion timing ----------------------------------------------------------------------------------

def test_criterion_06_depletion_timing():
    sweep = [(load, rep.duration_ms / 1000) for load, rep in load_sweep(0)]
    rep = depletion_duration(0, mode="async", rate=100)
    fast = rep.duration_ms / 1000
    ok = all(40 <= s <= 120 for _, s in sweep) and fast <= 12 and rep.bundle_count == 812
    desc = ", ".join(f"load {load:.2f}: {s:.1f} s" for load, s in sweep)
    record(6, ok, f"sync {desc}; async 100 outstanding {fast:.1f} s")


# ---- 7: denial of service ----------------------------------------------------------------------------------

def test_criterion_07_dos():
    world = World(0, detail=False)
    bob = world.add_device("4917300000000", "android", hardware="galaxy-a54", power="screen-on", link="wifi")
    rep = Attacker(world).dos_clog(bob.jid, 2000, 60 * SECOND, probes=200)
    world2 = World(1, detail=False)
    bob2 = world2.add_device("4917300000001", "android", hardware="galaxy-a54", power="screen-on", link="wifi")
    light = Attacker(world2).dos_clog(bob2.jid, 10, 60 * SECOND, probes=200, message=None)
    light_ok = light.probe_failures == 0 and light.probe_attempts == 200
    ok = (rep.victim_fetch_failure_rate >= 0.99 and not rep.delivered_before_restart
          and rep.legit_session_established and light_ok)
    record(7, ok, f"failure {rep.victim_fetch_failure_rate:.3f} at 2000 rps; delivered before restart "
                  f"{rep.delivered_before_restart}, after {rep.legit_session_established}; "
                  f"10 rps success {1 - light.victim_fetch_failure_rate:.0%}")


# ---- 8: success-rate matrix ---------------------------------------------------------------------------------

def test_criterion_08_success_matrix():
    results = pfs_matrix(trials=500, seed=1, cycles=60, verify=True)
    worst = max(results, key=lambda r: abs(r.success_rate - r.target))
    by_cell = {(r.hardware, r.state): r.success_rate for r in results}
    ordering = by_cell[("iphone-se", "standby-wifi")] > by_cell[("galaxy-a54", "standby-wifi")]
    within = all(abs(r.success_rate - r.target) <= 0.05 for r in results)
    oracle = all(r.oracle_exact for r in results)
    record(8, len(results) == 24 and within and ordering and oracle,
           f"24 cells, worst {worst.hardware}/{worst.state} {worst.success_rate:.3f} vs {worst.target:.2f}; "
           f"iPhone SE {by_cell[('iphone-se', 'standby-wifi')]:.2f} > Galaxy A54 "
           f"{by_cell[('galaxy-a54', 'standby-wifi')]:.2f}; oracle exact in all cells: {oracle}")


# ---- 9: countermeasures ----------------------------------------------------------------------------------------

def test_criterion_09_countermeasures():
    limited = empty_window_under_attack(0, rate_limit=RateLimit(1, MINUTE), horizon_ms=24 * HOUR)
    short = signed_lifetime_exposure(2, sessions=60)
    long_ = signed_lifetime_exposure(30, sessions=60)
    ratio = long_.mean_exposure_ms / short.mean_exposure_ms
    on_demand = on_demand_rotation(5 * MINUTE, sessions=1000)
    ok = limited.empty_fraction < 0.01 and ratio >= 14 and on_demand.stale_errors == 0
    record(9, ok, f"rate limit empty {limited.empty_fraction:.2%}; exposure 30 d / 2 d = {ratio:.1f}x; "
                  f"on-demand stale errors {on_demand.stale_errors}/{on_demand.established} "
                  f"({on_demand.no_otpk_sessions} without OTPK)")


# ---- 10: cost accounting ---------------------------------------------------------------------------------------------

def test_criterion_10_cost():
    cost = cost_under_attack(cycle_s=15.0, hours=1.0)
    mb = cost.megabytes_per_hour
    record(10, abs(mb - 8.0) <= 0.8,
           f"{cost.refills} refills/h, {mb:.2f} MB/h (8 +- 0.8), mean cycle {cost.mean_cycle_s:.2f} s, "
           f"battery constant {cost.battery_percent:.0f}%/h")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
