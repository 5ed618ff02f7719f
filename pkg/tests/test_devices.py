import random

import pytest
from hypothesis import given, settings, strategies as st

from prekeysim.calibration import empty_fraction, solve_mu
from prekeysim.crypto import x25519_public
from prekeysim.devices import (
    ID_SPACE,
    DevicePolicy,
    KeyBatch,
    OnlineSchedule,
    OsKind,
    init_device,
    load_catalog,
    parse_state,
)
from prekeysim.simnet import DAY, HOUR, SECOND
from prekeysim.world import World

CATALOG = load_catalog()

# Client behaviour table: registration, signed id init, one-time id init, initial batch, refill, trigger.
TABLE = {
    "android": ("random", "0", "random", 812, 812, 10),
    "iphone": ("random", "random", "1", 812, 812, 10),
    "web": ("randomMasked", "1", "1", 200, 812, 10),
    "macos": ("random", "random", "1", 200, 812, 10),
    "windows": ("random", "1", "1", 50, 812, 10),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_profile_table_conformance(name):
    p = CATALOG.profile(name)
    assert (p.registration_init, p.signed_pk_id_init, p.otpk_id_init, p.initial_batch, p.refill_batch,
            p.refill_trigger) == TABLE[name]
    assert p.companion == (name in ("web", "macos", "windows"))
    assert p.id_skip_per_refill == (2 if name == "android" else 0)


@pytest.mark.parametrize("name", sorted(TABLE))
def test_initial_ids(name):
    p = CATALOG.profile(name)
    for seed in range(20):
        upload, device = init_device(p, seed)
        ids = [k.key_id for k in upload.one_time_keys]
        assert len(ids) == p.initial_batch
        assert ids == list(range(ids[0], ids[0] + len(ids)))
        spk = upload.signed_prekey.key_id
        if p.signed_pk_id_init == "random":
            assert 10000 < spk <= ID_SPACE
        else:
            assert spk == int(p.signed_pk_id_init)
        if p.otpk_id_init == "random":
            assert ids[0] > 10000 and ids[-1] <= ID_SPACE
        else:
            assert ids[0] == 1
        if p.registration_init == "randomMasked":
            assert upload.registration_id <= 0x3FFF


def test_windows_id_arithmetic_after_three_refills():
    _, device = init_device(CATALOG.profile("windows"), 0)
    batches = [device.next_refill_batch() for _ in range(3)]
    last = [k.key_id for k in batches[-1]]
    assert (len(last), min(last), max(last)) == (812, 1675, 2486)
    assert min(last) - 1 - 2 * 812 == 50


def test_android_skips_two_ids_per_refill():
    _, device = init_device(CATALOG.profile("android"), 1)
    first = device.refill_batches[0]
    batches = [[k.key_id for k in device.next_refill_batch()] for _ in range(4)]
    prev_last = first[-1]
    for b in batches:
        assert len(b) == 812
        assert b[0] - prev_last - 1 == 2
        prev_last = b[-1]


def test_lazy_key_batch_matches_eager_derivation():
    batch = KeyBatch(b"\x07" * 32)
    for i in (0, 1, 811):
        assert batch.public(i) == x25519_public(batch.secret(i))
    _, device = init_device(CATALOG.profile("iphone"), 2)
    key = device.initial_upload().one_time_keys[5]
    assert device.one_time_pair(key.key_id).public == key.value


def test_hash_mode_ids_derive_from_keys():
    from prekeysim.server import hashed_key_id
    upload, _ = init_device(CATALOG.profile("web"), 3, policy=DevicePolicy(hash_key_ids=True,
                                                                           uniform_initial_batch=812))
    keys = upload.one_time_keys
    assert len(keys) == 812 and len({k.key_id for k in keys}) == 812
    assert all(k.key_id == hashed_key_id(k.value) for k in keys[:20])
    assert upload.signed_prekey.key_id == hashed_key_id(upload.signed_prekey.public)


# ---- schedules ------------------------------------------------------------------

def test_daily_schedule():
    s = OnlineSchedule.daily("09:00", "17:00")
    assert s.state_at(8 * HOUR) == "offline"
    assert s.state_at(9 * HOUR) == "screen-on"
    assert s.state_at(DAY + 16 * HOUR) == "screen-on"
    assert s.state_at(DAY + 17 * HOUR) == "offline"
    changes = []
    for t, state in s.changes():
        changes.append((t, state))
        if len(changes) == 4:
            break
    assert changes == [(9 * HOUR, "screen-on"), (17 * HOUR, "offline"),
                       (DAY + 9 * HOUR, "screen-on"), (DAY + 17 * HOUR, "offline")]


def test_overnight_schedule_wraps():
    s = OnlineSchedule.daily("22:00", "06:00", state="standby")
    assert s.state_at(23 * HOUR) == s.state_at(5 * HOUR) == "standby"
    assert s.state_at(12 * HOUR) == "offline"


def test_schedule_validation():
    with pytest.raises(ValueError):
        OnlineSchedule(((0, 10, "asleep"),))
    with pytest.raises(ValueError):
        OnlineSchedule(((0, 10, "standby"), (5, 20, "standby")))


def test_parse_state():
    assert parse_state("standby-wifi") == ("standby", "wifi")
    assert parse_state("screen-on-cellular") == ("screen-on", "cellular")
    assert parse_state("standby-4g") == ("standby", "cellular")
    with pytest.raises(ValueError):
        parse_state("sleeping")


# ---- latency calibration -------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(target=st.floats(0.02, 0.97), rtt=st.sampled_from([0.03, 0.07]))
def test_solve_mu_inverts_empty_fraction(target, rtt):
    mu = solve_mu(target, 0.25, rtt)
    assert empty_fraction(mu, 0.25, rtt) == pytest.approx(target, abs=1e-7)


def test_shipped_mu_values_match_calibration():
    rtts = {"wifi": 0.030, "cellular": 0.070}
    for hw in CATALOG.hardware.values():
        assert set(hw.cells) == {"standby-wifi", "standby-cellular", "screen-on-wifi", "screen-on-cellular"}
        for name, cell in hw.cells.items():
            assert cell.mu == pytest.approx(solve_mu(cell.target, cell.sigma, rtts[name.rsplit("-", 1)[1]]),
                                            abs=1e-5)


def test_latency_cell_sampling_is_lognormal():
    cell = CATALOG.hardware_model("galaxy-a54").cells["standby-wifi"]
    rng = random.Random(0)
    samples = sorted(cell.sample_ms(rng) for _ in range(4000))
    assert samples[len(samples) // 2] == pytest.approx(cell.quantile_ms(0.5), rel=0.05)


# ---- devices in a world -------------------------------------------------------------------

def pop(world, jid, n):
    # direct server calls spaced 30 ms apart stay under the overload threshold
    for i in range(n):
        assert world.server.fetch_bundle("eve", jid, i * 30).kind == "bundle"

def test_online_device_refills_after_notification():
    world = World(0)
    bob = world.add_device("1", "android", hardware="galaxy-a54", power="standby", link="wifi")
    pop(world, bob.jid, 802)
    assert world.server.pending_notification(bob.jid)
    world.run(until=60 * SECOND)
    assert world.server.store_size(bob.jid) == 812
    assert bob.state.costs.refill_events == 1
    assert bob.state.costs.bytes == 812 * 41


def test_offline_device_refills_on_reconnect():
    world = World(0)
    sched = OnlineSchedule(((HOUR, 2 * HOUR, "standby"),), "offline")
    bob = world.add_device("1", "iphone", schedule=sched)
    pop(world, bob.jid, 805)
    world.run(until=HOUR - 1)
    assert world.server.store_size(bob.jid) == 7
    world.run(until=HOUR + 60 * SECOND)
    assert world.server.store_size(bob.jid) == 812


def test_rotation_every_thirty_days():
    world = World(0)
    bob = world.add_device("1", "android", power="standby")
    start = bob.current_signed_id
    world.run(until=90 * DAY + HOUR)
    assert bob.current_signed_id == start + 3
    assert world.server.record(bob.jid).signed_prekey.key_id == start + 3
    erased = [l for l in bob.signed_history if l.erased_ms is not None]
    # each old key is kept for one interval after it is superseded
    assert [l.key_id for l in erased] == [start, start + 1]


def test_os_kinds():
    assert {p.os_kind for p in CATALOG.os_profiles.values()} == set(OsKind)
