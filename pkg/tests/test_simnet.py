import pytest
from hypothesis import given, settings, strategies as st

from helpers import fingerprint_world
from prekeysim.attacker import Attacker
from prekeysim.scenario import build_world, parse_scenario, run_scenario
from prekeysim.simnet import ChannelLog, EventTimeline, NetworkConfig, NetworkModel, ScheduleInPastError, Simulation
from prekeysim.world import World


def test_events_run_in_time_then_insertion_order():
    sim, seen = Simulation(), []
    sim.call_at(5, seen.append, "b")
    sim.call_at(1, seen.append, "a")
    sim.call_at(5, seen.append, "c")
    sim.run()
    assert seen == ["a", "b", "c"] and sim.now == 5


def test_run_until_stops_and_advances_clock():
    sim, seen = Simulation(), []
    sim.call_at(10, seen.append, 1)
    sim.call_at(20, seen.append, 2)
    sim.run(until=15)
    assert seen == [1] and sim.now == 15
    sim.run()
    assert seen == [1, 2]


def test_scheduling_in_the_past_is_an_error():
    sim = Simulation()
    sim.run(until=100)
    with pytest.raises(ScheduleInPastError):
        sim.call_at(50, print)


def test_processes_sleep_and_await_each_other():
    sim = Simulation()

    def child():
        yield 30
        return "done"

    def parent():
        yield 10
        value = yield sim.spawn(child()).result
        return sim.now, value

    proc = sim.spawn(parent())
    sim.run()
    assert proc.result.value == (40, "done")


def test_named_streams_are_independent():
    a, b = Simulation(7), Simulation(7)
    b.stream("other").random()
    assert a.stream("x").random() == b.stream("x").random()
    assert Simulation(8).stream("x").random() != Simulation(7).stream("x").random()


@settings(max_examples=20, deadline=None)
@given(load=st.floats(0, 1))
def test_service_time_spans_configured_range(load):
    model = NetworkModel(NetworkConfig(), None)
    assert 10 <= model.sample_service(load) <= 95


def test_channel_log_binary_round_trip():
    world, dev = fingerprint_world("web", 0)
    Attacker(world).deplete(dev.jid, max_requests=5)
    log = ChannelLog()
    log.append(1, "a", "b", "bundle", {"k": 1})
    parsed = ChannelLog.parse(log.to_bytes())
    assert parsed == [(1, "a", "b", "bundle", b'{"k":1}')]
    assert len(ChannelLog.parse(world.channel.to_bytes())) == len(world.channel)


def test_timeline_detail_switch():
    tl = EventTimeline(detail=False)
    tl.record(0, "x", "fetch")
    tl.record(0, "x", "refill")
    assert [e.kind for e in tl] == ["refill"]


def test_empty_scenario_gives_empty_timeline():
    config = parse_scenario("schema: prekeysim/scenario/v1\n")
    report, world = run_scenario(config, 0)
    assert len(world.timeline) == 0 and len(world.channel) == 0 and report.steps == []


def _run_once(seed):
    world = World(seed)
    bob = world.add_device("1", "android", hardware="poco-x3", power="standby", link="cellular")
    attacker = Attacker(world)
    world.sim.spawn(attacker.deplete_process(bob.jid, stop_when_empty=False, until=5 * 60_000,
                                             empty_poll_ms=1000))
    world.run(until=6 * 60_000)
    return world.timeline.to_ndjson(), world.channel.to_bytes()


def test_same_seed_same_bytes():
    assert _run_once(3) == _run_once(3)
    assert _run_once(3) != _run_once(4)
