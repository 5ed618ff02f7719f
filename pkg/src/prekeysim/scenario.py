"""Scenario files: schema, validation with line-precise diagnostics, and execution."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Any, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import experiments
from .attacker import Attacker, FingerprintVerdict, pfs_experiment, pfs_matrix, reports_csv
from .devices import DevicePolicy, OnlineSchedule, load_catalog
from .server import FaultModes, Jid, RateLimit, ServerConfig, UnknownJidError
from .simnet import DAY, SECOND, NetworkConfig, ScenarioError
from .world import World

SCHEMA = "prekeysim/scenario/v1"
SEED_ENV = "PREKEYSIM_SEED"

Power = Literal["standby", "screen-on", "offline"]
Link = Literal["wifi", "cellular"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _seconds(value: float | None) -> int | None:
    return None if value is None else round(value * SECOND)


# ---- schema -----------------------------------------------------------------

class IntervalSpec(_Strict):
    start_s: float = Field(ge=0)
    end_s: float = Field(gt=0)
    state: Power


class ScheduleSpec(_Strict):
    kind: Literal["always", "daily", "intervals"] = "always"
    state: Power = "standby"
    start: str | None = None
    end: str | None = None
    off_state: Power = "offline"
    intervals: list[IntervalSpec] = []
    period_s: float | None = None

    def build(self) -> OnlineSchedule:
        if self.kind == "always":
            return OnlineSchedule.always(self.state)
        if self.kind == "daily":
            if not (self.start and self.end):
                raise ValueError("daily schedules need start and end (HH:MM)")
            return OnlineSchedule.daily(self.start, self.end, self.state, self.off_state)
        return OnlineSchedule(tuple((_seconds(i.start_s), _seconds(i.end_s), i.state) for i in self.intervals),
                              self.off_state, _seconds(self.period_s))


class DeviceSpec(_Strict):
    phone: str
    profile: str
    hardware: str | None = None
    companion: bool | None = None
    power: Power = "standby"
    link: Link = "wifi"
    schedule: ScheduleSpec | None = None
    age_refills: int = Field(0, ge=0)
    unlinked: bool = False
    reply_delay_s: float | None = None

    @field_validator("phone")
    @classmethod
    def _digits(cls, v: str) -> str:
        if not v.isdigit():
            raise ValueError("phone must be a digit string")
        return v


class RateLimitSpec(_Strict):
    bundles: int = Field(gt=0)
    window_s: float = Field(gt=0)


class OnDemandSpec(_Strict):
    min_validity_s: float = Field(ge=0)


class Countermeasures(_Strict):
    rate_limit: RateLimitSpec | None = None
    signed_lifetime_days: float | None = Field(None, gt=0)
    on_demand_rotation: OnDemandSpec | None = None
    hash_key_ids: bool = False
    pfs_ui_notification: bool = False
    uniform_initial_batch: int | None = Field(None, gt=0)

    def any_active(self) -> bool:
        return self != Countermeasures()


class BlockSpec(_Strict):
    owner: str
    blocked: str


class ServerSpec(_Strict):
    watermark_threshold: int = Field(11, ge=1)
    overload_soft_rps: float = 50
    overload_hard_rps: float = 2000
    double_handout_probability: float = Field(0.0, ge=0, le=1)
    refill_reject_probability: float = Field(0.0, ge=0, le=1)
    block_list_effect: bool = False
    blocks: list[BlockSpec] = []


class NetworkSpec(_Strict):
    attacker_rtt_ms: int = Field(50, ge=0)
    wifi_rtt_ms: int = Field(30, ge=0)
    cellular_rtt_ms: int = Field(70, ge=0)
    client_rtt_ms: int = Field(80, ge=0)
    service_min_ms: int = Field(10, ge=0)
    service_max_ms: int = Field(95, ge=0)
    background_load: float = Field(0.0, ge=0, le=1)

    def build(self) -> NetworkConfig:
        return NetworkConfig(
            rtt_ms={"attacker": self.attacker_rtt_ms, "wifi": self.wifi_rtt_ms,
                    "cellular": self.cellular_rtt_ms, "client": self.client_rtt_ms},
            service_min_ms=self.service_min_ms, service_max_ms=self.service_max_ms,
            background_load=self.background_load)


class DepleteStep(_Strict):
    op: Literal["deplete"]
    target: str
    mode: Literal["sync", "async"] = "sync"
    rate: int = Field(100, ge=1)
    stop_when_empty: bool = True
    max_requests: int | None = Field(None, ge=1)
    at_s: float | None = Field(None, ge=0)  # None: right after the previous step


class QueryStep(_Strict):
    op: Literal["query-devices"]
    phone: str
    at_s: float | None = Field(None, ge=0)  # None: right after the previous step


class FingerprintStep(_Strict):
    op: Literal["fingerprint"]
    target: str
    allow_depletion: bool = True
    at_s: float | None = Field(None, ge=0)  # None: right after the previous step


class MonitorStep(_Strict):
    op: Literal["monitor"]
    target: str
    poll_interval_s: float = Field(300, gt=0)
    horizon_s: float = Field(DAY / SECOND, gt=0)
    response_window_s: float | None = Field(None, gt=0)
    at_s: float | None = Field(None, ge=0)  # None: right after the previous step


class DosStep(_Strict):
    op: Literal["dos"]
    target: str
    rate: float = Field(2000, gt=0)
    duration_s: float = Field(60, gt=0)
    probes: int = Field(100, ge=1)
    at_s: float | None = Field(None, ge=0)  # None: right after the previous step


class ActivityStep(_Strict):
    op: Literal["activity"]
    target: str
    at_s: float | None = Field(None, ge=0)  # None: right after the previous step


class PfsStep(_Strict):
    op: Literal["pfs-experiment"]
    hardware: str
    state: str
    trials: int = Field(500, ge=1)
    cycles: int = Field(60, ge=1)
    verify: bool = True


class PfsMatrixStep(_Strict):
    op: Literal["pfs-matrix"]
    trials: int = Field(500, ge=1)
    cycles: int = Field(60, ge=1)
    verify: bool = True
    hardware: list[str] | None = None


class EmptyWindowStep(_Strict):
    op: Literal["empty-window"]
    hardware: str = "galaxy-a54"
    state: str = "standby-wifi"
    horizon_s: float = Field(DAY / SECOND, gt=0)


Step = Annotated[Union[DepleteStep, QueryStep, FingerprintStep, MonitorStep, DosStep, ActivityStep,
                       PfsStep, PfsMatrixStep, EmptyWindowStep], Field(discriminator="op")]


class ScenarioConfig(_Strict):
    schema_: Literal["prekeysim/scenario/v1"] = Field(alias="schema")
    name: str = ""
    seed: int | None = None
    horizon_s: float | None = Field(None, gt=0)
    devices: list[DeviceSpec] = []
    attacks: list[Step] = []
    server: ServerSpec = ServerSpec()
    network: NetworkSpec = NetworkSpec()
    countermeasures: Countermeasures = Countermeasures()

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def server_config(self) -> ServerConfig:
        cm, s = self.countermeasures, self.server
        rl = cm.rate_limit
        return ServerConfig(
            watermark_threshold=s.watermark_threshold,
            overload_soft_rps=s.overload_soft_rps,
            overload_hard_rps=s.overload_hard_rps,
            rate_limit=RateLimit(rl.bundles, round(rl.window_s * SECOND)) if rl else None,
            fault_modes=FaultModes(s.double_handout_probability, s.refill_reject_probability),
            block_list_effect=s.block_list_effect,
            hash_key_ids=cm.hash_key_ids,
        )

    def device_policy(self, spec: DeviceSpec) -> DevicePolicy:
        cm = self.countermeasures
        policy = DevicePolicy(hash_key_ids=cm.hash_key_ids, uniform_initial_batch=cm.uniform_initial_batch,
                              reply_delay_ms=_seconds(spec.reply_delay_s))
        if cm.signed_lifetime_days is not None:
            policy.signed_rotation_interval_ms = round(cm.signed_lifetime_days * DAY)
        if cm.on_demand_rotation is not None:
            policy.on_demand_min_validity_ms = _seconds(cm.on_demand_rotation.min_validity_s)
        return policy


# ---- loading ------------------------------------------------------------------

class ScenarioValidationError(Exception):
    """Invalid scenario file; ``diagnostics`` holds one line per problem."""

    def __init__(self, diagnostics: list[str]) -> None:
        super().__init__("\n".join(diagnostics))
        self.diagnostics = diagnostics


def _node_at(node: yaml.Node | None, loc: tuple, want_key: bool = False) -> yaml.Node | None:
    for i, part in enumerate(loc):
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == part or (part == "schema_" and k.value == "schema"):
                    nxt = k if want_key and i == len(loc) - 1 else v
                    break
            if nxt is None:
                if any(k.value == "op" and v.value == part for k, v in node.value):
                    continue  # discriminated-union tag, not a key
                return node
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if part >= len(node.value):
                return node
            node = node.value[part]
        else:
            # discriminated-union tags (e.g. "deplete") do not correspond to a node
            continue
    return node


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ScenarioValidationError([f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}"]) from None
    if not isinstance(data, dict):
        raise ScenarioValidationError([f"{source}:1:1: scenario must be a mapping"])
    if data.get("schema") != SCHEMA:
        line = 1
        for k, _ in (root.value if isinstance(root, yaml.MappingNode) else []):
            if k.value == "schema":
                line = k.start_mark.line + 1
        raise ScenarioValidationError([f"{source}:{line}:1: schema: expected {SCHEMA!r}, got {data.get('schema')!r}"])
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"])
            node = _node_at(root, loc, want_key=err["type"] == "extra_forbidden")
            mark = node.start_mark if node is not None else None
            where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
            field_path = ".".join(str(p) for p in loc).replace("schema_", "schema")
            lines.append(f"{where}: {field_path}: {err['msg']}")
        raise ScenarioValidationError(lines) from None


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioValidationError([f"{path}: cannot read scenario: {exc.strerror}"]) from None
    return parse_scenario(text, str(path))


def fixture_scenario() -> ScenarioConfig:
    from importlib import resources
    text = resources.files("prekeysim").joinpath("data/fixture.scenario").read_text()
    return parse_scenario(text, "fixture.scenario")


def resolve_seed(cli_seed: int | None, config: ScenarioConfig | None) -> int:
    if cli_seed is not None:
        return cli_seed
    if config is not None and config.seed is not None:
        return config.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ScenarioValidationError([f"{SEED_ENV}: not an integer: {env!r}"]) from None
    return 0


# ---- execution ------------------------------------------------------------------

def build_world(config: ScenarioConfig, seed: int) -> World:
    catalog = load_catalog()
    world = World(seed, server_config=config.server_config(), network_config=config.network.build(),
                  catalog=catalog, pfs_ui_notification=config.countermeasures.pfs_ui_notification)
    for block in config.server.blocks:
        world.server.block(block.owner, block.blocked)
    try:
        for spec in config.devices:
            schedule = spec.schedule.build() if spec.schedule else None
            device = world.add_device(spec.phone, spec.profile, hardware=spec.hardware, power=spec.power,
                                      link=spec.link, schedule=schedule, policy=config.device_policy(spec),
                                      companion=spec.companion)
            for _ in range(spec.age_refills):
                device.refill_now()
            if spec.unlinked:
                world.server.unlink_device(device.jid)
                del world.devices[device.jid]
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"cannot build devices: {exc}") from None
    return world


@dataclass
class StepResult:
    op: str
    summary: str
    rows: list[dict]
    headline: dict


@dataclass
class RunReport:
    name: str
    seed: int
    steps: list[StepResult] = field(default_factory=list)
    costs: dict = field(default_factory=dict)
    pfs_notifications: list[dict] = field(default_factory=list)
    countermeasure_deltas: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "seed": self.seed,
            "steps": [{"op": s.op, "summary": s.summary, "headline": s.headline} for s in self.steps],
            "costs": self.costs, "pfs_notifications": self.pfs_notifications,
            "countermeasure_deltas": self.countermeasure_deltas,
        }, indent=2, sort_keys=True, default=str)


def _target(world: World, text: str) -> Jid:
    try:
        jid = Jid.parse(text)
        world.server.record(jid)
    except (ValueError, UnknownJidError) as exc:
        raise ScenarioError(f"unknown target {text!r}: {exc}") from None
    return jid


def _advance(world: World, at_s: float | None) -> None:
    if at_s is None:
        return
    at = round(at_s * SECOND)
    if at < world.sim.now:
        raise ScenarioError(f"step scheduled at {at} ms but the simulation is already at {world.sim.now} ms")
    world.run(until=at)


def run_step(world: World, attacker: Attacker, step, config: ScenarioConfig, seed: int) -> StepResult:
    op = step.op
    if op in ("pfs-experiment", "pfs-matrix", "empty-window"):
        try:
            return _run_isolated(step, config, seed)
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"{op}: {exc}") from None
    _advance(world, step.at_s)
    if op == "query-devices":
        ids = attacker.query_devices(step.phone)
        return StepResult(op, f"Found {len(ids)} existing devices: {ids}",
                          [{"phone": step.phone, "device_ids": " ".join(map(str, ids))}], {"devices": len(ids)})
    target = _target(world, step.target)
    if op == "deplete":
        rep = attacker.deplete(target, step.mode, step.rate, step.stop_when_empty, step.max_requests)
        return StepResult(op, rep.summary(), [rep.csv_row()],
                          {"bundle_count": rep.bundle_count, "duration_ms": rep.duration_ms,
                           "rate_limited": rep.rate_limited_count})
    if op == "fingerprint":
        verdict = attacker.fingerprint(target, step.allow_depletion)
        truth = world.devices[target].profile.os_kind.value if target in world.devices else None
        row = {"target": str(target), **verdict.csv_row(), "truth": truth}
        return StepResult(op, f"{target}: {verdict.os_guess.value} (confidence {verdict.confidence:.2f})",
                          [row], {"os_guess": verdict.os_guess.value, "correct": verdict.os_guess.value == truth})
    if op == "monitor":
        tl = attacker.monitor_online(target, round(step.poll_interval_s * SECOND), round(step.horizon_s * SECOND),
                                     _seconds(step.response_window_s))
        spans = ", ".join(f"{s}@{t / 1000:.0f}s" for t, _, s in tl.intervals(world.sim.now))
        return StepResult(op, f"{target}: {spans or 'no observations'}", tl.csv_rows(),
                          {"transitions": len(tl.entries)})
    if op == "dos":
        legit = world.add_contact("legit-client")
        rep = attacker.dos_clog(target, step.rate, round(step.duration_s * SECOND), legit, step.probes)
        return StepResult(op, (f"victim fetch failure rate {rep.victim_fetch_failure_rate:.3f}; "
                               f"delivered before restart: {rep.delivered_before_restart}; "
                               f"after restart: {rep.legit_session_established}"),
                          [rep.csv_row()], {"failure_rate": rep.victim_fetch_failure_rate})
    if op == "activity":
        verdict = attacker.fingerprint(target, allow_depletion=False)
        rep = attacker.deplete(target)
        score = attacker.activity_score(rep, verdict)
        row = {"target": str(target), "used_since_refill": score.used_since_refill,
               "total_used_estimate": score.total_used_estimate, "refills_inferred": score.refills_inferred}
        return StepResult(op, f"{target}: {score.used_since_refill} used since last refill", [row],
                          {"used_since_refill": score.used_since_refill})
    raise ScenarioError(f"unsupported step {op!r}")  # pragma: no cover


def _run_isolated(step, config: ScenarioConfig, seed: int) -> StepResult:
    """Steps that need a dedicated world (their own victim and timing)."""
    if step.op == "pfs-experiment":
        res = pfs_experiment(step.hardware, step.state, step.trials, seed, cycles=step.cycles, verify=step.verify,
                             server_config=config.server_config(), network_config=config.network.build())
        return StepResult(step.op, f"{step.hardware} {step.state}: success rate {res.success_rate:.3f}",
                          [res.csv_row()], {"success_rate": res.success_rate})
    if step.op == "pfs-matrix":
        results = pfs_matrix(step.trials, seed, cycles=step.cycles, verify=step.verify, hardware=step.hardware)
        lines = [f"{r.hardware:11s} {r.state:19s} {r.success_rate:6.1%} (target {r.target:.0%})" for r in results]
        return StepResult(step.op, "\n".join(lines), [r.csv_row() for r in results],
                          {"cells": len(results)})
    res = experiments.empty_window_under_attack(
        seed, rate_limit=config.server_config().rate_limit, horizon_ms=round(step.horizon_s * SECOND),
        hardware=step.hardware, state=step.state)
    return StepResult(step.op, f"no-OTPK window {res.empty_fraction:.4%} of simulated time",
                      [{"hardware": step.hardware, "state": step.state, "horizon_ms": res.horizon_ms,
                        "empty_ms": res.empty_ms, "empty_fraction": round(res.empty_fraction, 6),
                        "bundles": res.bundles, "rate_limited": res.rate_limited}],
                      {"empty_fraction": res.empty_fraction})


def run_scenario(config: ScenarioConfig, seed: int | None = None, *, baseline: bool = True,
                 world: World | None = None) -> tuple[RunReport, World]:
    seed = resolve_seed(seed, config)
    world = world or build_world(config, seed)
    attacker = Attacker(world)
    report = RunReport(config.name, seed)
    for step in config.attacks:
        report.steps.append(run_step(world, attacker, step, config, seed))
    if config.horizon_s is not None and round(config.horizon_s * SECOND) > world.sim.now:
        world.run(until=round(config.horizon_s * SECOND))
    for jid, dev in sorted(world.devices.items()):
        c = dev.state.costs
        report.costs[str(jid)] = {"uploads": c.uploads, "bytes": c.bytes, "refill_events": c.refill_events,
                                  "rejected_uploads": c.rejected_uploads, "rotations": c.rotations}
    report.pfs_notifications = [{"time_ms": e.time, "initiator": e.actor, **e.payload}
                                for e in world.timeline.of_kind("pfs-notification")]
    if baseline and config.countermeasures.any_active():
        plain = config.model_copy(update={"countermeasures": Countermeasures()})
        base, _ = run_scenario(plain, seed, baseline=False)
        for with_cm, without in zip(report.steps, base.steps):
            for key, value in with_cm.headline.items():
                other = without.headline.get(key)
                if isinstance(value, (int, float)) and isinstance(other, (int, float)) and not isinstance(value, bool):
                    report.countermeasure_deltas.append(
                        {"op": with_cm.op, "metric": key, "with": value, "without": other, "delta": value - other})
    return report, world


def write_outputs(report: RunReport, world: World, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, step in enumerate(report.steps):
        p = out / f"{i:02d}-{step.op}.csv"
        p.write_text(reports_csv(step.rows))
        written.append(p)
    p = out / "report.json"
    p.write_text(report.to_json())
    written.append(p)
    p = out / "timeline.ndjson"
    p.write_text(world.timeline.to_ndjson())
    written.append(p)
    p = out / "channel.bin"
    p.write_bytes(world.channel.to_bytes())
    written.append(p)
    return written
