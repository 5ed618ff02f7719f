"""Wires the simulator, server, network and actors into one runnable world."""
from __future__ import annotations

import random

from .devices import (
    Catalog,
    Contact,
    Device,
    DevicePolicy,
    OnlineSchedule,
    load_catalog,
)
from .server import Jid, PrekeyServer, ServerConfig
from .simnet import (
    ChannelLog,
    EventTimeline,
    Network,
    NetworkConfig,
    NetworkModel,
    Simulation,
)


class World:
    """Everything one scenario run needs; all randomness derives from ``seed``."""

    def __init__(self, seed: int = 0, *, server_config: ServerConfig | None = None,
                 network_config: NetworkConfig | None = None, catalog: Catalog | None = None,
                 detail: bool = True, log_server_messages: bool = True,
                 pfs_ui_notification: bool = False) -> None:
        self.seed = seed
        self.sim = Simulation(seed)
        self.catalog = catalog or load_catalog()
        self.timeline = EventTimeline(detail)
        self.channel = ChannelLog(log_server_messages)
        self.server = PrekeyServer(server_config, rng=self.sim.stream("server"))
        self.network = Network(self.sim, self.server,
                               NetworkModel(network_config or NetworkConfig(), self.sim.stream("network")),
                               self.timeline, self.channel)
        self.pfs_ui_notification = pfs_ui_notification
        self.devices: dict[Jid, Device] = {}
        self.contacts: dict[str, Contact] = {}
        self.server.on_low_watermark = self._notify
        self.server.on_event = self._server_event

    def _server_event(self, now: int, kind: str, jid: Jid, payload: dict) -> None:
        self.timeline.record(now, "server", kind, jid=str(jid), **payload)

    def _notify(self, jid: Jid, now: int) -> None:
        device = self.devices.get(jid)
        if device is None:
            return
        half = self.network.model.sample_rtt(device.state.link) // 2
        self.sim.call_later(half, device.handle_low_watermark)

    def add_device(self, phone: str, profile: str = "android", *, hardware: str | None = None,
                   power: str = "standby", link: str = "wifi", schedule: OnlineSchedule | None = None,
                   policy: DevicePolicy | None = None, companion: bool | None = None) -> Device:
        prof = self.catalog.profile(profile)
        hw = self.catalog.hardware_model(hardware) if hardware else None
        companion = prof.companion if companion is None else companion
        index = len(self.devices)
        rng = self.sim.stream(f"device/{phone}/{index}")
        policy = policy or DevicePolicy()
        if self.server.config.hash_key_ids:
            policy.hash_key_ids = True
        device = Device(prof, rng, policy=policy, hardware=hw, default_latency=self.catalog.default_latency)
        jid = self.server.register_device(phone, device.initial_upload(), self.sim.now,
                                          companion=companion, profile=prof.name)
        self.devices[jid] = device
        device.attach(self, jid, schedule, power, link)
        return device

    def add_contact(self, name: str, link: str = "client") -> Contact:
        if name in self.contacts:
            return self.contacts[name]
        contact = Contact(self, name, self.sim.stream(f"contact/{name}"), link,
                          pfs_ui_notification=self.pfs_ui_notification)
        self.contacts[name] = contact
        return contact

    def device(self, jid: Jid | str) -> Device:
        key = Jid.parse(jid) if isinstance(jid, str) else jid
        return self.devices[key]

    def run(self, until: int | None = None) -> None:
        self.sim.run(until)

    def run_process(self, gen, name: str = "", until: int | None = None):
        """Spawn ``gen`` and run until it finishes (or ``until``); returns its result."""
        proc = self.sim.spawn(gen, name)
        self.sim.run(until, stop=lambda: proc.result.done)
        if not proc.result.done:
            proc.cancel()
            return None
        return proc.result.value

    def rng(self, name: str) -> random.Random:
        return self.sim.stream(name)
