"""World builders shared by the attacker, acceptance and CLI tests."""
from prekeysim.devices import DevicePolicy, OnlineSchedule
from prekeysim.server import ServerConfig
from prekeysim.world import World

TRUTH = {"android": "Android", "iphone": "iPhone", "macos": "DesktopMac", "windows": "DesktopWindows",
         "web": "Web"}


def fingerprint_world(profile: str, seed: int, *, age_refills: int = 0, hash_ids: bool = False,
                      uniform_batch: int | None = None):
    """An account whose device under test is ``profile``; companions hang off an Android main device."""
    world = World(seed, server_config=ServerConfig(hash_key_ids=hash_ids), detail=False,
                  log_server_messages=False)

    def policy():
        return DevicePolicy(hash_key_ids=hash_ids, uniform_initial_batch=uniform_batch)

    offline = OnlineSchedule.always("offline")
    main_profile = profile if profile in ("android", "iphone") else "android"
    device = world.add_device("4917000000000", main_profile, schedule=offline, policy=policy())
    if profile not in ("android", "iphone"):
        device = world.add_device("4917000000000", profile, schedule=offline, policy=policy())
    for _ in range(age_refills):
        device.refill_now()
    return world, device
