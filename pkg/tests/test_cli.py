import json
import textwrap
from pathlib import Path

import pytest

from prekeysim.cli import main
from prekeysim.scenario import (
    ScenarioValidationError,
    fixture_scenario,
    parse_scenario,
    resolve_seed,
    run_scenario,
)

ROOT = Path(__file__).resolve().parents[1]


def write(tmp_path, text, name="s.scenario"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


# ---- query-devices ------------------------------------------------------------------

def test_query_devices_on_fixture(capsys):
    assert main(["query-devices", "--target", "123456789"]) == 0
    assert capsys.readouterr().out.strip() == "Found 3 existing devices: [0, 1, 3]"


def test_query_unknown_number_is_runtime_error(capsys):
    assert main(["query-devices", "--target", "987654321"]) == 3
    out = capsys.readouterr()
    assert "[]" in out.out


# ---- single commands against the fixture ----------------------------------------------------

def test_deplete_windows_companion(capsys):
    assert main(["deplete", "--target", "123456789:1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("All prekeys depleted, consumed 812 bundles in")
    assert out[1] == "[Prekey Stats] Cnt: 812, MinID: 1675, MaxID: 2486"


def test_async_deplete(capsys):
    assert main(["deplete", "--target", "123456789:1", "--async", "--rate", "100"]) == 0
    assert "consumed 812 bundles" in capsys.readouterr().out


@pytest.mark.parametrize("target,os_name", [("123456789", "Android"), ("123456789:1", "DesktopWindows"),
                                            ("123456789:3", "Web")])
def test_fingerprint_fixture(capsys, target, os_name):
    assert main(["fingerprint", "--target", target]) == 0
    assert f": {os_name} (confidence 1.00)" in capsys.readouterr().out


def test_unlinked_device_is_runtime_error(capsys):
    assert main(["deplete", "--target", "123456789:2"]) == 3
    assert "unknown target" in capsys.readouterr().err


def test_unknown_hardware_is_runtime_error(capsys):
    assert main(["pfs-experiment", "--profile", "nokia-3310", "--state", "standby-wifi", "--trials", "5"]) == 3


def test_pfs_experiment_small(capsys):
    assert main(["pfs-experiment", "--profile", "galaxy-a54", "--state", "standby-wifi", "--trials", "20",
                 "--cycles", "4"]) == 0
    assert "success rate" in capsys.readouterr().out


def test_bad_flag_is_config_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["deplete"])
    assert exc.value.code == 2


# ---- outputs ---------------------------------------------------------------------------------------

def test_out_dir_and_reproducibility(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["--seed", "11", "--out", str(out), "deplete", "--target", "123456789:3"]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == ["00-deplete.csv", "channel.bin", "report.json", "timeline.ndjson"]
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = (a / "00-deplete.csv").read_text().splitlines()[0]
    assert header.startswith("target,mode,started_ms,duration_ms,bundle_count,min_otpk_id,max_otpk_id")
    assert json.loads((a / "report.json").read_text())["seed"] == 11


def test_global_options_after_subcommand(tmp_path, capsys):
    assert main(["deplete", "--target", "123456789:3", "--out", str(tmp_path / "o"), "--seed", "2"]) == 0
    assert (tmp_path / "o" / "report.json").exists()


def test_seed_resolution(monkeypatch):
    cfg = parse_scenario("schema: prekeysim/scenario/v1\nseed: 5\n")
    bare = parse_scenario("schema: prekeysim/scenario/v1\n")
    monkeypatch.setenv("PREKEYSIM_SEED", "9")
    assert resolve_seed(1, cfg) == 1
    assert resolve_seed(None, cfg) == 5
    assert resolve_seed(None, bare) == 9
    monkeypatch.setenv("PREKEYSIM_SEED", "nine")
    with pytest.raises(ScenarioValidationError):
        resolve_seed(None, bare)
    monkeypatch.delenv("PREKEYSIM_SEED")
    assert resolve_seed(None, bare) == 0


# ---- scenario validation ---------------------------------------------------------------------------

def test_validation_points_at_lines(tmp_path, capsys):
    path = write(tmp_path, """\
        schema: prekeysim/scenario/v1
        devices:
          - phone: "1"
            profile: android
            power: sleepy
            colour: red
        attacks:
          - op: deplete
            targt: x
        """)
    assert main(["run", str(path)]) == 2
    err = capsys.readouterr().err.splitlines()
    assert f"{path}:5:12: devices.0.power" in err[0]
    assert f"{path}:6:5: devices.0.colour: Extra inputs are not permitted" == err[1]
    assert any(f"{path}:9:5: attacks.0.deplete.targt" in line for line in err)


def test_wrong_schema_header(tmp_path, capsys):
    path = write(tmp_path, "schema: prekeysim/scenario/v0\n")
    assert main(["run", str(path)]) == 2
    assert "schema" in capsys.readouterr().err


def test_yaml_syntax_error(tmp_path, capsys):
    path = write(tmp_path, "schema: [unclosed\n")
    assert main(["run", str(path)]) == 2
    assert f"{path}:2:1: YAML syntax error" in capsys.readouterr().err


def test_missing_file(capsys):
    assert main(["run", "/nonexistent.scenario"]) == 2


def test_step_in_the_past_is_runtime_error(tmp_path, capsys):
    path = write(tmp_path, """\
        schema: prekeysim/scenario/v1
        devices: [{phone: "5", profile: iphone, power: offline}]
        attacks:
          - {op: deplete, target: "5", at_s: 100}
          - {op: query-devices, phone: "5", at_s: 10}
        """)
    assert main(["run", str(path)]) == 3


def test_shipped_scenarios_validate():
    for path in sorted((ROOT / "scenarios").glob("*.scenario")):
        from prekeysim.scenario import load_scenario
        load_scenario(path)
    assert [d.profile for d in fixture_scenario().devices] == ["android", "windows", "web", "web"]


# ---- full runs --------------------------------------------------------------------------------------

def test_run_scenario_with_several_steps(tmp_path, capsys):
    path = write(tmp_path, """\
        schema: prekeysim/scenario/v1
        name: mixed
        horizon_s: 1800
        seed: 4
        devices:
          - {phone: "491", profile: iphone, hardware: iphone-se, power: standby, link: cellular}
          - {phone: "491", profile: macos, power: offline}
        attacks:
          - {op: query-devices, phone: "491"}
          - {op: fingerprint, target: "491:1"}
          - {op: deplete, target: "491", mode: async}
          - {op: activity, target: "491:1", at_s: 120}
        """)
    assert main(["--out", str(tmp_path / "out"), "run", str(path)]) == 0
    out = capsys.readouterr().out
    assert "Found 2 existing devices: [0, 1]" in out
    assert "DesktopMac" in out
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert [s["op"] for s in report["steps"]] == ["query-devices", "fingerprint", "deplete", "activity"]
    assert report["costs"]["491@s.whatsapp.net"]["refill_events"] >= 1


def test_pfs_notification_countermeasure(tmp_path):
    cfg = parse_scenario(textwrap.dedent("""\
        schema: prekeysim/scenario/v1
        devices: [{phone: "7", profile: android, power: offline}]
        attacks: [{op: deplete, target: "7"}]
        countermeasures: {pfs_ui_notification: true}
        """))
    report, world = run_scenario(cfg, 0)
    alice = world.add_contact("alice")
    world.run_process(alice.open_session(world.server.devices()[0], [b"hi"]))
    assert [e.kind for e in world.timeline.of_kind("pfs-notification")] == ["pfs-notification"]


def _depletion_and_fingerprint(hash_ids: bool):
    cfg = parse_scenario(textwrap.dedent(f"""\
        schema: prekeysim/scenario/v1
        seed: 2
        devices:
          - {{phone: "8", profile: android, power: offline}}
          - {{phone: "8", profile: windows, power: offline}}
        attacks:
          - {{op: deplete, target: "8"}}
          - {{op: fingerprint, target: "8:1"}}
        countermeasures: {{hash_key_ids: {str(hash_ids).lower()}}}
        """))
    report, _ = run_scenario(cfg, baseline=False)
    return report.steps[0].headline, report.steps[1].headline


def test_hash_ids_change_fingerprinting_but_not_depletion_timing():
    plain_dep, plain_fp = _depletion_and_fingerprint(False)
    hashed_dep, hashed_fp = _depletion_and_fingerprint(True)
    assert plain_dep == hashed_dep
    assert plain_fp["correct"] and not hashed_fp["correct"]


def test_countermeasure_deltas_reported():
    cfg = parse_scenario(textwrap.dedent("""\
        schema: prekeysim/scenario/v1
        seed: 1
        attacks: [{op: empty-window, horizon_s: 3600}]
        countermeasures: {rate_limit: {bundles: 1, window_s: 60}}
        """))
    report, _ = run_scenario(cfg)
    (delta,) = report.countermeasure_deltas
    assert delta["metric"] == "empty_fraction"
    assert delta["with"] == 0.0 and delta["without"] > 0.05
