import pytest

from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.audit import conformance_problems
from gridbox.services.clock import VirtualClock
from gridbox.services.fixtures import fixture_dataset
from gridbox.services.simnet import EventLog, build_topology, default_config, host_secret

FIXTURE_LFN = "/mg/oxford/screening/img001.mgd"


def test_default_config_shapes_both_modes():
    p1 = default_config("P1")
    p2 = default_config("P2")

    assert {node["vo"] for node in p1["nodes"]} == {"mg"}
    assert [node["vo"] for node in p2["nodes"]] == ["central", "oxford", "cambridge", "udine"]
    assert "TRUST oxford cambridge read-image,read-meta,execute /mg/cambridge" in p2["trust"]
    assert default_config("P2", full_trust=False)["trust"] == []


def test_build_topology_rejects_duplicate_node_ids():
    config = default_config("P1")
    config["nodes"].append({"id": "oxford", "site": "oxford", "vo": "mg"})

    with pytest.raises(GridError) as exc:
        build_topology(config)
    assert exc.value.code == "BadConfig"


def test_faults_need_known_links():
    grid = build_topology(mode="P1")

    for fault in ("partition", "delay", "corrupt"):
        with pytest.raises(GridError) as exc:
            grid.inject(fault, "oxford", "atlantis", 1)
        assert exc.value.code == "UnknownLink"
    with pytest.raises(GridError) as exc:
        grid.inject("flood", "oxford", "cern")
    assert exc.value.code == "UnknownFault"
    with pytest.raises(GridError) as exc:
        grid.box("atlantis")
    assert exc.value.code == "UnknownNode"


def test_partitioned_node_is_unreachable_until_healed():
    grid = build_topology(mode="P1")
    grid.partition("oxford", "udine")

    with pytest.raises(GridError) as exc:
        grid.box("oxford").router.call("udine", "echo", {"ping": 1})
    assert exc.value.code == "NoRoute"

    grid.heal("oxford", "udine")
    assert grid.box("oxford").router.call("udine", "echo", {"ping": 1}) == {"ping": 1}


def test_corrupted_frame_is_rejected_and_the_channel_recovers():
    grid = build_topology(mode="P1")
    router = grid.box("oxford").router
    router.call("udine", "echo", {"n": 1})
    grid.corrupt("oxford", "udine")

    with pytest.raises(GridError) as exc:
        router.call("udine", "echo", {"n": 2})
    assert exc.value.code in ("MacMismatch", "ChannelClosed", "Timeout")

    assert router.call("udine", "echo", {"n": 3}) == {"n": 3}


def test_frames_between_boxes_are_captured():
    grid = build_topology(mode="P1")
    grid.box("oxford").router.call("cern", "echo", {})

    frames = grid.frames("oxford", "cern")

    assert frames
    assert frames[0].start_line().startswith("MGP/1 HELLO")
    assert grid.events.find("frame")


def test_host_secrets_depend_on_seed():
    assert host_secret(1, "oxford") != host_secret(2, "oxford")
    assert len(host_secret(1, "oxford")) == 32


def test_event_log_renders_and_escapes(tmp_path):
    clock = VirtualClock()
    log = EventLog(clock)
    clock.advance(3)
    log.record("oxford", "step", "query a|b\nc")
    path = tmp_path / "events.log"

    text = log.export(str(path))

    assert text == "3|1|oxford|step|query a%7Cb%0Ac\n"
    assert path.read_text(encoding="utf-8") == text


def run_federated_session(seed: int):
    grid = build_topology(mode="P2", seed=seed)
    writer = grid.login("alice@oxford", node="oxford")
    writer.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    reader = grid.login("rita@cambridge", node="cambridge")
    result = reader.query('laterality = "L"', query_year=2004)
    data = grid.login("bob@udine", node="udine").retrieve(FIXTURE_LFN)
    grid.network.settle()
    return grid, reader, result, data


@pytest.mark.parametrize("seed", range(20))
def test_every_seed_keeps_results_and_governance_intact(seed):
    grid, reader, result, data = run_federated_session(seed)

    assert result.lfns() == [FIXTURE_LFN]
    assert result.statuses == {"cambridge": "OK", "oxford": "OK", "udine": "OK"}
    assert codec.parse(data).value(codec.LATERALITY) == "L"
    records = grid.box("cambridge").audit.records(reader.session["session_id"])
    assert conformance_problems(records) == []
    assert grid.governance_audit().clean
    assert grid.leaks("DOE^JANE") == []
    assert grid.network.in_flight == 0
    grid.close()


def test_same_seed_replays_the_same_deliveries():
    exports = []
    for _ in range(2):
        grid, _, _, _ = run_federated_session(9)
        exports.append(grid.events.export())
        grid.close()

    assert exports[0] == exports[1]
    assert "frame" in exports[0]


def test_delayed_frames_wait_for_the_clock():
    grid = build_topology(mode="P1")
    grid.delay("oxford", "udine", 3)
    start = grid.clock.tick

    assert grid.box("oxford").router.call("udine", "echo", {"n": 1}) == {"n": 1}
    assert grid.clock.tick >= start + 3
    assert grid.network.in_flight == 0


def test_router_keeps_several_calls_in_flight_on_one_channel():
    grid = build_topology(mode="P1", seed=4)
    router = grid.box("oxford").router
    router.call("udine", "echo", {"n": 0})

    first = router.submit("udine", "echo", {"n": 1})
    second = router.submit("udine", "echo", {"n": 2})

    assert grid.network.in_flight == 2
    assert second.result() == {"n": 2}
    assert first.result() == {"n": 1}
