import pytest

from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.clock import SeededEntropy
from gridbox.services.fixtures import fixture_dataset
from gridbox.services.simnet import build_topology, workstation_host
from gridbox.services.transports import SimTransport

LFN = "/mg/oxford/screening/img001.mgd"


class DummyLogger:
    def debug(self, *_args, **_kwargs):
        return None

    def info(self, *_args, **_kwargs):
        return None

    def warning(self, *_args, **_kwargs):
        return None

    def exception(self, *_args, **_kwargs):
        return None


@pytest.fixture
def grid():
    topology = build_topology(mode="P2", seed=7)
    topology.login("alice@oxford", node="oxford").add(LFN, codec.serialize(fixture_dataset()))
    yield topology
    topology.close()


def workstation_channel(grid, workstation_of: str, node_id: str):
    host = workstation_host(workstation_of)
    transport = SimTransport(grid.network, grid.keyring, SeededEntropy(17), DummyLogger())
    spec = grid.box(node_id).node
    return transport.open_channel(host, host, spec, expected_peer=spec.host)


@pytest.mark.parametrize("workstation_of", ["oxford", "udine"])
@pytest.mark.parametrize(
    "op, args",
    [
        ("se.retrieve", {"lfn": LFN}),
        ("dbproxy.execute", {"stmt": "lookup", "lfn": LFN}),
        ("dbproxy.execute", {"stmt": "find", "prefix": "/mg", "query": None}),
    ],
)
def test_workstations_cannot_claim_a_principal(grid, workstation_of, op, args):
    channel = workstation_channel(grid, workstation_of, "oxford")

    with pytest.raises(GridError) as exc:
        channel.request(op, args, {"principal": "alice@oxford"})
    assert exc.value.code == "NotAuthorized"
    assert "outside a portal" in exc.value.message


def test_workstation_without_a_principal_is_not_a_peer(grid):
    channel = workstation_channel(grid, "oxford", "oxford")

    with pytest.raises(GridError) as exc:
        channel.request("se.retrieve", {"lfn": LFN})
    assert exc.value.code == "NotAuthorized"


def test_grid_box_of_another_vo_cannot_act_for_a_local_user(grid):
    udine = grid.box("udine").node.host

    with pytest.raises(GridError) as exc:
        grid.box("oxford").handle_rpc(
            "se.retrieve", {"lfn": LFN}, {"host": udine, "principal": "alice@oxford"}, {}
        )
    assert exc.value.code == "NotAuthorized"


def test_foreign_principal_needs_a_credential_even_from_its_own_grid_box(grid):
    udine = grid.box("udine").node.host

    with pytest.raises(GridError) as exc:
        grid.box("oxford").handle_rpc(
            "se.retrieve", {"lfn": LFN}, {"host": udine, "principal": "bob@udine"}, {}
        )
    assert exc.value.code == "NotAuthorized"
    assert "credential" in exc.value.message


def test_relay_only_forwards_principals_of_the_sending_vo(grid):
    udine = grid.box("udine").node.host
    forward = {"node_id": "oxford", "op": "se.retrieve", "args": {"lfn": LFN}}

    with pytest.raises(GridError) as exc:
        grid.box("cern").handle_rpc(
            "relay.forward", forward, {"host": udine, "principal": "alice@oxford"}, {}
        )
    assert exc.value.code == "NotAuthorized"
    assert "may not relay" in exc.value.message
    assert not grid.events.find("relay", "udine>oxford")


def test_relay_is_refused_to_workstations(grid):
    forward = {"node_id": "oxford", "op": "se.retrieve", "args": {"lfn": LFN}}

    with pytest.raises(GridError) as exc:
        grid.box("cern").handle_rpc(
            "relay.forward", forward, {"host": workstation_host("udine")}, {}
        )
    assert exc.value.code == "NotAuthorized"


def test_p2_login_is_only_accepted_at_a_grid_box_of_the_users_vo(grid):
    with pytest.raises(GridError) as exc:
        grid.login("bob@udine", node="oxford")
    assert exc.value.code == "NotAuthorized"

    assert grid.login("bob@udine", node="udine").retrieve(LFN)
