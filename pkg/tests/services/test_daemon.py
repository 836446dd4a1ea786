import pytest
import yaml

from gridbox.daemon import build_box
from gridbox.errors import GridError
from gridbox.services.simnet import default_config, host_secret
from gridbox.services.wire import HostKeyring


def write_grid_files(tmp_path, config):
    topology_path = tmp_path / "topology.yml"
    topology_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    keyring = HostKeyring({node["id"]: host_secret(1, node["id"]) for node in config["nodes"]})
    keyring_path = tmp_path / "hosts.keyring"
    keyring.save(str(keyring_path))
    return str(topology_path), str(keyring_path)


def test_build_box_loads_topology_and_keyring(tmp_path):
    config = default_config(mode="P2", seed=1)
    config["config"] = {"/oxford/request_timeout_s": 3}
    topology_path, keyring_path = write_grid_files(tmp_path, config)

    box = build_box(topology_path, "oxford", keyring_path, state_dir=str(tmp_path / "state"))

    try:
        assert box.node.vo == "oxford"
        assert box.topology.mode == "P2"
        assert box.topology.central_node == "cern"
        assert box.transport.timeout == 3.0
        assert box.catalog.is_dir("/mg")
        assert box.topology.vo_service.has_permission("alice@oxford", "write")
    finally:
        box.close()


def test_build_box_rejects_unknown_topology_keys(tmp_path):
    config = default_config(mode="P1", seed=1)
    config["colour"] = "blue"
    topology_path, keyring_path = write_grid_files(tmp_path, config)

    with pytest.raises(GridError) as exc:
        build_box(topology_path, "oxford", keyring_path)
    assert exc.value.code == "BadConfig"


def test_build_box_rejects_unknown_node(tmp_path):
    topology_path, keyring_path = write_grid_files(tmp_path, default_config(mode="P1", seed=1))

    with pytest.raises(GridError) as exc:
        build_box(topology_path, "paris", keyring_path)
    assert exc.value.code == "UnknownNode"


def test_build_box_needs_its_own_host_secret(tmp_path):
    config = default_config(mode="P1", seed=1)
    topology_path, _ = write_grid_files(tmp_path, config)
    keyring_path = tmp_path / "partial.keyring"
    HostKeyring({"cern": host_secret(1, "cern")}).save(str(keyring_path))

    with pytest.raises(GridError) as exc:
        build_box(topology_path, "oxford", str(keyring_path))
    assert exc.value.code == "UnknownHost"
