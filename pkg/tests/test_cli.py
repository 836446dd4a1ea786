import pytest
from click.testing import CliRunner

import gridbox.cli as cli_module
from gridbox.constants import ENV_USER, MGRS_HEADER
from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.fixtures import fixture_dataset
from gridbox.services.simnet import build_topology

FIXTURE_LFN = "/mg/oxford/screening/img001.mgd"


@pytest.fixture
def grid(monkeypatch):
    topology = build_topology(mode="P1", seed=5)
    monkeypatch.setattr(cli_module, "open_client", lambda settings: topology.client("oxford"))
    yield topology
    topology.close()


def invoke(tmp_path, *args, user="alice@mg"):
    runner = CliRunner()
    base = ["--token-file", str(tmp_path / "session.yml"), "--user", user]
    return runner.invoke(cli_module.main, base + list(args))


def login(tmp_path, user="alice@mg"):
    result = invoke(tmp_path, "--stable-output", "login", "--password", "mammogrid", user=user)
    assert result.exit_code == 0, result.output
    return result


def test_no_arguments_prints_help_and_exits_with_usage_code():
    result = CliRunner().invoke(cli_module.main, [])

    assert result.exit_code == 1
    assert "Usage:" in result.output


def test_login_caches_the_token_privately(grid, tmp_path):
    result = login(tmp_path)

    token_file = tmp_path / "session.yml"
    assert "expires <ts>" in result.output
    assert (token_file.stat().st_mode & 0o777) == 0o600
    assert "principal: alice@mg" in token_file.read_text(encoding="utf-8")


def test_add_then_query_prints_a_result_set(grid, tmp_path):
    image = tmp_path / "img001.mgd"
    image.write_bytes(codec.serialize(fixture_dataset()))
    login(tmp_path)

    added = invoke(tmp_path, "add", str(image), FIXTURE_LFN)
    queried = invoke(tmp_path, "query", 'laterality = "L"', "--year", "2004")

    assert added.exit_code == 0, added.output
    assert added.output.strip().endswith(FIXTURE_LFN)
    assert queried.exit_code == 0, queried.output
    lines = queried.output.splitlines()
    assert lines[0] == f"{MGRS_HEADER} rows=1"
    assert FIXTURE_LFN in lines[1]
    assert "DOE^JANE" not in queried.output
    assert "# vo=mg status=OK rows=1" in lines


def test_get_writes_the_anonymized_image(grid, tmp_path):
    image = tmp_path / "img001.mgd"
    image.write_bytes(codec.serialize(fixture_dataset()))
    login(tmp_path)
    invoke(tmp_path, "add", str(image), FIXTURE_LFN)
    out = tmp_path / "copy.mgd"

    result = invoke(tmp_path, "get", FIXTURE_LFN, "-o", str(out))

    assert result.exit_code == 0, result.output
    assert f"{FIXTURE_LFN} v1" in result.output
    assert b"DOE^JANE" not in out.read_bytes()


def test_missing_entry_exits_with_remote_error_code(grid, tmp_path):
    login(tmp_path)

    result = invoke(tmp_path, "get", "/mg/oxford/nope.mgd", "-o", str(tmp_path / "x"))

    assert result.exit_code == cli_module.EXIT_REMOTE
    assert "NotFound" in result.output


def test_authentication_failures_exit_with_auth_code(grid, tmp_path):
    wrong = invoke(tmp_path, "login", "--password", "wrong")
    anonymous = invoke(tmp_path, "query", 'view = "CC"')

    assert wrong.exit_code == cli_module.EXIT_AUTH
    assert anonymous.exit_code == cli_module.EXIT_AUTH


def test_logout_forgets_the_token(grid, tmp_path):
    login(tmp_path)

    result = invoke(tmp_path, "logout")

    assert result.exit_code == 0, result.output
    assert not (tmp_path / "session.yml").exists()


def test_admin_trust_grant_needs_an_admin(grid, tmp_path):
    login(tmp_path, user="bob@mg")

    result = invoke(tmp_path, "admin", "trust", "grant", "mg", "mg", "read-meta", user="bob@mg")

    assert result.exit_code == cli_module.EXIT_REMOTE


def test_unknown_config_keys_are_rejected(tmp_path):
    config_file = tmp_path / "mgctl.yml"
    config_file.write_text("node: oxford\ncolour: blue\n", encoding="utf-8")

    result = CliRunner().invoke(cli_module.main, ["--config", str(config_file), "logout"])

    assert result.exit_code == cli_module.EXIT_REMOTE


def test_environment_overrides_flag_overrides_config(monkeypatch):
    config = {"user": "config@mg"}

    assert cli_module._resolve_option(None, config, "user", env=ENV_USER) == "config@mg"
    assert cli_module._resolve_option("flag@mg", config, "user", env=ENV_USER) == "flag@mg"
    monkeypatch.setenv(ENV_USER, "env@mg")
    assert cli_module._resolve_option("flag@mg", config, "user", env=ENV_USER) == "env@mg"


@pytest.mark.parametrize(
    "code",
    ["BadCredentials", "SessionExpired", "Expired", "NotAuthenticated", "UnknownHost", "BadProof"],
)
def test_authentication_failures_map_to_the_auth_exit_code(code):
    assert cli_module.exit_code_for(GridError(code, "x")) == cli_module.EXIT_AUTH


@pytest.mark.parametrize("code", ["NotAuthorized", "Denied", "NotFound", "NoRoute"])
def test_refusals_for_a_known_caller_map_to_the_remote_exit_code(code):
    assert cli_module.exit_code_for(GridError(code, "x")) == cli_module.EXIT_REMOTE


def test_every_portal_operation_has_a_subcommand(grid):
    paths = cli_module.command_paths()

    operations = list(cli_module.COMMAND_TABLE.values())
    assert len(operations) == len(set(operations))
    assert sorted(set(cli_module.COMMAND_TABLE.values())) == grid.box("oxford").portal_operations
    assert set(cli_module.COMMAND_TABLE) <= set(paths)
    assert {"login", "logout", "daemon"} <= set(paths)
