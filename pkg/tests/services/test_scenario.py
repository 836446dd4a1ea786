import pytest

from gridbox.errors import GridError
from gridbox.services.scenario import Scenario, ScenarioParseError, run_scenario
from gridbox.services.simnet import build_topology

P2_SCENARIO = """
# oxford ingests, cambridge queries, trust is withdrawn
@1 alice@oxford login mammogrid oxford
EXPECT ok
@2 alice@oxford add /mg/oxford/screening/img001.mgd fixture
EXPECT ok
@3 rita@cambridge login
@4 rita@cambridge query laterality = "L"
EXPECT rows 1
EXPECT status oxford OK
@5 admin@oxford login
@6 admin@oxford trust-revoke cambridge oxford
EXPECT ok
@7 rita@cambridge query laterality = "L"
EXPECT rows 0
EXPECT status oxford DENIED
EXPECT audit-conformant
EXPECT governance-clean
EXPECT no-leak DOE^JANE
@8 bob@cambridge get /mg/oxford/screening/img001.mgd
EXPECT error NotAuthenticated
"""

P1_JOB_SCENARIO = """
@1 alice@mg login mammogrid oxford
@2 alice@mg add /mg/oxford/screening/img001.mgd fixture
@3 alice@mg add /mg/oxford/screening/img002.mgd synthetic:2
EXPECT ok
@4 alice@mg algo-add checksum
EXPECT ok
@5 alice@mg algo-run checksum /mg/oxford/results/sums.txt /mg/oxford/screening/img001.mgd
EXPECT ok
@6 alice@mg tick all 2
EXPECT task DONE
EXPECT governance-clean
"""


def test_p2_scenario_passes_every_expectation():
    grid = build_topology(mode="P2", seed=1)

    result = run_scenario(grid, Scenario.parse(P2_SCENARIO))

    assert [item.render() for item in result.failures()] == []
    assert len(result.results) == 11
    assert grid.clock.tick >= 8
    assert grid.events.find("step", "trust-revoke")


def test_p1_job_scenario_runs_the_algorithm():
    grid = build_topology(mode="P1", seed=1)

    result = run_scenario(grid, Scenario.parse(P1_JOB_SCENARIO))

    assert result.passed, [item.render() for item in result.failures()]
    assert grid.box("oxford").catalog.exists("/mg/oxford/results/sums.txt")


def test_failed_expectation_names_its_line_and_trigger():
    grid = build_topology(mode="P1", seed=1)
    scenario = Scenario.parse("@1 bob@mg login wrong oxford\nEXPECT ok\n")

    result = run_scenario(grid, scenario)

    assert not result.passed
    rendered = result.failures()[0].render()
    assert rendered.startswith("FAIL line 2 @1 bob@mg login: ok (BadCredentials")
    assert rendered.endswith("|error|BadCredentials]")


@pytest.mark.parametrize(
    "text,line_number",
    [
        ("1 alice@mg login", 1),
        ("@1 alice@mg dance", 1),
        ("@1 alice@mg", 1),
        ("EXPECT ok", 1),
        ("@2 alice@mg login\n@1 alice@mg logout", 2),
        ("@1 alice@mg login\nEXPECT sparkles", 2),
        ("@1 alice@mg login\nEXPECT rows", 2),
        ("@1 alice@mg add 'unterminated", 1),
    ],
)
def test_parse_errors_carry_the_line_number(text, line_number):
    with pytest.raises(ScenarioParseError) as exc:
        Scenario.parse(text)

    assert exc.value.code == "ScenarioParseError"
    assert exc.value.line_number == line_number


def test_load_reads_a_file(tmp_path):
    path = tmp_path / "smoke.scn"
    path.write_text("@0 alice@mg login\nEXPECT ok\n", encoding="utf-8")

    scenario = Scenario.load(str(path))

    assert [step.action for step in scenario.steps] == ["login"]
    assert scenario.steps[0].expectations[0].predicate == "ok"
    assert isinstance(ScenarioParseError(1, "x"), GridError)
