import pytest

from gridbox.errors import GridError
from gridbox.models import ResourceAd
from gridbox.services.jdl import parse_jdl, parse_requirements, render_jdl

EXAMPLE = """
# staged checksum of one image
Executable   = "checksum";
InputData    = {"/mg/oxford/img-001.mgd", "/mg/oxford/img-002.mgd"};
OutputLFN    = "/mg/oxford/results/img-001.sha256";
Requirements = packages CONTAINS "checksum" AND queue_length < 4;
"""


def ad(**overrides) -> ResourceAd:
    values = dict(
        ce_id="oxford:ce",
        site="oxford",
        vo="mg",
        max_running=4,
        queue_length=0,
        packages=frozenset({"checksum", "histogram"}),
        local_se="oxford:se",
    )
    values.update(overrides)
    return ResourceAd(**values)


def test_parse_reads_every_statement():
    descriptor = parse_jdl(EXAMPLE)

    assert descriptor.executable == "checksum"
    assert descriptor.input_data == ["/mg/oxford/img-001.mgd", "/mg/oxford/img-002.mgd"]
    assert descriptor.output_lfn == "/mg/oxford/results/img-001.sha256"
    assert descriptor.requirements_text == 'packages CONTAINS "checksum" AND queue_length < 4'


def test_requirements_match_resource_ads():
    descriptor = parse_jdl(EXAMPLE)

    assert descriptor.matches(ad())
    assert not descriptor.matches(ad(queue_length=4))
    assert not descriptor.matches(ad(packages=frozenset({"histogram"})))
    assert parse_jdl('Executable = "noop-cade";').matches(ad(queue_length=99))


def test_render_parses_back():
    text = render_jdl(
        "histogram", ["/mg/udine/a.mgd"], "/mg/udine/h.txt", requirements='site = "udine"'
    )
    descriptor = parse_jdl(text)

    assert descriptor.executable == "histogram"
    assert descriptor.input_data == ["/mg/udine/a.mgd"]
    assert descriptor.output_lfn == "/mg/udine/h.txt"
    assert descriptor.matches(ad(site="udine"))
    assert not descriptor.matches(ad())


@pytest.mark.parametrize(
    "text",
    [
        'InputData = {"/mg/oxford/a.mgd"};',
        'Executable = "checksum"',
        'Executable = "checksum"; Executable = "histogram";',
        'Executable = "checksum; ',
        'Executable = checksum;',
        'Executable = "checksum"; Colour = "red";',
        'Executable = "checksum"; InputData = {1, 2};',
        'Executable = "checksum"; InputData = {"/a"}};',
    ],
)
def test_malformed_jdl_is_rejected(text):
    with pytest.raises(GridError) as exc:
        parse_jdl(text)
    assert exc.value.code == "MalformedJDL"


@pytest.mark.parametrize(
    "text",
    [
        'colour = "red"',
        'queue_length < "four"',
        'packages = "checksum"',
        "site = 3",
        'site < "oxford"',
        'max_running CONTAINS "x"',
        'site = "oxford" AND',
        '(site = "oxford"',
    ],
)
def test_malformed_requirements_are_rejected(text):
    with pytest.raises(GridError) as exc:
        parse_requirements(text)
    assert exc.value.code == "MalformedRequirements"


def test_empty_requirements_match_everything():
    assert parse_requirements("  ") is None
