import hashlib

import pytest

from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.algorithms import (
    HISTOGRAM_BINS,
    AlgorithmRegistry,
    artifact_checksum,
    checksum_plugin,
    histogram_plugin,
)
from gridbox.services.fixtures import fixture_dataset


class DummyLogger:
    def warning(self, *_args, **_kwargs):
        return None


def test_checksum_plugin_lists_one_digest_per_input():
    output = checksum_plugin([b"a", b"b"])

    assert output.decode("ascii").splitlines() == [
        hashlib.sha256(b"a").hexdigest(),
        hashlib.sha256(b"b").hexdigest(),
    ]


def test_histogram_plugin_counts_pixel_bytes():
    output = histogram_plugin([codec.serialize(fixture_dataset())])
    counts = [int(value) for value in output.decode("ascii").split()]

    assert len(counts) == HISTOGRAM_BINS
    assert sum(counts) == 16
    assert counts[0] == 16


def test_registry_checks_artifacts():
    registry = AlgorithmRegistry(DummyLogger())
    artifact = b"plugin build 1"

    registry.check_artifact("checksum", artifact, artifact_checksum(artifact))
    with pytest.raises(GridError) as exc:
        registry.check_artifact("checksum", artifact, "0" * 64)
    assert exc.value.code == "ChecksumMismatch"
    with pytest.raises(GridError) as exc:
        registry.check_artifact("segmentation", artifact, artifact_checksum(artifact))
    assert exc.value.code == "UnknownPlugin"


def test_faulting_plugin_is_reported():
    registry = AlgorithmRegistry(DummyLogger())
    registry.add_plugin("broken", lambda inputs: 1 / 0)
    registry.add_plugin("wrong-type", lambda inputs: "text")

    for name in ("broken", "wrong-type"):
        with pytest.raises(GridError) as exc:
            registry.run(name, [b""])
        assert exc.value.code == "AlgorithmFault"
    with pytest.raises(GridError) as exc:
        registry.run("missing", [])
    assert exc.value.code == "UnknownAlgorithm"
    assert "broken" in registry.names()
