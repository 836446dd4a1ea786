import hashlib

import pytest

from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.audit import conformance_problems
from gridbox.services.fixtures import (
    FIXTURE_QUERY_YEAR,
    QUERY_SUITE,
    brute_force,
    fixture_dataset,
    synthetic_records,
)
from gridbox.services.job_manager import history_problems
from gridbox.services.jdl import render_jdl
from gridbox.services.simnet import build_topology, default_config

FIXTURE_LFN = "/mg/oxford/screening/img001.mgd"


@pytest.fixture
def p1_grid():
    grid = build_topology(mode="P1", seed=3)
    yield grid
    grid.close()


@pytest.fixture
def p2_grid():
    grid = build_topology(mode="P2", seed=3)
    yield grid
    grid.close()


def ingest_fixture(grid, principal: str) -> str:
    client = grid.login(principal, node="oxford")
    return client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))


def ingest_records(grid, records, vo_of_site):
    for site in sorted({record.site for record in records}):
        client = grid.login(f"alice@{vo_of_site(site)}", node=site)
        for record in records:
            if record.site == site:
                client.add(record.lfn, record.data)


def test_default_node_skips_the_central_node(p1_grid):
    assert p1_grid.default_node("alice@mg") == "cambridge"
    assert [node for node, _, _ in p1_grid.nodes] == ["cambridge", "cern", "oxford", "udine"]


def test_p1_ingest_anonymizes_and_mirrors_to_central(p1_grid):
    guid = ingest_fixture(p1_grid, "alice@mg")
    reader = p1_grid.login("bob@mg", node="cambridge")

    entry = reader.retrieve_entry(FIXTURE_LFN)
    stored = codec.parse(entry["data"])

    assert entry["guid"] == guid
    assert entry["version"] == 1
    assert b"DOE^JANE" not in entry["data"]
    assert stored.value(codec.BIRTH_DATE) == "19540101"
    assert stored.value(codec.PIXEL_DATA) == fixture_dataset().value(codec.PIXEL_DATA)

    mirror = p1_grid.box("cern").catalog.lookup(FIXTURE_LFN)
    assert mirror.mirror
    assert mirror.guid == guid
    assert mirror.attrs["birth_year"] == 1954


def test_p1_query_is_answered_by_the_central_catalogue(p1_grid):
    ingest_fixture(p1_grid, "alice@mg")
    client = p1_grid.login("rita@mg", node="udine")

    result = client.query('laterality = "L" AND patient_age >= 45', query_year=2004)

    assert result.lfns() == [FIXTURE_LFN]
    assert result.statuses == {"mg": "OK"}
    assert result.privacy_violations() == []
    assert client.query('view = "MLO"', query_year=2004).lfns() == []


def test_remote_retrieve_is_cached_not_replicated(p1_grid):
    ingest_fixture(p1_grid, "alice@mg")
    reader = p1_grid.login("bob@mg", node="cambridge")

    reader.retrieve(FIXTURE_LFN)

    cambridge = p1_grid.box("cambridge").storage
    assert len(cambridge.cached_keys()) == 1
    assert all(not cambridge.holds(key) for key in cambridge.cached_keys())
    assert p1_grid.box("oxford").catalog.lookup(FIXTURE_LFN).replicas[0].se_id == "oxford:se"


def test_ingest_rejects_duplicates_invalid_data_and_foreign_sites(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    data = codec.serialize(fixture_dataset())
    client.add(FIXTURE_LFN, data)

    with pytest.raises(GridError) as exc:
        client.add(FIXTURE_LFN, data)
    assert exc.value.code == "AlreadyExists"

    incomplete = codec.serialize(fixture_dataset().without(codec.LATERALITY))
    with pytest.raises(GridError) as exc:
        client.add("/mg/oxford/screening/img002.mgd", incomplete)
    assert exc.value.code == "ValidationFailed"

    with pytest.raises(GridError) as exc:
        client.add("/mg/udine/screening/img003.mgd", data)
    assert exc.value.code == "NotAuthorized"

    reader = p1_grid.login("bob@mg", node="oxford")
    with pytest.raises(GridError) as exc:
        reader.add("/mg/oxford/screening/img004.mgd", data)
    assert exc.value.code == "NotAuthorized"


def test_update_creates_a_version_and_keeps_the_old_one(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    changed = fixture_dataset().with_element(
        codec.DataElement(codec.VIEW_POSITION, "CS", "MLO")
    )

    version = client.update(FIXTURE_LFN, codec.serialize(changed))

    assert version == 2
    first = client.retrieve_entry(FIXTURE_LFN, version=1)
    latest = client.retrieve_entry(FIXTURE_LFN)
    assert first["version"] == 1
    assert first["guid"] == latest["guid"]
    assert codec.parse(first["data"]).value(codec.VIEW_POSITION) == "CC"
    assert codec.parse(latest["data"]).value(codec.VIEW_POSITION) == "MLO"
    assert client.query('view = "MLO"', query_year=2004).lfns() == [FIXTURE_LFN]


def test_update_from_another_site_is_not_authorized(p1_grid):
    ingest_fixture(p1_grid, "alice@mg")
    client = p1_grid.login("alice@mg", node="cambridge")

    with pytest.raises(GridError) as exc:
        client.update(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    assert exc.value.code == "NotAuthorized"


def test_unknown_portal_operation(p1_grid):
    client = p1_grid.login("bob@mg", node="oxford")

    with pytest.raises(GridError) as exc:
        client.dispatch("mi.frobnicate")
    assert exc.value.code == "NoSuchOperation"


def test_missing_entry_is_not_found(p1_grid):
    client = p1_grid.login("bob@mg", node="oxford")

    with pytest.raises(GridError) as exc:
        client.retrieve("/mg/oxford/screening/missing.mgd")
    assert exc.value.code == "NotFound"


def test_login_and_dispatch_follow_the_audit_trail(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    client.query('view = "CC"', query_year=2004)
    session_id = client.session["session_id"]

    records = p1_grid.box("oxford").audit.records(session_id)

    assert [record.step for record in records] == [1, 2, 3, 4, 5, 6] + [7, 8, 9, 10] * 2
    assert conformance_problems(records) == []


def test_wrong_password_logs_only_the_first_two_steps(p1_grid):
    client = p1_grid.client("oxford")

    with pytest.raises(GridError) as exc:
        client.login("alice@mg", "not-the-password")
    assert exc.value.code == "BadCredentials"

    records = p1_grid.box("oxford").audit.records()
    assert [record.step for record in records] == [1, 2]
    assert records[1].detail == "rejected BadCredentials"


def test_expired_session_is_refused_before_dispatch(p1_grid):
    client = p1_grid.login("bob@mg", node="oxford")
    box = p1_grid.box("oxford")
    p1_grid.clock.advance(box.auth.session_ttl)

    with pytest.raises(GridError) as exc:
        client.query('view = "CC"')
    assert exc.value.code == "SessionExpired"
    assert all(record.step not in (7, 8, 9, 10) for record in box.audit.records())


def test_portal_factory_limits_sessions_per_user(p1_grid):
    for _ in range(8):
        p1_grid.login("bob@mg", node="oxford")

    with pytest.raises(GridError) as exc:
        p1_grid.login("bob@mg", node="oxford")
    assert exc.value.code == "ResourceExhausted"


def test_unenrolled_workstation_fails_the_handshake(p1_grid):
    p1_grid.keyring.remove("ws.oxford")

    with pytest.raises(GridError) as exc:
        p1_grid.login("bob@mg", node="oxford")
    assert exc.value.code == "UnknownHost"


def test_identifiers_never_leave_the_acquiring_site(p1_grid):
    ingest_fixture(p1_grid, "alice@mg")
    reader = p1_grid.login("bob@mg", node="udine")
    reader.retrieve(FIXTURE_LFN)
    reader.query('laterality = "L"', query_year=2004)

    assert p1_grid.leaks("DOE^JANE") == []
    assert p1_grid.leaks("P001") == []


def test_p2_query_crosses_vos_through_trust(p2_grid):
    ingest_fixture(p2_grid, "alice@oxford")
    client = p2_grid.login("rita@cambridge")

    result = client.query('laterality = "L"', query_year=2004)

    assert result.lfns() == [FIXTURE_LFN]
    assert result.rows[0].origin_vo == "oxford"
    assert result.statuses == {"cambridge": "OK", "oxford": "OK", "udine": "OK"}


def test_p2_revoked_trust_denies_the_leg(p2_grid):
    ingest_fixture(p2_grid, "alice@oxford")
    admin = p2_grid.login("admin@oxford", node="oxford")
    admin.admin("trust_revoke", from_vo="cambridge", to_vo="oxford")
    client = p2_grid.login("rita@cambridge")

    result = client.query('laterality = "L"', query_year=2004)

    assert result.lfns() == []
    assert result.statuses["oxford"] == "DENIED"
    with pytest.raises(GridError) as exc:
        p2_grid.login("bob@cambridge").retrieve(FIXTURE_LFN)
    assert exc.value.code == "NotAuthorized"


def test_p2_trust_grant_needs_an_admin_of_the_target(p2_grid):
    admin = p2_grid.login("admin@cambridge", node="cambridge")

    with pytest.raises(GridError) as exc:
        admin.admin(
            "trust_grant", from_vo="cambridge", to_vo="oxford", permissions=["read-meta"]
        )
    assert exc.value.code == "NotAuthorized"


def test_p2_partition_marks_the_leg_unreachable(p2_grid):
    ingest_fixture(p2_grid, "alice@oxford")
    p2_grid.partition("cern", "oxford")
    client = p2_grid.login("rita@cambridge")

    result = client.query('laterality = "L"', query_year=2004)

    assert result.statuses["oxford"] == "UNREACHABLE"
    assert result.statuses["udine"] == "OK"

    p2_grid.heal("cern", "oxford")
    assert client.query('laterality = "L"', query_year=2004).lfns() == [FIXTURE_LFN]


def test_p2_cross_vo_retrieve_is_audited_and_governance_clean(p2_grid):
    ingest_fixture(p2_grid, "alice@oxford")
    reader = p2_grid.login("bob@cambridge")

    data = reader.retrieve(FIXTURE_LFN)

    assert codec.parse(data).value(codec.LATERALITY) == "L"
    details = [record.detail for record in p2_grid.box("oxford").audit.records()]
    assert any(detail.startswith("cross-vo read " + FIXTURE_LFN) for detail in details)

    report = p2_grid.governance_audit()
    assert report.clean
    assert report.violations == []
    assert report.central_patient_rows == 0
    assert any("(cache)" in item for item in report.exempt)


def test_p1_and_p2_answer_every_query_like_a_full_scan():
    records = synthetic_records(60)
    p1 = build_topology(mode="P1", seed=11)
    p2 = build_topology(mode="P2", seed=11)
    ingest_records(p1, records, lambda site: "mg")
    ingest_records(p2, records, lambda site: site)
    p1_client = p1.login("rita@mg", node="oxford")
    p2_client = p2.login("rita@oxford", node="oxford")

    for text in QUERY_SUITE:
        expected = brute_force(records, text, FIXTURE_QUERY_YEAR)
        p1_result = p1_client.query(text, query_year=FIXTURE_QUERY_YEAR)
        p2_result = p2_client.query(text, query_year=FIXTURE_QUERY_YEAR)
        assert set(p1_result.lfns()) == expected, text
        assert set(p2_result.lfns()) == expected, text
        assert len(p2_result.lfns()) == len(expected), text
    p1.close()
    p2.close()


def test_same_seed_gives_the_same_event_log():
    logs = []
    for _ in range(2):
        grid = build_topology(default_config("P2", seed=5))
        ingest_fixture(grid, "alice@oxford")
        grid.login("rita@udine").query('view = "CC"', query_year=2004)
        logs.append((grid.events.lines(), grid.audit_records()))
        grid.close()

    assert logs[0] == logs[1]
    assert logs[0][0]


def test_algorithm_runs_where_the_data_is(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    client.add_algorithm("checksum", b"checksum plugin v1")
    output = "/mg/oxford/results/img001.sha256"

    task_id = client.execute_algorithm("checksum", [FIXTURE_LFN], output)
    p1_grid.run_jobs()

    task = client.job_status(task_id)
    assert task.status == "DONE"
    assert task.assigned_ce == "oxford:ce"
    assert history_problems(task) == []
    digest = hashlib.sha256(client.retrieve(FIXTURE_LFN)).hexdigest()
    assert client.retrieve(output) == (digest + "\n").encode("ascii")


def test_unregistered_algorithm_is_refused(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))

    with pytest.raises(GridError) as exc:
        client.execute_algorithm("histogram", [FIXTURE_LFN], "/mg/oxford/results/h.txt")
    assert exc.value.code == "UnknownAlgorithm"


def test_optimizer_stages_input_to_the_required_site(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    client.add_algorithm("checksum", b"checksum plugin v1")
    jobs = p1_grid.box("cern").jobs
    jdl = render_jdl(
        "checksum",
        [FIXTURE_LFN],
        "/mg/cambridge/results/img001.sha256",
        requirements='site = "cambridge"',
    )

    task_id = jobs.submit(jdl, owner="alice@mg", vo="mg")
    p1_grid.run_jobs()

    task = p1_grid.task(task_id)
    assert task.status == "DONE"
    assert task.assigned_ce == "cambridge:ce"
    assert [request.status for request in jobs.transfer_list()] == ["DONE"]
    replicas = p1_grid.box("oxford").catalog.lookup(FIXTURE_LFN).replicas
    assert sorted(replica.se_id for replica in replicas) == ["cambridge:se", "oxford:se"]
    assert p1_grid.governance_audit().violations == []


def test_retrieve_reads_a_staged_replica_while_home_is_cut_off(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    client.add_algorithm("checksum", b"checksum plugin v1")
    jdl = render_jdl(
        "checksum",
        [FIXTURE_LFN],
        "/mg/cambridge/results/img001.sha256",
        requirements='site = "cambridge"',
    )
    p1_grid.box("cern").jobs.submit(jdl, owner="alice@mg", vo="mg")
    p1_grid.run_jobs()
    p1_grid.partition("cambridge", "oxford")
    reader = p1_grid.login("bob@mg", node="cambridge")

    entry = reader.retrieve_entry(FIXTURE_LFN)

    assert entry["version"] == 1
    assert hashlib.sha256(entry["data"]).hexdigest() == entry["checksum"]
    assert codec.parse(entry["data"]).value(codec.LATERALITY) == "L"


def test_repeated_retrieve_is_served_from_the_local_cache(p1_grid):
    ingest_fixture(p1_grid, "alice@mg")
    reader = p1_grid.login("bob@mg", node="udine")
    first = reader.retrieve(FIXTURE_LFN)
    p1_grid.partition("udine", "oxford")

    assert reader.retrieve(FIXTURE_LFN) == first
    storage = p1_grid.box("udine").storage
    assert len(storage.cached_keys()) == 1
    assert not storage.holds(storage.cached_keys()[0])


def test_retrieve_without_read_image_is_refused_even_with_a_local_copy(p1_grid):
    ingest_fixture(p1_grid, "alice@mg")
    p1_grid.login("bob@mg", node="udine").retrieve(FIXTURE_LFN)
    researcher = p1_grid.login("rita@mg", node="udine")

    with pytest.raises(GridError) as exc:
        researcher.retrieve(FIXTURE_LFN)
    assert exc.value.code == "NotAuthorized"


def test_transfer_to_an_unenrolled_host_fails(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    client.add_algorithm("checksum", b"checksum plugin v1")
    jobs = p1_grid.box("cern").jobs
    jdl = render_jdl("checksum", [FIXTURE_LFN], "", requirements='site = "udine"')
    jobs.submit(jdl, owner="alice@mg", vo="mg")
    p1_grid.keyring.remove("udine")

    p1_grid.clock.advance()
    p1_grid.tick()

    request = jobs.transfer_list()[0]
    assert request.status == "FAILED"
    assert request.error == "PeerUnauthenticated"
    assert not p1_grid.box("udine").storage.holds(request.object_key)


def test_killing_a_waiting_task(p1_grid):
    client = p1_grid.login("alice@mg", node="oxford")
    client.add(FIXTURE_LFN, codec.serialize(fixture_dataset()))
    client.add_algorithm("checksum", b"checksum plugin v1")
    task_id = client.execute_algorithm("checksum", [FIXTURE_LFN], "/mg/oxford/results/k.txt")

    task = client.job_kill(task_id)

    assert task.status == "KILLED"
    with pytest.raises(GridError) as exc:
        client.job_kill(task_id)
    assert exc.value.code == "InvalidTransition"


def test_mode_switch_waits_for_live_sessions(p1_grid):
    admin = p1_grid.login("admin@mg", node="oxford")
    reader = p1_grid.login("bob@mg", node="oxford")

    with pytest.raises(GridError) as exc:
        admin.admin("mode_set", mode="P1")
    assert exc.value.code == "InvalidTopology"

    reader.logout()
    with pytest.raises(GridError) as exc:
        admin.admin("mode_set", mode="P2")
    assert exc.value.code == "InvalidTopology"
    assert admin.admin("mode_set", mode="P1") == {"mode": "P1"}
    assert p1_grid.topology.mode == "P1"


def test_supervo_query_reaches_only_its_members(p2_grid):
    ingest_fixture(p2_grid, "alice@oxford")
    central = p2_grid.login("admin@central")
    central.admin("vo_create", name="uk")
    central.admin("supervo_attach", parent="uk", child="oxford")
    central.admin("supervo_attach", parent="uk", child="cambridge")
    reader = p2_grid.login("rita@udine", node="udine")

    result = reader.query('laterality = "L"', query_year=2004, supervo="uk")

    assert result.statuses == {"cambridge": "OK", "oxford": "OK"}
    assert result.lfns() == [FIXTURE_LFN]
    with pytest.raises(GridError) as exc:
        central.admin("supervo_attach", parent="oxford", child="uk")
    assert exc.value.code == "CycleDetected"


def test_foreign_grid_attaches_as_one_ce_and_se(p2_grid):
    admin = p2_grid.login("admin@oxford", node="oxford")

    attached = admin.admin("foreign_attach", grid_id="dgrid", max_running=2)

    assert attached == {"grid_id": "dgrid", "ce_id": "dgrid:ce", "se_id": "dgrid:se"}
    ads = p2_grid.topology.resource_ads("oxford", {})
    assert [ad.ce_id for ad in ads] == ["oxford:ce", "dgrid:ce"]
    assert p2_grid.box("oxford").storage_for("dgrid:se").se_id == "dgrid:se"
    with pytest.raises(GridError) as exc:
        admin.admin("foreign_attach", grid_id="dgrid")
    assert exc.value.code == "Duplicate"
    with pytest.raises(GridError) as exc:
        admin.admin("foreign_attach", grid_id="egrid", gateway="cambridge")
    assert exc.value.code == "InvalidTopology"

    admin.admin("foreign_detach", grid_id="dgrid")
    assert [ad.ce_id for ad in p2_grid.topology.resource_ads("oxford", {})] == ["oxford:ce"]
    with pytest.raises(GridError) as exc:
        admin.admin("foreign_detach", grid_id="dgrid")
    assert exc.value.code == "NotFound"
