from dataclasses import replace
from itertools import product

import pytest

from gridbox.constants import BUILTIN_ROLES
from gridbox.errors import GridError
from gridbox.services.clock import SeededEntropy, VirtualClock
from gridbox.services.config_tree import ConfigTree
from gridbox.services.vo import (
    VOService,
    decode_credential,
    encode_credential,
    hash_password,
    scope_contains,
    verify_password,
)


class DummyLogger:
    def info(self, *_args, **_kwargs):
        return None


def build_service(clock=None, config_tree=None) -> VOService:
    service = VOService(
        clock or VirtualClock(), DummyLogger(), SeededEntropy(1), config_tree=config_tree
    )
    for name in ("udine", "cambridge"):
        service.vo_create(name)
        service.vo_add_site(name, name)
        service.vo_add_user(name, f"admin@{name}", ["admin"], password="pw")
        service.vo_add_user(name, f"rita@{name}", ["researcher"], password="pw")
        service.vo_add_user(name, f"bob@{name}", ["clinician"], password="pw")
    return service


def test_sites_belong_to_one_vo():
    service = build_service()

    assert service.descriptor("udine").sites == ["udine"]
    service.vo_add_site("udine", "udine")
    with pytest.raises(GridError) as exc:
        service.vo_add_site("cambridge", "udine")
    assert exc.value.code == "SiteTaken"
    with pytest.raises(GridError) as exc:
        service.vo_create("udine")
    assert exc.value.code == "Duplicate"


def test_principal_must_name_its_vo():
    service = build_service()

    with pytest.raises(GridError) as exc:
        service.vo_add_user("udine", "eve@cambridge", ["clinician"])
    assert exc.value.code == "BadPrincipal"
    with pytest.raises(GridError) as exc:
        service.vo_add_user("udine", "eve@udine", ["surgeon"])
    assert exc.value.code == "UnknownRole"


def test_admin_implies_every_permission():
    service = build_service()

    for permission in ("read-meta", "read-image", "write", "execute", "admin"):
        assert service.has_permission("admin@udine", permission)
    assert not service.has_permission("rita@udine", "read-image")
    assert service.permissions_of("ghost@udine") == frozenset()


def test_passwords_are_hashed_and_checked():
    stored = hash_password("secret", b"\x00" * 16)

    assert stored.startswith("pbkdf2$")
    assert "secret" not in stored
    assert verify_password("secret", stored)
    assert not verify_password("Secret", stored)
    assert not verify_password("secret", "plain")

    service = build_service()
    assert service.check_password("bob@udine", "pw")
    assert not service.check_password("bob@udine", "wrong")
    assert not service.check_password("nobody@udine", "pw")


def test_grant_authorize_and_revoke():
    service = build_service()
    service.trust_grant("udine", "cambridge", ["read-meta"], "/mg/cambridge")

    cred = service.voms_authorize("rita@udine", "udine", "cambridge", "read-meta", "/mg/cambridge")

    assert service.verify(cred, "read-meta", "/mg/cambridge/img001.mgd")
    assert not service.verify(cred, "read-meta", "/mg/udine/img001.mgd")
    assert not service.verify(cred, "read-image")

    service.trust_revoke("udine", "cambridge")
    with pytest.raises(GridError) as exc:
        service.voms_authorize("rita@udine", "udine", "cambridge", "read-meta", "/mg/cambridge")
    assert exc.value.code == "Denied"


def test_write_and_admin_cannot_be_granted_across_vos():
    service = build_service()

    for permission in ("write", "admin"):
        with pytest.raises(GridError) as exc:
            service.trust_grant("udine", "cambridge", [permission], "/mg/cambridge")
        assert exc.value.code == "UngrantablePermission"


def test_authorization_truth_table_over_roles_and_trust():
    permissions = ("read-meta", "read-image", "execute")
    trust_options = ((), ("read-meta",), ("read-meta", "read-image", "execute"))
    for role_name, granted, wanted in product(BUILTIN_ROLES, trust_options, permissions):
        service = build_service()
        service.vo_add_user("udine", "tess@udine", [role_name], password="pw")
        if granted:
            service.trust_grant("udine", "cambridge", granted, "/mg/cambridge")

        expected = wanted in BUILTIN_ROLES[role_name] and wanted in granted
        try:
            service.voms_authorize("tess@udine", "udine", "cambridge", wanted, "/mg/cambridge")
            allowed = True
        except GridError as exc:
            assert exc.code == "Denied"
            side = "origin" if wanted not in BUILTIN_ROLES[role_name] else "target"
            assert str(exc.message).startswith(side)
            allowed = False
        assert allowed == expected, (role_name, granted, wanted)


def test_scope_outside_grant_is_denied():
    service = build_service()
    service.trust_grant("udine", "cambridge", ["read-meta"], "/mg/cambridge")

    with pytest.raises(GridError) as exc:
        service.voms_authorize("rita@udine", "udine", "cambridge", "read-meta", "/mg")
    assert exc.value.code == "Denied"


def test_credential_verification_fails_on_tamper_and_expiry():
    clock = VirtualClock()
    service = build_service(clock)
    service.trust_grant("udine", "cambridge", ["read-meta"], "/mg/cambridge")
    cred = service.voms_authorize("rita@udine", "udine", "cambridge", "read-meta", "/mg/cambridge")

    flipped = bytes([cred.signature[0] ^ 0x01]) + cred.signature[1:]
    assert service.verify(cred)
    assert not service.verify(replace(cred, signature=flipped))
    assert not service.verify(replace(cred, scope="/mg"))

    clock.advance(service.credential_ttl)
    assert not service.verify(cred)


def test_credential_text_form_round_trips():
    service = build_service()
    service.trust_grant("udine", "cambridge", ["read-image"], "/mg/cambridge")
    cred = service.voms_authorize("bob@udine", "udine", "cambridge", "read-image", "/mg/cambridge")

    text = encode_credential(cred)

    assert text.startswith("MGC1.")
    assert decode_credential(text) == cred
    with pytest.raises(GridError) as exc:
        decode_credential("MGC1.not-base64")
    assert exc.value.code == "MalformedCredential"


def test_trust_table_dump_and_load():
    service = build_service()
    service.trust_grant("udine", "cambridge", ["read-meta", "execute"], "/mg/cambridge")
    table = service.dump_trust_table()

    assert table == "TRUST udine cambridge execute,read-meta /mg/cambridge\n"

    other = build_service()
    other.load_trust_table("# comment\n" + table)
    assert other.trust_relations() == service.trust_relations()
    with pytest.raises(GridError) as exc:
        other.load_trust_table("TRUST udine cambridge\n")
    assert exc.value.code == "BadConfig"


def test_scope_contains_respects_segments():
    assert scope_contains("/mg/cambridge", "/mg/cambridge/a.mgd")
    assert scope_contains("/", "/mg/udine")
    assert not scope_contains("/mg/cambridge", "/mg/cambridgeshire/a.mgd")


def test_descriptors_are_published_to_the_config_tree():
    tree = ConfigTree()
    service = build_service(config_tree=tree)

    assert tree.get("udine", None, None, "sites") == "udine"
    assert "rita@udine:researcher" in tree.get("udine", None, None, "people")
    assert service.vo_key("udine") != service.vo_key("cambridge")


def test_credential_lifetime_comes_from_the_target_config():
    clock = VirtualClock()
    tree = ConfigTree({"/cambridge/credential_ttl_s": 30})
    service = build_service(clock, config_tree=tree)
    service.trust_grant("udine", "cambridge", ["read-meta"], "/mg/cambridge")

    cred = service.voms_authorize("rita@udine", "udine", "cambridge", "read-meta", "/mg/cambridge")

    assert cred.expires_at == clock.timestamp() + 30
    clock.advance(30)
    assert not service.verify(cred)
