"""Virtual organisations: membership, roles, trust relations and cross-VO credentials."""

import base64
import binascii
import hashlib
import hmac
import secrets
import threading
from dataclasses import replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

from gridbox.constants import (
    BUILTIN_ROLES,
    CREDENTIAL_PREFIX,
    CROSS_VO_PERMISSIONS,
    DEFAULT_CREDENTIAL_TTL_SECONDS,
    PERMISSIONS,
)
from gridbox.errors import GridError
from gridbox.models import CrossVOCredential, Role, TrustRelation, VODescriptor

PBKDF2_ITERATIONS = 20_000


def hash_password(password: str, salt: Optional[bytes] = None) -> str:
    salt = salt or secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, PBKDF2_ITERATIONS)
    return f"pbkdf2${PBKDF2_ITERATIONS}${salt.hex()}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        scheme, iterations, salt_hex, digest_hex = stored.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2":
        return False
    digest = hashlib.pbkdf2_hmac(
        "sha256", password.encode("utf-8"), bytes.fromhex(salt_hex), int(iterations)
    )
    return hmac.compare_digest(digest.hex(), digest_hex)


def role(name: str) -> Role:
    if name not in BUILTIN_ROLES:
        raise GridError("UnknownRole", f"no role named {name!r}")
    return Role(name, BUILTIN_ROLES[name])


def scope_contains(scope: str, path: str) -> bool:
    scope = scope.rstrip("/") or "/"
    if scope == "/":
        return path.startswith("/")
    return path == scope or path.startswith(scope + "/")


def credential_payload(cred: CrossVOCredential) -> bytes:
    fields = {
        "credential_id": cred.credential_id,
        "principal": cred.principal,
        "origin_vo": cred.origin_vo,
        "target_vo": cred.target_vo,
        "permissions": ",".join(sorted(cred.permissions)),
        "scope": cred.scope,
        "expires_at": str(cred.expires_at),
    }
    return "\n".join(f"{key}={fields[key]}" for key in sorted(fields)).encode("utf-8")


def sign_credential(cred: CrossVOCredential, key: bytes) -> CrossVOCredential:
    mac = hmac.new(key, credential_payload(cred), hashlib.sha256).digest()
    return replace(cred, signature=mac)


def credential_verify(
    cred: CrossVOCredential,
    target_vo_key: bytes,
    now: int,
    permission: Optional[str] = None,
    path: Optional[str] = None,
) -> bool:
    """Pure check of signature, expiry and (optionally) the attempted action."""
    expected = hmac.new(target_vo_key, credential_payload(cred), hashlib.sha256).digest()
    if not hmac.compare_digest(expected, cred.signature):
        return False
    if now >= cred.expires_at:
        return False
    if permission is not None and permission not in cred.permissions:
        return False
    if path is not None and not scope_contains(cred.scope, path):
        return False
    return True


def encode_credential(cred: CrossVOCredential) -> str:
    payload = base64.b64encode(credential_payload(cred)).decode("ascii")
    mac = base64.b64encode(cred.signature).decode("ascii")
    return f"{CREDENTIAL_PREFIX}.{payload}.{mac}"


def decode_credential(text: str) -> CrossVOCredential:
    try:
        prefix, payload_b64, mac_b64 = text.split(".")
        if prefix != CREDENTIAL_PREFIX:
            raise ValueError(f"unexpected prefix {prefix!r}")
        payload = base64.b64decode(payload_b64, validate=True).decode("utf-8")
        signature = base64.b64decode(mac_b64, validate=True)
        fields = dict(line.split("=", 1) for line in payload.splitlines())
        return CrossVOCredential(
            credential_id=fields["credential_id"],
            principal=fields["principal"],
            origin_vo=fields["origin_vo"],
            target_vo=fields["target_vo"],
            permissions=frozenset(p for p in fields["permissions"].split(",") if p),
            scope=fields["scope"],
            expires_at=int(fields["expires_at"]),
            signature=signature,
        )
    except (ValueError, KeyError, UnicodeDecodeError, binascii.Error) as exc:
        raise GridError("MalformedCredential", f"cannot decode credential: {exc}") from exc


class VOService:
    """Directory of VOs, their users and the trust relations between them."""

    def __init__(
        self,
        clock,
        logger,
        entropy=None,
        credential_ttl: int = DEFAULT_CREDENTIAL_TTL_SECONDS,
        config_tree=None,
    ):
        self.clock = clock
        self.logger = logger
        self.entropy = entropy
        self.credential_ttl = credential_ttl
        self.config_tree = config_tree
        self.vos: Dict[str, VODescriptor] = {}
        self._keys: Dict[str, bytes] = {}
        self._passwords: Dict[str, str] = {}
        self._trust: Dict[Tuple[str, str], TrustRelation] = {}
        self._credential_counter = 0
        self._lock = threading.RLock()

    # membership

    def vo_create(
        self,
        name: str,
        key: Optional[bytes] = None,
        packages: Iterable[str] = (),
        partitions: Iterable[str] = (),
    ) -> VODescriptor:
        with self._lock:
            if name in self.vos:
                raise GridError("Duplicate", f"VO {name} already exists")
            descriptor = VODescriptor(
                name=name,
                packages=sorted(packages),
                config_root=f"/{name}",
                partitions=list(partitions),
            )
            self.vos[name] = descriptor
            self._keys[name] = key or self._token(32)
            self._publish(descriptor)
            self.logger.info("Created VO %s", name)
            return descriptor

    def vo_add_site(self, vo: str, site: str):
        with self._lock:
            descriptor = self.descriptor(vo)
            owner = self.site_owner(site)
            if owner == vo:
                return
            if owner is not None:
                raise GridError("SiteTaken", f"site {site} already belongs to VO {owner}")
            descriptor.sites.append(site)
            descriptor.sites.sort()
            self._publish(descriptor)

    def vo_add_user(
        self,
        vo: str,
        principal: str,
        roles: Iterable[str],
        password: Optional[str] = None,
        password_hash: Optional[str] = None,
    ):
        with self._lock:
            descriptor = self.descriptor(vo)
            if principal.rpartition("@")[2] != vo:
                raise GridError("BadPrincipal", f"{principal} is not of the form user@{vo}")
            role_names = sorted({role(name).name for name in roles})
            descriptor.users[principal] = role_names
            if password is not None:
                salt = self._token(16) if self.entropy is not None else None
                self._passwords[principal] = hash_password(password, salt)
            elif password_hash is not None:
                self._passwords[principal] = password_hash
            self._publish(descriptor)

    def descriptor(self, vo: str) -> VODescriptor:
        descriptor = self.vos.get(vo)
        if descriptor is None:
            raise GridError("UnknownVO", f"no VO named {vo}")
        return descriptor

    def site_owner(self, site: str) -> Optional[str]:
        for name, descriptor in self.vos.items():
            if site in descriptor.sites:
                return name
        return None

    def vo_key(self, vo: str) -> bytes:
        self.descriptor(vo)
        return self._keys[vo]

    def is_member(self, principal: str) -> bool:
        vo = principal.rpartition("@")[2]
        descriptor = self.vos.get(vo)
        return descriptor is not None and principal in descriptor.users

    def check_password(self, principal: str, password: str) -> bool:
        stored = self._passwords.get(principal)
        if stored is None or not self.is_member(principal):
            return False
        return verify_password(password, stored)

    def permissions_of(self, principal: str) -> FrozenSet[str]:
        vo = principal.rpartition("@")[2]
        descriptor = self.vos.get(vo)
        if descriptor is None:
            return frozenset()
        granted: set = set()
        for name in descriptor.users.get(principal, []):
            granted |= role(name).permissions
        if "admin" in granted:
            return frozenset(PERMISSIONS)
        return frozenset(granted)

    def has_permission(self, principal: str, permission: str) -> bool:
        return permission in self.permissions_of(principal)

    # trust

    def trust_grant(self, from_vo: str, to_vo: str, permissions: Iterable[str], scope: str):
        permissions = frozenset(permissions)
        with self._lock:
            self.descriptor(from_vo)
            self.descriptor(to_vo)
            ungrantable = sorted(permissions - CROSS_VO_PERMISSIONS)
            if ungrantable:
                raise GridError(
                    "UngrantablePermission", f"cannot grant {', '.join(ungrantable)} across VOs"
                )
            self._trust[(from_vo, to_vo)] = TrustRelation(from_vo, to_vo, permissions, scope)
            self.logger.info("Trust %s -> %s: %s on %s", from_vo, to_vo, sorted(permissions), scope)

    def trust_revoke(self, from_vo: str, to_vo: str):
        with self._lock:
            self.descriptor(from_vo)
            self.descriptor(to_vo)
            self._trust.pop((from_vo, to_vo), None)
            self.logger.info("Trust %s -> %s revoked", from_vo, to_vo)

    def trust_for(self, from_vo: str, to_vo: str) -> Optional[TrustRelation]:
        return self._trust.get((from_vo, to_vo))

    def trust_relations(self) -> List[TrustRelation]:
        return [self._trust[key] for key in sorted(self._trust)]

    def dump_trust_table(self) -> str:
        lines = [
            f"TRUST {rel.from_vo} {rel.to_vo} {','.join(sorted(rel.permissions))} {rel.scope}"
            for rel in self.trust_relations()
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def load_trust_table(self, text: str):
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5 or parts[0] != "TRUST":
                raise GridError("BadConfig", f"trust table line {number} is malformed: {line!r}")
            _, from_vo, to_vo, permissions, scope = parts
            self.trust_grant(from_vo, to_vo, permissions.split(","), scope)

    def voms_authorize(
        self, principal: str, origin_vo: str, target_vo: str, permission: str, scope: str
    ) -> CrossVOCredential:
        """Issue a credential only when the origin and the target VO both consent."""
        with self._lock:
            self.descriptor(origin_vo)
            self.descriptor(target_vo)
            if principal.rpartition("@")[2] != origin_vo or not self.is_member(principal):
                raise GridError("Denied", f"origin: {principal} is not a member of {origin_vo}")
            if not self.has_permission(principal, permission):
                raise GridError("Denied", f"origin: {principal} lacks {permission} in {origin_vo}")
            relation = self.trust_for(origin_vo, target_vo)
            if relation is None or permission not in relation.permissions:
                raise GridError(
                    "Denied", f"target: {target_vo} does not grant {permission} to {origin_vo}"
                )
            if not scope_contains(relation.scope, scope):
                raise GridError(
                    "Denied", f"target: {scope} is outside the granted scope {relation.scope}"
                )
            self._credential_counter += 1
            credential = CrossVOCredential(
                credential_id=f"{target_vo}-{self._credential_counter}",
                principal=principal,
                origin_vo=origin_vo,
                target_vo=target_vo,
                permissions=frozenset({permission}),
                scope=scope,
                expires_at=self.clock.timestamp() + self._credential_ttl(target_vo),
            )
            return sign_credential(credential, self._keys[target_vo])

    def verify(
        self, cred: CrossVOCredential, permission: Optional[str] = None, path: Optional[str] = None
    ) -> bool:
        key = self._keys.get(cred.target_vo)
        if key is None:
            return False
        return credential_verify(cred, key, self.clock.timestamp(), permission, path)

    def _credential_ttl(self, target_vo: str) -> int:
        if self.config_tree is None:
            return self.credential_ttl
        return self.config_tree.get_int(
            target_vo, None, None, "credential_ttl_s", self.credential_ttl
        )

    def _token(self, size: int) -> bytes:
        if self.entropy is not None:
            return self.entropy.token_bytes(size)
        return secrets.token_bytes(size)

    def _publish(self, descriptor: VODescriptor):
        if self.config_tree is None:
            return
        prefix = descriptor.config_root
        self.config_tree.publish(f"{prefix}/sites", ",".join(descriptor.sites))
        self.config_tree.publish(f"{prefix}/packages", ",".join(descriptor.packages))
        self.config_tree.publish(f"{prefix}/partitions", ",".join(descriptor.partitions))
        self.config_tree.publish(
            f"{prefix}/people",
            ",".join(f"{p}:{'+'.join(r)}" for p, r in sorted(descriptor.users.items())),
        )
