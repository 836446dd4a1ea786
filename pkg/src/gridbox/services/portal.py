"""Authentication, the portal factory and session bookkeeping."""

import threading
from datetime import timedelta
from typing import Dict, List, Optional

from gridbox.constants import DEFAULT_MAX_PORTALS_PER_USER, DEFAULT_SESSION_TTL_SECONDS
from gridbox.errors import GridError
from gridbox.errors_catalog import grid_error
from gridbox.models import Credentials, Endpoint, SessionToken

MECHANISMS = ("PWD", "HOSTCERT", "TOKEN")


class PortalFactory:
    """Creates per-user portal instances; instance ids count from 1 per user."""

    def __init__(self, node_id: str, max_per_user: int = DEFAULT_MAX_PORTALS_PER_USER):
        self.node_id = node_id
        self.max_per_user = max_per_user
        self._counters: Dict[str, int] = {}
        self._live: Dict[str, List[Endpoint]] = {}
        self._lock = threading.Lock()

    def create(self, principal: str) -> Endpoint:
        with self._lock:
            live = self._live.setdefault(principal, [])
            if len(live) >= self.max_per_user:
                raise GridError(
                    "ResourceExhausted",
                    f"{principal} already has {len(live)} portals (max {self.max_per_user})",
                )
            self._counters[principal] = self._counters.get(principal, 0) + 1
            endpoint = Endpoint(
                self.node_id, f"portal:{principal}", str(self._counters[principal])
            )
            live.append(endpoint)
            return endpoint

    def release(self, endpoint: Endpoint):
        principal = endpoint.service_name.partition(":")[2]
        with self._lock:
            live = self._live.get(principal, [])
            if endpoint in live:
                live.remove(endpoint)

    def is_live(self, endpoint: Endpoint) -> bool:
        principal = endpoint.service_name.partition(":")[2]
        with self._lock:
            return endpoint in self._live.get(principal, [])

    def live_count(self, principal: Optional[str] = None) -> int:
        with self._lock:
            if principal is not None:
                return len(self._live.get(principal, []))
            return sum(len(items) for items in self._live.values())


class AuthenticationService:
    """Checks credentials and walks the six login hops into the audit log."""

    def __init__(
        self,
        node,
        topology,
        keyring,
        factory: PortalFactory,
        audit,
        clock,
        entropy,
        logger,
        session_ttl: int = DEFAULT_SESSION_TTL_SECONDS,
    ):
        self.node = node
        self.topology = topology
        self.keyring = keyring
        self.factory = factory
        self.audit = audit
        self.clock = clock
        self.entropy = entropy
        self.logger = logger
        self.session_ttl = session_ttl
        self._sessions: Dict[str, SessionToken] = {}
        self._interfaces: Dict[str, Endpoint] = {}
        self._lock = threading.Lock()

    @property
    def vo_service(self):
        return self.topology.vo_service

    def authenticate(self, creds: Credentials, peer_host: Optional[str] = None) -> SessionToken:
        session_id = self.entropy.token_bytes(8).hex()
        self.audit.record(
            1, session_id, "authentication", f"login {creds.principal} {creds.mechanism}"
        )
        try:
            principal = self._check(creds, peer_host)
        except GridError as exc:
            self.audit.record(2, session_id, "authentication", f"rejected {exc.code}")
            self.logger.info("Login refused for %s: %s", creds.principal, exc.code)
            raise
        self.audit.record(2, session_id, "authentication", "credentials accepted")

        interface = Endpoint(self.node.node_id, "interface", session_id)
        self.audit.record(3, session_id, "factory", f"interface {interface}")
        self.audit.record(4, session_id, "interface", "portal requested")
        portal = self.factory.create(principal)
        self.audit.record(5, session_id, "factory", f"portal {portal}")

        issued = self.clock.now()
        token = SessionToken(
            token=self.entropy.token_bytes(32).hex(),
            principal=principal,
            issued_at=issued,
            expires_at=issued + timedelta(seconds=self.session_ttl),
            portal=portal,
            session_id=session_id,
        )
        with self._lock:
            self._sessions[token.token] = token
            self._interfaces[session_id] = interface
        self.audit.record(6, session_id, "authentication", f"portal url {portal}")
        self.logger.info("Session %s opened for %s", session_id, principal)
        return token

    def session(self, token: str) -> SessionToken:
        with self._lock:
            session = self._sessions.get(token)
        if session is None:
            raise grid_error("SessionExpired")
        if self.clock.now() >= session.expires_at:
            self._drop(session)
            raise grid_error("SessionExpired")
        return session

    def peek(self, token: str) -> Optional[SessionToken]:
        with self._lock:
            return self._sessions.get(token)

    def logout(self, token: str):
        session = self.session(token)
        self._drop(session)
        self.logger.info("Session %s closed", session.session_id)

    def live_sessions(self, exclude: Optional[str] = None) -> int:
        now = self.clock.now()
        with self._lock:
            return sum(
                1
                for key, session in self._sessions.items()
                if key != exclude and session.expires_at > now
            )

    def interface_for(self, session_id: str) -> Optional[Endpoint]:
        with self._lock:
            return self._interfaces.get(session_id)

    def _drop(self, session: SessionToken):
        with self._lock:
            self._sessions.pop(session.token, None)
            self._interfaces.pop(session.session_id, None)
        self.factory.release(session.portal)

    def _check(self, creds: Credentials, peer_host: Optional[str]) -> str:
        if creds.mechanism not in MECHANISMS:
            raise GridError("BadCredentials", f"unsupported mechanism {creds.mechanism}")
        if creds.mechanism == "TOKEN":
            with self._lock:
                previous = self._sessions.get(creds.secret)
            if previous is None:
                raise grid_error("BadCredentials", principal=creds.principal)
            if self.clock.now() >= previous.expires_at:
                self._drop(previous)
                raise GridError("Expired", "session token has expired")
            return previous.principal

        vo = creds.vo
        if vo not in self.vo_service.vos:
            raise GridError("UnknownVO", f"no VO named {vo}")
        if self.topology.mode == "P2" and vo != self.node.vo:
            raise GridError("NotAuthorized", f"{creds.principal} must log in at a {vo} grid-box")
        if creds.mechanism == "PWD":
            if not self.vo_service.check_password(creds.principal, creds.secret):
                raise grid_error("BadCredentials", principal=creds.principal)
            return creds.principal

        host = creds.secret
        spec = self.topology.node_for_host(host)
        if spec is None or spec.vo != vo or not self.keyring.has(host):
            raise grid_error("BadCredentials", principal=creds.principal)
        if peer_host is not None and peer_host != host:
            raise grid_error("BadCredentials", principal=creds.principal)
        return creds.principal
