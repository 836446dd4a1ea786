"""Authorization at service entry points (dbproxy, storage, transfer, jobs)."""

from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

from gridbox.errors import GridError
from gridbox.models import NodeSpec
from gridbox.services.topology import Topology
from gridbox.services.vo import decode_credential


@dataclass(frozen=True)
class AuthContext:
    """Who is asking: the authenticated peer host plus an optional claimed principal."""

    host: Optional[str] = None
    principal: Optional[str] = None
    credential: Optional[str] = None

    @classmethod
    def from_rpc(cls, auth: Optional[Mapping[str, Any]]) -> "AuthContext":
        auth = auth or {}
        return cls(auth.get("host"), auth.get("principal"), auth.get("credential"))

    def to_rpc(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {}
        if self.principal:
            data["principal"] = self.principal
        if self.credential:
            data["credential"] = self.credential
        return data


class AccessPolicy:
    """Decides whether a context may perform ``permission`` on a path at this node."""

    def __init__(self, node: NodeSpec, topology: Topology):
        self.node = node
        self.topology = topology

    @property
    def vo_service(self):
        return self.topology.vo_service

    def peer_node(self, ctx: AuthContext) -> Optional[NodeSpec]:
        if not ctx.host:
            return None
        return self.topology.node_for_host(ctx.host)

    def require_host(self, ctx: AuthContext, same_vo: bool = True) -> NodeSpec:
        """Grid-box to grid-box calls made on the node's own authority."""
        peer = self.peer_node(ctx)
        if peer is None or ctx.principal:
            raise GridError("NotAuthorized", f"{ctx.host or 'anonymous'} is not a grid-box peer")
        if same_vo and peer.vo != self.node.vo:
            raise GridError(
                "NotAuthorized", f"{peer.node_id} ({peer.vo}) may not act inside {self.node.vo}"
            )
        return peer

    def authorize(self, ctx: AuthContext, permission: str, path: Optional[str] = None) -> str:
        """Return the acting identity or raise ``NotAuthorized``.

        Principals are only believed from grid-box peers: a peer of the principal's own
        VO, or the central relay when the request carries a cross-VO credential.
        Workstations reach services through the portal and never claim a principal.
        """
        peer = self.peer_node(ctx)
        if not ctx.principal:
            if peer is not None and permission != "admin":
                return self.require_host(ctx).node_id
            raise GridError("NotAuthorized", "request carries no principal or host certificate")

        if peer is None:
            raise GridError(
                "NotAuthorized",
                f"{ctx.host or 'anonymous'} may not act as {ctx.principal} outside a portal",
            )
        principal_vo = ctx.principal.rpartition("@")[2]
        if principal_vo == self.node.vo:
            if peer.vo != principal_vo:
                raise GridError(
                    "NotAuthorized", f"{peer.node_id} ({peer.vo}) may not act for {ctx.principal}"
                )
            if self.vo_service.has_permission(ctx.principal, permission):
                return ctx.principal
            raise GridError("NotAuthorized", f"{ctx.principal} lacks {permission}")

        if peer.vo != principal_vo and peer.node_id != self.topology.central_node:
            raise GridError(
                "NotAuthorized", f"{peer.node_id} ({peer.vo}) may not act for {ctx.principal}"
            )
        if not ctx.credential:
            raise GridError(
                "NotAuthorized", f"{ctx.principal} needs a cross-VO credential for {self.node.vo}"
            )
        cred = decode_credential(ctx.credential)
        if (
            cred.principal != ctx.principal
            or cred.origin_vo != principal_vo
            or cred.target_vo != self.node.vo
            or not self.vo_service.verify(cred, permission, path)
        ):
            raise GridError(
                "NotAuthorized",
                f"credential does not allow {ctx.principal} to {permission} {path or ''}".rstrip(),
            )
        return ctx.principal
