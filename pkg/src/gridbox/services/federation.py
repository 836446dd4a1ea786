"""Federated query planning, execution and result merging across VOs."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple
from urllib.parse import quote, unquote

from gridbox.constants import DATA_ROOT, MGRS_HEADER
from gridbox.errors import GridError
from gridbox.models import CrossVOCredential
from gridbox.services import catalog_query
from gridbox.services.catalog_query import CatalogQuery
from gridbox.services.query_language import QueryAST, translate
from gridbox.services.vo import encode_credential

OK = "OK"
DENIED = "DENIED"
UNREACHABLE = "UNREACHABLE"

_DENIAL_CODES = frozenset({"NotAuthorized", "Denied", "Expired", "MalformedCredential"})
_FIELD_SAFE = "/@:.-_"


@dataclass(frozen=True)
class PlanLeg:
    target_vo: str
    node_id: str
    prefix: str
    query: CatalogQuery
    credential: Optional[CrossVOCredential] = None

    @property
    def local(self) -> bool:
        return self.credential is None


@dataclass
class FederationPlan:
    origin_vo: str
    principal: str
    mode: str
    legs: List[PlanLeg] = field(default_factory=list)
    denied: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ResultRow:
    guid: str
    lfn: str
    origin_vo: str
    attrs: Tuple[Tuple[str, Any], ...] = ()

    def attr_map(self) -> Dict[str, Any]:
        return dict(self.attrs)

    def render(self) -> str:
        attrs = ";".join(f"{_enc(k)}={_enc(str(v))}" for k, v in self.attrs)
        return f"{_enc(self.guid)}|{_enc(self.origin_vo)}|{_enc(self.lfn)}|{attrs}"


def _enc(text: str) -> str:
    return quote(text, safe=_FIELD_SAFE)


@dataclass
class ResultSet:
    rows: List[ResultRow] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)
    statuses: Dict[str, str] = field(default_factory=dict)

    def lfns(self) -> List[str]:
        return [row.lfn for row in self.rows]

    def render(self) -> str:
        lines = [f"{MGRS_HEADER} rows={len(self.rows)}"]
        lines += [row.render() for row in self.rows]
        return "\n".join(lines) + "\n"

    def summary_lines(self) -> List[str]:
        return [
            f"# vo={vo} status={self.statuses[vo]} rows={self.counts.get(vo, 0)}"
            for vo in sorted(self.statuses)
        ]

    def privacy_violations(self) -> List[str]:
        """Rows carrying anything that looks like a plaintext identifier."""
        found = []
        for row in self.rows:
            for key, value in row.attrs:
                text = str(value)
                if "^" in text or (text.isdigit() and len(text) == 8):
                    found.append(f"{row.lfn}:{key}")
                if key == "pseudonym" and not text.startswith("PSN:"):
                    found.append(f"{row.lfn}:{key}")
        return found

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": [
                {"guid": r.guid, "lfn": r.lfn, "origin_vo": r.origin_vo, "attrs": dict(r.attrs)}
                for r in self.rows
            ],
            "counts": dict(self.counts),
            "statuses": dict(self.statuses),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ResultSet":
        rows = [
            ResultRow(r["guid"], r["lfn"], r["origin_vo"], tuple(sorted(r["attrs"].items())))
            for r in data.get("rows", [])
        ]
        return cls(rows, dict(data.get("counts", {})), dict(data.get("statuses", {})))

    @classmethod
    def parse(cls, text: str) -> "ResultSet":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(MGRS_HEADER + " rows="):
            raise GridError("MalformedPayload", "missing MGRS/1 header")
        rows = []
        for line in lines[1:]:
            if not line or line.startswith("#"):
                continue
            guid, origin_vo, lfn, attrs = line.split("|", 3)
            pairs = []
            for item in attrs.split(";") if attrs else []:
                key, _, value = item.partition("=")
                pairs.append((unquote(key), unquote(value)))
            rows.append(ResultRow(unquote(guid), unquote(lfn), unquote(origin_vo), tuple(pairs)))
        return cls(rows)


LegOutcome = Tuple[str, str, List[ResultRow]]


def merge(outcomes: Sequence[LegOutcome], denied: Sequence[str] = ()) -> ResultSet:
    """Deduplicate by guid (owner VO's row wins) and sort by (origin_vo, lfn)."""
    chosen: Dict[str, Tuple[Tuple[bool, str], ResultRow]] = {}
    result = ResultSet()
    for served_by, status, rows in sorted(outcomes, key=lambda item: item[0]):
        result.statuses[served_by] = status
        result.counts[served_by] = len(rows)
        for row in rows:
            rank = (row.origin_vo != served_by, served_by)
            current = chosen.get(row.guid)
            if current is None or rank < current[0]:
                chosen[row.guid] = (rank, row)
    for vo in denied:
        result.statuses[vo] = DENIED
        result.counts[vo] = 0
    result.rows = sorted((row for _, row in chosen.values()), key=lambda r: (r.origin_vo, r.lfn))
    return result


class QueryFederator:
    """Resolves queries where the data is governed and merges the answers."""

    def __init__(self, topology, router, entropy, logger):
        self.topology = topology
        self.router = router
        self.entropy = entropy
        self.logger = logger

    @property
    def vo_service(self):
        return self.topology.vo_service

    def plan(
        self,
        ast: QueryAST,
        principal: Optional[str],
        query_year: int,
        targets: Optional[Sequence[str]] = None,
    ) -> FederationPlan:
        if not principal:
            raise GridError("NotAuthenticated", "federated queries need an authenticated session")
        origin_vo = principal.rpartition("@")[2]
        query = translate(ast, query_year)
        plan = FederationPlan(origin_vo, principal, self.topology.mode)

        if self.topology.mode == "P1" and targets is None:
            vo = self.topology.central_vo
            plan.legs.append(PlanLeg(vo, self.topology.central_node, DATA_ROOT, query))
            return plan

        for target in targets if targets is not None else self.topology.data_vos():
            if target == origin_vo:
                node_id = self.topology.services_node(target)
                plan.legs.append(PlanLeg(target, node_id, DATA_ROOT, query))
                continue
            relation = self.vo_service.trust_for(origin_vo, target)
            if relation is None or target not in self.vo_service.vos:
                plan.denied.append(target)
                continue
            try:
                credential = self.vo_service.voms_authorize(
                    principal, origin_vo, target, "read-meta", relation.scope
                )
            except GridError as exc:
                self.logger.info("Leg to %s denied: %s", target, exc)
                plan.denied.append(target)
                continue
            node_id = self.topology.services_node(target)
            plan.legs.append(PlanLeg(target, node_id, relation.scope, query, credential))
        return plan

    def execute_plan(self, plan: FederationPlan) -> ResultSet:
        legs = list(plan.legs)
        if getattr(self.router, "concurrent", False) and len(legs) > 1:
            with ThreadPoolExecutor(max_workers=len(legs)) as pool:
                outcomes = list(pool.map(lambda leg: self._run_leg(plan, leg), legs))
        else:
            self.entropy.shuffle(legs)
            started = [(leg, self._start_leg(plan, leg)) for leg in legs]
            outcomes = [self._finish_leg(leg, pending) for leg, pending in started]
        result = merge(outcomes, plan.denied)
        self.logger.debug("Federated query returned %s rows", len(result.rows))
        return result

    def _run_leg(self, plan: FederationPlan, leg: PlanLeg) -> LegOutcome:
        return self._finish_leg(leg, self._start_leg(plan, leg))

    def _start_leg(self, plan: FederationPlan, leg: PlanLeg):
        """Put the leg's request in flight; a failure to send is kept for ``_finish_leg``."""
        auth: Dict[str, Any] = {"principal": plan.principal}
        if leg.credential is not None:
            auth["credential"] = encode_credential(leg.credential)
        args = {"stmt": "find", "prefix": leg.prefix, "query": catalog_query.to_dict(leg.query)}
        try:
            return self.router.submit(leg.node_id, "dbproxy.execute", args, auth)
        except GridError as exc:
            return exc

    def _finish_leg(self, leg: PlanLeg, pending) -> LegOutcome:
        try:
            if isinstance(pending, GridError):
                raise pending
            response = pending.result()
        except GridError as exc:
            status = DENIED if exc.code in _DENIAL_CODES else UNREACHABLE
            self.logger.warning("Query leg to %s failed: %s", leg.target_vo, exc)
            return leg.target_vo, status, []
        rows = [
            ResultRow(
                item["guid"], item["lfn"], item["owner_vo"], tuple(sorted(item["attrs"].items()))
            )
            for item in response.get("entries", [])
        ]
        return leg.target_vo, OK, rows
