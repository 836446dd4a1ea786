"""Matchmaking between task requirements and computing element advertisements."""

from typing import Iterable, List, Mapping, Optional, Set, Tuple

from gridbox.models import ResourceAd
from gridbox.services.jdl import JobDescriptor

ReplicaMap = Mapping[str, Set[str]]


def is_data_local(ad: ResourceAd, inputs: Iterable[str], replicas: ReplicaMap) -> bool:
    """True when the CE's local SE holds a replica of every input."""
    return all(ad.local_se in replicas.get(lfn, set()) for lfn in inputs)


def rank_candidates(
    descriptor: JobDescriptor, ads: Iterable[ResourceAd], replicas: ReplicaMap
) -> List[Tuple[ResourceAd, bool]]:
    """Satisfying ads with free slots, best first: locality, queue length, ce id."""
    ranked = []
    for ad in ads:
        if ad.queue_length >= ad.max_running or not descriptor.matches(ad):
            continue
        ranked.append((ad, is_data_local(ad, descriptor.input_data, replicas)))
    ranked.sort(key=lambda item: (not item[1], item[0].queue_length, item[0].ce_id))
    return ranked


def broker_match(
    descriptor: JobDescriptor, ads: Iterable[ResourceAd], replicas: ReplicaMap
) -> Optional[str]:
    ranked = rank_candidates(descriptor, ads, replicas)
    if not ranked:
        return None
    return ranked[0][0].ce_id
