"""Data staging pass: make the best non-local match data-local."""

from typing import Callable, Iterable, List, Mapping, Set, Tuple

from gridbox.models import FileEntry, ResourceAd, TransferRequest
from gridbox.services.broker import rank_candidates
from gridbox.services.jdl import JobDescriptor

PENDING_TRANSFER_STATES = ("WAITING", "TRANSFERRING")


def optimizer_pass(
    waiting: Iterable[JobDescriptor],
    transfers: Iterable[TransferRequest],
    ads: List[ResourceAd],
    entries: Mapping[str, FileEntry],
    new_transfer_id: Callable[[], str],
) -> List[TransferRequest]:
    """Create the transfers that stage missing inputs; never duplicates pending ones."""
    pending: Set[Tuple[str, str]] = {
        (item.lfn, item.dest_se) for item in transfers if item.status in PENDING_TRANSFER_STATES
    }
    replicas = {lfn: {r.se_id for r in entry.replicas} for lfn, entry in entries.items()}
    created: List[TransferRequest] = []
    for descriptor in waiting:
        ranked = rank_candidates(descriptor, ads, replicas)
        if not ranked or ranked[0][1]:
            continue
        target = ranked[0][0]
        for lfn in descriptor.input_data:
            entry = entries.get(lfn)
            if entry is None or not entry.replicas:
                continue
            if target.local_se in replicas[lfn] or (lfn, target.local_se) in pending:
                continue
            source = sorted(entry.replicas)[0]
            created.append(
                TransferRequest(
                    transfer_id=new_transfer_id(),
                    guid=entry.guid,
                    lfn=lfn,
                    object_key=source.object_key,
                    source_se=source.se_id,
                    dest_se=target.local_se,
                    checksum=entry.checksum,
                )
            )
            pending.add((lfn, target.local_se))
    return created
