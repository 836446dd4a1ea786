"""``gridboxd``: one grid-box served over TCP from a topology file."""

import logging
import threading
from typing import Optional

import click
from rich.logging import RichHandler

from .core import GridBox
from .errors import GridError
from .services.clock import SystemClock, SystemEntropy
from .services.config_loader import ConfigLoader
from .services.config_tree import ConfigTree
from .services.topology import Topology
from .services.transports import SocketTransport
from .services.wire import HostKeyring

logger = logging.getLogger("gridbox.daemon")

DEFAULT_CYCLE_SECONDS = 5.0


def build_box(
    topology_path: str,
    node_id: str,
    keyring_path: str,
    state_dir: Optional[str] = None,
    storage_dir: Optional[str] = None,
    audit_file: Optional[str] = None,
) -> GridBox:
    config = ConfigLoader().load_topology(topology_path)
    clock = SystemClock()
    config_tree = ConfigTree(config.get("config") or {})
    topology = Topology.from_config(
        config, clock, logger.getChild("topology"), config_tree=config_tree
    )
    spec = topology.node(node_id)
    keyring = HostKeyring.load(keyring_path)
    timeout = config_tree.get_float(spec.vo, spec.site, spec.host, "request_timeout_s", 10.0)
    transport = SocketTransport(keyring, SystemEntropy(), logger.getChild("wire"), timeout=timeout)
    return GridBox(
        node_id,
        topology,
        keyring,
        transport,
        clock=clock,
        config_tree=config_tree,
        state_dir=state_dir,
        storage_root=storage_dir,
        audit_path=audit_file,
        concurrent=True,
    )


class JobCycles(threading.Thread):
    """Drives broker, optimizer, transfer and CE cycles on the VO services node."""

    def __init__(self, box: GridBox, interval: float):
        super().__init__(name=f"cycles-{box.node_id}", daemon=True)
        self.box = box
        self.interval = interval
        self.stopped = threading.Event()

    def run(self):
        while not self.stopped.wait(self.interval):
            if self.box.topology.services_node(self.box.node.vo) != self.box.node_id:
                continue
            try:
                self.box.tick()
            except GridError as exc:
                logger.warning("Job cycle on %s failed: %s", self.box.node_id, exc)

    def stop(self):
        self.stopped.set()


def serve(
    topology_path: str,
    node_id: str,
    keyring_path: str,
    address: Optional[str] = None,
    state_dir: Optional[str] = None,
    storage_dir: Optional[str] = None,
    audit_file: Optional[str] = None,
):
    box = build_box(topology_path, node_id, keyring_path, state_dir, storage_dir, audit_file)
    server = box.listen(address or box.node.address or None)
    spec = box.node
    interval = box.config_tree.get_float(
        spec.vo, spec.site, spec.host, "cycle_interval_s", DEFAULT_CYCLE_SECONDS
    )
    cycles = JobCycles(box, interval)
    cycles.start()
    logger.info("Grid-box %s (%s, VO %s) ready", node_id, box.topology.mode, spec.vo)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Interrupted, shutting down %s", node_id)
    finally:
        cycles.stop()
        server.server_close()
        box.close()


@click.command()
@click.option("--topology", "topology_path", type=click.Path(exists=True), required=True)
@click.option("--node", "node_id", required=True, help="Node id of this grid-box.")
@click.option("--keyring", "keyring_path", type=click.Path(exists=True), required=True)
@click.option("--listen", "address", default=None, help="host:port to bind.")
@click.option("--state-dir", type=click.Path(), default=None, help="Catalogue journal directory.")
@click.option("--storage-dir", type=click.Path(), default=None, help="Storage element root.")
@click.option("--audit-file", type=click.Path(), default=None, help="Append-only audit trail.")
@click.option("--verbose", is_flag=True, default=False, help="Enable verbose logging")
@click.option("--log-file", type=click.Path(), help="Path to log file")
def main(
    topology_path,
    node_id,
    keyring_path,
    address,
    state_dir,
    storage_dir,
    audit_file,
    verbose,
    log_file,
):
    """Run one grid-box."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_level=False, show_path=False)],
    )
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
        logging.getLogger("gridbox").addHandler(file_handler)
    try:
        serve(
            topology_path,
            node_id,
            keyring_path,
            address=address,
            state_dir=state_dir,
            storage_dir=storage_dir,
            audit_file=audit_file,
        )
    except GridError as exc:
        raise click.ClickException(str(exc)) from exc


if __name__ == "__main__":
    main()
