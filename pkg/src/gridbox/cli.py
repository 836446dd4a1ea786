import logging
import os
import re
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import click
import yaml
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

from .client import GridClient
from .constants import (
    DEFAULT_PORT,
    DIR_MODE,
    ENV_HOST,
    ENV_KEYRING,
    ENV_NODE,
    ENV_USER,
    TOKEN_CACHE_MODE,
)
from .daemon import serve
from .errors import GridError
from .models import NodeSpec
from .services.clock import SystemEntropy
from .services.config_loader import ConfigLoader
from .services.transports import SocketTransport
from .services.wire import HostKeyring

APP_NAME = "mgctl"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_AUTH = 2
EXIT_REMOTE = 3

AUTH_ERROR_CODES = frozenset(
    {"BadCredentials", "SessionExpired", "Expired", "NotAuthenticated", "UnknownHost", "BadProof"}
)

# subcommand path -> the portal operation it reaches
COMMAND_TABLE: Dict[str, str] = {
    "add": "mi.add",
    "get": "mi.retrieve",
    "update": "mi.update",
    "query": "mi.query",
    "algo add": "mi.addAlgorithm",
    "algo run": "mi.executeAlgorithm",
    "job status": "job.status",
    "job kill": "job.kill",
    "admin vo create": "admin.vo_create",
    "admin site add": "admin.site_add",
    "admin user add": "admin.user_add",
    "admin trust grant": "admin.trust_grant",
    "admin trust revoke": "admin.trust_revoke",
    "admin mode set": "admin.mode_set",
    "admin audit": "admin.audit",
    "admin supervo attach": "admin.supervo_attach",
    "admin foreign attach": "admin.foreign_attach",
    "admin foreign detach": "admin.foreign_detach",
}

_TIMESTAMP_RE = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d+)?Z")

console = Console(stderr=True, soft_wrap=True)
logger = logging.getLogger("gridbox")


def _resolve_option(cli_value, config, key, env=None, default=None):
    if env and os.environ.get(env):
        return os.environ[env]
    if cli_value is not None:
        return cli_value
    if key in config:
        return config[key]
    return default


def exit_code_for(error: GridError) -> int:
    return EXIT_AUTH if error.code in AUTH_ERROR_CODES else EXIT_REMOTE


def configure_logging(verbose: bool, log_file: Optional[str] = None):
    level = logging.DEBUG if verbose else logging.WARNING
    root = logging.getLogger()
    if not any(isinstance(handler, RichHandler) for handler in root.handlers):
        root.addHandler(
            RichHandler(console=console, rich_tracebacks=True, show_level=False, show_path=False)
        )
    root.setLevel(level)
    logger.setLevel(level)
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
        file_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
        logger.addHandler(file_handler)


@dataclass
class ClientSettings:
    node: Optional[str] = None
    user: Optional[str] = None
    keyring: Optional[str] = None
    host_id: Optional[str] = None
    output: str = "records"
    password: Optional[str] = None
    topology: Optional[str] = None
    token_file: Optional[str] = None
    stable_output: bool = False

    @property
    def token_path(self) -> str:
        return self.token_file or os.path.join(click.get_app_dir(APP_NAME), "session.yml")


class TokenCache:
    """Session token kept between invocations in a file only the owner can read."""

    def __init__(self, path: str):
        self.path = path

    def load(self) -> Dict[str, str]:
        if not os.path.exists(self.path):
            return {}
        try:
            with open(self.path, "r", encoding="utf-8") as file_obj:
                data = yaml.safe_load(file_obj) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise GridError("BadConfig", f"unreadable token cache {self.path}: {exc}") from exc
        return data if isinstance(data, dict) else {}

    def save(self, data: Dict[str, str]):
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, mode=DIR_MODE, exist_ok=True)
        fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, TOKEN_CACHE_MODE)
        with os.fdopen(fd, "w", encoding="utf-8") as file_obj:
            yaml.safe_dump(data, file_obj, sort_keys=True)
        os.chmod(self.path, TOKEN_CACHE_MODE)

    def clear(self):
        if os.path.exists(self.path):
            os.remove(self.path)


def _peer_spec(settings: ClientSettings) -> NodeSpec:
    if not settings.node:
        raise click.UsageError(f"No grid-box given: use --node or set {ENV_NODE}.")
    if settings.topology:
        topology = ConfigLoader().load_topology(settings.topology)
        for raw in topology["nodes"]:
            if str(raw.get("id")) == settings.node:
                return NodeSpec(
                    node_id=settings.node,
                    site=str(raw.get("site", settings.node)),
                    vo=str(raw.get("vo", "")),
                    host_id=str(raw.get("host_id", "")),
                    address=str(raw.get("address", "")),
                )
        raise GridError("UnknownNode", f"{settings.node} is not in {settings.topology}")
    host_id, _, address = settings.node.rpartition("@")
    return NodeSpec(node_id=host_id or address, site="", vo="", host_id=host_id, address=address)


def open_client(settings: ClientSettings) -> GridClient:
    """Workstation channel to the configured grid-box over TCP."""
    if not settings.keyring:
        raise click.UsageError(f"No keyring given: use --keyring or set {ENV_KEYRING}.")
    if not settings.host_id:
        raise click.UsageError(f"No workstation host id: use --host-id or set {ENV_HOST}.")
    peer = _peer_spec(settings)
    transport = SocketTransport(
        HostKeyring.load(settings.keyring),
        SystemEntropy(),
        logger.getChild("wire"),
        default_port=DEFAULT_PORT,
    )
    return GridClient(transport, peer, settings.host_id, expected_peer=peer.host_id or None)


class MgctlGroup(click.Group):
    """Maps failures onto the documented exit codes instead of click's defaults."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        args = list(sys.argv[1:] if args is None else args)
        if not args:
            ctx = click.Context(self, info_name=prog_name or APP_NAME)
            click.echo(self.get_help(ctx))
            code = EXIT_USAGE
        else:
            code = self._run(args, prog_name, complete_var, extra)
        if standalone_mode:
            sys.exit(code)
        return code

    def _run(self, args: List[str], prog_name, complete_var, extra) -> int:
        try:
            result = super().main(
                args=args,
                prog_name=prog_name or APP_NAME,
                complete_var=complete_var,
                standalone_mode=False,
                **extra,
            )
        except click.UsageError as exc:
            exc.show()
            return EXIT_USAGE
        except click.ClickException as exc:
            exc.show()
            return EXIT_REMOTE
        except click.Abort:
            click.echo("Aborted!", err=True)
            return EXIT_USAGE
        except GridError as exc:
            console.print(f"[red]Error:[/red] {escape(str(exc))}")
            return exit_code_for(exc)
        return result if isinstance(result, int) else EXIT_OK


class Session:
    """Per-invocation state shared by the subcommands."""

    def __init__(self, settings: ClientSettings):
        self.settings = settings
        self.cache = TokenCache(settings.token_path)
        self._client: Optional[GridClient] = None

    @property
    def client(self) -> GridClient:
        if self._client is None:
            self._client = open_client(self.settings)
            self._client.token = self.cache.load().get("token")
        return self._client

    def emit(self, text: str):
        if self.settings.stable_output:
            text = _TIMESTAMP_RE.sub("<ts>", text)
        click.echo(text)

    def close(self):
        if self._client is not None:
            self._client.close()


pass_session = click.make_pass_decorator(Session)


@click.group(cls=MgctlGroup)
@click.option("--config", type=click.Path(), help="YAML client configuration file.")
@click.option(
    "--node", help=f"Grid-box: node id (with --topology) or [host_id@]host:port. Env {ENV_NODE}."
)
@click.option("--user", help=f"Principal as user@vo. Env {ENV_USER}.")
@click.option("--keyring", type=click.Path(), help=f"Host keyring file. Env {ENV_KEYRING}.")
@click.option("--host-id", help=f"This workstation's host id in the keyring. Env {ENV_HOST}.")
@click.option("--topology", type=click.Path(), help="Topology file used to resolve --node.")
@click.option(
    "--output", type=click.Choice(["records", "text"]), default=None, help="Query output format."
)
@click.option("--stable-output", is_flag=True, default=False, help="Replace timestamps with <ts>.")
@click.option("--token-file", type=click.Path(), help="Where the session token is cached.")
@click.option("--verbose", is_flag=True, default=None, help="Enable verbose logging")
@click.option("--log-file", type=click.Path(), help="Path to log file")
@click.pass_context
def main(
    ctx,
    config,
    node,
    user,
    keyring,
    host_id,
    topology,
    output,
    stable_output,
    token_file,
    verbose,
    log_file,
):
    """Clinician and administrator client for a mammography grid-box."""
    config_path = config
    if config_path is None:
        default_path = os.path.join(click.get_app_dir(APP_NAME), "config.yml")
        if os.path.exists(default_path):
            config_path = default_path
    config_values = ConfigLoader().load(config_path)

    settings = ClientSettings(
        node=_resolve_option(node, config_values, "node", env=ENV_NODE),
        user=_resolve_option(user, config_values, "user", env=ENV_USER),
        keyring=_resolve_option(keyring, config_values, "keyring", env=ENV_KEYRING),
        host_id=_resolve_option(host_id, config_values, "host_id", env=ENV_HOST),
        output=str(_resolve_option(output, config_values, "output", default="records")),
        password=_resolve_option(None, config_values, "password"),
        topology=_resolve_option(topology, config_values, "topology"),
        token_file=_resolve_option(token_file, config_values, "token_file"),
        stable_output=stable_output or bool(config_values.get("stable_output", False)),
    )
    configure_logging(
        bool(_resolve_option(verbose, config_values, "verbose", default=False)),
        _resolve_option(log_file, config_values, "log_file"),
    )
    session = Session(settings)
    ctx.obj = session
    ctx.call_on_close(session.close)


# session


@main.command()
@click.option("--password", help="Password; prompted for when not configured.")
@click.option("--mechanism", type=click.Choice(["PWD", "HOSTCERT"]), default="PWD")
@pass_session
def login(session: Session, password, mechanism):
    """Authenticate and cache a session token."""
    principal = session.settings.user
    if not principal:
        raise click.UsageError(f"No principal given: use --user or set {ENV_USER}.")
    if mechanism == "HOSTCERT":
        secret = session.settings.host_id or ""
    else:
        secret = password or session.settings.password
        if secret is None:
            secret = click.prompt("Password", hide_input=True)
    result = session.client.login(principal, secret, mechanism=mechanism)
    session.cache.save(
        {"token": result["token"], "principal": principal, "node": session.settings.node or ""}
    )
    session.emit(
        f"session {result['session_id']} portal {result['portal']} expires {result['expires_at']}"
    )


@main.command()
@pass_session
def logout(session: Session):
    """Release the portal and forget the cached token."""
    try:
        session.client.logout()
    finally:
        session.cache.clear()
    session.emit("logged out")


# medical image operations


@main.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.argument("lfn")
@pass_session
def add(session: Session, file, lfn):
    """Ingest a mammogram file under LFN."""
    with open(file, "rb") as file_obj:
        guid = session.client.add(lfn, file_obj.read())
    session.emit(f"{guid} {lfn}")


@main.command()
@click.argument("lfn")
@click.option("-v", "--version", "version", type=int, default=None, help="Catalogue version.")
@click.option("-o", "--out", "out", type=click.Path(dir_okay=False), required=True)
@pass_session
def get(session: Session, lfn, version, out):
    """Retrieve the stored (anonymized) image of LFN."""
    result = session.client.retrieve_entry(lfn, version)
    data = result["data"]
    with open(out, "wb") as file_obj:
        file_obj.write(data)
    session.emit(f"{result['lfn']} v{result['version']} {result['checksum']} {len(data)} bytes")


@main.command()
@click.argument("lfn")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@pass_session
def update(session: Session, lfn, file):
    """Store a new version of LFN."""
    with open(file, "rb") as file_obj:
        version = session.client.update(lfn, file_obj.read())
    session.emit(f"{lfn} v{version}")


@main.command()
@click.argument("expr")
@click.option("--year", type=int, default=None, help="Year patient ages are computed for.")
@click.option("--supervo", default=None, help="Route through the members of a Super-VO.")
@pass_session
def query(session: Session, expr, year, supervo):
    """Run a clinical query across every VO that consents."""
    result = session.client.query(expr, query_year=year, supervo=supervo)
    if session.settings.output == "text":
        lines = [
            f"{row.origin_vo} {row.lfn} "
            + " ".join(f"{key}={value}" for key, value in row.attrs)
            for row in result.rows
        ]
        session.emit("\n".join(lines + result.summary_lines()))
        return
    session.emit(result.render().rstrip("\n"))
    for line in result.summary_lines():
        session.emit(line)


# algorithms and jobs


@main.group()
def algo():
    """Register and run analysis algorithms."""


@algo.command("add")
@click.argument("name")
@click.argument("artifact", type=click.Path(exists=True, dir_okay=False))
@pass_session
def algo_add(session: Session, name, artifact):
    with open(artifact, "rb") as file_obj:
        result = session.client.add_algorithm(name, file_obj.read())
    session.emit(f"{result['lfn']} v{result['version']}")


@algo.command("run")
@click.argument("name")
@click.argument("output")
@click.argument("inputs", nargs=-1, required=True)
@pass_session
def algo_run(session: Session, name, output, inputs):
    """Submit NAME over INPUTS writing OUTPUT; prints the task id."""
    session.emit(session.client.execute_algorithm(name, inputs, output))


@main.group()
def job():
    """Inspect and control submitted tasks."""


def _emit_task(session: Session, task):
    session.emit(f"{task.task_id} {task.status} {task.assigned_ce or '-'} {task.result_lfn or '-'}")
    for timestamp, from_status, to_status, note in task.history:
        session.emit(f"  {timestamp} {from_status or '-'}->{to_status} {note}".rstrip())


@job.command("status")
@click.argument("task_id")
@pass_session
def job_status(session: Session, task_id):
    _emit_task(session, session.client.job_status(task_id))


@job.command("kill")
@click.argument("task_id")
@pass_session
def job_kill(session: Session, task_id):
    _emit_task(session, session.client.job_kill(task_id))


# administration


def _emit_admin(session: Session, verb: str, **args: Any):
    result = session.client.admin(verb, **args)
    fields = " ".join(f"{key}={result[key]}" for key in sorted(result))
    session.emit(f"ok {verb} {fields}".rstrip())


@main.group()
def admin():
    """VO, site, user, trust and topology administration."""


@admin.group("vo")
def admin_vo():
    """Virtual organisations."""


@admin_vo.command("create")
@click.argument("name")
@click.option("--package", "packages", multiple=True, help="Package the VO's CEs must offer.")
@pass_session
def admin_vo_create(session: Session, name, packages):
    _emit_admin(session, "vo_create", name=name, packages=list(packages))


@admin.group("site")
def admin_site():
    """Hospital sites."""


@admin_site.command("add")
@click.argument("vo")
@click.argument("site")
@pass_session
def admin_site_add(session: Session, vo, site):
    _emit_admin(session, "site_add", vo=vo, site=site)


@admin.group("user")
def admin_user():
    """VO members."""


@admin_user.command("add")
@click.argument("principal")
@click.option("--role", "roles", multiple=True, required=True)
@click.option("--password", default=None)
@pass_session
def admin_user_add(session: Session, principal, roles, password):
    _emit_admin(session, "user_add", principal=principal, roles=list(roles), password=password)


@admin.group("trust")
def admin_trust():
    """Cross-VO trust relations."""


@admin_trust.command("grant")
@click.argument("from_vo")
@click.argument("to_vo")
@click.argument("permissions")
@click.option("--scope", default="/mg", show_default=True)
@pass_session
def admin_trust_grant(session: Session, from_vo, to_vo, permissions, scope):
    """Let FROM_VO use PERMISSIONS (comma separated) on TO_VO data."""
    _emit_admin(
        session,
        "trust_grant",
        from_vo=from_vo,
        to_vo=to_vo,
        permissions=[item for item in permissions.split(",") if item],
        scope=scope,
    )


@admin_trust.command("revoke")
@click.argument("from_vo")
@click.argument("to_vo")
@pass_session
def admin_trust_revoke(session: Session, from_vo, to_vo):
    _emit_admin(session, "trust_revoke", from_vo=from_vo, to_vo=to_vo)


@admin.group("mode")
def admin_mode():
    """Deployment mode."""


@admin_mode.command("set")
@click.argument("mode", type=click.Choice(["P1", "P2"]))
@pass_session
def admin_mode_set(session: Session, mode):
    _emit_admin(session, "mode_set", mode=mode)


@admin.command("audit")
@pass_session
def admin_audit(session: Session):
    """Governance audit over every reachable grid-box."""
    report = session.client.admin("audit")
    session.emit(
        f"GOVERNANCE mode={report['mode']} violations={len(report['violations'])} "
        f"exempt={len(report['exempt'])} central_patient_rows={report['central_patient_rows']}"
    )
    for item in report["violations"]:
        session.emit(f"VIOLATION {item}")
    for item in report["unreachable"]:
        session.emit(f"UNREACHABLE {item}")


@admin.group("supervo")
def admin_supervo():
    """Super-VO hierarchy."""


@admin_supervo.command("attach")
@click.argument("parent")
@click.argument("child")
@pass_session
def admin_supervo_attach(session: Session, parent, child):
    _emit_admin(session, "supervo_attach", parent=parent, child=child)


@admin.group("foreign")
def admin_foreign():
    """Foreign grids presented as one CE and one SE."""


@admin_foreign.command("attach")
@click.argument("grid_id")
@click.option("--host-vo", default=None)
@click.option("--gateway", default=None)
@click.option("--max-running", type=int, default=8, show_default=True)
@pass_session
def admin_foreign_attach(session: Session, grid_id, host_vo, gateway, max_running):
    _emit_admin(
        session,
        "foreign_attach",
        grid_id=grid_id,
        host_vo=host_vo,
        gateway=gateway,
        max_running=max_running,
    )


@admin_foreign.command("detach")
@click.argument("grid_id")
@pass_session
def admin_foreign_detach(session: Session, grid_id):
    _emit_admin(session, "foreign_detach", grid_id=grid_id)


# daemon


@main.command()
@click.option("--topology", "topology_path", type=click.Path(exists=True), required=True)
@click.option("--node", "node_id", required=True, help="Node id of this grid-box.")
@click.option("--keyring", "keyring_path", type=click.Path(exists=True), required=True)
@click.option("--listen", "address", default=None, help="host:port to bind.")
@click.option("--state-dir", type=click.Path(), default=None)
@click.option("--storage-dir", type=click.Path(), default=None)
@click.option("--audit-file", type=click.Path(), default=None)
def daemon(topology_path, node_id, keyring_path, address, state_dir, storage_dir, audit_file):
    """Run a grid-box (same as gridboxd)."""
    serve(
        topology_path,
        node_id,
        keyring_path,
        address=address,
        state_dir=state_dir,
        storage_dir=storage_dir,
        audit_file=audit_file,
    )


def command_paths(group: click.Group = main, prefix: str = "") -> List[str]:
    """Every leaf subcommand as a space separated path."""
    paths: List[str] = []
    for name in sorted(group.commands):
        command = group.commands[name]
        path = f"{prefix}{name}"
        if isinstance(command, click.Group):
            paths.extend(command_paths(command, path + " "))
        else:
            paths.append(path)
    return paths


def run(argv: Optional[List[str]] = None) -> int:
    return main.main(args=argv, standalone_mode=False)


if __name__ == "__main__":
    main()
