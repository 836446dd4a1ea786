"""Actionable error catalog for gridbox."""

from typing import Dict

from .errors import GridError

_ERROR_MESSAGES: Dict[str, Dict[str, str]] = {
    "BadCredentials": {
        "what": "Login refused for {principal}.",
        "next": "Check the user name, VO suffix and password, then run `mgctl login` again.",
    },
    "SessionExpired": {
        "what": "The session has expired.",
        "next": "Run `mgctl login` to obtain a fresh session token.",
    },
    "NotAuthorized": {
        "what": "{principal} is not allowed to {action}.",
        "next": "Ask a VO administrator for the required role or a trust grant.",
    },
    "UnknownNode": {
        "what": "Node {node} is not part of the topology.",
        "next": "Check the topology file or the `--node` option.",
    },
    "NoRoute": {
        "what": "Node {node} is unreachable from {origin}.",
        "next": "Check the network link between the grid-boxes and retry later.",
    },
    "ChecksumMismatch": {
        "what": "Checksum mismatch for {subject}. Expected {expected}, got {actual}.",
        "next": "Discard the copy and re-transfer from a healthy replica.",
    },
    "PeerUnauthenticated": {
        "what": "Host {host} could not be authenticated.",
        "next": "Enrol both hosts in each other's keyring (see `MG_KEYRING`).",
    },
    "BadConfig": {
        "what": "Invalid configuration: {detail}",
        "next": "Fix the configuration file and restart.",
    },
}


def actionable_error(code: str, **kwargs: str) -> str:
    if code not in _ERROR_MESSAGES:
        raise KeyError(f"Unknown error catalog key: {code}")

    template = _ERROR_MESSAGES[code]
    what = template["what"].format(**kwargs)
    next_step = template["next"].format(**kwargs)
    return f"{what} Suggested action: {next_step}"


def grid_error(code: str, **kwargs: str) -> GridError:
    """Build a ``GridError`` whose message comes from the catalog."""
    return GridError(code, actionable_error(code, **kwargs))
