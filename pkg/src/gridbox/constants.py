"""Constants used across gridbox modules."""

MGD_MAGIC = b"MGD1"
MGP_VERSION = "MGP/1"
MGRS_HEADER = "MGRS/1"
CREDENTIAL_PREFIX = "MGC1"

DATA_ROOT = "/mg"
ALGORITHM_ROOT = "/algorithms"

MAX_FRAME_BYTES = 16 * 1024 * 1024
MAC_BYTES = 32
DEFAULT_PORT = 9345
DEFAULT_REQUEST_TIMEOUT_SECONDS = 10.0
DEFAULT_FTD_CHUNK_BYTES = 4 * 1024 * 1024
REPLAY_WINDOW = 64
NONCE_MEMORY = 4096

DEFAULT_SESSION_TTL_SECONDS = 30 * 60
DEFAULT_CREDENTIAL_TTL_SECONDS = 10 * 60
DEFAULT_MAX_PORTALS_PER_USER = 8
DEFAULT_SE_CACHE_BYTES = 64 * 1024 * 1024

PERMISSIONS = ("read-meta", "read-image", "write", "execute", "admin")
CROSS_VO_PERMISSIONS = frozenset({"read-meta", "read-image", "execute"})

BUILTIN_ROLES = {
    "admin": frozenset(PERMISSIONS),
    "radiologist": frozenset({"read-meta", "read-image", "write", "execute"}),
    "clinician": frozenset({"read-meta", "read-image"}),
    "researcher": frozenset({"read-meta", "execute"}),
}

ENV_NODE = "MG_NODE"
ENV_USER = "MG_USER"
ENV_KEYRING = "MG_KEYRING"
ENV_HOST = "MG_HOST"

TOKEN_CACHE_MODE = 0o600
DIR_MODE = 0o700
