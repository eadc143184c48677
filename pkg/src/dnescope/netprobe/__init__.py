"""Stage-aware probers over pluggable transports."""
from dnescope.netprobe.probes import (
    DoTHEndpoint,
    Protocol,
    ResolveVia,
    TLSMode,
    body_digest,
    fetch_http,
    load_doth_list,
    query_encrypted,
    query_first,
    resolve_do53,
    resolve_encrypted,
    tls_probe,
)
from dnescope.netprobe.transport import (
    Datagram,
    Endpoint,
    ProbeError,
    Route,
    SocketTransport,
    Stream,
    Transport,
    load_routes,
)

__all__ = [
    "Datagram", "DoTHEndpoint", "Endpoint", "ProbeError", "Protocol", "ResolveVia", "Route",
    "SocketTransport", "Stream", "TLSMode", "Transport", "body_digest", "fetch_http",
    "load_doth_list", "load_routes", "query_encrypted", "query_first", "resolve_do53", "resolve_encrypted",
    "tls_probe",
]
