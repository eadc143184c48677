"""Expose the simulated world on loopback sockets.

UDP resolvers each get their own port and send every reply (forged and
genuine) at its simulated offset.  All TCP services share one front-end
port; clients announce the intended destination with a PROXY v1 line, which
:class:`~dnescope.netprobe.transport.SocketTransport` does when its route
says so.  Censor resets become real TCP resets (SO_LINGER 0).  The route
file written by :meth:`SimServer.write_artifacts` ties it together.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import threading
from pathlib import Path
from typing import Optional

from cryptography.hazmat.primitives import serialization

from dnescope.censorsim.profile import DROP, RST, CensorProfile, dump_profile
from dnescope.censorsim.transport import SimTransport
from dnescope.censorsim.world import ORGS, SimWorld
from dnescope.asmap import dump_prefix_table
from dnescope.model import RunConfig, dump_config
from dnescope.netprobe.transport import Endpoint, ProbeError

log = logging.getLogger(__name__)

IDLE_TIMEOUT_S = 30.0
_POLL_S = 0.05


def _rst_close(sock: socket.socket) -> None:
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    sock.close()


def _closed_port(host: str) -> int:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.bind((host, 0))
    port = s.getsockname()[1]
    s.close()
    return port


class SimServer:
    """Serve ``world`` as seen from ``vp`` through ``profile``."""

    def __init__(self, world: SimWorld, vp_id: str, profile: Optional[CensorProfile] = None,
                 host: str = "127.0.0.1"):
        self.world = world
        self.vp = world.vp(vp_id)
        self.profile = profile or CensorProfile()
        self.sim = SimTransport(world, self.vp, self.profile)
        self.host = host
        self.udp: dict[Endpoint, socket.socket] = {}
        self.front: Optional[socket.socket] = None
        self.closed_port = 0
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # lifecycle -------------------------------------------------------

    def start(self) -> "SimServer":
        for ep in self.world.dns_servers():
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            s.bind((self.host, 0))
            s.settimeout(_POLL_S)
            self.udp[ep] = s
            self._spawn(self._serve_udp, ep, s)
        self.front = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.front.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.front.bind((self.host, 0))
        self.front.listen(64)
        self.front.settimeout(_POLL_S)
        self._spawn(self._accept_loop)
        self.closed_port = _closed_port(self.host)
        log.info("simulator for %s listening: tcp front %s, udp %s", self.vp.vp_id, self.front_port,
                 {str(k): v.getsockname()[1] for k, v in self.udp.items()})
        return self

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=1)
        for s in self.udp.values():
            s.close()
        if self.front is not None:
            self.front.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _spawn(self, fn, *args) -> None:
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    @property
    def front_port(self) -> int:
        return self.front.getsockname()[1] if self.front else 0

    # UDP -------------------------------------------------------------

    def _serve_udp(self, ep: Endpoint, sock: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                data, addr = sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                replies = self.sim.udp_exchange(ep, data, wait_ms=10 ** 9)
            except Exception:  # a malformed query must not kill the listener
                log.exception("udp handler for %s failed", ep)
                continue
            for d in replies:
                timer = threading.Timer(d.offset_ms / 1000, self._sendto, (sock, d.data, addr))
                timer.daemon = True
                timer.start()

    @staticmethod
    def _sendto(sock, payload, addr) -> None:
        try:
            sock.sendto(payload, addr)
        except OSError:
            pass

    # TCP -------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self.front.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._spawn(self._handle, conn)

    @staticmethod
    def _read_proxy_line(conn: socket.socket) -> Optional[tuple[str, Endpoint, bytes]]:
        buf = b""
        conn.settimeout(2.0)
        while b"\r\n" not in buf and len(buf) < 108:
            chunk = conn.recv(108 - len(buf))
            if not chunk:
                return None
            buf += chunk
        line, _, rest = buf.partition(b"\r\n")
        parts = line.decode("ascii", "replace").split()
        if len(parts) != 6 or parts[0] != "PROXY":
            return None
        return parts[2], Endpoint(parts[3], int(parts[5])), rest

    def _handle(self, conn: socket.socket) -> None:
        try:
            head = self._read_proxy_line(conn)
        except (OSError, ValueError):
            head = None
        if head is None:
            conn.close()
            return
        _src, dest, pending = head
        try:
            stream = self.sim.connect(dest, 3000)
        except ConnectionResetError:
            _rst_close(conn)
            return
        except (TimeoutError, ProbeError):
            conn.close()
            return
        conn.settimeout(_POLL_S)
        idle = 0.0
        try:
            while not self._stop.is_set() and idle < IDLE_TIMEOUT_S:
                if pending:
                    stream.send(pending)
                    pending = b""
                    idle = 0.0
                while True:
                    try:
                        chunk = stream.recv()
                    except TimeoutError:
                        break
                    if not chunk:
                        conn.close()
                        return
                    conn.sendall(chunk)
                try:
                    pending = conn.recv(65536)
                except socket.timeout:
                    idle += _POLL_S
                    continue
                if not pending:
                    break
        except ConnectionResetError:
            _rst_close(conn)
            return
        except OSError:
            pass
        conn.close()

    # artifacts -------------------------------------------------------

    def routes(self) -> dict:
        """Route map in the JSON form read by :func:`dnescope.netprobe.transport.load_routes`."""
        out: dict = {}
        front = {"target": f"{self.host}:{self.front_port}", "proxy": True}
        for ip in sorted(self.world.known_ips()):
            action = self.profile.ip_blocklist.get(ip)
            if action == RST:
                out[f"{ip}:0"] = {"target": f"{self.host}:{self.closed_port}"}
            elif action == DROP:
                out[f"{ip}:0"] = None
            else:
                out[f"{ip}:0"] = front
        for ep, s in self.udp.items():
            if self.profile.ip_blocklist.get(ep.ip) is None:
                out[str(ep)] = f"{self.host}:{s.getsockname()[1]}"
        return out

    def write_artifacts(self, outdir) -> dict[str, Path]:
        """Routes, run config, DoTH list, trust anchor, test list and AS tables for a live run."""
        outdir = Path(outdir).resolve()
        outdir.mkdir(parents=True, exist_ok=True)
        w = self.world
        paths = {name: outdir / fn for name, fn in (
            ("routes", "routes.json"), ("config", "run.conf"), ("doth", "doth.txt"), ("ca", "ca.pem"),
            ("test_list", "test_list.txt"), ("prefix", "prefix.tsv"), ("orgs", "orgs.tsv"),
            ("profile", "profile.json"))}
        paths["routes"].write_text(json.dumps(self.routes(), indent=2) + "\n", encoding="utf-8")
        paths["doth"].write_text("".join(f"{r}@{r.ip}\n" for r in w.doth), encoding="utf-8")
        paths["ca"].write_bytes(w.ca.cert.public_bytes(serialization.Encoding.PEM))
        paths["test_list"].write_text("".join(f"{d}\n" for d in w.test_list), encoding="utf-8")
        paths["prefix"].write_text(dump_prefix_table(w.prefix), encoding="utf-8")
        paths["orgs"].write_text("".join(f"{asn}\t{org}\n" for asn, org in sorted(ORGS.items())),
                                 encoding="utf-8")
        dump_profile(self.profile, paths["profile"])
        cfg = RunConfig(
            control_domain=w.control_domain,
            control_answers=(w.control_ip,),
            public_resolvers=tuple(str(e) for e in w.public_resolvers),
            local_resolver=str(w.local_resolver),
            doth_list=str(paths["doth"]),
            esni_control=str(w.esni_control.endpoint),
            esni_control_name=w.esni_control.name,
            esni_keys=w.esni_keys.text,
            private_doh=f"{w.private_doh}@{w.private_doh.ip}",
            trust_anchors=str(paths["ca"]),
            response_wait_ms=500,
        )
        paths["config"].write_text(dump_config(cfg), encoding="utf-8")
        return paths
