"""Connection classification and per-branch restoration, external-effect
gating, and branch-local GUI buffer reconstruction."""

from __future__ import annotations

import enum
import json
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .workspace import (
    PAGE_SIZE,
    Connection,
    ConnKind,
    Endpoint,
    GuiBuffer,
    WorkspaceState,
    resolves_inside,
)


class RestoreError(RuntimeError):
    pass


@dataclass(frozen=True)
class TcpState:
    """Sequence state of both directions of a modeled TCP pair.

    ``a`` is the local endpoint, ``b`` the remote one. Bytes sent but not yet
    delivered sit in the per-direction buffers.
    """

    a_snd_nxt: int
    a_rcv_nxt: int
    b_snd_nxt: int
    b_rcv_nxt: int
    a_to_b: bytes = b""
    b_to_a: bytes = b""

    _HEAD = struct.Struct("<QQQQII")

    def to_blob(self) -> bytes:
        head = self._HEAD.pack(self.a_snd_nxt, self.a_rcv_nxt, self.b_snd_nxt, self.b_rcv_nxt,
                               len(self.a_to_b), len(self.b_to_a))
        return head + self.a_to_b + self.b_to_a

    @classmethod
    def from_blob(cls, blob: bytes) -> TcpState:
        a_snd, a_rcv, b_snd, b_rcv, la, lb = cls._HEAD.unpack_from(blob)
        off = cls._HEAD.size
        return cls(a_snd, a_rcv, b_snd, b_rcv, blob[off:off + la], blob[off + la:off + la + lb])

    def send(self, data: bytes, *, from_local: bool = True) -> TcpState:
        n = len(data)
        if from_local:
            return TcpState((self.a_snd_nxt + n) % 2**64, self.a_rcv_nxt, self.b_snd_nxt,
                            self.b_rcv_nxt, self.a_to_b + data, self.b_to_a)
        return TcpState(self.a_snd_nxt, self.a_rcv_nxt, (self.b_snd_nxt + n) % 2**64,
                        self.b_rcv_nxt, self.a_to_b, self.b_to_a + data)

    def deliver(self, *, to_remote: bool = True) -> tuple[TcpState, bytes]:
        if to_remote:
            data = self.a_to_b
            return TcpState(self.a_snd_nxt, self.a_rcv_nxt, self.b_snd_nxt,
                            (self.b_rcv_nxt + len(data)) % 2**64, b"", self.b_to_a), data
        data = self.b_to_a
        return TcpState(self.a_snd_nxt, (self.a_rcv_nxt + len(data)) % 2**64, self.b_snd_nxt,
                        self.b_rcv_nxt, self.a_to_b, b""), data


@dataclass(frozen=True)
class ConnectionImage:
    conn_id: str
    kind: ConnKind
    local: Endpoint
    remote: Endpoint
    proto_state: bytes

    @classmethod
    def capture(cls, conn: Connection) -> ConnectionImage:
        return cls(conn.conn_id, conn.kind, conn.local, conn.remote, conn.proto_state)

    def to_json(self) -> dict[str, Any]:
        return {
            "conn_id": self.conn_id,
            "kind": self.kind.value,
            "local": list(self.local),
            "remote": list(self.remote),
            "proto_state": self.proto_state.hex(),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> ConnectionImage:
        return cls(
            data["conn_id"],
            ConnKind(data["kind"]),
            Endpoint(*data["local"]),
            Endpoint(*data["remote"]),
            bytes.fromhex(data["proto_state"]),
        )


def classify_connections(state: WorkspaceState) -> tuple[list[Connection], list[Connection]]:
    """Split connections by whether both endpoints live in this workspace."""
    pids = frozenset(p.local_pid for p in state.processes)
    internal, external = [], []
    for conn in state.connections:
        if resolves_inside(conn.local, pids) and resolves_inside(conn.remote, pids):
            internal.append(conn)
        else:
            external.append(conn)
    return internal, external


class NetNamespace:
    """A network namespace with its own loopback port table."""

    _ids = iter(range(1, 1 << 62))
    _lock = threading.Lock()

    def __init__(self) -> None:
        with NetNamespace._lock:
            self.ns_id = next(NetNamespace._ids)
        self.bound: set[tuple[str, int]] = set()

    def bind(self, addr: str, port: int) -> None:
        if (addr, port) in self.bound:
            raise RestoreError(f"port {addr}:{port} already bound in netns {self.ns_id}")
        self.bound.add((addr, port))

    def release(self) -> None:
        self.bound.clear()


def restore_internal(
    images: Iterable[ConnectionImage],
    netns: NetNamespace,
    local_pids: Iterable[int],
) -> list[Connection]:
    """Re-create internal connections inside ``netns`` with identical protocol state."""
    pids = frozenset(local_pids)
    out = []
    for img in images:
        if img.kind is not ConnKind.INTERNAL:
            raise RestoreError(f"{img.conn_id} is not an internal connection")
        for ep in (img.local, img.remote):
            if ep.local_pid not in pids:
                raise RestoreError(f"{img.conn_id}: endpoint process {ep.local_pid} missing in destination")
        netns.bind(img.local.addr, img.local.port)
        if (img.remote.addr, img.remote.port) != (img.local.addr, img.local.port):
            netns.bind(img.remote.addr, img.remote.port)
        out.append(Connection(img.conn_id, img.kind, img.local, img.remote, img.proto_state))
    return out


# ---------------------------------------------------------------------------
# External effects
# ---------------------------------------------------------------------------


class EgressMode(str, enum.Enum):
    RESTRICTED = "restricted"
    DELAYED_COMMIT = "delayed_commit"
    REQUIRE_APPROVAL = "require_approval"


@dataclass(frozen=True)
class PolicyEvent:
    branch_id: str
    kind: str  # severed | denied | queued | approved | rejected | released
    target: str
    detail: str = ""
    timestamp: float = field(default_factory=time.time)

    def to_json(self) -> dict[str, Any]:
        return {
            "branch": self.branch_id,
            "kind": self.kind,
            "target": self.target,
            "detail": self.detail,
            "ts": self.timestamp,
        }


class AuditLog:
    """Append-only JSON-lines log; kept in memory and optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def append(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def read(path: str | Path) -> list[dict[str, Any]]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def sever_external(
    images: Iterable[ConnectionImage],
    branch_id: str,
    mode: EgressMode,
    log: AuditLog | None = None,
) -> list[PolicyEvent]:
    """Drop external connections from a new branch, one policy event each."""
    events = []
    for img in images:
        if img.kind is not ConnKind.EXTERNAL:
            continue
        ev = PolicyEvent(branch_id, "severed", f"{img.remote.addr}:{img.remote.port}",
                         f"conn={img.conn_id} egress={mode.value}")
        events.append(ev)
        if log is not None:
            log.append(ev.to_json())
    return events


Approver = Callable[[str, str], bool]


class EgressGate:
    """Per-branch external-action gate plus the outbox of held actions."""

    def __init__(self, branch_id: str, mode: EgressMode, log: AuditLog,
                 approver: Approver | None = None) -> None:
        self.branch_id = branch_id
        self.mode = mode
        self.log = log
        self.approver = approver
        self.outbox: list[str] = []
        self.released: list[str] = []

    def _emit(self, kind: str, target: str, detail: str = "") -> PolicyEvent:
        ev = PolicyEvent(self.branch_id, kind, target, detail)
        self.log.append(ev.to_json())
        return ev

    def attempt(self, action: str) -> PolicyEvent:
        if self.mode is EgressMode.RESTRICTED:
            return self._emit("denied", action, "restricted networking")
        if self.mode is EgressMode.DELAYED_COMMIT:
            self.outbox.append(action)
            return self._emit("queued", action, f"outbox depth {len(self.outbox)}")
        ok = self.approver(self.branch_id, action) if self.approver else False
        if ok:
            self.released.append(action)
            return self._emit("approved", action)
        return self._emit("rejected", action, "no approval")

    def release(self) -> list[PolicyEvent]:
        events = [self._emit("released", a) for a in self.outbox]
        self.released.extend(self.outbox)
        self.outbox = []
        return events


# ---------------------------------------------------------------------------
# GUI
# ---------------------------------------------------------------------------


def rebuild_gui(source: Sequence[GuiBuffer], session: int) -> tuple[list[GuiBuffer], int]:
    """Give a new branch its own byte copies of the GUI buffers.

    Returns the buffers and the number of bytes copied. Buffers are never
    shared copy-on-write: they are rewritten constantly.
    """
    out = []
    copied = 0
    for buf in source:
        pages = tuple(bytes(bytearray(p)) for p in buf.contents)
        copied += len(pages) * PAGE_SIZE
        out.append(GuiBuffer(buf.buffer_id, buf.size, pages, buf.mutation_rate_hint, session))
    return out, copied
