"""Eager deep-copy reference model.

Shares nothing with the engine's mechanisms: every fork and every recorded
version is a separate plain ``WorkspaceState`` value, and every write
rebuilds the touched tuple. Page contents are immutable ``bytes``, so a
fresh container per version is already a full, independent copy; no page
is ever modified in place. Slow and obviously correct; the engine's
copy-on-write fast path must be indistinguishable from it.
"""

from __future__ import annotations

from dataclasses import replace

from .iostate import TcpState
from .workspace import (
    PAGE_SIZE,
    Connection,
    ConnKind,
    FsImage,
    GuiBuffer,
    MemoryClass,
    MemoryRegion,
    WorkspaceState,
)


def deep_copy(state: WorkspaceState) -> WorkspaceState:
    regions = tuple(MemoryRegion(r.vma_id, r.local_pid, r.mem_class, r.start, r.length, r.backing_file,
                                 r.pages) for r in state.regions)
    files = dict(state.fs.files)
    gui = tuple(GuiBuffer(g.buffer_id, g.size, g.contents, g.mutation_rate_hint, g.session)
                for g in state.gui_buffers)
    return WorkspaceState(state.processes, regions, FsImage(state.fs.view_id, files), state.connections, gui,
                          state.namespace_id)


def _patch(page: bytes, offset: int, data: bytes) -> bytes:
    if offset < 0 or offset + len(data) > PAGE_SIZE:
        raise IndexError("write crosses the page boundary")
    return page[:offset] + data + page[offset + len(data):]


class EagerOracle:
    def __init__(self) -> None:
        self.branches: dict[str, WorkspaceState] = {}
        self.versions: dict[str, WorkspaceState] = {}
        self.node: dict[str, str | None] = {}
        self.version_parent: dict[str, str | None] = {}

    def load(self, bid: str, state: WorkspaceState) -> None:
        self.branches[bid] = deep_copy(state)
        self.node[bid] = None

    def state(self, bid: str) -> WorkspaceState:
        return self.branches[bid]

    def lineage(self, bid: str) -> list[str]:
        out = []
        cur = self.node[bid]
        while cur is not None:
            out.append(cur)
            cur = self.version_parent[cur]
        return out

    def record(self, bid: str, vid: str) -> None:
        self.versions[vid] = deep_copy(self.branches[bid])
        self.version_parent[vid] = self.node[bid]
        self.node[bid] = vid

    def _branch_from(self, vid: str) -> WorkspaceState:
        s = deep_copy(self.versions[vid])
        conns = tuple(c for c in s.connections if c.kind is ConnKind.INTERNAL)
        return replace(s, connections=conns)

    def fork(self, vid: str, bids: list[str]) -> None:
        for bid in bids:
            self.branches[bid] = self._branch_from(vid)
            self.node[bid] = vid

    def rollback(self, bid: str, vid: str) -> None:
        if vid not in self.lineage(bid):
            raise KeyError(f"{vid} not in lineage of {bid}")
        self.branches[bid] = self._branch_from(vid)
        self.node[bid] = vid

    def discard(self, bid: str) -> None:
        del self.branches[bid]

    def write_page(self, bid: str, pid: int, vma: int, slot: int, data: bytes, offset: int = 0) -> None:
        s = self.branches[bid]
        regions = list(s.regions)
        for i, r in enumerate(regions):
            if r.key == (pid, vma):
                break
        else:
            raise KeyError((pid, vma))
        old = r.pages[slot]
        if old is None:
            if r.mem_class is MemoryClass.FILE_BACKED:
                old = s.fs.files[r.backing_file][slot]
            else:
                old = bytes(PAGE_SIZE)
        pages = list(r.pages)
        pages[slot] = _patch(old, offset, data)
        regions[i] = MemoryRegion(r.vma_id, r.local_pid, r.mem_class, r.start, r.length, r.backing_file,
                                  tuple(pages))
        self.branches[bid] = replace(s, regions=tuple(regions))

    def fs_write(self, bid: str, path: str, idx: int, data: bytes, offset: int = 0) -> None:
        s = self.branches[bid]
        files = dict(s.fs.files)
        pages = list(files[path])
        pages[idx] = _patch(pages[idx], offset, data)
        files[path] = tuple(pages)
        self.branches[bid] = replace(s, fs=FsImage(s.fs.view_id, files))

    def fs_read(self, bid: str, path: str, idx: int) -> bytes:
        return self.branches[bid].fs.files[path][idx]

    def gui_write(self, bid: str, index: int, page: int, data: bytes, offset: int = 0) -> None:
        s = self.branches[bid]
        gui = list(s.gui_buffers)
        g = gui[index]
        contents = list(g.contents)
        contents[page] = _patch(contents[page], offset, data)
        gui[index] = GuiBuffer(g.buffer_id, g.size, tuple(contents), g.mutation_rate_hint, g.session)
        self.branches[bid] = replace(s, gui_buffers=tuple(gui))

    def send(self, bid: str, conn_id: str, data: bytes, from_local: bool = True) -> None:
        s = self.branches[bid]
        conns = list(s.connections)
        for i, c in enumerate(conns):
            if c.conn_id == conn_id:
                st = TcpState.from_blob(c.proto_state).send(data, from_local=from_local)
                conns[i] = Connection(c.conn_id, c.kind, c.local, c.remote, st.to_blob())
                break
        else:
            raise KeyError(conn_id)
        self.branches[bid] = replace(s, connections=tuple(conns))

    def merge_apply(self, bid: str, files: dict[str, tuple[bytes, ...]]) -> None:
        s = self.branches[bid]
        merged = dict(s.fs.files)
        merged.update(files)
        self.branches[bid] = replace(s, fs=FsImage(s.fs.view_id, merged))
