"""Allowlist security profiles recorded from human traces and enforced on branch
access events."""

from __future__ import annotations

import enum
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np


class ProfileError(ValueError):
    pass


class AccessKind(str, enum.Enum):
    SYSCALL = "syscall"
    FILE = "file"
    DEVICE = "device"


class Mode(str, enum.Enum):
    ENFORCE = "enforce"
    AUDIT = "audit"


class ProfileClass(str, enum.Enum):
    APPLICATION = "application"
    PRIVILEGED = "privileged"


class Decision(str, enum.Enum):
    ALLOW = "allow"
    DENY = "deny"


@dataclass(frozen=True)
class AccessEvent:
    branch_id: str
    kind: AccessKind
    target: str
    timestamp: float = 0.0
    operator: str = "human"

    def to_json(self) -> dict[str, Any]:
        return {"branch": self.branch_id, "kind": self.kind.value, "target": self.target,
                "ts": self.timestamp, "operator": self.operator}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> AccessEvent:
        return cls(d["branch"], AccessKind(d["kind"]), str(d["target"]), float(d.get("ts", 0.0)),
                   d.get("operator", "human"))


def load_trace(path: str | Path) -> list[AccessEvent]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(AccessEvent.from_json(json.loads(line)))
        except (KeyError, ValueError) as exc:
            raise ProfileError(f"{path}:{n}: malformed access event ({exc})") from None
    return out


def save_trace(events: Iterable[AccessEvent], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in events))


def path_matches(pattern: str, path: str) -> bool:
    """Literal path, ``dir/`` prefix, or ``*`` standing for exactly one segment."""
    if pattern.endswith("/"):
        head = pattern.rstrip("/").split("/")
        parts = path.split("/")
        return len(parts) > len(head) and all(_seg(p, s) for p, s in zip(head, parts))
    head = pattern.split("/")
    parts = path.split("/")
    return len(head) == len(parts) and all(_seg(p, s) for p, s in zip(head, parts))


def _seg(pattern: str, segment: str) -> bool:
    return pattern == "*" or pattern == segment


@dataclass(frozen=True)
class SecurityProfile:
    apps: frozenset[str] = frozenset()
    allowed_syscalls: frozenset[str] = frozenset()
    allowed_paths: frozenset[str] = frozenset()
    allowed_devices: frozenset[str] = frozenset()
    mode: Mode = Mode.ENFORCE
    profile_class: ProfileClass = ProfileClass.APPLICATION

    def allows(self, kind: AccessKind, target: str) -> bool:
        if kind is AccessKind.SYSCALL:
            return target in self.allowed_syscalls
        if kind is AccessKind.DEVICE:
            return target in self.allowed_devices
        if target in self.allowed_paths:
            return True
        return any(path_matches(p, target) for p in self.allowed_paths)

    def size(self) -> int:
        return len(self.allowed_syscalls) + len(self.allowed_paths) + len(self.allowed_devices)

    def with_mode(self, mode: Mode) -> SecurityProfile:
        return SecurityProfile(self.apps, self.allowed_syscalls, self.allowed_paths,
                               self.allowed_devices, mode, self.profile_class)

    def to_json(self) -> dict[str, Any]:
        return {
            "apps": sorted(self.apps),
            "syscalls": sorted(self.allowed_syscalls),
            "paths": sorted(self.allowed_paths),
            "devices": sorted(self.allowed_devices),
            "mode": self.mode.value,
            "class": self.profile_class.value,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> SecurityProfile:
        return cls(frozenset(d["apps"]), frozenset(d["syscalls"]), frozenset(d["paths"]),
                   frozenset(d["devices"]), Mode(d["mode"]), ProfileClass(d.get("class", "application")))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> SecurityProfile:
        return cls.from_json(json.loads(text))


def record_profile(trace: Iterable[AccessEvent], app: str, *,
                   profile_class: ProfileClass = ProfileClass.APPLICATION,
                   mode: Mode = Mode.ENFORCE) -> SecurityProfile:
    """Exactly the distinct resources a human-operated session touched."""
    sys_, paths, devs = set(), set(), set()
    for ev in trace:
        if ev.operator != "human":
            raise ProfileError("profiles are recorded from human-operated sessions only")
        if ev.kind is AccessKind.SYSCALL:
            sys_.add(ev.target)
        elif ev.kind is AccessKind.FILE:
            paths.add(ev.target)
        else:
            devs.add(ev.target)
    return SecurityProfile(frozenset({app}), frozenset(sys_), frozenset(paths), frozenset(devs),
                           mode, profile_class)


def compose_profile(apps: Iterable[str], registry: Mapping[str, SecurityProfile], *,
                    mode: Mode = Mode.ENFORCE) -> SecurityProfile:
    """Field-wise union of the registered profiles of ``apps``."""
    sys_: set[str] = set()
    paths: set[str] = set()
    devs: set[str] = set()
    names: set[str] = set()
    privileged = False
    for app in sorted(set(apps)):
        if app not in registry:
            raise ProfileError(f"unknown application {app!r}")
        p = registry[app]
        if p.profile_class is ProfileClass.PRIVILEGED:
            if mode is Mode.ENFORCE:
                raise ProfileError(f"{app} has a privileged profile; it needs a separate policy")
            privileged = True
        names |= p.apps
        sys_ |= p.allowed_syscalls
        paths |= p.allowed_paths
        devs |= p.allowed_devices
    cls = ProfileClass.PRIVILEGED if privileged else ProfileClass.APPLICATION
    return SecurityProfile(frozenset(names), frozenset(sys_), frozenset(paths), frozenset(devs), mode, cls)


class EnforcementLog:
    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def append(self, record: dict[str, Any]) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self.records)


def enforce(profile: SecurityProfile, event: AccessEvent, log: EnforcementLog | None = None) -> Decision:
    """Allow iff the target is on the allowlist.

    Enforce mode logs denials (the caller blocks them); audit mode logs every
    event and never blocks.
    """
    decision = Decision.ALLOW if profile.allows(event.kind, event.target) else Decision.DENY
    if log is not None:
        if profile.mode is Mode.AUDIT:
            log.append({**event.to_json(), "decision": decision.value, "mode": "audit"})
        elif decision is Decision.DENY:
            log.append({**event.to_json(), "decision": "deny", "mode": "enforce"})
    return decision


def blocks(profile: SecurityProfile, decision: Decision) -> bool:
    return profile.mode is Mode.ENFORCE and decision is Decision.DENY


# ---------------------------------------------------------------------------
# Synthetic universe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Universe:
    syscalls: tuple[str, ...]
    files: tuple[str, ...]
    devices: tuple[str, ...] = ()


def synthetic_universe(n_syscalls: int = 400, n_files: int = 100_000, n_devices: int = 32) -> Universe:
    sys_ = tuple(f"sys_{i:03d}" for i in range(n_syscalls))
    dirs = ("/usr/lib", "/usr/share", "/etc", "/home/user", "/var/lib", "/opt/app")
    files = tuple(f"{dirs[i % len(dirs)]}/d{i // 997:03d}/f{i:06d}" for i in range(n_files))
    devs = tuple(f"/dev/dev{i}" for i in range(n_devices))
    return Universe(sys_, files, devs)


def synthetic_trace(universe: Universe, app: str, *, syscall_fraction: float = 0.25,
                    file_fraction: float = 0.01, device_fraction: float = 0.1, events: int = 5000,
                    seed: int = 0, operator: str = "human") -> list[AccessEvent]:
    """A trace touching exact fractions of the universe, with repeats."""
    rng = np.random.default_rng(seed)

    def pick(pool: tuple[str, ...], frac: float) -> list[str]:
        k = int(round(len(pool) * frac))
        return [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))] if k else []

    chosen = {
        AccessKind.SYSCALL: pick(universe.syscalls, syscall_fraction),
        AccessKind.FILE: pick(universe.files, file_fraction),
        AccessKind.DEVICE: pick(universe.devices, device_fraction),
    }
    out = []
    t = time.time()
    for kind, targets in chosen.items():
        for target in targets:  # every chosen target at least once
            out.append(AccessEvent(app, kind, target, t, operator))
    pools = [(k, v) for k, v in chosen.items() if v]
    for _ in range(max(0, events - len(out))):
        if not pools:
            break
        kind, targets = pools[int(rng.integers(0, len(pools)))]
        out.append(AccessEvent(app, kind, targets[int(rng.integers(0, len(targets)))], t, operator))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def footprint_ratios(profile: SecurityProfile, universe: Universe) -> dict[str, float]:
    return {
        "syscalls": len(profile.allowed_syscalls) / max(1, len(universe.syscalls)),
        "files": len(profile.allowed_paths) / max(1, len(universe.files)),
        "devices": len(profile.allowed_devices) / max(1, len(universe.devices)),
    }
