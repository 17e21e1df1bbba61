"""Versioned workspaces: fork, rollback and commit over modeled live state."""

from .engine import (
    Branch,
    BranchStatus,
    Engine,
    MergePolicy,
    MergeReport,
    VersionTree,
)
from .security import SecurityProfile
from .strategies import ABLATION, CRIU, TCLONE, CloneStrategy, CostModel, clone, footprint
from .workspace import (
    CHROMIUM_SPEC,
    PAGE_SIZE,
    WorkspaceSpec,
    WorkspaceState,
    build_workspace,
    chromium_spec,
    diff,
)

__all__ = [
    "ABLATION",
    "Branch",
    "BranchStatus",
    "CHROMIUM_SPEC",
    "CRIU",
    "CloneStrategy",
    "CostModel",
    "Engine",
    "MergePolicy",
    "MergeReport",
    "PAGE_SIZE",
    "SecurityProfile",
    "TCLONE",
    "VersionTree",
    "WorkspaceSpec",
    "WorkspaceState",
    "build_workspace",
    "chromium_spec",
    "clone",
    "diff",
    "footprint",
]
