"""Slimming ratios, p-lists, and nesting relations between subnetworks.

A p-list assigns one ratio in (0, 1] to every block; the block then uses its
first ``active_channels(p, C)`` channels. Ratios are stored as plain floats
and widths are always derived through :func:`active_channels`, so there is a
single floor rule and no drift between modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError, DegenerateWidthError

# Default training menus by subnetwork count. The 5-wide menu is a
# documented guess; override via explicit ratios where it matters.
DEFAULT_MENUS: dict[int, tuple[float, ...]] = {
    1: (1.0,),
    3: (0.25, 0.5, 1.0),
    4: (0.25, 0.5, 0.75, 1.0),
    5: (0.25, 0.5, 0.625, 0.75, 1.0),
}

# Guard against IEEE products like 0.7*10 == 6.999...; intended ratios are
# short decimals, so a tiny positive nudge never crosses a true boundary.
_FLOOR_GUARD = 1e-6


def active_channels(p: float, c: int) -> int:
    """Channels kept by ratio p over c full channels: floor(p * c), >= 1.

    This is the single source of truth for widths; a block's expansion
    layer uses 4 * active_channels(p, C), not active_channels(p, 4 * C).
    """
    if not 0.0 < p <= 1.0:
        raise ContractError(f"slimming ratio must lie in (0, 1], got {p}")
    if c < 1:
        raise ContractError(f"channel count must be >= 1, got {c}")
    kept = int(math.floor(p * c + _FLOOR_GUARD))
    if kept < 1:
        raise DegenerateWidthError(
            f"ratio {p} leaves no active channels out of {c}"
        )
    return min(kept, c)


def plist_mean(plist) -> float:
    """Average ratio of a p-list."""
    return sum(plist) / len(plist)


def validate_plist(plist, block_dims) -> None:
    """Check length, range, and that every block keeps at least one channel."""
    if len(plist) != len(block_dims):
        raise ContractError(
            f"p-list has {len(plist)} entries but the model has {len(block_dims)} blocks"
        )
    for p, c in zip(plist, block_dims):
        active_channels(p, c)


def plist_widths(plist, block_dims) -> tuple[int, ...]:
    """Per-block active channel counts induced by a p-list."""
    validate_plist(plist, block_dims)
    return tuple(active_channels(p, c) for p, c in zip(plist, block_dims))


def is_nested(a, b, block_dims) -> bool:
    """True iff subnetwork a uses a (non-strict) subset of b's widths."""
    if len(a) != len(b):
        raise ContractError(
            f"p-lists must have equal length, got {len(a)} and {len(b)}"
        )
    wa = plist_widths(a, block_dims)
    wb = plist_widths(b, block_dims)
    return all(x <= y for x, y in zip(wa, wb))


def is_full_width(plist) -> bool:
    return all(p == 1.0 for p in plist)


@dataclass(frozen=True)
class SubnetworkSet:
    """The training menu: K p-lists over shared weights."""

    plists: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.plists:
            raise ContractError("subnetwork menu must not be empty")
        lengths = {len(p) for p in self.plists}
        if len(lengths) != 1:
            raise ContractError(f"p-lists have inconsistent lengths: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.plists)

    def __getitem__(self, k: int) -> tuple[float, ...]:
        return self.plists[k]

    def __iter__(self):
        return iter(self.plists)

    def validate(self, block_dims, require_full: bool = True) -> None:
        """Menu invariants: one full-width entry, no duplicate width vectors."""
        widths = []
        for plist in self.plists:
            widths.append(plist_widths(plist, block_dims))
        full = sum(1 for p in self.plists if is_full_width(p))
        if require_full and full != 1:
            raise ContractError(
                f"menu must contain exactly one all-ones p-list, found {full}"
            )
        if len(set(widths)) != len(widths):
            raise ContractError("two menu entries induce identical width vectors")


def uniform_plists(k: int, n_blocks: int, ratios=None) -> SubnetworkSet:
    """Menu of K uniform p-lists; ratios default to the standard menu for K.

    Ratios must be distinct and include 1.0 (the full network is always
    trained).
    """
    if ratios is None:
        if k not in DEFAULT_MENUS:
            raise ContractError(
                f"no default ratio menu for K={k}; pass ratios explicitly"
            )
        ratios = DEFAULT_MENUS[k]
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != k:
        raise ContractError(f"expected {k} ratios, got {len(ratios)}")
    if len(set(ratios)) != len(ratios):
        raise ContractError(f"ratios must be distinct, got {ratios}")
    if 1.0 not in ratios:
        raise ContractError("ratio menu must include 1.0 (the full network)")
    return SubnetworkSet(tuple((r,) * n_blocks for r in ratios))
