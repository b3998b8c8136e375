"""Analysis zones around the ring and the flow-following window shift."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Zone:
    """One analysis zone. ``center`` cells receive this zone's analysis;
    ``window`` (center plus halo, translated by ``shift``) selects the
    observations it uses. ``halo`` is stored already translated."""

    center: tuple[int, ...]
    halo: tuple[int, ...]
    shift: int
    window: tuple[int, ...]


@dataclass(frozen=True)
class ZoneLayout:
    zones: tuple[Zone, ...]
    center_width: int
    halo_width: int
    ring_size: int

    def __post_init__(self):
        seen = np.zeros(self.ring_size, dtype=int)
        for z in self.zones:
            seen[list(z.center)] += 1
        if not np.all(seen == 1):
            raise ValueError("zone centers must partition the ring")

    def __len__(self) -> int:
        return len(self.zones)

    def windows(self) -> list[tuple[int, ...]]:
        return [z.window for z in self.zones]

    def shifts(self) -> list[int]:
        return [z.shift for z in self.zones]


def _zone(center: Sequence[int], halo_width: int, n: int, shift: int) -> Zone:
    lo, hi = center[0], center[-1]
    halo = [(lo - k) % n for k in range(halo_width, 0, -1)] + [(hi + k) % n for k in range(1, halo_width + 1)]
    halo = tuple((c + shift) % n for c in halo)
    window = tuple(sorted(set(halo) | {(c + shift) % n for c in center}))
    return Zone(tuple(center), halo, shift, window)


def build_zones(n_cells: int, center_width: int, halo_width: int) -> ZoneLayout:
    if center_width <= 0 or halo_width < 0:
        raise ValueError("center_width must be positive and halo_width non-negative")
    if n_cells % center_width:
        raise ValueError(f"center width {center_width} does not divide ring size {n_cells}")
    if center_width + 2 * halo_width > n_cells:
        raise ValueError("zone window (center + both halos) exceeds the ring")
    zones = tuple(_zone(list(range(s, s + center_width)), halo_width, n_cells, 0)
                  for s in range(0, n_cells, center_width))
    return ZoneLayout(zones, center_width, halo_width, n_cells)


def adaptive_shift(u_local: float, u_max: float, z_max: int) -> int:
    """floor(u_local / u_max * z_max), clamped to [-z_max, z_max]; zero when
    there is no flow."""
    if not u_max > 0:
        return 0
    s = math.floor(u_local / u_max * z_max)
    return int(max(-z_max, min(z_max, s)))


def apply_shift(layout: ZoneLayout, shifts: Sequence[int]) -> ZoneLayout:
    """Translate each zone's observation window by its shift; centers stay put."""
    if len(shifts) != len(layout.zones):
        raise ValueError(f"need {len(layout.zones)} shifts, got {len(shifts)}")
    zmax = layout.center_width
    zones = tuple(
        _zone(list(z.center), layout.halo_width, layout.ring_size, int(max(-zmax, min(zmax, s))))
        for z, s in zip(layout.zones, shifts)
    )
    return replace(layout, zones=zones)
