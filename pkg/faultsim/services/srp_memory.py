"""Reliable and unreliable memory regions.

Reliable regions are never targeted by the fault injector. Unreliable regions
may have single bits flipped in place, silently. Both hold float64 data.
"""

from __future__ import annotations

import fnmatch
import itertools
import logging
import struct
import weakref
from typing import Iterable

import numpy as np

from faultsim.errors import UsageError
from faultsim.schemas import RegionKind

logger = logging.getLogger(__name__)

# Labels whose regions must be allocated reliable. Fault plans may not target them.
RELIABLE_LABELS: tuple[str, ...] = (
    "*hessenberg*",
    "*givens*",
    "outer.*",
    "heat.halo_history*",
    "control.*",
)

_standalone_ids = itertools.count(1_000_000)


def flip_bit(value: float, bit_index: int) -> float:
    """Return `value` with bit `bit_index` (0 = mantissa LSB, 63 = sign) inverted."""
    if not 0 <= bit_index <= 63:
        raise UsageError(f"bit_index must be within 0..63, got {bit_index}")
    (bits,) = struct.unpack("<Q", struct.pack("<d", value))
    (flipped,) = struct.unpack("<d", struct.pack("<Q", bits ^ (1 << bit_index)))
    return flipped


def float_bits(value: float) -> str:
    (bits,) = struct.unpack("<Q", struct.pack("<d", value))
    return f"{bits:016x}"


def bits_to_float(pattern: str) -> float:
    (value,) = struct.unpack("<d", struct.pack("<Q", int(pattern, 16)))
    return value


def is_reliable_label(label: str) -> bool:
    return any(fnmatch.fnmatchcase(label, pattern) for pattern in RELIABLE_LABELS)


class _Region:
    kind: RegionKind

    def __init__(
        self,
        length: int,
        *,
        region_id: int,
        owner_rank: int = 0,
        label: str = "",
        shape: tuple[int, ...] | None = None,
    ) -> None:
        if length < 0:
            raise UsageError(f"region length must be >= 0, got {length}")
        if shape is not None and int(np.prod(shape)) != length:
            raise UsageError(f"shape {shape} does not hold {length} elements")
        self.region_id = region_id
        self.owner_rank = owner_rank
        self.label = label
        self.data = np.zeros(shape if shape is not None else length, dtype=np.float64)

    @property
    def length(self) -> int:
        return int(self.data.size)

    def __len__(self) -> int:
        return self.length

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(id={self.region_id}, label={self.label!r}, "
            f"rank={self.owner_rank}, length={self.length})"
        )


class ReliableArray(_Region):
    kind = RegionKind.reliable


class UnreliableArray(_Region):
    kind = RegionKind.unreliable

    def __init__(self, length: int, **kwargs) -> None:
        super().__init__(length, **kwargs)
        self.flip_count = 0

    def inject_flip(self, element_index: int, bit_index: int) -> tuple[float, float]:
        """Flip one bit in place. Returns the element value before and after."""
        if not 0 <= bit_index <= 63:
            raise UsageError(f"bit_index must be within 0..63, got {bit_index}")
        if not 0 <= element_index < self.length:
            raise UsageError(f"element_index {element_index} outside region of length {self.length}")
        flat = self.flat()
        before = float(flat[element_index])
        bits = flat.view(np.uint64)
        bits[element_index] ^= np.uint64(1) << np.uint64(bit_index)
        self.flip_count += 1
        return before, float(flat[element_index])


Region = ReliableArray | UnreliableArray


class MemoryRegistry:
    """Per-cluster catalog of live regions, ids assigned in allocation order."""

    def __init__(self) -> None:
        self._ids = itertools.count()
        self._live: weakref.WeakValueDictionary[int, _Region] = weakref.WeakValueDictionary()

    def register(self, region: _Region) -> _Region:
        self._live[region.region_id] = region
        return region

    def next_id(self) -> int:
        return next(self._ids)

    def get(self, region_id: int) -> _Region | None:
        return self._live.get(region_id)

    def live_regions(
        self,
        *,
        kind: RegionKind | None = None,
        rank: int | None = None,
        pattern: str | None = None,
    ) -> list[_Region]:
        found = []
        for region_id in sorted(self._live.keys()):
            region = self._live.get(region_id)
            if region is None:
                continue
            if kind is not None and region.kind is not kind:
                continue
            if rank is not None and region.owner_rank != rank:
                continue
            if pattern is not None and not fnmatch.fnmatchcase(region.label, pattern):
                continue
            found.append(region)
        return found

    def retire(self, region: _Region) -> None:
        self._live.pop(region.region_id, None)

    def retire_rank(self, rank: int) -> int:
        regions = self.live_regions(rank=rank)
        for region in regions:
            self._live.pop(region.region_id, None)
        return len(regions)


def alloc(
    kind: RegionKind,
    length: int,
    *,
    registry: MemoryRegistry | None = None,
    rank: int = 0,
    label: str = "",
    shape: tuple[int, ...] | None = None,
) -> Region:
    region_cls = ReliableArray if RegionKind(kind) is RegionKind.reliable else UnreliableArray
    region_id = registry.next_id() if registry is not None else next(_standalone_ids)
    region = region_cls(length, region_id=region_id, owner_rank=rank, label=label, shape=shape)
    if registry is not None:
        registry.register(region)
    logger.debug("alloc %s id=%s label=%s rank=%s length=%s", region.kind.value, region_id, label, rank, length)
    return region


def _copy_bits(src: _Region, dst: _Region) -> None:
    if src.length != dst.length:
        raise UsageError(f"length mismatch: {src.length} != {dst.length}")
    np.copyto(dst.flat().view(np.uint64), src.flat().view(np.uint64))


def promote(src: _Region, dst: _Region) -> _Region:
    """Copy unreliable data into a reliable region, bit for bit."""
    _copy_bits(src, dst)
    return dst


def demote(src: _Region, dst: _Region) -> _Region:
    _copy_bits(src, dst)
    return dst


def total_flips(regions: Iterable[_Region]) -> int:
    return sum(getattr(region, "flip_count", 0) for region in regions)
