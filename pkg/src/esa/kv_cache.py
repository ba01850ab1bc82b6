"""Segmented per-layer KV cache: initial, middle, and local token storage.

The stream prefix fills the initial segment, the most recent tokens live in a
bounded local ring, and everything between migrates oldest-first into the
growing middle segment. Middle keys additionally carry a parallel compressed
copy used for importance scoring. Keys are stored raw (no positional
rotation): position assignments depend on the segment a token currently sits
in, so rotation happens at attention time and migration is a plain move.
Values are never compressed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import formats
from .compression import ProjectionPair
from .selection import SelectionResult


class CacheSizes(NamedTuple):
    l_i: int
    l_m: int
    l_l: int
    compressed_bytes: int  # middle compressed-key storage
    kv_bytes: int  # middle full-dimension key+value storage


@dataclass
class MigrationEvent:
    """Outcome of one append: how many rows moved local -> middle."""

    moved_count: int
    new_l_m: int


@dataclass
class GatheredKv:
    """Rows handed to the attention branches for one step."""

    global_keys: np.ndarray  # (l_I + |selection|, d_H) initial then selected middle
    global_values: np.ndarray
    local_keys: np.ndarray  # (n_local, d_H) in arrival order
    local_values: np.ndarray


class SegmentedKvCache:
    """Single-writer cache for one layer of one sequence."""

    def __init__(self, layer_index: int, l_i: int, l_l: int, d_h: int, d_prime: int):
        if l_i < 0 or l_l < 1 or d_h < 1 or d_prime < 1:
            raise ValueError("segment capacities and dims must be positive (l_i may be 0)")
        self.layer_index = layer_index
        self.l_i_cap = l_i
        self.l_l_cap = l_l
        self.d_h = d_h
        self.d_prime = d_prime
        z = lambda w: np.empty((0, w), dtype=np.float32)  # noqa: E731
        self.initial_keys = z(d_h)
        self.initial_values = z(d_h)
        self.middle_keys = z(d_h)
        self.middle_values = z(d_h)
        self.middle_compressed = z(d_prime)
        self.local_keys = z(d_h)
        self.local_values = z(d_h)
        self.total_appended = 0

    @property
    def l_i(self) -> int:
        return self.initial_keys.shape[0]

    @property
    def l_m(self) -> int:
        return self.middle_keys.shape[0]

    @property
    def l_l(self) -> int:
        return self.local_keys.shape[0]

    @property
    def total_rows(self) -> int:
        return self.l_i + self.l_m + self.l_l

    # Fill order fixes original positions per segment: initial holds the
    # stream prefix, middle the next l_M positions, local the newest l_L.
    @property
    def middle_positions(self) -> np.ndarray:
        return np.arange(self.l_i, self.l_i + self.l_m, dtype=np.int64)

    @property
    def local_positions(self) -> np.ndarray:
        return np.arange(self.total_appended - self.l_l, self.total_appended, dtype=np.int64)

    def append_chunk(
        self, keys: np.ndarray, values: np.ndarray, pair: ProjectionPair
    ) -> MigrationEvent:
        """Add chunk rows: initial fills first, then local; local overflow
        migrates oldest-first into middle, compressing each migrated key."""
        keys = np.ascontiguousarray(keys, dtype=np.float32)
        values = np.ascontiguousarray(values, dtype=np.float32)
        if keys.ndim != 2 or keys.shape != values.shape or keys.shape[0] < 1:
            raise ValueError(f"chunk must be matching (n>=1, d_H) rows, got {keys.shape} / {values.shape}")
        if keys.shape[1] != self.d_h:
            raise ValueError(f"chunk width {keys.shape[1]} != cache d_H {self.d_h}")
        if pair.d_h != self.d_h or pair.d_prime != self.d_prime:
            raise ValueError(
                f"projection pair ({pair.d_prime}, {pair.d_h}) does not match "
                f"cache ({self.d_prime}, {self.d_h})"
            )
        if pair.layer_index != self.layer_index:
            raise ValueError(f"projection layer {pair.layer_index} != cache layer {self.layer_index}")

        take_i = min(self.l_i_cap - self.l_i, keys.shape[0])
        if take_i > 0:
            self.initial_keys = np.concatenate([self.initial_keys, keys[:take_i]])
            self.initial_values = np.concatenate([self.initial_values, values[:take_i]])
        rest_k, rest_v = keys[take_i:], values[take_i:]

        moved = 0
        if rest_k.shape[0] > 0:
            new_k = np.concatenate([self.local_keys, rest_k])
            new_v = np.concatenate([self.local_values, rest_v])
            overflow = new_k.shape[0] - self.l_l_cap
            if overflow > 0:
                moved = overflow
                moved_k = new_k[:overflow]
                self.middle_keys = np.concatenate([self.middle_keys, moved_k])
                self.middle_values = np.concatenate([self.middle_values, new_v[:overflow]])
                self.middle_compressed = np.concatenate(
                    [self.middle_compressed, pair.compress_keys(moved_k)]
                )
                new_k, new_v = new_k[overflow:], new_v[overflow:]
            self.local_keys, self.local_values = np.ascontiguousarray(new_k), np.ascontiguousarray(new_v)

        self.total_appended += keys.shape[0]
        return MigrationEvent(moved_count=moved, new_l_m=self.l_m)

    def gather_selected(self, selection: SelectionResult) -> GatheredKv:
        """Global block = initial rows then selected middle rows in ascending
        original order; local block = the ring in arrival order."""
        idx = selection.indices
        if idx.size and (idx.min() < 0 or idx.max() >= self.l_m):
            raise IndexError(f"selection index out of range for l_M={self.l_m}")
        return GatheredKv(
            global_keys=np.concatenate([self.initial_keys, self.middle_keys[idx]]),
            global_values=np.concatenate([self.initial_values, self.middle_values[idx]]),
            local_keys=self.local_keys,
            local_values=self.local_values,
        )

    def cache_sizes(self) -> CacheSizes:
        """Row counts plus the byte sizes behind the d'/(2 d_G) overhead ratio."""
        return CacheSizes(
            l_i=self.l_i,
            l_m=self.l_m,
            l_l=self.l_l,
            compressed_bytes=self.l_m * self.d_prime * 4,
            kv_bytes=self.l_m * self.d_h * 4 * 2,
        )

    def save_snapshot(self, path) -> None:
        header = {
            "layer_index": self.layer_index,
            "l_i_cap": self.l_i_cap,
            "l_l_cap": self.l_l_cap,
            "d_h": self.d_h,
            "d_prime": self.d_prime,
            "counts": [self.l_i, self.l_m, self.l_l],
            "total_appended": self.total_appended,
        }
        arrays = {
            "initial_keys": self.initial_keys,
            "initial_values": self.initial_values,
            "middle_keys": self.middle_keys,
            "middle_values": self.middle_values,
            "middle_compressed": self.middle_compressed,
            "local_keys": self.local_keys,
            "local_values": self.local_values,
        }
        formats.write_snapshot(path, header, arrays)

    @classmethod
    def load_snapshot(cls, path) -> "SegmentedKvCache":
        from .errors import FormatError

        header, arrays = formats.read_snapshot(path)
        try:
            cache = cls(
                layer_index=int(header["layer_index"]),
                l_i=int(header["l_i_cap"]),
                l_l=int(header["l_l_cap"]),
                d_h=int(header["d_h"]),
                d_prime=int(header["d_prime"]),
            )
            n_i, n_m, n_l = (int(c) for c in header["counts"])
            total = int(header["total_appended"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: snapshot header incomplete ({exc})") from exc
        for name, rows, width in (
            ("initial_keys", n_i, cache.d_h),
            ("initial_values", n_i, cache.d_h),
            ("middle_keys", n_m, cache.d_h),
            ("middle_values", n_m, cache.d_h),
            ("middle_compressed", n_m, cache.d_prime),
            ("local_keys", n_l, cache.d_h),
            ("local_values", n_l, cache.d_h),
        ):
            arr = arrays.get(name)
            if arr is None or arr.shape != (rows, width):
                got = None if arr is None else arr.shape
                raise FormatError(f"{path}: array {name} has shape {got}, expected {(rows, width)}")
            setattr(cache, name, arr)
        if total != n_i + n_m + n_l:
            raise FormatError(f"{path}: total_appended {total} != {n_i}+{n_m}+{n_l}")
        cache.total_appended = total
        return cache
