"""Disk-backed tiled matrices and a bounded write-back LRU tile cache.

A matrix of shape (rows, cols) is stored as a directory holding a plain
text ``manifest.txt`` plus one file per b-by-b tile, named
``t_<row>_<col>.blk``. Tile files contain float64 values, little endian,
column-major within the tile. Edge tiles are zero padded to the full tile
size, so every disk transfer has the same length. A tile file that does
not exist reads as all zeros.

All staging goes through :class:`TileCache`: reads fill the cache from
disk on a miss (possibly evicting the least recently used unpinned tile),
writes mark a resident tile dirty, and dirty tiles reach disk only on
eviction, explicit write-back, or :func:`flush`.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
ELEMENT_TYPE = "f64le"
TILE_ORDER = "col-major"
MANIFEST_NAME = "manifest.txt"

_DTYPE = np.dtype("<f8")


class ManifestError(RuntimeError):
    """Missing, malformed, or incompatible matrix manifest."""


class CorruptTileError(RuntimeError):
    """Tile file exists but has the wrong length."""


class CacheCapacityError(RuntimeError):
    """No unpinned tile is available for eviction."""


@dataclass(frozen=True)
class TileId:
    """Grid coordinates of one tile."""

    row_block: int
    col_block: int


class TiledMatrix:
    """Handle to one on-disk tiled matrix.

    Raw ``load_tile``/``store_tile`` talk straight to disk; normal code
    paths go through a :class:`TileCache` via :func:`read_tile` and
    :func:`write_tile`.
    """

    def __init__(self, directory: Path, rows: int, cols: int, tile_size: int):
        self.directory = Path(directory)
        self.rows = int(rows)
        self.cols = int(cols)
        self.tile_size = int(tile_size)
        # key used by caches to tell matrices apart
        self.key = str(self.directory.resolve())

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, rows: int, cols: int, tile_size: int, directory) -> "TiledMatrix":
        """Initialise a matrix directory and write its manifest.

        No tile files are written; a fresh matrix reads as all zeros. An
        existing manifest is accepted only if it describes the exact same
        shape and tile size.
        """
        if rows < 1 or cols < 1:
            raise ValueError(f"matrix shape must be positive, got {rows}x{cols}")
        if tile_size < 1:
            raise ValueError(f"tile_size must be positive, got {tile_size}")
        directory = Path(directory)
        manifest = directory / MANIFEST_NAME
        if manifest.exists():
            existing = cls.open(directory)
            if (existing.rows, existing.cols, existing.tile_size) != (rows, cols, tile_size):
                raise ManifestError(
                    f"{directory} already holds a {existing.rows}x{existing.cols} matrix "
                    f"with tile_size {existing.tile_size}; refusing to overwrite with "
                    f"{rows}x{cols}/{tile_size}"
                )
            return existing
        directory.mkdir(parents=True, exist_ok=True)
        m = cls(directory, rows, cols, tile_size)
        m._write_manifest()
        return m

    @classmethod
    def open(cls, directory) -> "TiledMatrix":
        """Open an existing matrix directory from its manifest."""
        directory = Path(directory)
        manifest = directory / MANIFEST_NAME
        if not manifest.is_file():
            raise ManifestError(f"no {MANIFEST_NAME} in {directory}")
        fields = {}
        for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ManifestError(f"{manifest}:{lineno}: expected 'key value'")
            fields[parts[0]] = parts[1].strip()
        try:
            version = int(fields["format_version"])
            element_type = fields["element_type"]
            order = fields["order"]
            rows = int(fields["rows"])
            cols = int(fields["cols"])
            tile_size = int(fields["tile_size"])
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{manifest}: missing or malformed field: {exc}") from exc
        if version != FORMAT_VERSION:
            raise ManifestError(f"{manifest}: unsupported format_version {version}")
        if element_type != ELEMENT_TYPE:
            raise ManifestError(f"{manifest}: unsupported element_type {element_type}")
        if order != TILE_ORDER:
            raise ManifestError(f"{manifest}: unsupported order {order}")
        return cls(directory, rows, cols, tile_size)

    def _write_manifest(self) -> None:
        text = (
            f"format_version {FORMAT_VERSION}\n"
            f"element_type {ELEMENT_TYPE}\n"
            f"order {TILE_ORDER}\n"
            f"rows {self.rows}\n"
            f"cols {self.cols}\n"
            f"tile_size {self.tile_size}\n"
        )
        (self.directory / MANIFEST_NAME).write_text(text)

    # -- geometry ---------------------------------------------------------

    @property
    def grid_rows(self) -> int:
        return -(-self.rows // self.tile_size)

    @property
    def grid_cols(self) -> int:
        return -(-self.cols // self.tile_size)

    @property
    def tile_bytes(self) -> int:
        return self.tile_size * self.tile_size * _DTYPE.itemsize

    def tile_extent(self, tid: TileId) -> tuple[int, int]:
        """Logical (rows, cols) actually covered by this tile."""
        b = self.tile_size
        er = min(b, self.rows - tid.row_block * b)
        ec = min(b, self.cols - tid.col_block * b)
        return er, ec

    def _check_id(self, tid: TileId) -> None:
        if not (0 <= tid.row_block < self.grid_rows and 0 <= tid.col_block < self.grid_cols):
            raise IndexError(
                f"tile ({tid.row_block},{tid.col_block}) outside "
                f"{self.grid_rows}x{self.grid_cols} grid"
            )

    def tile_path(self, tid: TileId) -> Path:
        return self.directory / f"t_{tid.row_block}_{tid.col_block}.blk"

    def tile_ids(self):
        for i in range(self.grid_rows):
            for j in range(self.grid_cols):
                yield TileId(i, j)

    # -- raw disk I/O (no cache) -------------------------------------------

    def load_tile(self, tid: TileId) -> np.ndarray:
        """Read one tile from disk; absent file yields zeros."""
        self._check_id(tid)
        path = self.tile_path(tid)
        b = self.tile_size
        if not path.exists():
            return np.zeros((b, b), dtype=np.float64)
        raw = np.fromfile(path, dtype=_DTYPE)
        if raw.size != b * b:
            raise CorruptTileError(
                f"{path}: expected {b * b} float64 values, found {raw.size}"
            )
        # file is column-major; produce a C-contiguous in-memory tile
        return np.ascontiguousarray(raw.reshape((b, b), order="F"))

    def store_tile(self, tid: TileId, buffer: np.ndarray) -> None:
        """Write one tile to disk, zeroing any padded region."""
        self._check_id(tid)
        b = self.tile_size
        if buffer.shape != (b, b):
            raise ValueError(f"tile buffer must be {b}x{b}, got {buffer.shape}")
        er, ec = self.tile_extent(tid)
        out = np.asarray(buffer, dtype=np.float64)
        if er < b or ec < b:
            out = out.copy()
            out[er:, :] = 0.0
            out[:, ec:] = 0.0
        # .T.tobytes() serialises column-major
        self.tile_path(tid).write_bytes(out.T.tobytes())


class _Entry:
    __slots__ = ("buf", "dirty", "pins", "version", "stamp", "matrix", "tid")

    def __init__(self, buf, matrix, tid):
        self.buf = buf
        self.dirty = False
        self.pins = 0
        self.version = 0
        self.stamp = 0
        self.matrix = matrix
        self.tid = tid


class TileCache:
    """Bounded write-back LRU cache over tiles of any number of matrices.

    Counters: ``reads_from_disk`` (miss fills, including zero fills of
    absent tiles), ``writes_to_disk`` (actual file writes on eviction,
    write-back, or flush), ``hits``. ``read_seconds``/``write_seconds``
    accumulate the wall time spent in disk transfers.

    Pinned tiles are never evicted; the task engine pins every tile an
    in-flight task touches. All bookkeeping is guarded by one lock, so a
    compute thread and one I/O thread can share the cache.
    """

    def __init__(self, capacity_tiles: int):
        if capacity_tiles < 1:
            raise ValueError(f"cache capacity must be >= 1 tile, got {capacity_tiles}")
        self.capacity_tiles = int(capacity_tiles)
        self._lock = threading.RLock()
        self._entries: dict[tuple[str, int, int], _Entry] = {}
        self._tick = 0
        self.reads_from_disk = 0
        self.writes_to_disk = 0
        self.hits = 0
        self.read_seconds = 0.0
        self.write_seconds = 0.0

    @classmethod
    def from_budget(cls, budget_bytes: int, tile_size: int, minimum: int = 1) -> "TileCache":
        """Size a cache from a byte budget, with a floor for working sets."""
        tile_bytes = tile_size * tile_size * _DTYPE.itemsize
        capacity = max(int(minimum), int(budget_bytes) // tile_bytes)
        return cls(capacity)

    # -- internals (call with lock held) ------------------------------------

    @staticmethod
    def _key(matrix: TiledMatrix, tid: TileId):
        return (matrix.key, tid.row_block, tid.col_block)

    def _touch(self, entry: _Entry) -> None:
        self._tick += 1
        entry.stamp = self._tick

    def _write_entry(self, entry: _Entry) -> None:
        t0 = time.perf_counter()
        entry.matrix.store_tile(entry.tid, entry.buf)
        self.write_seconds += time.perf_counter() - t0
        self.writes_to_disk += 1

    def _evict_one(self) -> None:
        victim_key = None
        victim = None
        for key, entry in self._entries.items():
            if entry.pins > 0:
                continue
            if victim is None or entry.stamp < victim.stamp:
                victim_key = key
                victim = entry
        if victim is None:
            raise CacheCapacityError(
                f"all {len(self._entries)} resident tiles are pinned; "
                f"capacity {self.capacity_tiles} is too small for the working set"
            )
        if victim.dirty:
            self._write_entry(victim)
        del self._entries[victim_key]

    def _make_room(self) -> None:
        while len(self._entries) >= self.capacity_tiles:
            self._evict_one()

    # -- public API ---------------------------------------------------------

    def acquire(self, matrix: TiledMatrix, tid: TileId, pin: bool = False) -> np.ndarray:
        """Return the resident buffer for a tile, filling from disk on miss."""
        key = self._key(matrix, tid)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self._make_room()
                t0 = time.perf_counter()
                buf = matrix.load_tile(tid)
                self.read_seconds += time.perf_counter() - t0
                self.reads_from_disk += 1
                entry = _Entry(buf, matrix, tid)
                self._entries[key] = entry
            else:
                self.hits += 1
            if pin:
                entry.pins += 1
            self._touch(entry)
            return entry.buf

    def release(self, matrix: TiledMatrix, tid: TileId) -> None:
        with self._lock:
            entry = self._entries[self._key(matrix, tid)]
            if entry.pins <= 0:
                raise RuntimeError(f"unbalanced release of tile {tid}")
            entry.pins -= 1

    def put(self, matrix: TiledMatrix, tid: TileId, buffer: np.ndarray) -> None:
        """Insert or replace a tile's buffer and mark it dirty."""
        b = matrix.tile_size
        if buffer.shape != (b, b):
            raise ValueError(f"tile buffer must be {b}x{b}, got {buffer.shape}")
        matrix._check_id(tid)
        key = self._key(matrix, tid)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self._make_room()
                entry = _Entry(np.asarray(buffer, dtype=np.float64), matrix, tid)
                self._entries[key] = entry
            else:
                # fill the existing array rather than rebinding: holders of
                # the old buffer (pinned prefetches) must observe the values
                entry.buf[:] = buffer
            entry.dirty = True
            entry.version += 1
            self._touch(entry)

    def mark_dirty(self, matrix: TiledMatrix, tid: TileId) -> None:
        """Flag an already-resident tile as modified in place."""
        with self._lock:
            entry = self._entries[self._key(matrix, tid)]
            entry.dirty = True
            entry.version += 1
            self._touch(entry)

    def is_resident(self, matrix: TiledMatrix, tid: TileId) -> bool:
        with self._lock:
            return self._key(matrix, tid) in self._entries

    def resident_keys(self) -> set:
        with self._lock:
            return set(self._entries.keys())

    def write_back(self, matrix: TiledMatrix, tid: TileId) -> bool:
        """Persist one tile early if it is dirty and unpinned.

        The buffer is snapshotted under the lock and written outside it;
        the dirty flag is cleared only if no writer touched the tile in
        the meantime. Returns True when a write happened.
        """
        key = self._key(matrix, tid)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None or not entry.dirty or entry.pins > 0:
                return False
            snapshot = entry.buf.copy()
            version = entry.version
        t0 = time.perf_counter()
        matrix.store_tile(tid, snapshot)
        elapsed = time.perf_counter() - t0
        with self._lock:
            self.write_seconds += elapsed
            self.writes_to_disk += 1
            entry = self._entries.get(key)
            if entry is not None and entry.version == version:
                entry.dirty = False
        return True

    def flush(self) -> None:
        """Write every dirty tile to disk; tiles stay resident and clean."""
        with self._lock:
            for key in sorted(self._entries.keys()):
                entry = self._entries[key]
                if entry.dirty:
                    self._write_entry(entry)
                    entry.dirty = False

    def drop_clean(self) -> None:
        """Forget every clean unpinned tile (used between pipeline stages)."""
        with self._lock:
            for key in list(self._entries.keys()):
                entry = self._entries[key]
                if not entry.dirty and entry.pins == 0:
                    del self._entries[key]

    @property
    def resident_count(self) -> int:
        with self._lock:
            return len(self._entries)

    def counters(self) -> dict:
        with self._lock:
            return {
                "reads_from_disk": self.reads_from_disk,
                "writes_to_disk": self.writes_to_disk,
                "hits": self.hits,
            }


# -- module-level operations ------------------------------------------------


def read_tile(m: TiledMatrix, tid: TileId, cache: TileCache) -> np.ndarray:
    """Read a tile through the cache. Never-written tiles read as zeros."""
    return cache.acquire(m, tid)


def write_tile(m: TiledMatrix, tid: TileId, buffer: np.ndarray, cache: TileCache) -> None:
    """Stage a full tile write through the cache (write-back)."""
    cache.put(m, tid, buffer)


def flush(cache: TileCache) -> None:
    """Persist all dirty cached tiles."""
    cache.flush()


def scatter_matrix(m: TiledMatrix, array: np.ndarray, cache: TileCache | None = None) -> None:
    """Write a dense array into the tile store (small matrices / tests)."""
    if array.shape != (m.rows, m.cols):
        raise ValueError(f"array shape {array.shape} != matrix shape {(m.rows, m.cols)}")
    b = m.tile_size
    for tid in m.tile_ids():
        er, ec = m.tile_extent(tid)
        block = array[
            tid.row_block * b : tid.row_block * b + er,
            tid.col_block * b : tid.col_block * b + ec,
        ]
        buf = np.zeros((b, b), dtype=np.float64)
        buf[:er, :ec] = block
        if cache is None:
            m.store_tile(tid, buf)
        else:
            cache.put(m, tid, buf)


def gather_matrix(m: TiledMatrix, cache: TileCache | None = None) -> np.ndarray:
    """Assemble the full dense array from tiles (small matrices / tests)."""
    out = np.zeros((m.rows, m.cols), dtype=np.float64)
    b = m.tile_size
    for tid in m.tile_ids():
        er, ec = m.tile_extent(tid)
        buf = m.load_tile(tid) if cache is None else cache.acquire(m, tid)
        out[
            tid.row_block * b : tid.row_block * b + er,
            tid.col_block * b : tid.col_block * b + ec,
        ] = buf[:er, :ec]
    return out
