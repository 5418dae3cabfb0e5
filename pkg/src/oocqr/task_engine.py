"""Task generation and out-of-core execution for tiled QR and solves.

A factorization or solve is a flat, totally ordered list of tasks over
named tile stores ("A" the matrix / factored tiles, "S" the accumulated
transform tiles, "B" right-hand-side tiles). Generation is left-looking:
each block column is fully updated by all previous columns right before
its own panel factorization, which keeps the write traffic at one
write-back per produced tile instead of rewriting trailing columns after
every panel.

Execution runs the same task order in two modes. ``sequential`` performs
all disk traffic inline on the compute thread. ``overlapped`` adds exactly
one I/O agent thread that prefetches the inputs of up to ``prefetch_depth``
upcoming tasks and writes completed outputs back early, while compute
consumes tasks in order; kernels see identical buffers in both modes, so
the tiles produced are bitwise identical.
"""

from __future__ import annotations

import csv
import io
import queue
import shutil
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import kernels
from .tile_store import (
    CacheCapacityError,
    CorruptTileError,
    TileCache,
    TiledMatrix,
    TileId,
)

TileRef = tuple[str, int, int]


class OpKind(Enum):
    COMP_DENSE_QR = "comp_dense_qr"
    COMP_TD_QR = "comp_td_qr"
    APPLY_QT_DENSE = "apply_qt_dense"
    APPLY_QT_TD = "apply_qt_td"
    TRSM_LUNN = "trsm_lunn"
    GEMM_NN_MO = "gemm_nn_mo"


@dataclass(frozen=True)
class Task:
    """One unit of work: reads ``ins``, rewrites ``outs`` (in order)."""

    seq: int
    op: OpKind
    outs: tuple[TileRef, ...]
    ins: tuple[TileRef, ...]


class TaskIoError(RuntimeError):
    """Disk failure while staging tiles for a task."""

    def __init__(self, seq: int, op: str, cause: BaseException):
        self.seq = seq
        super().__init__(f"I/O failure at task seq={seq} ({op}): {cause}")


class MissingFactorsError(RuntimeError):
    """Solve requested against an absent or incomplete factorization."""


# -- configuration ------------------------------------------------------------


@dataclass
class EngineConfig:
    """Engine knobs. Defaults match the full-scale production setup.

    ``compute_workers`` is advisory: within-task parallelism is delegated
    to the threaded BLAS behind numpy, which sizes itself from the usual
    environment variables. ``io_agents`` must be 1 whenever mode is
    ``overlapped`` (there is exactly one prefetch/write-back thread).
    """

    tile_size: int = 10240
    inner_block: int = 128
    cache_budget_bytes: int = 32 * 2**30
    mode: str = "sequential"
    compute_workers: int = 1
    io_agents: int = 1
    prefetch_depth: int = 2

    def validate(self) -> "EngineConfig":
        if self.tile_size < 1:
            raise ValueError(f"tile_size must be >= 1, got {self.tile_size}")
        if not 1 <= self.inner_block <= self.tile_size:
            raise ValueError(
                f"inner_block must be in [1, tile_size], got {self.inner_block}"
            )
        if self.mode not in ("sequential", "overlapped"):
            raise ValueError(f"mode must be sequential or overlapped, got {self.mode!r}")
        if self.compute_workers < 1:
            raise ValueError(f"compute_workers must be >= 1, got {self.compute_workers}")
        if self.mode == "overlapped" and self.io_agents != 1:
            raise ValueError("overlapped mode requires exactly one I/O agent")
        if self.io_agents not in (0, 1):
            raise ValueError(f"io_agents must be 0 or 1, got {self.io_agents}")
        if self.cache_budget_bytes < 0:
            raise ValueError("cache_budget_bytes must be >= 0")
        if self.prefetch_depth < 0:
            raise ValueError("prefetch_depth must be >= 0")
        return self

    def min_cache_tiles(self) -> int:
        # a task touches at most 4 distinct tiles; overlapped mode keeps
        # prefetch_depth + 1 tasks in flight, all pinned
        if self.mode == "overlapped":
            return 4 * (self.prefetch_depth + 1) + 2
        return 6


# -- run report ---------------------------------------------------------------


@dataclass
class TaskTrace:
    seq: int
    op: str
    ms_compute: float
    ms_read: float
    ms_write: float


@dataclass
class RunReport:
    """Timing and I/O accounting for one execute() call.

    In sequential mode ``total_seconds`` decomposes into compute plus
    read plus write time (small bookkeeping slack aside). In overlapped
    mode I/O hides behind compute, so the sum of parts exceeds the total;
    per-task read/write columns then only cover synchronous stalls seen
    by the compute thread.
    """

    mode: str
    task_count: int
    total_seconds: float
    compute_seconds: float
    io_read_seconds: float
    io_write_seconds: float
    tiles_read: int
    tiles_written: int
    cache_hits: int
    trace: list[TaskTrace] = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        lines = [
            f"mode = {self.mode}",
            f"task_count = {self.task_count}",
            f"total_seconds = {self.total_seconds:.6f}",
            f"compute_seconds = {self.compute_seconds:.6f}",
            f"io_read_seconds = {self.io_read_seconds:.6f}",
            f"io_write_seconds = {self.io_write_seconds:.6f}",
            f"tiles_read = {self.tiles_read}",
            f"tiles_written = {self.tiles_written}",
            f"cache_hits = {self.cache_hits}",
        ]
        return "\n".join(lines) + "\n"

    def trace_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["seq", "op", "ms_compute", "ms_read", "ms_write"])
        for row in self.trace:
            writer.writerow(
                [row.seq, row.op, f"{row.ms_compute:.3f}", f"{row.ms_read:.3f}",
                 f"{row.ms_write:.3f}"]
            )
        return out.getvalue()


# -- task generation -----------------------------------------------------------


def gen_factorization_tasks(grid_rows: int, grid_cols: int) -> list[Task]:
    """Left-looking tiled QR task list for a grid_rows x grid_cols grid."""
    p, q = int(grid_rows), int(grid_cols)
    if not p >= q >= 1:
        raise ValueError(f"grid must satisfy rows >= cols >= 1, got {p}x{q}")
    tasks: list[Task] = []

    def add(op, outs, ins):
        tasks.append(Task(len(tasks), op, tuple(outs), tuple(ins)))

    for k in range(q):
        for j in range(k):
            add(
                OpKind.APPLY_QT_DENSE,
                [("A", j, k)],
                [("A", j, j), ("S", j, j), ("A", j, k)],
            )
            for i in range(j + 1, p):
                add(
                    OpKind.APPLY_QT_TD,
                    [("A", j, k), ("A", i, k)],
                    [("A", i, j), ("S", i, j), ("A", j, k), ("A", i, k)],
                )
        add(OpKind.COMP_DENSE_QR, [("A", k, k), ("S", k, k)], [("A", k, k)])
        for i in range(k + 1, p):
            add(
                OpKind.COMP_TD_QR,
                [("A", k, k), ("A", i, k), ("S", i, k)],
                [("A", k, k), ("A", i, k)],
            )
    return tasks


def gen_solve_tasks(grid_rows: int, grid_cols: int, rhs_block_cols: int) -> list[Task]:
    """Solve task list: Q^T applies in factorization order per right-hand-side
    block column, then block-row backward substitution from the bottom up."""
    p, q, r = int(grid_rows), int(grid_cols), int(rhs_block_cols)
    if not p >= q >= 1:
        raise ValueError(f"grid must satisfy rows >= cols >= 1, got {p}x{q}")
    if r < 1:
        raise ValueError(f"rhs_block_cols must be >= 1, got {r}")
    tasks: list[Task] = []

    def add(op, outs, ins):
        tasks.append(Task(len(tasks), op, tuple(outs), tuple(ins)))

    for c in range(r):
        for k in range(q):
            add(
                OpKind.APPLY_QT_DENSE,
                [("B", k, c)],
                [("A", k, k), ("S", k, k), ("B", k, c)],
            )
            for i in range(k + 1, p):
                add(
                    OpKind.APPLY_QT_TD,
                    [("B", k, c), ("B", i, c)],
                    [("A", i, k), ("S", i, k), ("B", k, c), ("B", i, c)],
                )
        for k in range(q - 1, -1, -1):
            for j in range(k + 1, q):
                add(
                    OpKind.GEMM_NN_MO,
                    [("B", k, c)],
                    [("B", k, c), ("A", k, j), ("B", j, c)],
                )
            add(OpKind.TRSM_LUNN, [("B", k, c)], [("A", k, k), ("B", k, c)])
    return tasks


# -- execution -----------------------------------------------------------------


def _dedup(refs):
    seen = []
    for ref in refs:
        if ref not in seen:
            seen.append(ref)
    return seen


def _validate_tasks(tasks, stores):
    for pos, task in enumerate(tasks):
        if task.seq != pos:
            raise ValueError(
                f"task at position {pos} carries seq={task.seq}; "
                "seq must equal list position"
            )
        for ref in task.ins + task.outs:
            role, i, j = ref
            store = stores.get(role)
            if store is None:
                raise ValueError(f"task seq={task.seq} references unknown store {role!r}")
            if not (0 <= i < store.grid_rows and 0 <= j < store.grid_cols):
                raise ValueError(
                    f"task seq={task.seq} references tile ({i},{j}) outside the "
                    f"{store.grid_rows}x{store.grid_cols} grid of store {role!r}"
                )


def _run_kernel(task: Task, bufs: dict, w: int, a_store: TiledMatrix) -> dict:
    """Dispatch one task to its kernel; returns newly created output tiles."""
    op = task.op
    if op is OpKind.COMP_DENSE_QR:
        (ra,) = task.ins
        _, s = kernels.comp_dense_qr(bufs[ra], w)
        return {task.outs[1]: s}
    if op is OpKind.COMP_TD_QR:
        rt, rd = task.ins
        _, _, s = kernels.comp_td_qr(bufs[rt], bufs[rd], w)
        return {task.outs[2]: s}
    if op is OpKind.APPLY_QT_DENSE:
        ry, rs, rc = task.ins
        kernels.apply_left_qt_dense(bufs[ry], bufs[rs], bufs[rc], w)
        return {}
    if op is OpKind.APPLY_QT_TD:
        rd, rs, rf, rg = task.ins
        kernels.apply_left_qt_td(bufs[rd], bufs[rs], bufs[rf], bufs[rg], w)
        return {}
    if op is OpKind.TRSM_LUNN:
        ra, rb = task.ins
        k = ra[1]
        b = a_store.tile_size
        extent = min(b, a_store.cols - k * b)
        kernels.trsm_lunn(bufs[ra], bufs[rb], extent=extent, col_offset=k * b, block=w)
        return {}
    if op is OpKind.GEMM_NN_MO:
        rc, ra, rb = task.ins
        kernels.gemm_nn_mo(bufs[rc], bufs[ra], bufs[rb])
        return {}
    raise ValueError(f"unknown op {op!r}")  # pragma: no cover


def _commit_outputs(task, bufs, new_tiles, stores, cache):
    for ref in task.outs:
        store = stores[ref[0]]
        tid = TileId(ref[1], ref[2])
        if ref in bufs:
            cache.mark_dirty(store, tid)
        else:
            cache.put(store, tid, new_tiles[ref])


class _IoAgent(threading.Thread):
    """Single prefetch/write-back thread for overlapped execution."""

    _STOP = None

    def __init__(self, tasks, stores, cache, depth):
        super().__init__(name="io-agent", daemon=True)
        self.tasks = tasks
        self.stores = stores
        self.cache = cache
        self.sem = threading.Semaphore(depth + 1)
        self.ready = [threading.Event() for _ in tasks]
        self.prefetched: dict[int, dict] = {}
        self.commands: queue.Queue = queue.Queue()
        self.error: BaseException | None = None
        self.error_seq: int = -1
        self.abort = False

    def run(self):
        try:
            for task in self.tasks:
                self.sem.acquire()
                if self.abort:
                    return
                self.error_seq = task.seq
                self._drain_writebacks()
                bufs = {}
                for ref in _dedup(task.ins):
                    store = self.stores[ref[0]]
                    bufs[ref] = self.cache.acquire(
                        store, TileId(ref[1], ref[2]), pin=True
                    )
                self.prefetched[task.seq] = bufs
                self.ready[task.seq].set()
            while not self.abort:
                cmd = self.commands.get()
                if cmd is self._STOP:
                    return
                self._write_back(cmd)
        except BaseException as exc:  # surfaces on the compute thread
            self.error = exc
            for ev in self.ready:
                ev.set()

    def _drain_writebacks(self):
        while True:
            try:
                cmd = self.commands.get_nowait()
            except queue.Empty:
                return
            if cmd is self._STOP:
                return
            self._write_back(cmd)

    def _write_back(self, refs):
        for ref in refs:
            self.cache.write_back(self.stores[ref[0]], TileId(ref[1], ref[2]))

    def stop(self):
        self.abort = True
        self.sem.release()
        self.commands.put(self._STOP)


def _run_sequential(tasks, stores, cache, w, trace):
    a_store = stores.get("A")
    compute = 0.0
    for task in tasks:
        r0, w0 = cache.read_seconds, cache.write_seconds
        acquired = []
        bufs = {}
        try:
            for ref in _dedup(task.ins):
                store = stores[ref[0]]
                tid = TileId(ref[1], ref[2])
                bufs[ref] = cache.acquire(store, tid, pin=True)
                acquired.append((store, tid))
            t0 = time.perf_counter()
            new_tiles = _run_kernel(task, bufs, w, a_store)
            tc = time.perf_counter() - t0
            _commit_outputs(task, bufs, new_tiles, stores, cache)
        except (OSError, CorruptTileError, CacheCapacityError) as exc:
            raise TaskIoError(task.seq, task.op.value, exc) from exc
        finally:
            for store, tid in acquired:
                cache.release(store, tid)
        compute += tc
        trace.append(
            TaskTrace(
                task.seq,
                task.op.value,
                tc * 1e3,
                (cache.read_seconds - r0) * 1e3,
                (cache.write_seconds - w0) * 1e3,
            )
        )
    return compute


def _run_overlapped(tasks, stores, cache, w, depth, trace):
    a_store = stores.get("A")
    # eager write-back is only worthwhile once a tile has reached its final
    # state; earlier versions would just be rewritten and waste the bandwidth
    last_writer: dict[TileRef, int] = {}
    for task in tasks:
        for ref in task.outs:
            last_writer[ref] = task.seq
    agent = _IoAgent(tasks, stores, cache, depth)
    agent.start()
    compute = 0.0
    try:
        for task in tasks:
            r0, w0 = cache.read_seconds, cache.write_seconds
            agent.ready[task.seq].wait()
            if agent.error is not None:
                seq = agent.error_seq if agent.error_seq >= 0 else task.seq
                op = tasks[seq].op.value
                raise TaskIoError(seq, op, agent.error) from agent.error
            bufs = agent.prefetched.pop(task.seq)
            try:
                t0 = time.perf_counter()
                new_tiles = _run_kernel(task, bufs, w, a_store)
                tc = time.perf_counter() - t0
                _commit_outputs(task, bufs, new_tiles, stores, cache)
            finally:
                for ref in _dedup(task.ins):
                    cache.release(stores[ref[0]], TileId(ref[1], ref[2]))
            agent.sem.release()
            final = [ref for ref in task.outs if last_writer[ref] == task.seq]
            if final:
                agent.commands.put(final)
            compute += tc
            trace.append(
                TaskTrace(
                    task.seq,
                    task.op.value,
                    tc * 1e3,
                    (cache.read_seconds - r0) * 1e3,
                    (cache.write_seconds - w0) * 1e3,
                )
            )
    finally:
        agent.stop()
        agent.join()
    return compute


def execute(tasks: list[Task], stores: dict, config: EngineConfig,
            cache: TileCache | None = None) -> RunReport:
    """Run a task list over tile stores; returns the run's accounting.

    Both modes execute tasks in list order with identical kernel inputs,
    so output tiles are bitwise identical between them.
    """
    cfg = config.validate()
    sizes = {store.tile_size for store in stores.values()}
    if len(sizes) > 1:
        raise ValueError(f"all stores must share one tile_size, got {sorted(sizes)}")
    if sizes and cfg.tile_size not in sizes:
        raise ValueError(
            f"config tile_size {cfg.tile_size} does not match stores ({sorted(sizes)})"
        )
    _validate_tasks(tasks, stores)
    if cache is None:
        cache = TileCache.from_budget(
            cfg.cache_budget_bytes, cfg.tile_size, minimum=cfg.min_cache_tiles()
        )
    reads0 = cache.reads_from_disk
    writes0 = cache.writes_to_disk
    hits0 = cache.hits
    rsec0 = cache.read_seconds
    wsec0 = cache.write_seconds
    trace: list[TaskTrace] = []
    t_start = time.perf_counter()
    if cfg.mode == "sequential":
        compute = _run_sequential(tasks, stores, cache, cfg.inner_block, trace)
    else:
        compute = _run_overlapped(
            tasks, stores, cache, cfg.inner_block, cfg.prefetch_depth, trace
        )
    cache.flush()
    total = time.perf_counter() - t_start
    return RunReport(
        mode=cfg.mode,
        task_count=len(tasks),
        total_seconds=total,
        compute_seconds=compute,
        io_read_seconds=cache.read_seconds - rsec0,
        io_write_seconds=cache.write_seconds - wsec0,
        tiles_read=cache.reads_from_disk - reads0,
        tiles_written=cache.writes_to_disk - writes0,
        cache_hits=cache.hits - hits0,
        trace=trace,
    )


# -- factorize / solve ---------------------------------------------------------

_META_NAME = "meta.txt"


@dataclass
class QrFactors:
    """On-disk QR factorization: R plus reflectors in ``factored``, packed
    accumulated transforms in ``s_store``."""

    factored: TiledMatrix
    s_store: TiledMatrix
    inner_block: int
    rows: int
    cols: int
    tile_size: int
    geometry_hash: str = ""

    @property
    def grid_rows(self) -> int:
        return self.factored.grid_rows

    @property
    def grid_cols(self) -> int:
        return -(-self.cols // self.tile_size)

    def save_meta(self, directory) -> None:
        text = (
            f"rows {self.rows}\n"
            f"cols {self.cols}\n"
            f"tile_size {self.tile_size}\n"
            f"inner_block {self.inner_block}\n"
            f"geometry_hash {self.geometry_hash or '-'}\n"
        )
        (Path(directory) / _META_NAME).write_text(text)

    @classmethod
    def load(cls, directory) -> "QrFactors":
        directory = Path(directory)
        meta = directory / _META_NAME
        if not meta.is_file():
            raise MissingFactorsError(
                f"no factorization at {directory}; run factorize first"
            )
        fields = {}
        for line in meta.read_text().splitlines():
            if line.strip():
                key, value = line.split(None, 1)
                fields[key] = value.strip()
        factors = cls(
            factored=TiledMatrix.open(directory / "factored"),
            s_store=TiledMatrix.open(directory / "s"),
            inner_block=int(fields["inner_block"]),
            rows=int(fields["rows"]),
            cols=int(fields["cols"]),
            tile_size=int(fields["tile_size"]),
            geometry_hash="" if fields.get("geometry_hash", "-") == "-"
            else fields["geometry_hash"],
        )
        return factors

    def check_complete(self) -> None:
        """Verify the diagonal factor tiles actually exist on disk."""
        q = self.grid_cols
        for k in range(q):
            if not self.s_store.tile_path(TileId(k, k)).exists():
                raise MissingFactorsError(
                    f"factor tile S({k},{k}) missing under {self.s_store.directory}"
                )


def _copy_store(src: TiledMatrix, dst_dir: Path) -> TiledMatrix:
    dst = TiledMatrix.create(src.rows, src.cols, src.tile_size, dst_dir)
    for tid in src.tile_ids():
        path = src.tile_path(tid)
        if path.exists():
            shutil.copyfile(path, dst.tile_path(tid))
    return dst


def factorize(a: TiledMatrix, config: EngineConfig, factors_dir,
              geometry_hash: str = "") -> tuple[QrFactors, RunReport]:
    """QR-factor a tiled matrix out of core; a itself is left untouched.

    Tiles are first copied into ``factors_dir/factored`` and the
    factorization then runs in place there, so the original matrix stays
    available for residual checks and re-runs.
    """
    if a.rows < a.cols:
        raise ValueError(
            f"matrix must have rows >= cols, got {a.rows}x{a.cols}"
        )
    cfg = config.validate()
    if cfg.tile_size != a.tile_size:
        raise ValueError(
            f"config tile_size {cfg.tile_size} != matrix tile_size {a.tile_size}"
        )
    factors_dir = Path(factors_dir)
    factors_dir.mkdir(parents=True, exist_ok=True)
    factored = _copy_store(a, factors_dir / "factored")
    b = a.tile_size
    p, q = a.grid_rows, a.grid_cols
    s_store = TiledMatrix.create(p * b, q * b, b, factors_dir / "s")
    tasks = gen_factorization_tasks(p, q)
    report = execute(tasks, {"A": factored, "S": s_store}, cfg)
    factors = QrFactors(
        factored=factored,
        s_store=s_store,
        inner_block=cfg.inner_block,
        rows=a.rows,
        cols=a.cols,
        tile_size=b,
        geometry_hash=geometry_hash,
    )
    factors.save_meta(factors_dir)
    return factors, report


def solve(factors: QrFactors, b_mat: TiledMatrix, config: EngineConfig,
          out_dir) -> tuple[TiledMatrix, RunReport]:
    """Least-squares solve X = R^-1 (Q^T B) against stored factors.

    B is copied into a scratch store first and transformed there, so the
    caller's sinogram tiles survive for residual checks. X holds the top
    ``cols`` rows of the transformed stack.
    """
    cfg = config.validate()
    if b_mat.rows != factors.rows:
        raise ValueError(
            f"right-hand side has {b_mat.rows} rows, factors expect {factors.rows}"
        )
    if b_mat.tile_size != factors.tile_size:
        raise ValueError(
            f"right-hand side tile_size {b_mat.tile_size} != factors "
            f"tile_size {factors.tile_size}"
        )
    if cfg.inner_block != factors.inner_block:
        raise ValueError(
            f"config inner_block {cfg.inner_block} != factorization inner_block "
            f"{factors.inner_block}; applies must reuse the factorization width"
        )
    factors.check_complete()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work_dir = out_dir / "work"
    work = _copy_store(b_mat, work_dir)
    p = factors.grid_rows
    q = factors.grid_cols
    r = b_mat.grid_cols
    tasks = gen_solve_tasks(p, q, r)
    stores = {"A": factors.factored, "S": factors.s_store, "B": work}
    report = execute(tasks, stores, cfg)
    x = TiledMatrix.create(factors.cols, b_mat.cols, factors.tile_size, out_dir / "x")
    for k in range(q):
        for c in range(r):
            src = work.tile_path(TileId(k, c))
            if src.exists():
                shutil.copyfile(src, x.tile_path(TileId(k, c)))
    shutil.rmtree(work_dir)
    return x, report
