"""Tests for task generation and the out-of-core execution engine."""

import numpy as np
import pytest

from oocqr.kernels import SingularMatrixError
from oocqr.task_engine import (
    EngineConfig,
    MissingFactorsError,
    OpKind,
    QrFactors,
    Task,
    TaskIoError,
    execute,
    factorize,
    gen_factorization_tasks,
    gen_solve_tasks,
    solve,
)
from oocqr.tile_store import TiledMatrix, TileId, gather_matrix, scatter_matrix

BIG_CACHE = 1 << 34


def make_store(arr, b, directory):
    m = TiledMatrix.create(arr.shape[0], arr.shape[1], b, directory)
    scatter_matrix(m, arr)
    return m


def well_conditioned(rng, m, n, cond=50.0):
    """Random m x n matrix with singular values in [1, cond]."""
    u, _ = np.linalg.qr(rng.standard_normal((m, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    sv = np.linspace(cond, 1.0, n)
    return (u * sv) @ v.T


def blk_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.glob("*.blk"))}


def cfg(b, mode="sequential", **kw):
    kw.setdefault("inner_block", min(64, b))
    kw.setdefault("cache_budget_bytes", BIG_CACHE)
    return EngineConfig(tile_size=b, mode=mode, **kw)


def flat(tasks):
    return [(t.op, t.outs, t.ins) for t in tasks]


# -- task generation: golden lists ---------------------------------------------


def test_factorization_tasks_1x1():
    tasks = gen_factorization_tasks(1, 1)
    assert flat(tasks) == [
        (OpKind.COMP_DENSE_QR, (("A", 0, 0), ("S", 0, 0)), (("A", 0, 0),)),
    ]


def test_factorization_tasks_2x1():
    tasks = gen_factorization_tasks(2, 1)
    assert flat(tasks) == [
        (OpKind.COMP_DENSE_QR, (("A", 0, 0), ("S", 0, 0)), (("A", 0, 0),)),
        (OpKind.COMP_TD_QR, (("A", 0, 0), ("A", 1, 0), ("S", 1, 0)),
         (("A", 0, 0), ("A", 1, 0))),
    ]


def test_factorization_tasks_2x2():
    tasks = gen_factorization_tasks(2, 2)
    assert flat(tasks) == [
        (OpKind.COMP_DENSE_QR, (("A", 0, 0), ("S", 0, 0)), (("A", 0, 0),)),
        (OpKind.COMP_TD_QR, (("A", 0, 0), ("A", 1, 0), ("S", 1, 0)),
         (("A", 0, 0), ("A", 1, 0))),
        (OpKind.APPLY_QT_DENSE, (("A", 0, 1),),
         (("A", 0, 0), ("S", 0, 0), ("A", 0, 1))),
        (OpKind.APPLY_QT_TD, (("A", 0, 1), ("A", 1, 1)),
         (("A", 1, 0), ("S", 1, 0), ("A", 0, 1), ("A", 1, 1))),
        (OpKind.COMP_DENSE_QR, (("A", 1, 1), ("S", 1, 1)), (("A", 1, 1),)),
    ]


def test_factorization_tasks_3x3_golden():
    # fully unrolled reference for the 3x3 grid: 14 tasks
    D, T, AD, AT = (OpKind.COMP_DENSE_QR, OpKind.COMP_TD_QR,
                    OpKind.APPLY_QT_DENSE, OpKind.APPLY_QT_TD)
    expected = [
        (D, (("A", 0, 0), ("S", 0, 0)), (("A", 0, 0),)),
        (T, (("A", 0, 0), ("A", 1, 0), ("S", 1, 0)), (("A", 0, 0), ("A", 1, 0))),
        (T, (("A", 0, 0), ("A", 2, 0), ("S", 2, 0)), (("A", 0, 0), ("A", 2, 0))),
        (AD, (("A", 0, 1),), (("A", 0, 0), ("S", 0, 0), ("A", 0, 1))),
        (AT, (("A", 0, 1), ("A", 1, 1)),
         (("A", 1, 0), ("S", 1, 0), ("A", 0, 1), ("A", 1, 1))),
        (AT, (("A", 0, 1), ("A", 2, 1)),
         (("A", 2, 0), ("S", 2, 0), ("A", 0, 1), ("A", 2, 1))),
        (D, (("A", 1, 1), ("S", 1, 1)), (("A", 1, 1),)),
        (T, (("A", 1, 1), ("A", 2, 1), ("S", 2, 1)), (("A", 1, 1), ("A", 2, 1))),
        (AD, (("A", 0, 2),), (("A", 0, 0), ("S", 0, 0), ("A", 0, 2))),
        (AT, (("A", 0, 2), ("A", 1, 2)),
         (("A", 1, 0), ("S", 1, 0), ("A", 0, 2), ("A", 1, 2))),
        (AT, (("A", 0, 2), ("A", 2, 2)),
         (("A", 2, 0), ("S", 2, 0), ("A", 0, 2), ("A", 2, 2))),
        (AD, (("A", 1, 2),), (("A", 1, 1), ("S", 1, 1), ("A", 1, 2))),
        (AT, (("A", 1, 2), ("A", 2, 2)),
         (("A", 2, 1), ("S", 2, 1), ("A", 1, 2), ("A", 2, 2))),
        (D, (("A", 2, 2), ("S", 2, 2)), (("A", 2, 2),)),
    ]
    tasks = gen_factorization_tasks(3, 3)
    assert len(tasks) == 14
    assert flat(tasks) == expected
    assert [t.seq for t in tasks] == list(range(14))


def test_solve_tasks_3x3_one_rhs_golden():
    D, T, G, R = (OpKind.APPLY_QT_DENSE, OpKind.APPLY_QT_TD,
                  OpKind.GEMM_NN_MO, OpKind.TRSM_LUNN)
    expected = [
        (D, (("B", 0, 0),), (("A", 0, 0), ("S", 0, 0), ("B", 0, 0))),
        (T, (("B", 0, 0), ("B", 1, 0)),
         (("A", 1, 0), ("S", 1, 0), ("B", 0, 0), ("B", 1, 0))),
        (T, (("B", 0, 0), ("B", 2, 0)),
         (("A", 2, 0), ("S", 2, 0), ("B", 0, 0), ("B", 2, 0))),
        (D, (("B", 1, 0),), (("A", 1, 1), ("S", 1, 1), ("B", 1, 0))),
        (T, (("B", 1, 0), ("B", 2, 0)),
         (("A", 2, 1), ("S", 2, 1), ("B", 1, 0), ("B", 2, 0))),
        (D, (("B", 2, 0),), (("A", 2, 2), ("S", 2, 2), ("B", 2, 0))),
        (R, (("B", 2, 0),), (("A", 2, 2), ("B", 2, 0))),
        (G, (("B", 1, 0),), (("B", 1, 0), ("A", 1, 2), ("B", 2, 0))),
        (R, (("B", 1, 0),), (("A", 1, 1), ("B", 1, 0))),
        (G, (("B", 0, 0),), (("B", 0, 0), ("A", 0, 1), ("B", 1, 0))),
        (G, (("B", 0, 0),), (("B", 0, 0), ("A", 0, 2), ("B", 2, 0))),
        (R, (("B", 0, 0),), (("A", 0, 0), ("B", 0, 0))),
    ]
    tasks = gen_solve_tasks(3, 3, 1)
    assert len(tasks) == 12
    assert flat(tasks) == expected


def test_solve_tasks_2x2_one_rhs_count():
    # 2 applies + TD apply + trsm(1) + gemm + trsm(0) = 6 tasks
    tasks = gen_solve_tasks(2, 2, 1)
    ops = [t.op for t in tasks]
    assert ops == [
        OpKind.APPLY_QT_DENSE, OpKind.APPLY_QT_TD, OpKind.APPLY_QT_DENSE,
        OpKind.TRSM_LUNN, OpKind.GEMM_NN_MO, OpKind.TRSM_LUNN,
    ]


def test_solve_tasks_1x1():
    tasks = gen_solve_tasks(1, 1, 1)
    assert flat(tasks) == [
        (OpKind.APPLY_QT_DENSE, (("B", 0, 0),),
         (("A", 0, 0), ("S", 0, 0), ("B", 0, 0))),
        (OpKind.TRSM_LUNN, (("B", 0, 0),), (("A", 0, 0), ("B", 0, 0))),
    ]


def test_solve_tasks_rhs_block_major():
    # block column c is finished completely before column c+1 starts
    tasks = gen_solve_tasks(2, 2, 3)
    assert len(tasks) == 3 * 6
    cols = [t.outs[0][2] for t in tasks]
    assert cols == sorted(cols)


def test_task_count_closed_form_tall_grid():
    p, q = 27, 26
    count = sum(k * p - k * (k - 1) // 2 + p - k for k in range(q))
    tasks = gen_factorization_tasks(p, q)
    assert len(tasks) == count
    assert tasks[-1].op is OpKind.COMP_TD_QR
    assert tasks[-1].outs[0] == ("A", 25, 25)
    assert tasks[-1].outs[1] == ("A", 26, 25)


def test_task_gen_rejects_bad_grids():
    with pytest.raises(ValueError):
        gen_factorization_tasks(2, 3)
    with pytest.raises(ValueError):
        gen_factorization_tasks(0, 0)
    with pytest.raises(ValueError):
        gen_solve_tasks(2, 3, 1)
    with pytest.raises(ValueError):
        gen_solve_tasks(2, 2, 0)


def test_dataflow_legality_random_grids():
    # every read of a produced tile happens after the task producing it
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = int(rng.integers(1, 7))
        q = int(rng.integers(1, p + 1))
        r = int(rng.integers(1, 4))
        produced = set()
        for task in gen_factorization_tasks(p, q):
            for ref in task.ins:
                if ref[0] == "S":
                    assert ref in produced, f"S read before write: {ref}"
            produced.update(task.outs)
        s_written = [ref for ref in produced if ref[0] == "S"]
        # one S tile per (i, k) pair with i >= k
        assert len(s_written) == sum(p - k for k in range(q))
        solve_produced = set(produced)
        for task in gen_solve_tasks(p, q, r):
            for ref in task.ins:
                if ref[0] == "S":
                    assert ref in solve_produced
            solve_produced.update(task.outs)


def test_task_arity_per_op():
    arity = {
        OpKind.COMP_DENSE_QR: (2, 1),
        OpKind.COMP_TD_QR: (3, 2),
        OpKind.APPLY_QT_DENSE: (1, 3),
        OpKind.APPLY_QT_TD: (2, 4),
        OpKind.TRSM_LUNN: (1, 2),
        OpKind.GEMM_NN_MO: (1, 3),
    }
    for task in gen_factorization_tasks(5, 4) + gen_solve_tasks(5, 4, 2):
        n_out, n_in = arity[task.op]
        assert len(task.outs) == n_out
        assert len(task.ins) == n_in


# -- execute(): validation and accounting --------------------------------------


def test_execute_empty_task_list(tmp_path):
    a = make_store(np.eye(4), 4, tmp_path / "a")
    report = execute([], {"A": a}, cfg(4))
    assert report.task_count == 0
    assert report.tiles_read == 0
    assert report.tiles_written == 0
    assert report.cache_hits == 0
    assert report.trace == []


def test_execute_rejects_unknown_store(tmp_path):
    a = make_store(np.eye(4), 4, tmp_path / "a")
    tasks = [Task(0, OpKind.COMP_DENSE_QR, (("A", 0, 0), ("Z", 0, 0)), (("A", 0, 0),))]
    with pytest.raises(ValueError, match="unknown store"):
        execute(tasks, {"A": a}, cfg(4))


def test_execute_rejects_out_of_grid_ref(tmp_path):
    a = make_store(np.eye(4), 4, tmp_path / "a")
    s = TiledMatrix.create(4, 4, 4, tmp_path / "s")
    tasks = [Task(0, OpKind.COMP_DENSE_QR, (("A", 1, 1), ("S", 0, 0)), (("A", 1, 1),))]
    with pytest.raises(ValueError, match="outside"):
        execute(tasks, {"A": a, "S": s}, cfg(4))


def test_execute_rejects_bad_seq(tmp_path):
    a = make_store(np.eye(4), 4, tmp_path / "a")
    s = TiledMatrix.create(4, 4, 4, tmp_path / "s")
    tasks = [Task(3, OpKind.COMP_DENSE_QR, (("A", 0, 0), ("S", 0, 0)), (("A", 0, 0),))]
    with pytest.raises(ValueError, match="seq"):
        execute(tasks, {"A": a, "S": s}, cfg(4))


def test_execute_rejects_mismatched_tile_sizes(tmp_path):
    a = make_store(np.eye(8), 8, tmp_path / "a")
    s = TiledMatrix.create(8, 8, 4, tmp_path / "s")
    with pytest.raises(ValueError, match="tile_size"):
        execute([], {"A": a, "S": s}, cfg(8))


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(tile_size=0).validate()
    with pytest.raises(ValueError):
        EngineConfig(tile_size=8, inner_block=9).validate()
    with pytest.raises(ValueError):
        EngineConfig(mode="parallel").validate()
    with pytest.raises(ValueError):
        EngineConfig(mode="overlapped", io_agents=2).validate()
    with pytest.raises(ValueError):
        EngineConfig(compute_workers=0).validate()
    with pytest.raises(ValueError):
        EngineConfig(prefetch_depth=-1).validate()
    assert EngineConfig().validate() is not None


def test_min_cache_tiles():
    assert EngineConfig(mode="sequential").min_cache_tiles() == 6
    assert EngineConfig(mode="overlapped", prefetch_depth=2).min_cache_tiles() == 14


# -- factorize: numerics -------------------------------------------------------


def test_factorize_identity(tmp_path):
    b = 4
    a = make_store(np.eye(8), b, tmp_path / "a")
    factors, report = factorize(a, cfg(b), tmp_path / "f")
    r = gather_matrix(factors.factored)
    # no column needs reflecting, so the factored tiles stay the identity
    np.testing.assert_array_equal(r, np.eye(8))
    s = gather_matrix(factors.s_store)
    np.testing.assert_array_equal(s, np.zeros_like(s))
    assert report.task_count == 5


def test_factorize_leaves_source_untouched(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((12, 8))
    a = make_store(arr, 4, tmp_path / "a")
    before = blk_bytes(tmp_path / "a")
    factorize(a, cfg(4), tmp_path / "f")
    assert blk_bytes(tmp_path / "a") == before


@pytest.mark.parametrize("m,n,b", [(8, 8, 4), (12, 8, 4), (10, 7, 4), (13, 5, 4),
                                   (16, 16, 8), (9, 9, 3)])
def test_factorize_r_matches_reference(tmp_path, m, n, b):
    rng = np.random.default_rng(m * 100 + n * 10 + b)
    arr = rng.standard_normal((m, n))
    a = make_store(arr, b, tmp_path / "a")
    factors, _ = factorize(a, cfg(b), tmp_path / "f")
    got = np.triu(gather_matrix(factors.factored)[:n, :n])
    _, ref = np.linalg.qr(arr)
    np.testing.assert_allclose(np.abs(got), np.abs(np.triu(ref)),
                               rtol=0, atol=1e-10)


def test_factorize_rejects_wide_matrix(tmp_path):
    a = make_store(np.ones((4, 8)), 4, tmp_path / "a")
    with pytest.raises(ValueError, match="rows >= cols"):
        factorize(a, cfg(4), tmp_path / "f")


def test_factorize_rejects_tile_size_mismatch(tmp_path):
    a = make_store(np.eye(8), 4, tmp_path / "a")
    with pytest.raises(ValueError, match="tile_size"):
        factorize(a, cfg(8), tmp_path / "f")


def test_factors_meta_round_trip(tmp_path):
    a = make_store(np.eye(8), 4, tmp_path / "a")
    factors, _ = factorize(a, cfg(4), tmp_path / "f", geometry_hash="abc123")
    loaded = QrFactors.load(tmp_path / "f")
    assert loaded.rows == 8
    assert loaded.cols == 8
    assert loaded.tile_size == 4
    assert loaded.inner_block == factors.inner_block
    assert loaded.geometry_hash == "abc123"
    assert loaded.grid_rows == 2
    assert loaded.grid_cols == 2
    loaded.check_complete()


def test_factors_load_missing_dir(tmp_path):
    with pytest.raises(MissingFactorsError):
        QrFactors.load(tmp_path / "nope")


def test_check_complete_detects_missing_s_tile(tmp_path):
    a = make_store(np.eye(8), 4, tmp_path / "a")
    _, _ = factorize(a, cfg(4), tmp_path / "f")
    loaded = QrFactors.load(tmp_path / "f")
    loaded.s_store.tile_path(TileId(1, 1)).unlink()
    with pytest.raises(MissingFactorsError, match=r"S\(1,1\)"):
        loaded.check_complete()


# -- solve: numerics -----------------------------------------------------------


@pytest.mark.parametrize("m,n,b,nrhs", [(8, 8, 4, 1), (12, 8, 4, 3), (10, 7, 4, 5),
                                        (16, 16, 8, 2), (13, 5, 4, 2)])
def test_solve_matches_lstsq(tmp_path, m, n, b, nrhs):
    rng = np.random.default_rng(m + n + b + nrhs)
    arr = well_conditioned(rng, m, n)
    bmat = rng.standard_normal((m, nrhs))
    a = make_store(arr, b, tmp_path / "a")
    rhs = make_store(bmat, b, tmp_path / "b")
    factors, _ = factorize(a, cfg(b), tmp_path / "f")
    x, _ = solve(factors, rhs, cfg(b), tmp_path / "out")
    got = gather_matrix(x)
    ref, *_ = np.linalg.lstsq(arr, bmat, rcond=None)
    assert got.shape == (n, nrhs)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-9)


def test_solve_construct_recover(tmp_path):
    # B = A @ X_true must recover X_true almost exactly
    rng = np.random.default_rng(42)
    arr = well_conditioned(rng, 12, 9, cond=20.0)
    x_true = rng.standard_normal((9, 4))
    a = make_store(arr, 4, tmp_path / "a")
    rhs = make_store(arr @ x_true, 4, tmp_path / "b")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    x, _ = solve(factors, rhs, cfg(4), tmp_path / "out")
    np.testing.assert_allclose(gather_matrix(x), x_true, rtol=0, atol=1e-10)


def test_solve_zero_rhs_gives_zero(tmp_path):
    rng = np.random.default_rng(3)
    arr = well_conditioned(rng, 8, 8)
    a = make_store(arr, 4, tmp_path / "a")
    rhs = make_store(np.zeros((8, 2)), 4, tmp_path / "b")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    x, _ = solve(factors, rhs, cfg(4), tmp_path / "out")
    np.testing.assert_array_equal(gather_matrix(x), np.zeros((8, 2)))


def test_solve_keeps_rhs_store_intact(tmp_path):
    rng = np.random.default_rng(5)
    arr = well_conditioned(rng, 8, 8)
    bmat = rng.standard_normal((8, 2))
    a = make_store(arr, 4, tmp_path / "a")
    rhs = make_store(bmat, 4, tmp_path / "b")
    before = blk_bytes(tmp_path / "b")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    solve(factors, rhs, cfg(4), tmp_path / "out")
    assert blk_bytes(tmp_path / "b") == before
    assert not (tmp_path / "out" / "work").exists()


def test_solve_rejects_row_mismatch(tmp_path):
    a = make_store(np.eye(8), 4, tmp_path / "a")
    rhs = make_store(np.ones((12, 1)), 4, tmp_path / "b")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    with pytest.raises(ValueError, match="rows"):
        solve(factors, rhs, cfg(4), tmp_path / "out")


def test_solve_rejects_inner_block_mismatch(tmp_path):
    a = make_store(np.eye(8), 8, tmp_path / "a")
    rhs = make_store(np.ones((8, 1)), 8, tmp_path / "b")
    factors, _ = factorize(a, EngineConfig(tile_size=8, inner_block=4,
                                           cache_budget_bytes=BIG_CACHE),
                           tmp_path / "f")
    bad = EngineConfig(tile_size=8, inner_block=8, cache_budget_bytes=BIG_CACHE)
    with pytest.raises(ValueError, match="inner_block"):
        solve(factors, rhs, bad, tmp_path / "out")


def test_solve_singular_column_reports_global_index(tmp_path):
    rng = np.random.default_rng(11)
    arr = rng.standard_normal((12, 8))
    arr[:, 6] = 0.0  # exactly dependent column -> zero R diagonal there
    a = make_store(arr, 4, tmp_path / "a")
    rhs = make_store(rng.standard_normal((12, 1)), 4, tmp_path / "b")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    with pytest.raises(SingularMatrixError) as excinfo:
        solve(factors, rhs, cfg(4), tmp_path / "out")
    assert excinfo.value.global_column == 6


# -- sequential vs overlapped --------------------------------------------------


def run_both_modes(tmp_path, arr, bmat, b, budget=BIG_CACHE):
    out = {}
    for mode in ("sequential", "overlapped"):
        root = tmp_path / mode
        a = make_store(arr, b, root / "a")
        rhs = make_store(bmat, b, root / "b")
        config = cfg(b, mode=mode, cache_budget_bytes=budget)
        factors, frep = factorize(a, config, root / "f")
        x, srep = solve(factors, rhs, config, root / "out")
        out[mode] = {
            "factored": blk_bytes(root / "f" / "factored"),
            "s": blk_bytes(root / "f" / "s"),
            "x": blk_bytes(root / "out" / "x"),
            "freport": frep,
            "sreport": srep,
        }
    return out


def test_modes_bitwise_identical(tmp_path):
    rng = np.random.default_rng(17)
    arr = well_conditioned(rng, 20, 12)
    bmat = rng.standard_normal((20, 6))
    out = run_both_modes(tmp_path, arr, bmat, 4)
    assert out["sequential"]["factored"] == out["overlapped"]["factored"]
    assert out["sequential"]["s"] == out["overlapped"]["s"]
    assert out["sequential"]["x"] == out["overlapped"]["x"]


def test_modes_bitwise_identical_under_eviction_pressure(tmp_path):
    # tiny cache budget forces mid-run evictions in both modes
    rng = np.random.default_rng(23)
    arr = well_conditioned(rng, 24, 16)
    bmat = rng.standard_normal((24, 4))
    out = run_both_modes(tmp_path, arr, bmat, 4, budget=0)
    assert out["sequential"]["factored"] == out["overlapped"]["factored"]
    assert out["sequential"]["s"] == out["overlapped"]["s"]
    assert out["sequential"]["x"] == out["overlapped"]["x"]


def test_modes_bitwise_identical_many_seeds(tmp_path):
    rng = np.random.default_rng(99)
    for trial in range(6):
        m = int(rng.integers(2, 5)) * 4
        n = int(rng.integers(1, m // 4 + 1)) * 4
        arr = well_conditioned(rng, m, n)
        bmat = rng.standard_normal((m, int(rng.integers(1, 9))))
        out = run_both_modes(tmp_path / f"t{trial}", arr, bmat, 4,
                             budget=int(rng.integers(0, 2)) * BIG_CACHE)
        assert out["sequential"]["factored"] == out["overlapped"]["factored"]
        assert out["sequential"]["x"] == out["overlapped"]["x"]


def test_sequential_rerun_is_deterministic(tmp_path):
    rng = np.random.default_rng(31)
    arr = well_conditioned(rng, 16, 8)
    a1 = make_store(arr, 4, tmp_path / "a1")
    a2 = make_store(arr, 4, tmp_path / "a2")
    factorize(a1, cfg(4), tmp_path / "f1")
    factorize(a2, cfg(4), tmp_path / "f2")
    assert blk_bytes(tmp_path / "f1" / "factored") == \
        blk_bytes(tmp_path / "f2" / "factored")
    assert blk_bytes(tmp_path / "f1" / "s") == blk_bytes(tmp_path / "f2" / "s")


# -- I/O accounting ------------------------------------------------------------


def test_factorize_reads_each_source_tile_once_big_cache(tmp_path):
    # 3x3 grid, cache big enough to never evict: 9 A-tile reads, no S reads
    rng = np.random.default_rng(2)
    arr = rng.standard_normal((12, 12))
    a = make_store(arr, 4, tmp_path / "a")
    _, report = factorize(a, cfg(4), tmp_path / "f")
    assert report.tiles_read == 9
    # flush writes each produced tile exactly once: 9 A + 6 S
    assert report.tiles_written == 15


def test_solve_amortizes_factor_reads_across_rhs_columns(tmp_path):
    # with 2 rhs block columns and a big cache, factor tiles are read once
    rng = np.random.default_rng(13)
    arr = well_conditioned(rng, 8, 8)
    bmat = rng.standard_normal((8, 8))  # b=4 -> r=2 block columns
    a = make_store(arr, 4, tmp_path / "a")
    rhs = make_store(bmat, 4, tmp_path / "b")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    x, report = solve(factors, rhs, cfg(4), tmp_path / "out")
    # distinct tiles: A00,A10,A11,A01 + S00,S10,S11 + four B tiles = 11
    assert report.tiles_read == 11
    assert report.cache_hits > 0


def test_write_bound_under_eviction_pressure(tmp_path):
    # total writes stay within 3x the produced-tile count even with a
    # cache holding only ten tiles
    rng = np.random.default_rng(41)
    arr = rng.standard_normal((24, 20))
    a = make_store(arr, 4, tmp_path / "a")
    p, q = 6, 5
    produced = p * q + sum(p - k for k in range(q))
    _, report = factorize(a, cfg(4, cache_budget_bytes=10 * 128), tmp_path / "f")
    assert report.tiles_written <= 3 * produced


def test_overlapped_write_bound(tmp_path):
    rng = np.random.default_rng(43)
    arr = rng.standard_normal((24, 20))
    a = make_store(arr, 4, tmp_path / "a")
    p, q = 6, 5
    produced = p * q + sum(p - k for k in range(q))
    _, report = factorize(a, cfg(4, mode="overlapped", cache_budget_bytes=10 * 128),
                          tmp_path / "f")
    assert report.tiles_written <= 3 * produced


def test_overlapped_big_cache_writes_each_tile_once(tmp_path):
    # with no eviction pressure, every produced tile hits disk exactly once
    rng = np.random.default_rng(47)
    arr = rng.standard_normal((24, 20))
    a = make_store(arr, 4, tmp_path / "a")
    p, q = 6, 5
    produced = p * q + sum(p - k for k in range(q))
    _, report = factorize(a, cfg(4, mode="overlapped"), tmp_path / "f")
    assert report.tiles_written == produced


def test_report_text_and_trace(tmp_path):
    rng = np.random.default_rng(4)
    arr = rng.standard_normal((8, 8))
    a = make_store(arr, 4, tmp_path / "a")
    _, report = factorize(a, cfg(4), tmp_path / "f")
    text = report.to_text()
    assert "mode = sequential" in text
    assert "task_count = 5" in text
    csv_text = report.trace_csv()
    lines = csv_text.strip().splitlines()
    assert lines[0] == "seq,op,ms_compute,ms_read,ms_write"
    assert len(lines) == 6
    assert lines[1].startswith("0,comp_dense_qr")


def test_sequential_time_decomposition(tmp_path):
    # compute + read + write should account for nearly all of the wall time
    rng = np.random.default_rng(8)
    arr = rng.standard_normal((768, 768))
    a = make_store(arr, 384, tmp_path / "a")
    _, report = factorize(a, EngineConfig(tile_size=384, inner_block=64,
                                          cache_budget_bytes=BIG_CACHE),
                          tmp_path / "f")
    parts = (report.compute_seconds + report.io_read_seconds
             + report.io_write_seconds)
    assert parts <= report.total_seconds
    assert parts >= 0.85 * report.total_seconds


# -- failure propagation -------------------------------------------------------


def test_truncated_tile_aborts_with_task_seq(tmp_path):
    rng = np.random.default_rng(19)
    arr = well_conditioned(rng, 8, 8)
    a = make_store(arr, 4, tmp_path / "a")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    # corrupt the diagonal factored tile read by the very first solve task
    path = factors.factored.tile_path(TileId(0, 0))
    path.write_bytes(path.read_bytes()[:10])
    rhs = make_store(np.ones((8, 1)), 4, tmp_path / "b")
    with pytest.raises(TaskIoError) as excinfo:
        solve(factors, rhs, cfg(4), tmp_path / "out")
    assert excinfo.value.seq == 0


def test_truncated_tile_aborts_overlapped(tmp_path):
    rng = np.random.default_rng(29)
    arr = well_conditioned(rng, 8, 8)
    a = make_store(arr, 4, tmp_path / "a")
    factors, _ = factorize(a, cfg(4), tmp_path / "f")
    path = factors.factored.tile_path(TileId(1, 1))
    path.write_bytes(path.read_bytes()[:10])
    rhs = make_store(np.ones((8, 1)), 4, tmp_path / "b")
    with pytest.raises(TaskIoError) as excinfo:
        solve(factors, rhs, cfg(4, mode="overlapped"), tmp_path / "out")
    assert "seq=" in str(excinfo.value)
    assert excinfo.value.seq >= 0
