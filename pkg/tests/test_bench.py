import numpy as np
import pytest

from lmec.attention import LinearAttentionSpec, ProductOrder, dynamic_dispatch
from lmec.bench import (
    CSV_FIELDS,
    BenchConfig,
    BenchRecord,
    crossover_length,
    emit_csv,
    per_doubling_growth,
    read_csv,
    run_latency_sweep,
    select,
    validate,
)
from lmec.kernels import LearnablePositionTable, LmApe, MRpe, Npe
from lmec.numerics import Rng


def tiny_spec(pe=None, order="dynamic", d_k=4, heads=2):
    return LinearAttentionSpec("elu", pe if pe is not None else Npe(), order, True, d_k, heads)


def test_counting_contract():
    recs = run_latency_sweep(BenchConfig([tiny_spec()], [100], batch=1, warmup_iters=0, measured_iters=3))
    assert len(recs) == 1
    r = recs[0]
    assert r.samples == 3 and r.n == 100 and r.d_k == 4 and r.heads == 2
    assert r.mean_s >= 0 and r.stddev_s >= 0 and r.flop_estimate > 0


def test_dispatch_consistency_and_monotone_flops():
    spec = tiny_spec(MRpe(64), d_k=8)
    lens = [1, 4, 8, 9, 16, 33, 64]
    recs = run_latency_sweep(BenchConfig([spec], lens, batch=1, warmup_iters=0, measured_iters=1))
    for r in recs:
        assert r.order == dynamic_dispatch(spec, r.n).value
    for order in ("left", "right"):
        fixed = run_latency_sweep(BenchConfig([tiny_spec(MRpe(64), order, 8)], lens, 1, 0, 1))
        flops = [r.flop_estimate for r in fixed]
        assert all(a < b for a, b in zip(flops, flops[1:]))


def test_inputs_deterministic_given_seed():
    cfg = BenchConfig([tiny_spec()], [10, 20], batch=2, warmup_iters=0, measured_iters=1, seed=9)
    a = [(r.variant, r.n, r.flop_estimate) for r in run_latency_sweep(cfg)]
    b = [(r.variant, r.n, r.flop_estimate) for r in run_latency_sweep(cfg)]
    assert a == b


def test_rejects_before_timing(tmp_path):
    with pytest.raises(ValueError, match="exceeds max length"):
        validate(BenchConfig([tiny_spec(MRpe(50))], [10, 51], measured_iters=1))
    with pytest.raises(ValueError):
        validate(BenchConfig([tiny_spec()], [10], measured_iters=0))
    with pytest.raises(ValueError):
        validate(BenchConfig([tiny_spec()], [], measured_iters=1))
    with pytest.raises(OSError):
        validate(BenchConfig([tiny_spec()], [10], output_path=str(tmp_path / "missing" / "x.csv")))


def test_csv_round_trip(tmp_path):
    recs = [
        BenchRecord("lmape-elu-right", "lmape", "right", 2000, 64, 4, 0.0123456789, 0.000321, 123456789),
        BenchRecord("mrpe-elu-left", "mrpe", "left", 100, 64, 4, 1.5, 0.0, 42),
    ]
    path = tmp_path / "out.csv"
    emit_csv(recs[:1], path)
    assert len(path.read_text().splitlines()) == 2
    emit_csv(recs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert read_csv(path) == [r.rounded() for r in recs]
    with pytest.raises(ValueError):
        emit_csv([], path)


def test_csv_write_failure_names_path(tmp_path):
    rec = BenchRecord("v", "npe", "left", 1, 1, 1, 0.0, 0.0, 1)
    bad = tmp_path / "nope" / "x.csv"
    with pytest.raises(OSError, match="nope"):
        emit_csv([rec], bad)


def test_analysis_helpers():
    def rec(order, n, t):
        return BenchRecord("v", "npe", order, n, 64, 1, t, 0.0, 1)

    left = [rec("left", n, t) for n, t in [(32, 1.0), (64, 2.0), (128, 8.0), (256, 32.0)]]
    right = [rec("right", n, t) for n, t in [(32, 1.5), (64, 2.1), (128, 4.0), (256, 8.0)]]
    assert crossover_length(left, right) == 128
    assert per_doubling_growth(left) == [(64, 2.0), (128, 4.0), (256, 4.0)]
    assert [r.n for r in select(left + right, order="left")] == [32, 64, 128, 256]
    never = [rec("right", n, 100.0) for n in (32, 64, 128, 256)]
    assert crossover_length(left, never) is None


def test_crossover_on_small_sweep():
    d_k = 16
    table = LearnablePositionTable.init(512, d_k, Rng(0))
    lens = [4, 256, 512]
    cfgs = {o: BenchConfig([tiny_spec(LmApe(table), o, d_k, 1)], lens, 1, 1, 5) for o in ("left", "right")}
    left, right = (run_latency_sweep(cfgs[o]) for o in ("left", "right"))
    assert crossover_length(left, right) is not None
    assert select(right, n=512)[0].mean_s < select(left, n=512)[0].mean_s
