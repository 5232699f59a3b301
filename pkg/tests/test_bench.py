import json

import numpy as np
import pytest

from tsta import BenchConfig, BenchReport, CorrectnessGateError, GridSpec, ValidationError, emit_report, run_attention_bench
from tsta.bench import CSV_HEADER, BenchCase, median_of_means, report_csv


def small_config(**kw):
    base = dict(
        grids=[GridSpec(4, 4, 4, 1, 1, 1), GridSpec(4, 8, 8, 2, 2, 2)],
        windows=[(3, 3, 3), (1, 1, 1)],
        heads=2,
        head_dim=8,
        precision="double",
    )
    base.update(kw)
    return BenchConfig(**base)


def test_rows_are_cartesian_product():
    rep = run_attention_bench(small_config())
    assert [c.case_id for c in rep.cases] == ["g0w0", "g0w1", "g1w0", "g1w1"]
    for c in rep.cases:
        assert c.max_abs_err <= 1e-6
        assert 0 < c.flop_ratio <= 1
        assert c.flop_ratio == c.density
        assert c.speedup == c.dense_ms / c.sparse_ms


def test_flop_ratio_closed_form_at_4096():
    from tsta import build_sliding_tile_mask, flop_count

    grid = GridSpec(16, 16, 16, 4, 4, 4)
    assert grid.seq_len == 4096
    mask = build_sliding_tile_mask(grid, (3, 3, 3))
    assert flop_count(grid, mask, 1, 2, 64) / (2 * 4096 * 4096 * 4 * 64) == 0.421875


def test_injected_fault_aborts_without_rows():
    with pytest.raises(CorrectnessGateError):
        run_attention_bench(small_config(inject_fault=True))


def test_minimum_repetitions():
    with pytest.raises(ValidationError):
        small_config(repetitions=1)
    with pytest.raises(ValidationError):
        small_config(warmup=0)
    with pytest.raises(ValidationError):
        small_config(precision="half")


def test_unknown_config_keys_rejected():
    d = small_config().to_dict()
    d["bogus"] = 1
    with pytest.raises(ValidationError):
        BenchConfig.from_dict(d)


def test_config_dict_round_trip():
    cfg = small_config(threads=2, n_text_tokens=3)
    assert BenchConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()


def test_meta_records_thread_budget():
    rep = run_attention_bench(small_config(threads=1, windows=[(1, 1, 1)], grids=[GridSpec(2, 2, 2, 1, 1, 1)]))
    assert rep.meta["threads"] == 1
    assert rep.meta["precision"] == "double"


def _case(i):
    return BenchCase(f"c{i}", {}, [1, 1, 1], 8, 0.5, 0.5, 2.0, 1.0, 2.0, 0.1, 0.1, 2.0, 1.0, 0.0)


def test_empty_report_is_header_only(tmp_path):
    csv_path, json_path = emit_report(BenchReport(), tmp_path / "r.csv")
    assert csv_path.read_text() == ",".join(CSV_HEADER) + "\n"
    assert BenchReport.from_json(json_path.read_text()) == BenchReport()


def test_one_row_report(tmp_path):
    rep = BenchReport([_case(0)], {"backend": "numpy"})
    csv_path, json_path = emit_report(rep, tmp_path / "r.csv")
    assert len(csv_path.read_text().splitlines()) == 2
    assert BenchReport.from_json(json_path.read_text()) == rep


def test_emit_is_byte_stable(tmp_path):
    rep = run_attention_bench(small_config(grids=[GridSpec(2, 2, 2, 1, 1, 1)], windows=[(1, 1, 1)]))
    a = emit_report(rep, tmp_path / "a.csv")
    b = emit_report(BenchReport.from_json(rep.to_json()), tmp_path / "b.csv")
    assert a[0].read_bytes() == b[0].read_bytes()
    assert a[1].read_bytes() == b[1].read_bytes()
    assert report_csv(rep).splitlines()[0].split(",") == CSV_HEADER


def test_median_of_means():
    assert median_of_means([1, 2, 3, 10, 11, 12, 4, 5, 6]) == 5.0
    assert median_of_means([7.0, 7.0, 7.0]) == 7.0


def test_full_density_speedup_is_overhead_bounded():
    # one thread on both paths and the median of three runs keep scheduler
    # noise out of the ratio
    cfg = BenchConfig(grids=[GridSpec(16, 16, 16, 4, 4, 4)], windows=[(9, 9, 9)], repetitions=15, threads=1)
    speedups = []
    for _ in range(3):
        (case,) = run_attention_bench(cfg).cases
        assert case.density == 1.0
        speedups.append(case.speedup)
    assert np.median(speedups) <= 1.1, speedups
