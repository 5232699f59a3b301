"""Dense-vs-sparse attention latency harness.

Every case first checks the sparse output against the dense masked oracle;
a failed check raises instead of producing a timing row.
"""
from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._backend import default_threads, resolve_backend, set_threads
from .attention import AttentionInputs, dense_attention, flop_count, sparse_tile_attention
from .errors import CorrectnessGateError, ValidationError
from .grid import GridSpec
from .io import atomic_write_text
from .mask import BlockMask, composite_mask, expand_to_token_mask, validate_window

CSV_HEADER = [
    "case_id",
    "seq_len",
    "density",
    "flop_ratio",
    "dense_ms",
    "sparse_ms",
    "speedup",
    "dense_std_ms",
    "sparse_std_ms",
]
GATE_TOL = {"double": 1e-6, "single": 1e-3}


@dataclass
class BenchConfig:
    grids: list
    windows: list
    batch: int = 1
    heads: int = 2
    head_dim: int = 64
    repetitions: int = 3
    warmup: int = 1
    precision: str = "single"
    n_text_tokens: int = 0
    seed: int = 0
    threads: Optional[int] = None
    backend: Optional[str] = None
    inject_fault: bool = False

    def __post_init__(self):
        self.grids = [g if isinstance(g, GridSpec) else GridSpec.from_dict(g) for g in self.grids]
        self.windows = [validate_window(w) for w in self.windows]
        if self.repetitions < 3:
            raise ValidationError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 1:
            raise ValidationError(f"warmup must be >= 1, got {self.warmup}")
        if self.precision not in GATE_TOL:
            raise ValidationError(f"precision must be 'single' or 'double', got {self.precision!r}")
        for name in ("batch", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.n_text_tokens < 0:
            raise ValidationError("n_text_tokens must be >= 0")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grids"] = [g.to_dict() for g in self.grids]
        d["windows"] = [list(w) for w in self.windows]
        return d


def default_bench_config() -> BenchConfig:
    return BenchConfig(
        grids=[GridSpec(16, 16, 16, 4, 4, 4), GridSpec(16, 16, 16, 2, 4, 4)],
        windows=[(3, 3, 3), (9, 9, 9)],
    )


@dataclass
class BenchCase:
    case_id: str
    grid: dict
    window: list
    seq_len: int
    density: float
    flop_ratio: float
    dense_ms: float
    sparse_ms: float
    speedup: float
    dense_std_ms: float
    sparse_std_ms: float
    dense_mom_ms: float
    sparse_mom_ms: float
    max_abs_err: float


@dataclass
class BenchReport:
    cases: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "cases": [asdict(c) for c in self.cases]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "BenchReport":
        return cls([BenchCase(**c) for c in data["cases"]], dict(data.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, BenchReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def median_of_means(samples, group: int = 3) -> float:
    xs = np.asarray(samples, dtype=np.float64)
    n_groups = max(1, xs.size // group)
    means = [chunk.mean() for chunk in np.array_split(xs, n_groups)]
    return float(np.median(means))


def _time_ms(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        out.append((time.perf_counter_ns() - t0) / 1e6)
    return np.asarray(out)


def _faulty_mask(mask: BlockMask) -> BlockMask:
    """Drop one admitted off-diagonal block from the first row that has one."""
    bits = mask.bits.copy()
    off = bits & ~np.eye(*bits.shape, dtype=bool)
    rows = np.flatnonzero(off.any(axis=1))
    if rows.size == 0:
        raise ValidationError("fault injection needs a mask with an off-diagonal block")
    r = rows[0]
    bits[r, np.flatnonzero(off[r])[0]] = False
    return BlockMask(bits)


def run_case(config: BenchConfig, grid: GridSpec, window, case_id: str, rng) -> BenchCase:
    n_text = config.n_text_tokens
    mask = composite_mask(grid, window, n_text)
    s = grid.seq_len + n_text
    shape = (config.batch, config.heads, s, config.head_dim)
    inputs = AttentionInputs(*(rng.standard_normal(shape).astype(config.dtype) for _ in range(3)))
    backend = resolve_backend(config.backend)

    run_mask = _faulty_mask(mask) if config.inject_fault else mask
    sparse_fn = lambda: sparse_tile_attention(inputs, run_mask, grid, n_text, backend)  # noqa: E731
    dense_fn = lambda: dense_attention(inputs)  # noqa: E731

    token_mask = expand_to_token_mask(mask, grid, n_text)
    oracle = dense_attention(inputs, token_mask).out
    err = float(np.max(np.abs(sparse_fn().out.astype(np.float64) - oracle)))
    tol = GATE_TOL[config.precision]
    if not err <= tol:
        raise CorrectnessGateError(
            f"case {case_id}: sparse output differs from dense oracle by {err:.3e} (tol {tol:g})"
        )
    del oracle, token_mask

    dense_t = _time_ms(dense_fn, config.repetitions, config.warmup)
    sparse_t = _time_ms(sparse_fn, config.repetitions, config.warmup)
    b, h, d = config.batch, config.heads, config.head_dim
    dense_flops = b * h * s * s * 4 * d
    ratio = flop_count(grid, mask, b, h, d, n_text) / dense_flops
    return BenchCase(
        case_id=case_id,
        grid=grid.to_dict(),
        window=list(window),
        seq_len=s,
        density=mask.density,
        flop_ratio=ratio,
        dense_ms=float(dense_t.mean()),
        sparse_ms=float(sparse_t.mean()),
        speedup=float(dense_t.mean() / sparse_t.mean()),
        dense_std_ms=float(dense_t.std(ddof=1)),
        sparse_std_ms=float(sparse_t.std(ddof=1)),
        dense_mom_ms=median_of_means(dense_t),
        sparse_mom_ms=median_of_means(sparse_t),
        max_abs_err=err,
    )


def run_attention_bench(config: BenchConfig) -> BenchReport:
    threads = config.threads if config.threads is not None else default_threads()
    limiter = set_threads(threads)
    try:
        rng = np.random.default_rng(config.seed)
        report = BenchReport(
            meta={
                "backend": resolve_backend(config.backend),
                "threads": threads,
                "precision": config.precision,
                "batch": config.batch,
                "heads": config.heads,
                "head_dim": config.head_dim,
                "repetitions": config.repetitions,
                "warmup": config.warmup,
                "n_text_tokens": config.n_text_tokens,
                "machine": platform.machine(),
            }
        )
        for gi, grid in enumerate(config.grids):
            for wi, window in enumerate(config.windows):
                report.cases.append(run_case(config, grid, window, f"g{gi}w{wi}", rng))
        return report
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for c in report.cases:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(c, k) for k in CSV_HEADER)])
    return buf.getvalue()


def emit_report(report: BenchReport, path):
    """Write ``path`` as CSV and its ``.json`` twin; returns both paths."""
    path = Path(path)
    json_path = path.with_suffix(".json")
    atomic_write_text(path, report_csv(report))
    atomic_write_text(json_path, report.to_json())
    return path, json_path
