"""Mel-cepstral distortion, conversion-time benchmarking and summary-table reporting."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .dsp import MfccSequence

MCD_ORDER = 40
MCD_SCALE = 10.0 / math.log(10.0)


class EvalError(ValueError):
    pass


@dataclass
class McdReport:
    per_utterance: list[float]
    mean: float
    stddev: float
    n_utterances: int


@dataclass
class BenchReport:
    model_name: str
    total_seconds: float
    n_utterances: int
    param_count: int
    runs: list[float] = field(default_factory=list)


def _frames(m) -> np.ndarray:
    x = m.frames if isinstance(m, MfccSequence) else np.asarray(m, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != MCD_ORDER:
        raise EvalError(f"MCD expects {MCD_ORDER} cepstral dimensions, got shape {x.shape}")
    return x


def frame_mcd(target: np.ndarray, converted: np.ndarray) -> np.ndarray:
    """Per-frame distortion in dB between row-aligned cepstra."""
    d = target - converted
    return MCD_SCALE * np.sqrt(2.0 * np.sum(d * d, axis=-1))


def dtw_path_cost(cost: np.ndarray) -> float:
    """Symmetric DTW (diagonal step weighted 2), normalized by N + M."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = cost[i - 1]
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, m + 1):
            c = row[j - 1]
            cur[j] = min(prev[j - 1] + 2.0 * c, prev[j] + c, cur[j - 1] + c)
    return float(acc[n, m] / (n + m))


def mcd(target, converted, align: str = "frame") -> float:
    """Mean mel-cepstral distortion in dB over c_1..c_40 (c_0 excluded)."""
    a, b = _frames(target), _frames(converted)
    if align == "frame":
        if a.shape[0] != b.shape[0]:
            raise EvalError(f"frame alignment needs equal lengths, got {a.shape[0]} and {b.shape[0]}")
        return float(np.mean(frame_mcd(a, b)))
    if align == "dtw":
        diff = a[:, None, :] - b[None, :, :]
        cost = MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=-1))
        return dtw_path_cost(cost)
    raise EvalError(f"unknown alignment {align!r}")


def mcd_batch(pairs: Sequence[tuple], align: str = "frame") -> McdReport:
    """MCD per (target, converted) pair, with mean and population standard deviation."""
    if len(pairs) == 0:
        raise EvalError("no utterance pairs")
    vals = [mcd(t, c, align) for t, c in pairs]
    return McdReport(vals, float(np.mean(vals)), float(np.std(vals)), len(vals))


def relative_reduction(baseline: float, proposed: float) -> float:
    if baseline <= 0:
        raise EvalError("baseline must be positive")
    return round(100.0 * (baseline - proposed) / baseline, 1)


def bench_convert(converter: Callable, utterances: Sequence, repeats: int = 3, model_name: str = "",
                  param_count: int = 0) -> BenchReport:
    """Best-of-``repeats`` wall-clock time to run ``converter`` over every utterance.

    ``converter`` is either a callable or an object with a ``spectrogram``
    method (pipeline.DirectPath / CascadePath); in the latter case only
    the spectrogram stage is timed, never the vocoder. BLAS is pinned to a
    single thread inside the timed region.
    """
    fn = getattr(converter, "spectrogram", converter)
    if param_count == 0 and hasattr(converter, "networks"):
        from .neural import param_count as _count

        param_count = sum(_count(n) for n in converter.networks)
    runs = []
    with threadpool_limits(limits=1):
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            for u in utterances:
                fn(u)
            runs.append(time.perf_counter() - t0)
    return BenchReport(model_name, min(runs), len(utterances), int(param_count), runs)


@dataclass
class SummaryTable:
    """Conversion time and parameter count per model plus the relative reduction row."""

    net1: BenchReport
    net2: BenchReport
    net3: BenchReport
    baseline: BenchReport
    proposed: BenchReport

    @property
    def time_reduction(self) -> float:
        return relative_reduction(self.baseline.total_seconds, self.proposed.total_seconds)

    @property
    def param_reduction(self) -> float:
        return relative_reduction(self.baseline.param_count, self.proposed.param_count)

    def rows(self):
        return [
            ("Network 1", self.net1.total_seconds, self.net1.param_count),
            ("Network 2", self.net2.total_seconds, self.net2.param_count),
            ("Network 3", self.net3.total_seconds, self.net3.param_count),
            ("Baseline (Network 1 + Network 2)", self.baseline.total_seconds, self.baseline.param_count),
            ("Proposed (Network 3)", self.proposed.total_seconds, self.proposed.param_count),
        ]

    def to_tsv(self) -> str:
        lines = ["model\tconversion_seconds\tparam_count\tn_utterances"]
        for name, sec, n in self.rows():
            lines.append(f"{name}\t{sec:.6f}\t{n}\t{self.net1.n_utterances}")
        lines.append(f"Relative reduction (%)\t{self.time_reduction:.1f}\t{self.param_reduction:.1f}\t")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        head = f"{'Models':<36}{'Conversion time (s)':>22}{'# of network parameters':>26}"
        out = [head, "-" * len(head)]
        for name, sec, n in self.rows():
            out.append(f"{name:<36}{sec:>22.3f}{n:>26,}")
        out.append(f"{'Relative reduction (%)':<36}{self.time_reduction:>22.1f}{self.param_reduction:>26.1f}")
        return "\n".join(out)


def mcd_report_tsv(report: McdReport, names: Sequence[str] | None = None) -> str:
    names = names or [str(i) for i in range(report.n_utterances)]
    lines = ["utterance\tmcd_db"] + [f"{n}\t{v:.6f}" for n, v in zip(names, report.per_utterance)]
    lines.append(f"mean\t{report.mean:.6f}")
    lines.append(f"stddev\t{report.stddev:.6f}")
    return "\n".join(lines) + "\n"
