"""Sequential decision rule over an observation stream.

A calibrated table is executed step by step: at each time the active
detectors are evaluated on the accumulated observation, and a signal
verdict fires as soon as one shape passes its threshold. Ties at the
threshold count as no-signal (the guarantees need the strict
inequality). With several nuisance descriptions per shape, every one of
them must pass.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationTable

__all__ = [
    "DimensionMismatch",
    "StepAfterStop",
    "Verdict",
    "ShapeEval",
    "StepRecord",
    "DecisionTrace",
    "SequentialTest",
    "run_stream",
    "read_stream_csv",
    "write_stream_csv",
    "write_trace_csv",
]


class DimensionMismatch(ValueError):
    """Observation increment size disagrees with the calibration."""


class StepAfterStop(RuntimeError):
    """The test already reached a verdict or the horizon end."""


@dataclass(frozen=True)
class Verdict:
    kind: str  # signal_at | nuisance_so_far | nuisance_through_horizon
    t: int | None = None
    k: int | None = None
    label: str | None = None

    @property
    def is_signal(self) -> bool:
        return self.kind == "signal_at"

    @staticmethod
    def signal_at(t: int, k: int, label: str) -> "Verdict":
        return Verdict("signal_at", t, k, label)

    @staticmethod
    def nuisance_so_far(t: int) -> "Verdict":
        return Verdict("nuisance_so_far", t)

    @staticmethod
    def nuisance_through_horizon(t: int) -> "Verdict":
        return Verdict("nuisance_through_horizon", t)


@dataclass(frozen=True)
class ShapeEval:
    k: int
    label: str
    values: tuple[float, ...]  # one per nuisance description, ascending
    triggered: bool


@dataclass(frozen=True)
class StepRecord:
    t: int
    alpha: float
    evaluations: tuple[ShapeEval, ...]
    verdict: Verdict


@dataclass(frozen=True)
class DecisionTrace:
    records: tuple[StepRecord, ...]
    verdict: Verdict

    @property
    def stopping_time(self) -> int | None:
        return self.verdict.t if self.verdict.is_signal else None


class SequentialTest:
    """Mutable fold state; one instance per stream."""

    def __init__(self, table: CalibrationTable):
        if not table.dims:
            raise ValueError("calibration table lacks per-time dimensions")
        self.table = table
        self._y: list[float] = []
        self._t = 0
        self._verdict: Verdict | None = None
        self._records: list[StepRecord] = []

    @property
    def t(self) -> int:
        return self._t

    def step(self, increment) -> Verdict:
        if self._verdict is not None and self._verdict.kind != "nuisance_so_far":
            raise StepAfterStop(f"verdict already reached: {self._verdict.kind}")
        t = self._t + 1
        if t > self.table.horizon:
            raise StepAfterStop("past the horizon")
        inc = np.asarray(increment, dtype=float).reshape(-1)
        prev = self.table.dims[self._t - 1] if self._t else 0
        want = self.table.dims[t - 1] - prev
        if inc.size != want:
            raise DimensionMismatch(
                f"t={t}: increment has {inc.size} coordinates, expected {want}")
        self._y.extend(inc.tolist())
        self._t = t
        y = np.asarray(self._y)

        evals = []
        hit: ShapeEval | None = None
        active = self.table.detectors_at(t)
        alpha = self.table.per_time[t].alpha if t in self.table.per_time else math.nan
        for e in active:
            vals = tuple(d.value(y) for d in
                         sorted(e.detectors, key=lambda d: d.nuisance_index))
            trig = bool(vals) and all(v < alpha for v in vals)
            ev = ShapeEval(e.k, e.label, vals, trig)
            evals.append(ev)
            if trig and hit is None:
                hit = ev
        if hit is not None:
            verdict = Verdict.signal_at(t, hit.k, hit.label)
        elif t == self.table.horizon:
            verdict = Verdict.nuisance_through_horizon(t)
        else:
            verdict = Verdict.nuisance_so_far(t)
        self._records.append(StepRecord(t, alpha, tuple(evals), verdict))
        self._verdict = verdict
        return verdict

    def trace(self) -> DecisionTrace:
        verdict = self._verdict if self._verdict is not None \
            else Verdict.nuisance_so_far(0)
        return DecisionTrace(tuple(self._records), verdict)


def run_stream(table: CalibrationTable, increments) -> DecisionTrace:
    """Fold the test over per-time increments, stopping at the first
    signal verdict."""
    test = SequentialTest(table)
    for inc in increments:
        v = test.step(inc)
        if v.is_signal:
            break
    return test.trace()


# ---------------------------------------------------------------------------
# stream and trace files


def write_stream_csv(path, increments) -> None:
    """One row per time step; unused cells stay empty when the increment
    width varies."""
    incs = [np.asarray(i, dtype=float).reshape(-1) for i in increments]
    width = max((i.size for i in incs), default=0)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"y{j}" for j in range(width)])
        for t, i in enumerate(incs, start=1):
            w.writerow([t] + [repr(v) for v in i.tolist()]
                       + [""] * (width - i.size))


def read_stream_csv(path) -> list[np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if not header or header[0] != "t":
            raise ValueError("stream file must start with a 't' header row")
        out = []
        for row in r:
            if not row:
                continue
            out.append(np.array([float(c) for c in row[1:] if c != ""]))
    return out


def write_trace_csv(path, trace: DecisionTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "k", "shape", "nuisance_index", "value", "alpha",
                    "triggered", "step_verdict"])
        for rec in trace.records:
            if not rec.evaluations:
                w.writerow([rec.t, "", "", "", "", "", "", rec.verdict.kind])
                continue
            for ev in rec.evaluations:
                for m, v in enumerate(ev.values):
                    w.writerow([rec.t, ev.k, ev.label, m, repr(v),
                                repr(rec.alpha), int(ev.triggered),
                                rec.verdict.kind])
