import csv
import json
import math
import time

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from utils.logger import log, GREEN, YELLOW, ENDC

Z_95 = 1.96
DEFAULT_BATCH = 100
DEFAULT_N_MIN = 100
DEFAULT_N_MAX = 10**6
ILL_DEFINED = "relative target ill-defined"

CSV_FIELDS = (
    "method", "param", "theta", "T", "estimate", "ci_half", "n", "variance",
    "mean_jumps", "cost", "converged", "flag",
)


@dataclass
class Accumulator:
    """
    Running count, mean and sum of squared deviations (Welford), plus the
    number of simulated jumps behind the samples and the APA fallback paths they needed.
    """
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    jumps: int = 0
    fallbacks: int = 0

    def add(self, value, jumps=0, fallbacks=0):
        self.n += 1
        delta = value - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (value - self.mean)
        self.jumps += jumps
        self.fallbacks += fallbacks

    def merge(self, other):
        """Combine with another accumulator (Chan et al. pairwise update); returns self."""
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            self.jumps, self.fallbacks = other.jumps, other.fallbacks
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        self.jumps += other.jumps
        self.fallbacks += other.fallbacks
        return self

    @property
    def variance(self):
        return self.m2 / (self.n - 1) if self.n >= 2 else 0.0

    @property
    def ci_half(self):
        if self.n == 0:
            return math.inf
        return Z_95 * math.sqrt(self.variance / self.n)

    @property
    def mean_jumps(self):
        return self.jumps / self.n if self.n else 0.0


@dataclass(frozen=True)
class EstimateReport:
    """
    Result of one adaptive estimation run.

    Attributes
    ----------
    estimate : float
        Sample mean of the scores.
    ci_half : float
        Half-length of the 95% normal confidence interval, 1.96 * sqrt(variance / n).
    n : int
        Number of samples drawn.
    sample_variance : float
    wall_seconds : float
    method : str
    converged : bool
        False when n_max was reached before the relative target.
    flag : str
        Empty, or a reason the relative target could not be met.
    theta, T : float
    param : str
        Name of the sensitive parameter.
    mean_jumps : float
        Average number of simulated jumps per sample, the machine-independent cost unit.
    """
    estimate: float
    ci_half: float
    n: int
    sample_variance: float
    wall_seconds: float
    method: str = ""
    converged: bool = True
    flag: str = ""
    theta: float = math.nan
    T: float = math.nan
    param: str = ""
    mean_jumps: float = 0.0

    @property
    def cost(self):
        return self.n * self.mean_jumps

    def covers(self, value, width=1.0):
        return abs(self.estimate - value) <= width * self.ci_half

    def row(self, timing=False):
        row = {
            "method": self.method,
            "param": self.param,
            "theta": self.theta,
            "T": self.T,
            "estimate": self.estimate,
            "ci_half": self.ci_half,
            "n": self.n,
            "variance": self.sample_variance,
            "mean_jumps": self.mean_jumps,
            "cost": self.cost,
            "converged": self.converged,
            "flag": self.flag,
        }
        if timing:
            row["seconds"] = self.wall_seconds
        return row

    def to_json(self, timing=False):
        return json.dumps(self.row(timing), sort_keys=True)

    @classmethod
    def from_accumulator(cls, acc, **kwargs):
        return cls(
            estimate=acc.mean, ci_half=acc.ci_half, n=acc.n, sample_variance=acc.variance,
            mean_jumps=acc.mean_jumps, **kwargs,
        )


def write_reports_csv(reports, stream, timing=False):
    fields = list(CSV_FIELDS) + (["seconds"] if timing else [])
    writer = csv.DictWriter(stream, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        writer.writerow(report.row(timing))


def _draw_chunk(sampler, start, stop, keep_notes):
    """Draw samples start..stop-1 (the sample index is its random stream id)."""
    acc = Accumulator()
    notes = []
    for stream_id in range(start, stop):
        value, jumps, *rest = sampler(stream_id)
        acc.add(value, jumps, rest[1] if len(rest) > 1 else 0)
        if keep_notes and rest and rest[0] is not None:
            notes.append(rest[0])
    return acc, notes


def _chunks(start, stop, workers):
    size = stop - start
    bounds = [start + (size * w) // workers for w in range(workers + 1)]
    return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


def _target_met(acc, rel_target):
    return acc.ci_half <= rel_target * abs(acc.mean)


def _log_progress(method, acc):
    fallbacks = f", {acc.fallbacks} fallback paths" if acc.fallbacks else ""
    log(f"{method}: n={acc.n} estimate={acc.mean:.6g} ± {acc.ci_half:.3g}{fallbacks}")


def run_until_target(sampler, rel_target=0.05, n_min=DEFAULT_N_MIN, n_max=DEFAULT_N_MAX, batch=DEFAULT_BATCH,
                     workers=1, fixed_n=None, on_note=None, **labels):
    """
    Draw batches of samples until the 95% CI half-length is within rel_target of |estimate|.

    Parameters
    ----------
    sampler : callable
        sampler(stream_id) -> (value, jumps), (value, jumps, note) or (value, jumps, note, fallbacks).
        Must be picklable when workers > 1 and must depend on nothing but its own
        fields and stream_id.
    rel_target : float
    n_min, n_max : int
        The target is first checked after n_min samples; n_max stops a non-converging run.
    batch : int
        Samples drawn between two checks of the stopping rule.
    workers : int
        Each batch is split into contiguous index ranges, one per worker; the per-range
        accumulators are merged in range order, so a fixed seed and worker count replay exactly.
    fixed_n : int, optional
        Draw exactly this many samples and skip the stopping rule.
    on_note : callable, optional
        Receives every per-sample note in stream-id order.
    **labels
        method, theta, T and param copied into the report.

    Returns
    -------
    EstimateReport
    """
    if not rel_target > 0:
        raise ValueError(f"rel_target must be positive, got {rel_target}")
    if n_min < DEFAULT_N_MIN and fixed_n is None:
        raise ValueError(f"n_min must be at least {DEFAULT_N_MIN}, got {n_min}")
    if n_max < n_min:
        raise ValueError(f"n_max ({n_max}) is smaller than n_min ({n_min})")
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers}")

    started = time.perf_counter()
    acc = Accumulator()
    keep_notes = on_note is not None
    limit = fixed_n if fixed_n is not None else n_max
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while acc.n < limit:
            stop = min(acc.n + batch, limit)
            if pool is None:
                results = [_draw_chunk(sampler, acc.n, stop, keep_notes)]
            else:
                futures = [pool.submit(_draw_chunk, sampler, a, b, keep_notes) for a, b in _chunks(acc.n, stop, workers)]
                results = [future.result() for future in futures]
            for chunk, notes in results:
                acc.merge(chunk)
                if keep_notes:
                    for note in notes:
                        on_note(note)
            _log_progress(labels.get("method", ""), acc)
            if fixed_n is None and acc.n >= n_min and _target_met(acc, rel_target):
                break
    finally:
        if pool is not None:
            pool.shutdown()

    converged = fixed_n is not None or _target_met(acc, rel_target)
    flag = ""
    if not converged and acc.variance > 0.0 and abs(acc.mean) <= acc.ci_half:
        flag = ILL_DEFINED
    method = labels.get("method", "")
    if converged:
        log(f"{GREEN}{method}: {acc.mean:.6g} ± {acc.ci_half:.3g} after {acc.n} samples{ENDC}")
    else:
        log(f"{YELLOW}{method}: no convergence after {acc.n} samples ({acc.mean:.6g} ± {acc.ci_half:.3g}){ENDC}")
    return EstimateReport.from_accumulator(
        acc, wall_seconds=time.perf_counter() - started, converged=converged, flag=flag, **labels
    )
