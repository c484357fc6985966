import csv

from dataclasses import dataclass, field

from utils.apa import ProviderError
from utils.girsanov import InapplicableError
from utils.logger import log, YELLOW, RED, ENDC
from utils.methods import estimate_sensitivity
from utils.model import load_model
from utils.oracle import OracleError, finite_difference_ode, mean_sensitivity_ode, sensitivity_closed_form
from utils.sim import SimulationError

BD_THETAS = (0.1, 0.01, 0.001, 0.0001)
GENE_THETAS = (0.0693, 0.0116, 0.0023, 0.0012, 0.0)
FD_STEPS = (1e-2, 1e-3, 1e-4, 1e-5)

# Samples per cell (table 1) or cap on samples per cell (tables 2-4) at scale 1
BASE_SAMPLES = {1: 10**5, 2: 4 * 10**7, 3: 2 * 10**7, 4: 7 * 10**7}

BENCH_FIELDS = (
    "table", "model", "theta", "T", "h", "method", "estimate", "ci_half", "n", "variance",
    "mean_jumps", "cost", "converged", "oracle", "covers", "variance_ratio", "error",
)


@dataclass(frozen=True)
class BenchSpec:
    """
    One benchmark table: a grid of (θ, T[, h]) cells, each run with every method.

    Attributes
    ----------
    table : int
        1 (fixed-N variance comparison with the exact R), 2 (birth-death), 3 (gene
        expression) or 4 (finite-difference schemes on gene expression).
    theta_grid, T_grid : tuple[float, ...]
    methods : tuple[str, ...]
    scale : float
        Multiplier on the per-cell sample count (table 1) or sample cap (tables 2-4).
    h_grid : tuple[float, ...]
        Perturbations, used by table 4 only.
    """
    table: int
    theta_grid: tuple
    T_grid: tuple
    methods: tuple
    scale: float = 1.0
    h_grid: tuple = field(default=(None,))

    def __post_init__(self):
        if self.table not in BASE_SAMPLES:
            raise ValueError(f"Unknown table {self.table}, expected one of {sorted(BASE_SAMPLES)}")
        if not self.theta_grid or not self.T_grid or not self.methods or not self.h_grid:
            raise ValueError("Benchmark grids must be non-empty")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def model(self):
        return "birth-death" if self.table in (1, 2) else "gene-expression"

    @property
    def samples(self):
        return max(100, int(round(BASE_SAMPLES[self.table] * self.scale)))

    @classmethod
    def default(cls, table, scale=1.0):
        if table == 1:
            return cls(1, BD_THETAS, (1.0, 5.0, 10.0, 20.0), ("girsanov", "apa-exact"), scale)
        if table == 2:
            return cls(2, BD_THETAS, (5.0, 10.0), ("girsanov", "apa"), scale)
        if table == 3:
            return cls(3, GENE_THETAS, (5.0, 10.0), ("girsanov", "apa"), scale)
        if table == 4:
            return cls(4, (0.0116,), (10.0,), ("crn", "crp", "cfd"), scale, h_grid=FD_STEPS)
        raise ValueError(f"Unknown table {table}, expected one of {sorted(BASE_SAMPLES)}")


def cell_oracle(spec, net, f, T, h):
    """Reference value for one cell: the finite-difference target for table 4, the sensitivity otherwise."""
    if spec.table == 4:
        return finite_difference_ode(net, f, T, h)
    if spec.model == "birth-death":
        return sensitivity_closed_form("birth-death", net.theta, T)
    return mean_sensitivity_ode(net, f, T)


def run_cell(spec, model, theta, T, h, method, seed, workers):
    net = model.network.with_theta(theta)
    f = model.observable
    row = {"table": spec.table, "model": spec.model, "theta": theta, "T": T, "h": h if h is not None else "",
           "method": method, "variance_ratio": "", "error": ""}
    try:
        oracle = cell_oracle(spec, net, f, T, h)
        if spec.table == 1:
            report = estimate_sensitivity(method, net, f, T, seed, workers=workers, fixed_n=spec.samples)
        else:
            report = estimate_sensitivity(
                method, net, f, T, seed, workers=workers, h=h, n_max=spec.samples,
            )
    except (InapplicableError, OracleError, ProviderError, SimulationError, ValueError) as e:
        log(f"{RED}Table {spec.table} cell θ={theta:g} T={T:g} {method}: {e}{ENDC}")
        row["error"] = str(e)
        return row
    row.update(
        estimate=report.estimate, ci_half=report.ci_half, n=report.n, variance=report.sample_variance,
        mean_jumps=report.mean_jumps, cost=report.cost, converged=report.converged, oracle=oracle,
        covers=report.covers(oracle),
    )
    if not report.covers(oracle):
        log(f"{YELLOW}Table {spec.table} cell θ={theta:g} T={T:g} {method}: CI misses the oracle {oracle:.6g}{ENDC}")
    return row


def _variance_ratios(rows):
    """Girsanov over APA sample variance for every (θ, T) with both rows."""
    by_cell = {}
    for row in rows:
        if not row["error"]:
            by_cell.setdefault((row["theta"], row["T"]), {})[row["method"]] = row
    for methods in by_cell.values():
        if "girsanov" in methods and "apa-exact" in methods and methods["apa-exact"]["variance"] > 0:
            ratio = methods["girsanov"]["variance"] / methods["apa-exact"]["variance"]
            methods["girsanov"]["variance_ratio"] = ratio
            methods["apa-exact"]["variance_ratio"] = ratio


def run_bench(spec, seed=0, workers=1):
    """
    Run every cell of a benchmark table.

    Failing cells get their error message recorded and the run continues. Girsanov is
    skipped at θ = 0 where it is undefined.

    Returns
    -------
    list[dict]
        One row per (θ, T, h, method) with the estimate, its oracle and whether the CI covers it.
    """
    model = load_model(spec.model)
    rows = []
    for theta in spec.theta_grid:
        for T in spec.T_grid:
            for h in spec.h_grid:
                for method in spec.methods:
                    if method == "girsanov" and theta == 0:
                        continue
                    log(f"Table {spec.table}: θ={theta:g} T={T:g}{'' if h is None else f' h={h:g}'} {method}")
                    rows.append(run_cell(spec, model, theta, T, h, method, seed, workers))
    if spec.table == 1:
        _variance_ratios(rows)
    return rows


def write_bench_csv(rows, stream):
    writer = csv.DictWriter(stream, fieldnames=BENCH_FIELDS, restval="", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
