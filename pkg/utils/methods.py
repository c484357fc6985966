from dataclasses import dataclass

from utils.apa import APAConfig, run_apa_sample, score_sample
from utils.fdiff import FDConfig, default_h, score_fd
from utils.girsanov import InapplicableError, check_applicable, score_girsanov
from utils.logger import log, RED, ENDC
from utils.oracle import OracleError, analytic_provider
from utils.sim import RngStream, simulate
from utils.stats import run_until_target

FD_METHODS = ("cfd", "crp", "crn", "independent")
METHODS = ("apa", "apa-exact", "girsanov") + FD_METHODS
THETA_SMALL = 0.05


@dataclass(frozen=True)
class ApaSampler:
    net: object
    f: object
    T: float
    cfg: APAConfig
    seed: int
    diagnostics: bool = False

    def __call__(self, stream_id):
        score = run_apa_sample(self.net, self.f, self.T, self.cfg, RngStream(self.seed, stream_id))
        return score.value, score.jumps, score.to_json() if self.diagnostics else None, score.n_fallbacks


@dataclass(frozen=True)
class ApaExactSampler:
    """Exact per-path score with the closed-form R; zero variance on the pure-birth network."""
    net: object
    f: object
    T: float
    seed: int

    def __post_init__(self):
        analytic_provider(self.net, self.f)

    def __call__(self, stream_id):
        base_rng, alpha_rng = RngStream(self.seed, stream_id).generator().spawn(2)
        traj = simulate(self.net, self.net.theta, self.T, base_rng)
        score = score_sample(self.net, self.f, self.T, traj, analytic_provider(self.net, self.f), alpha_rng)
        return score.value, score.jumps


@dataclass(frozen=True)
class GirsanovSampler:
    net: object
    f: object
    T: float
    seed: int

    def __post_init__(self):
        check_applicable(self.net)

    def __call__(self, stream_id):
        traj = simulate(self.net, self.net.theta, self.T, RngStream(self.seed, stream_id))
        return score_girsanov(self.net, self.f, self.T, traj).value, traj.n_jumps


@dataclass(frozen=True)
class FdSampler:
    net: object
    f: object
    T: float
    cfg: FDConfig
    seed: int

    def __call__(self, stream_id):
        score = score_fd(self.net, self.f, self.T, self.cfg, RngStream(self.seed, stream_id))
        return score.value, score.jumps


def recommend_method(theta, bias_tolerated=False, theta_small=THETA_SMALL):
    """
    Pick an estimator for a sensitive rate constant θ.

    Coupled finite differences are the cheapest when a bias of order h is acceptable.
    Among the unbiased estimators, the Girsanov score degrades as θ shrinks (its variance
    grows roughly like 1/θ) and is undefined at θ = 0, where the auxiliary path
    algorithm keeps a flat cost.
    """
    if theta < 0:
        raise ValueError(f"θ must be non-negative, got {theta}")
    if bias_tolerated:
        return "cfd"
    return "apa" if theta < theta_small else "girsanov"


def make_sampler(method, net, f, T, seed, M=50, kappa=3.0, h=None, diagnostics=False):
    """
    Build the picklable per-sample score source of one estimator.

    Raises
    ------
    InapplicableError
        Girsanov at θ = 0 or with θ shared by several reactions; apa-exact outside the
        closed-form networks.
    """
    if method == "apa":
        return ApaSampler(net, f, T, APAConfig(M=M, kappa=kappa), seed, diagnostics)
    if method == "apa-exact":
        try:
            return ApaExactSampler(net, f, T, seed)
        except OracleError as e:
            raise InapplicableError(f"apa-exact: {e}") from e
    if method == "girsanov":
        return GirsanovSampler(net, f, T, seed)
    if method in FD_METHODS:
        return FdSampler(net, f, T, FDConfig(h=h if h is not None else default_h(net.theta), coupling=method), seed)
    raise ValueError(f"Unknown method '{method}', expected one of {', '.join(METHODS)} or auto")


def estimate_sensitivity(method, net, f, T, seed, rel_target=0.05, n_min=100, n_max=10**6, workers=1,
                         M=50, kappa=3.0, h=None, fixed_n=None, on_note=None):
    """Run one estimator with the adaptive stopping rule and return its EstimateReport."""
    if method == "auto":
        method = recommend_method(net.theta)
        log(f"Method auto-selected for θ = {net.theta:g}: {method}")
    try:
        sampler = make_sampler(method, net, f, T, seed, M=M, kappa=kappa, h=h, diagnostics=on_note is not None)
    except InapplicableError as e:
        log(f"{RED}{e}{ENDC}")
        raise
    return run_until_target(
        sampler, rel_target=rel_target, n_min=n_min, n_max=n_max, workers=workers, fixed_n=fixed_n,
        on_note=on_note, method=method, theta=net.theta, T=T, param=net.params.sensitive,
    )
