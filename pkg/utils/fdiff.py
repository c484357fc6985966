from dataclasses import dataclass

from utils.sim import COUPLINGS


@dataclass(frozen=True)
class FDConfig:
    """Forward finite difference with perturbation h over one of the couplings in sim.COUPLINGS."""
    h: float
    coupling: str = "cfd"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"Unknown coupling '{self.coupling}', expected one of {', '.join(COUPLINGS)}")


def default_h(theta):
    return 0.01 * max(theta, 1e-3)


def simulate_pair(net, T, cfg, rng):
    return COUPLINGS[cfg.coupling](net, net.theta, cfg.h, T, rng)


@dataclass(frozen=True)
class FdScore:
    value: float
    jumps: int


def score_fd(net, f, T, cfg, rng):
    """One sample (f(X_{θ+h}(T)) - f(X_θ(T))) / h from the configured coupled pair, with the jumps of both chains."""
    pair = simulate_pair(net, T, cfg, rng)
    return FdScore(
        value=(f(pair.traj_hi.final_state) - f(pair.traj_lo.final_state)) / cfg.h,
        jumps=pair.n_jumps,
    )
