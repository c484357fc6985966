import csv
import math

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from dotenv import load_dotenv

from utils.converter import env_int
from utils.logger import log, RED, ENDC
from utils.model import propensities

load_dotenv()

MAX_JUMPS = env_int("STOCHSENS_MAX_JUMPS", 10**8)
UNIFORM_BLOCK = 256


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RngStream:
    """
    Reproducible random stream addressed by (seed, stream_id).

    Streams are Philox counter-based generators keyed through a SeedSequence whose
    spawn key is the stream id, so distinct ids give independent sequences and the
    same pair always replays the same one.
    """
    seed: int
    stream_id: int = 0

    def generator(self):
        seed_seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(seed_seq))


def as_generator(rng):
    """Accept an RngStream, a numpy Generator or a bare integer seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"Unsupported random source: {type(rng).__name__}")


class UniformSource:
    """Uniform [0, 1) draws served as Python floats from blocks of the underlying generator."""

    def __init__(self, generator, block=UNIFORM_BLOCK):
        self._generator = generator
        self._block = block
        self._buffer = []
        self._position = 0

    def __call__(self):
        if self._position >= len(self._buffer):
            self._buffer = self._generator.random(self._block).tolist()
            self._position = 0
        value = self._buffer[self._position]
        self._position += 1
        return value

    def exponential(self, rate):
        return -math.log(1.0 - self()) / rate


@dataclass(frozen=True)
class Recording:
    """Recording policy: every jump (times is None) or the states at the given absolute times."""
    times: tuple = None

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def at(cls, times):
        return cls(times=tuple(sorted(float(t) for t in times)))

    @property
    def thinned(self):
        return self.times is not None


@dataclass(frozen=True)
class Trajectory:
    """
    One realization of the jump process on [0, t_end].

    Attributes
    ----------
    jump_times : tuple[float, ...]
        σ_0 = 0 < σ_1 < ... (or the query times when thinned).
    states : tuple[tuple[int, ...], ...]
        states[i] = X(σ_i).
    reaction_ids : tuple[int, ...]
        Reaction fired at σ_{i+1}; empty when thinned.
    t_end : float
        Simulation horizon.
    absorbed : bool
        True when the path reached a state with zero total propensity.
    n_jumps : int
        Number of jumps simulated (also counted when thinned).
    final_state : tuple[int, ...]
        X(t_end).
    thinned : bool
        True when only the states at query times were kept.
    """
    jump_times: tuple
    states: tuple
    reaction_ids: tuple
    t_end: float
    absorbed: bool
    n_jumps: int
    final_state: tuple
    thinned: bool = False

    def index_at(self, t):
        """Index i of the last recorded time σ_i ≤ t."""
        if t < 0:
            raise ValueError(f"Negative time {t}")
        i = bisect_right(self.jump_times, t) - 1
        if i < 0 or (self.thinned and self.jump_times[i] != t):
            raise SimulationError(f"No recorded state at time {t}; snapshots were kept at {self.jump_times}")
        return i

    def state_at(self, t):
        """X(t) by interval bisection over the recorded times (only the snapshot times when thinned)."""
        if t > self.t_end and not self.absorbed:
            raise SimulationError(f"Query time {t} beyond simulated horizon {self.t_end}")
        if t >= self.t_end:
            return self.final_state
        return self.states[self.index_at(t)]

    def integral(self, f, t0, t1):
        """Exact ∫_{t0}^{t1} f(X(s)) ds over the piecewise-constant path."""
        if self.thinned:
            raise SimulationError("Integrals need a fully recorded trajectory")
        if t1 <= t0:
            return 0.0
        if t1 > self.t_end and not self.absorbed:
            raise SimulationError(f"Integration bound {t1} beyond simulated horizon {self.t_end}")
        times = self.jump_times
        i = self.index_at(t0)
        t = t0
        total = 0.0
        while t < t1:
            next_time = times[i + 1] if i + 1 < len(times) else math.inf
            segment_end = min(next_time, t1)
            total += f(self.states[i]) * (segment_end - t)
            t = segment_end
            i += 1
        return total

    def write_csv(self, stream):
        """Write `t,reaction,s_0,...` rows: initial state, one row per jump, a final row at t_end."""
        d = len(self.final_state)
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["t", "reaction"] + [f"s_{i}" for i in range(d)])
        for i, (t, state) in enumerate(zip(self.jump_times, self.states)):
            reaction = "" if i == 0 or self.thinned else self.reaction_ids[i - 1]
            writer.writerow([repr(float(t)), reaction] + list(state))
        if self.t_end > self.jump_times[-1]:
            writer.writerow([repr(float(self.t_end)), ""] + list(self.final_state))


@dataclass(frozen=True)
class CoupledTrajectory:
    traj_lo: Trajectory
    traj_hi: Trajectory
    h: float
    coupling: str
    shared_firings: int = 0
    total_firings: int = 0

    @property
    def shared_fraction(self):
        """Fraction of firings that moved both chains together (split-propensity coupling only)."""
        return self.shared_firings / self.total_firings if self.total_firings else 1.0

    @property
    def n_jumps(self):
        return self.traj_lo.n_jumps + self.traj_hi.n_jumps


class _Recorder:
    """Accumulates a Trajectory while a chain is being simulated."""

    def __init__(self, x0, record):
        self.record = record or Recording.full()
        self.times = [] if self.record.thinned else [0.0]
        self.states = [] if self.record.thinned else [tuple(x0)]
        self.reactions = []
        self.pending = list(self.record.times or ())
        self.n_jumps = 0

    def flush_until(self, t, state, inclusive=False):
        # snapshots strictly before the next jump see the current state
        while self.pending and (self.pending[0] < t or (inclusive and self.pending[0] <= t)):
            self.times.append(self.pending.pop(0))
            self.states.append(tuple(state))

    def jump(self, t, k, state):
        self.n_jumps += 1
        if self.record.thinned:
            return
        self.times.append(t)
        self.states.append(tuple(state))
        self.reactions.append(k)

    def finish(self, t_end, state, absorbed):
        if self.record.thinned:
            if self.pending and self.pending[-1] > t_end:
                raise SimulationError(f"Query time {self.pending[-1]} beyond horizon {t_end}")
            self.flush_until(t_end, state, inclusive=True)
        return Trajectory(
            jump_times=tuple(self.times),
            states=tuple(self.states),
            reaction_ids=tuple(self.reactions),
            t_end=float(t_end),
            absorbed=absorbed,
            n_jumps=self.n_jumps,
            final_state=tuple(state),
            thinned=self.record.thinned,
        )


def _moves(net):
    return [[(s, z) for s, z in enumerate(zeta) if z] for zeta in net.stoich]


def _apply(x, moves):
    for s, z in moves:
        x[s] += z
        if x[s] < 0:
            raise SimulationError(f"Negative copy number in state {x}; the network violates condition (C)")


def _check_cap(n_jumps, max_jumps):
    if n_jumps >= max_jumps:
        log(f"{RED}Jump cap of {max_jumps} reached, the model looks runaway{ENDC}")
        raise SimulationError(f"Jump cap of {max_jumps} jumps reached")


def _direct(net, rates, x0, t_end, uniform, record, max_jumps):
    x = list(x0)
    moves = _moves(net)
    recorder = _Recorder(x, record)
    t = 0.0
    absorbed = False
    while True:
        a = propensities(net, x, rates)
        a0 = sum(a)
        if a0 <= 0.0:
            absorbed = True
            break
        t += uniform.exponential(a0)
        if t > t_end:
            break
        threshold = uniform() * a0
        k = 0
        cumulative = a[0]
        while cumulative <= threshold and k < len(a) - 1:
            k += 1
            cumulative += a[k]
        # rounding can land on a zero channel at the end of the scan
        while a[k] == 0.0:
            k -= 1
        _check_cap(recorder.n_jumps, max_jumps)
        recorder.flush_until(t, x)
        _apply(x, moves[k])
        recorder.jump(t, k, x)
    return recorder.finish(t_end, x, absorbed)


def simulate(net, theta_value, t_end, rng, record=None, x0=None, max_jumps=None):
    """
    Exact realization (Gillespie direct method) of the network's jump process.

    Parameters
    ----------
    net : ReactionNetwork
    theta_value : float
        Value of the sensitive parameter.
    t_end : float
        Horizon; the path stops earlier when it reaches an absorbing state.
    rng : RngStream or numpy.random.Generator
    record : Recording, optional
        Full recording (default) or snapshots at given times.
    x0 : sequence of int, optional
        Initial state, defaults to net.x0.
    max_jumps : int, optional
        Runaway guard, defaults to STOCHSENS_MAX_JUMPS.

    Returns
    -------
    Trajectory
    """
    if t_end < 0:
        raise SimulationError(f"Negative horizon {t_end}")
    if theta_value < 0:
        raise SimulationError(f"Negative parameter value {theta_value}")
    uniform = UniformSource(as_generator(rng))
    return _direct(
        net, net.rate_constants(theta_value), net.x0 if x0 is None else x0,
        t_end, uniform, record, max_jumps or MAX_JUMPS,
    )


def _check_pair(theta, h):
    if h == 0:
        raise SimulationError("Perturbation h must be non-zero")
    if theta < 0 or theta + h < 0:
        raise SimulationError(f"Both θ={theta} and θ+h={theta + h} must be non-negative")


def simulate_cfd_pair(net, theta, h, t_end, rng, max_jumps=None):
    """
    Split-propensity coupling of the chains at θ and θ+h.

    Each reaction k contributes three channels: a shared one with rate
    min(λ_k(x_lo, θ), λ_k(x_hi, θ+h)) moving both chains, and two residual
    channels moving only one of them.
    """
    _check_pair(theta, h)
    max_jumps = max_jumps or MAX_JUMPS
    rates_lo = net.rate_constants(theta)
    rates_hi = net.rate_constants(theta + h)
    uniform = UniformSource(as_generator(rng))
    moves = _moves(net)
    K = net.K
    x_lo, x_hi = list(net.x0), list(net.x0)
    rec_lo, rec_hi = _Recorder(x_lo, None), _Recorder(x_hi, None)
    t = 0.0
    shared_firings = total_firings = 0
    while True:
        a_lo = propensities(net, x_lo, rates_lo)
        a_hi = propensities(net, x_hi, rates_hi)
        shared = [min(lo, hi) for lo, hi in zip(a_lo, a_hi)]
        channels = shared + [lo - s for lo, s in zip(a_lo, shared)] + [hi - s for hi, s in zip(a_hi, shared)]
        a0 = sum(channels)
        if a0 <= 0.0:
            break
        t += uniform.exponential(a0)
        if t > t_end:
            break
        threshold = uniform() * a0
        c = 0
        cumulative = channels[0]
        while cumulative <= threshold and c < len(channels) - 1:
            c += 1
            cumulative += channels[c]
        while channels[c] <= 0.0:
            c -= 1
        group, k = divmod(c, K)
        _check_cap(rec_lo.n_jumps + rec_hi.n_jumps, max_jumps)
        total_firings += 1
        if group in (0, 1):
            _apply(x_lo, moves[k])
            rec_lo.jump(t, k, x_lo)
        if group in (0, 2):
            _apply(x_hi, moves[k])
            rec_hi.jump(t, k, x_hi)
        if group == 0:
            shared_firings += 1
    absorbed_lo = sum(propensities(net, x_lo, rates_lo)) <= 0.0
    absorbed_hi = sum(propensities(net, x_hi, rates_hi)) <= 0.0
    return CoupledTrajectory(
        traj_lo=rec_lo.finish(t_end, x_lo, absorbed_lo),
        traj_hi=rec_hi.finish(t_end, x_hi, absorbed_hi),
        h=h,
        coupling="cfd",
        shared_firings=shared_firings,
        total_firings=total_firings,
    )


class PoissonClock:
    """Jump times of one unit-rate Poisson process, drawn lazily so several chains can share it."""

    def __init__(self, generator):
        self._uniform = UniformSource(generator)
        self._times = []

    def __getitem__(self, n):
        while len(self._times) <= n:
            last = self._times[-1] if self._times else 0.0
            self._times.append(last + self._uniform.exponential(1.0))
        return self._times[n]


def _random_time_change(net, rates, t_end, clocks, max_jumps):
    # next-reaction bookkeeping: internal clocks T_k against the shared Poisson jump times
    K = net.K
    x = list(net.x0)
    moves = _moves(net)
    recorder = _Recorder(x, None)
    internal = [0.0] * K
    fired = [0] * K
    t = 0.0
    absorbed = False
    while True:
        a = propensities(net, x, rates)
        best_k = -1
        best_dt = math.inf
        for k in range(K):
            if a[k] > 0.0:
                dt = (clocks[k][fired[k]] - internal[k]) / a[k]
                if dt < best_dt:
                    best_k, best_dt = k, dt
        if best_k < 0:
            absorbed = True
            break
        if t + best_dt > t_end:
            break
        t += best_dt
        for k in range(K):
            internal[k] += a[k] * best_dt
        internal[best_k] = clocks[best_k][fired[best_k]]
        fired[best_k] += 1
        _check_cap(recorder.n_jumps, max_jumps)
        _apply(x, moves[best_k])
        recorder.jump(t, best_k, x)
    return recorder.finish(t_end, x, absorbed)


def simulate_crp_pair(net, theta, h, t_end, rng, max_jumps=None):
    """Common reaction paths: both chains are driven by the same K unit-rate Poisson processes."""
    _check_pair(theta, h)
    max_jumps = max_jumps or MAX_JUMPS
    clocks = [PoissonClock(g) for g in as_generator(rng).spawn(net.K)]
    return CoupledTrajectory(
        traj_lo=_random_time_change(net, net.rate_constants(theta), t_end, clocks, max_jumps),
        traj_hi=_random_time_change(net, net.rate_constants(theta + h), t_end, clocks, max_jumps),
        h=h,
        coupling="crp",
    )


def simulate_crn_pair(net, theta, h, t_end, rng, max_jumps=None):
    """Common reaction numbers: both direct-method chains consume the identical uniform stream."""
    _check_pair(theta, h)
    max_jumps = max_jumps or MAX_JUMPS
    stream = RngStream(seed=int(as_generator(rng).integers(2**63)))
    return CoupledTrajectory(
        traj_lo=_direct(net, net.rate_constants(theta), net.x0, t_end,
                        UniformSource(stream.generator()), None, max_jumps),
        traj_hi=_direct(net, net.rate_constants(theta + h), net.x0, t_end,
                        UniformSource(stream.generator()), None, max_jumps),
        h=h,
        coupling="crn",
    )


def simulate_independent_pair(net, theta, h, t_end, rng, max_jumps=None):
    """Uncoupled baseline: the two chains use independent streams."""
    _check_pair(theta, h)
    lo_rng, hi_rng = as_generator(rng).spawn(2)
    return CoupledTrajectory(
        traj_lo=simulate(net, theta, t_end, lo_rng, max_jumps=max_jumps),
        traj_hi=simulate(net, theta + h, t_end, hi_rng, max_jumps=max_jumps),
        h=h,
        coupling="independent",
    )


COUPLINGS = {
    "cfd": simulate_cfd_pair,
    "crp": simulate_crp_pair,
    "crn": simulate_crn_pair,
    "independent": simulate_independent_pair,
}
