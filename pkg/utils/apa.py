import functools
import json

from bisect import bisect_left
from dataclasses import dataclass, field

from utils.model import dtheta_weights, propensities
from utils.sim import as_generator, simulate


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class APAConfig:
    """
    Auxiliary Path Algorithm settings.

    Attributes
    ----------
    M : int
        Number of auxiliary paths simulated per base path.
    kappa : float
        Extension factor: auxiliary paths run on [0, kappa * T].
    fallback : str
        Policy for queries no auxiliary path can answer; "single-path" simulates one
        fresh path from the queried state.
    """
    M: int = 50
    kappa: float = 3.0
    fallback: str = "single-path"

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.fallback != "single-path":
            raise ValueError(f"Unknown fallback policy '{self.fallback}'")


@dataclass(frozen=True)
class BasePath:
    eta: int
    dt: tuple
    states: tuple
    times: tuple


def base_path_decompose(traj, T):
    """
    Split a base path at its jumps before T.

    Returns
    -------
    BasePath
        eta = max{i : σ_i < T}; dt[i] = σ_{i+1} - σ_i for i < eta and T - σ_eta for
        i = eta; states[i] = X(σ_i). For T = 0 there is no such i and eta = -1.
    """
    if traj.thinned:
        raise ValueError("Base path decomposition needs a fully recorded trajectory")
    if traj.t_end < T and not traj.absorbed:
        raise ValueError(f"Trajectory covers [0, {traj.t_end}] but T = {T}")
    times = traj.jump_times
    eta = bisect_left(times, T) - 1
    if eta < 0:
        return BasePath(eta=-1, dt=(), states=(), times=())
    dt = tuple(times[i + 1] - times[i] for i in range(eta)) + (T - times[eta],)
    return BasePath(eta=eta, dt=dt, states=tuple(traj.states[:eta + 1]), times=tuple(times[:eta + 1]))


def _shift(x, zeta):
    return tuple(a + b for a, b in zip(x, zeta))


def _increment(f, x, zeta):
    return f(_shift(x, zeta)) - f(x)


def pathwise_integral_term(traj, net, f, T, base=None):
    """Σ_k ∫_0^T ∂_θλ_k(X(t)) Δ_{ζ_k} f(X(t)) dt, evaluated exactly over the base path's holding times."""
    base = base or base_path_decompose(traj, T)
    total = 0.0
    for x, dt in zip(base.states, base.dt):
        for k, weight in enumerate(dtheta_weights(net, x)):
            if weight:
                total += weight * _increment(f, x, net.stoich[k]) * dt
    return total


def draw_alpha(net, x, theta, T, sigma, rng):
    """α = (T - σ - γ)^+ with γ ~ Exp(λ_0(x, θ)) drawn independently of the path."""
    lam0 = sum(propensities(net, x, net.rate_constants(theta)))
    if lam0 <= 0.0:
        raise ValueError(f"Zero total propensity at {x}: use the absorbing branch")
    gamma = as_generator(rng).exponential(1.0 / lam0)
    return max(T - sigma - gamma, 0.0)


@dataclass(frozen=True)
class PsiQuery:
    x: tuple
    t: float
    slot: tuple


@dataclass(frozen=True)
class IQuery:
    x: tuple
    t: float
    slot: tuple


def identify_slot(method):
    """Re-raise provider failures with the (i, k) slot of the query that triggered them."""
    @functools.wraps(method)
    def wrapper(self, query, *args, **kwargs):
        try:
            return method(self, query, *args, **kwargs)
        except ProviderError:
            raise
        except Exception as e:
            i, k = query.slot[:2]
            raise ProviderError(
                f"Estimating {type(query).__name__}(x={query.x}, t={query.t:.6g}) failed at slot (i={i}, k={k}) - {e}"
            ) from e
    return wrapper


@dataclass
class QueryLedger:
    """
    Pending Ψ/I estimates of one sample.

    Each query fills one slot (i, k, role) of the estimator and carries the weight it
    enters the sum with. Queries sharing (kind, x, t) are estimated once.
    """
    entries: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    n_estimates: int = 0
    slots: set = field(default_factory=set)

    def add(self, query, weight):
        if query.slot in self.slots:
            raise ValueError(f"Slot {query.slot} queued twice")
        self.slots.add(query.slot)
        self.entries.append((query, weight))

    @identify_slot
    def _evaluate(self, query, provider):
        if isinstance(query, PsiQuery):
            return provider.psi(query.x, query.t)
        return provider.I(query.x, query.t)

    def resolve(self, provider):
        cache = {}
        for query, _ in self.entries:
            key = (type(query), query.x, query.t)
            if key not in cache:
                cache[key] = self._evaluate(query, provider)
                self.n_estimates += 1
            if query.slot in self.values:
                raise ValueError(f"Slot {query.slot} resolved twice")
            self.values[query.slot] = cache[key]

    @property
    def complete(self):
        return len(self.values) == len(self.entries) and all(q.slot in self.values for q, _ in self.entries)

    def total(self):
        assert self.complete, "every queued slot must be resolved before assembling the score"
        return sum(weight * self.values[query.slot] for query, weight in self.entries)


class AnalyticRProvider:
    """
    Exact Ψ_θ, R_θ and I_θ supplied as closures.

    Parameters
    ----------
    psi : callable (x, t) -> float
    R : callable (x, t, k) -> float
    I : callable (x, t) -> float
    """
    kind = "analytic"

    def __init__(self, psi, R, I):
        self.psi = psi
        self.R = R
        self.I = I


@dataclass
class AuxPathStore:
    """First visit of every state by every auxiliary path, keyed by the exact integer state."""
    paths: tuple
    horizon: float
    index: dict

    @property
    def jump_count(self):
        return sum(p.n_jumps for p in self.paths)

    def visits(self, x, t):
        """(path_id, first_visit) pairs whose first visit to x leaves room for t more time units."""
        return [(path_id, visit) for path_id, visit in self.index.get(tuple(x), ()) if visit + t <= self.horizon]


def build_aux_store(net, theta, T, cfg, rng):
    """Simulate cfg.M independent paths from x0 on [0, kappa*T] and index their first visits."""
    horizon = cfg.kappa * T
    paths = tuple(simulate(net, theta, horizon, g) for g in as_generator(rng).spawn(cfg.M))
    index = {}
    for path_id, path in enumerate(paths):
        for t, state in zip(path.jump_times, path.states):
            visits = index.setdefault(state, [])
            if not visits or visits[-1][0] != path_id:
                visits.append((path_id, t))
    return AuxPathStore(paths=paths, horizon=horizon, index=index)


def _estimate_psi(store, net, theta, f, x, t, fallback_rng):
    if t == 0:
        return f(x), None
    visits = store.visits(x, t)
    if visits:
        return sum(f(store.paths[p].state_at(visit + t)) for p, visit in visits) / len(visits), None
    path = simulate(net, theta, t, fallback_rng, x0=x)
    return f(path.final_state), path


def _estimate_I(store, net, theta, f, x, t, fallback_rng):
    if t == 0:
        return 0.0, None
    visits = store.visits(x, t)
    if visits:
        return sum(store.paths[p].integral(f, visit, visit + t) for p, visit in visits) / len(visits), None
    path = simulate(net, theta, t, fallback_rng, x0=x)
    return path.integral(f, 0.0, t), path


def estimate_psi(store, net, theta, f, x, t, fallback_rng):
    """Ψ̂_θ(x, f, t): average of f over the auxiliary paths t after their first visit to x,
    or f at the end of one fresh path from x when no auxiliary path qualifies."""
    return _estimate_psi(store, net, theta, f, tuple(x), t, fallback_rng)[0]


def estimate_I(store, net, theta, f, x, t, fallback_rng):
    """Î_θ(x, f, t): as estimate_psi, with the exact time integral of f over the window."""
    return _estimate_I(store, net, theta, f, tuple(x), t, fallback_rng)[0]


class AuxPathRProvider:
    """Estimated Ψ̂/Î from an auxiliary store that is built on first use."""
    kind = "apa-estimated"

    def __init__(self, net, theta, f, T, cfg, rng):
        self.net = net
        self.theta = theta
        self.f = f
        self.T = T
        self.cfg = cfg
        self.store_rng, self.fallback_rng = as_generator(rng).spawn(2)
        self._store = None
        self.n_fallbacks = 0
        self.fallback_jumps = 0

    @property
    def store(self):
        if self._store is None:
            self._store = build_aux_store(self.net, self.theta, self.T, self.cfg, self.store_rng)
        return self._store

    @property
    def aux_jump_count(self):
        return self._store.jump_count if self._store is not None else 0

    def _count(self, result):
        value, fallback_path = result
        if fallback_path is not None:
            self.n_fallbacks += 1
            self.fallback_jumps += fallback_path.n_jumps
        return value

    def psi(self, x, t):
        if t == 0:
            return self.f(x)
        return self._count(_estimate_psi(self.store, self.net, self.theta, self.f, x, t, self.fallback_rng))

    def I(self, x, t):
        if t == 0:
            return 0.0
        return self._count(_estimate_I(self.store, self.net, self.theta, self.f, x, t, self.fallback_rng))


@dataclass(frozen=True)
class SampleScore:
    value: float
    eta: int = 0
    n_queries: int = 0
    n_fallbacks: int = 0
    aux_jump_count: int = 0
    base_jumps: int = 0
    fallback_jumps: int = 0

    @property
    def jumps(self):
        return self.base_jumps + self.aux_jump_count + self.fallback_jumps

    def to_json(self):
        return json.dumps({
            "score": self.value,
            "eta": self.eta,
            "n_queries": self.n_queries,
            "n_fallbacks": self.n_fallbacks,
            "aux_jump_count": self.aux_jump_count,
        }, sort_keys=True)


def _exact_score(net, f, T, traj, provider):
    base = base_path_decompose(traj, T)
    value = pathwise_integral_term(traj, net, f, T, base=base)
    for x, sigma in zip(base.states, base.times):
        for k, weight in enumerate(dtheta_weights(net, x)):
            if weight:
                value += weight * provider.R(x, T - sigma, k)
    return SampleScore(value=value, eta=base.eta, base_jumps=traj.n_jumps)


def score_sample(net, f, T, traj, provider, rng):
    """
    One sample of the sensitivity score from a base path at θ = net.theta.

    With an analytic provider the exact per-path score is returned. Otherwise the
    estimable form is assembled: holding-time corrections and Ψ̂ differences at the
    randomized times α_i for every visited non-absorbing state, and Î on the absorbing
    branch for the last state before T.

    Returns
    -------
    SampleScore
    """
    if provider.kind == "analytic":
        return _exact_score(net, f, T, traj, provider)

    base = base_path_decompose(traj, T)
    rates = net.rate_constants(net.theta)
    generator = as_generator(rng)
    ledger = QueryLedger()
    value = 0.0
    for i, (x, sigma, dt) in enumerate(zip(base.states, base.times, base.dt)):
        weights = dtheta_weights(net, x)
        if not any(weights):
            continue
        lam0 = sum(propensities(net, x, rates))
        if lam0 > 0.0:
            alpha = draw_alpha(net, x, net.theta, T, sigma, generator)
            for k, weight in enumerate(weights):
                if not weight:
                    continue
                zeta = net.stoich[k]
                value += weight * _increment(f, x, zeta) * (dt - 1.0 / lam0)
                ledger.add(PsiQuery(_shift(x, zeta), alpha, (i, k, "shifted")), weight / lam0)
                ledger.add(PsiQuery(x, alpha, (i, k, "current")), -weight / lam0)
        else:
            # absorbing: only possible for the last state before T
            fx = f(x)
            for k, weight in enumerate(weights):
                if not weight:
                    continue
                value -= weight * dt * fx
                ledger.add(IQuery(_shift(x, net.stoich[k]), dt, (i, k, "integral")), weight)
    ledger.resolve(provider)
    value += ledger.total()
    return SampleScore(
        value=value,
        eta=base.eta,
        n_queries=len(ledger.entries),
        n_fallbacks=getattr(provider, "n_fallbacks", 0),
        aux_jump_count=getattr(provider, "aux_jump_count", 0),
        base_jumps=traj.n_jumps,
        fallback_jumps=getattr(provider, "fallback_jumps", 0),
    )


def run_apa_sample(net, f, T, cfg, rng):
    """One full Auxiliary Path Algorithm realization: base path, ledger, auxiliary store, score."""
    base_rng, alpha_rng, provider_rng = as_generator(rng).spawn(3)
    traj = simulate(net, net.theta, T, base_rng)
    provider = AuxPathRProvider(net, net.theta, f, T, cfg, provider_rng)
    return score_sample(net, f, T, traj, provider, alpha_rng)
