import math

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from utils.apa import AnalyticRProvider
from utils.logger import log, YELLOW, ENDC
from utils.model import Observable, mass_action

SERIES_THRESHOLD = 1e-8
MAX_CME_STATES = 10**5
MAX_ESCAPED_MASS = 1e-8

EXAMPLES = ("pure-birth", "birth-death")


class OracleError(ValueError):
    pass


def _phi(z, t):
    """(1 - e^{-z t}) / z, equal to t at z = 0."""
    if z == 0:
        return t
    return -math.expm1(-z * t) / z


def _phi_integral(z, t):
    """(t - _phi(z, t)) / z = ∫_0^t _phi(z, s) ds, with its small-z series."""
    if abs(z * t) < 1e-6:
        return t * t / 2 - z * t**3 / 6
    return (t - _phi(z, t)) / z


def mean_closed_form(example, theta, T, birth_rate=1.0, x0=0):
    """E X(T) for the pure-birth (rate θ) and birth-death (birth_rate, death θ) processes."""
    if example == "pure-birth":
        return x0 + theta * T
    if example == "birth-death":
        return x0 * math.exp(-theta * T) + birth_rate * _phi(theta, T)
    raise OracleError(f"No closed form for '{example}', expected one of {', '.join(EXAMPLES)}")


def sensitivity_closed_form(example, theta, T, birth_rate=1.0):
    """∂/∂θ E X(T) from X(0) = 0 for the closed-form examples."""
    if theta < 0:
        raise OracleError(f"θ must be non-negative, got {theta}")
    if example == "pure-birth":
        return T
    if example == "birth-death":
        if theta < SERIES_THRESHOLD:
            return birth_rate * (-T**2 / 2 + theta * T**3 / 3 - theta**2 * T**4 / 8)
        return birth_rate * (theta * T * math.exp(-theta * T) + math.expm1(-theta * T)) / theta**2
    raise OracleError(f"No closed form for '{example}', expected one of {', '.join(EXAMPLES)}")


def classify(net):
    """Name of the closed-form example a network matches structurally, or None."""
    if net.d != 1:
        return None
    sensitive = net.params.sensitive
    shapes = [(dict(r.reactants), dict(r.products), r.rate_param == sensitive) for r in net.reactions]
    name = net.species_names[0]
    birth = ({}, {name: 1})
    death = ({name: 1}, {})
    if len(shapes) == 1 and shapes[0] == birth + (True,):
        return "pure-birth"
    if len(shapes) == 2 and sorted(shapes, key=lambda s: s[2]) == [birth + (False,), death + (True,)]:
        return "birth-death"
    return None


def analytic_provider(net, f):
    """
    Exact Ψ_θ, R_θ, I_θ for the pure-birth and birth-death networks with an affine observable.

    Raises
    ------
    OracleError
        When the network has no closed form or f is not an Observable.
    """
    example = classify(net)
    if example is None:
        raise OracleError("Analytic R is only available for the pure-birth and birth-death networks")
    if not isinstance(f, Observable):
        raise OracleError("Analytic R needs an affine Observable")
    c, offset = f.coeffs[0], f.offset
    theta = net.theta

    if example == "pure-birth":
        return AnalyticRProvider(
            psi=lambda x, t: c * (x[0] + theta * t) + offset,
            R=lambda x, t, k: 0.0,
            I=lambda x, t: c * (x[0] * t + theta * t * t / 2) + offset * t,
        )

    birth_k = next(k for k, r in enumerate(net.reactions) if r.rate_param != net.params.sensitive)
    b = net.params.values[net.reactions[birth_k].rate_param]

    def psi(x, t):
        return c * (x[0] * math.exp(-theta * t) + b * _phi(theta, t)) + offset

    def R(x, t, k):
        lam0 = b + theta * x[0]
        # ∫_0^t (1 - e^{-θ s}) e^{-λ0 (t - s)} ds for the death channel
        death = _phi(lam0, t) - math.exp(-theta * t) * _phi(lam0 - theta, t)
        return c * (-death if k == birth_k else death)

    def I(x, t):
        return c * (x[0] * _phi(theta, t) + b * _phi_integral(theta, t)) + offset * t

    return AnalyticRProvider(psi=psi, R=R, I=I)


@dataclass(frozen=True)
class MomentODE:
    """
    First-moment system dμ/dt = A μ + b of an affine-propensity network, with its
    θ-derivative dμ_θ/dt = A μ_θ + dA μ + db.
    """
    A: np.ndarray
    b: np.ndarray
    dA: np.ndarray
    db: np.ndarray

    def rhs(self, t, y):
        d = len(self.b)
        mu, mu_theta = y[:d], y[d:]
        return np.concatenate([self.A @ mu + self.b, self.A @ mu_theta + self.dA @ mu + self.db])


def moment_system(net, theta=None):
    theta = net.theta if theta is None else theta
    d = net.d
    A, dA = np.zeros((d, d)), np.zeros((d, d))
    b, db = np.zeros(d), np.zeros(d)
    rates = net.rate_constants(theta)
    for k, (reaction, terms) in enumerate(zip(net.reactions, net.terms)):
        zeta = np.array(net.stoich[k], dtype=float)
        sensitive = 1.0 if k in net.sensitive_reactions else 0.0
        if reaction.order == 0:
            b += rates[k] * zeta
            db += sensitive * zeta
        elif reaction.order == 1:
            j = terms[0][0]
            A[:, j] += rates[k] * zeta
            dA[:, j] += sensitive * zeta
        else:
            raise OracleError(f"Moment equations need affine propensities; reaction {k} has order {reaction.order}")
    return MomentODE(A=A, b=b, dA=dA, db=db)


def _integrate_moments(net, T, tol, theta=None):
    system = moment_system(net, theta)
    d = net.d
    y0 = np.concatenate([np.asarray(net.x0, dtype=float), np.zeros(d)])
    if T == 0:
        return y0[:d], y0[d:]
    solution = solve_ivp(system.rhs, (0.0, T), y0, method="DOP853", rtol=tol, atol=tol)
    if not solution.success:
        raise OracleError(f"Moment ODE integration failed: {solution.message}")
    y = solution.y[:, -1]
    return y[:d], y[d:]


def mean_ode(net, f, T, tol=1e-10, theta=None):
    """E f(X(T)) from the moment equations."""
    mu, _ = _integrate_moments(net, T, tol, theta)
    return float(np.dot(f.coeffs, mu) + f.offset)


def mean_sensitivity_ode(net, f, T, tol=1e-10):
    """∂/∂θ E f(X(T)) = <coeffs, μ_θ(T)> for networks with affine propensities."""
    _, mu_theta = _integrate_moments(net, T, tol)
    return float(np.dot(f.coeffs, mu_theta))


def finite_difference_ode(net, f, T, h, tol=1e-12):
    """Exact target of the forward finite-difference estimators: (E f(X_{θ+h}(T)) - E f(X_θ(T))) / h."""
    theta = net.theta
    return (mean_ode(net, f, T, tol, theta + h) - mean_ode(net, f, T, tol, theta)) / h


@dataclass(frozen=True)
class CmeResult:
    mean: float
    sensitivity: float
    truncated_mass: float
    escaped_mass: float
    n_states: int


def _enumerate_states(net, cap):
    caps = [cap] * net.d if np.isscalar(cap) else list(cap)
    start = tuple(net.x0)
    if any(v > c for v, c in zip(start, caps)):
        raise OracleError(f"Initial state {start} exceeds the state cap {caps}")
    index = {start: 0}
    states = [start]
    queue = deque([start])
    while queue:
        x = queue.popleft()
        for k, terms in enumerate(net.terms):
            if mass_action(terms, x) == 0.0:
                continue
            y = tuple(a + z for a, z in zip(x, net.stoich[k]))
            if y in index or any(v > c for v, c in zip(y, caps)):
                continue
            index[y] = len(states)
            states.append(y)
            if len(states) > MAX_CME_STATES:
                raise OracleError(f"More than {MAX_CME_STATES} states under cap {caps}")
            queue.append(y)
    return states, index


def _generator_matrix(net, states, index, theta):
    n = len(states)
    sink = n
    rows, cols, values = [], [], []
    rates = net.rate_constants(theta)
    for i, x in enumerate(states):
        for k, terms in enumerate(net.terms):
            a = rates[k] * mass_action(terms, x)
            if a == 0.0:
                continue
            y = tuple(v + z for v, z in zip(x, net.stoich[k]))
            rows += [index.get(y, sink), i]
            cols += [i, i]
            values += [a, -a]
    return sparse.csc_matrix((values, (rows, cols)), shape=(n + 1, n + 1))


def _cme_mean(net, f, T, theta, states, index):
    p0 = np.zeros(len(states) + 1)
    p0[0] = 1.0
    Q = _generator_matrix(net, states, index, theta)
    p = expm_multiply(Q * T, p0) if T > 0 and Q.nnz else p0
    values = np.array([f(x) for x in states])
    return float(values @ p[:-1]), float(p[:-1].sum()), float(p[-1])


def cme_bruteforce(net, f, T, theta=None, state_cap=50):
    """
    E f(X(T)) and its θ-derivative from the truncated master equation.

    States with a component above state_cap are lumped into one absorbing sink whose
    mass is reported as escaped. The derivative is a centered difference with step
    1e-6 · max(θ, 1) (second-order one-sided near θ = 0).

    Raises
    ------
    OracleError
        When more than 1e-8 of the probability mass escapes the truncation.
    """
    theta = net.theta if theta is None else theta
    states, index = _enumerate_states(net, state_cap)
    mean, truncated, escaped = _cme_mean(net, f, T, theta, states, index)
    if escaped > MAX_ESCAPED_MASS:
        log(f"{YELLOW}Truncated CME lost {escaped:.3g} of the probability mass at cap {state_cap}{ENDC}")
        raise OracleError(f"State cap {state_cap} too small: escaped mass {escaped:.3g} > {MAX_ESCAPED_MASS}")

    delta = 1e-6 * max(theta, 1.0)
    if theta >= delta:
        hi = _cme_mean(net, f, T, theta + delta, states, index)[0]
        lo = _cme_mean(net, f, T, theta - delta, states, index)[0]
        sensitivity = (hi - lo) / (2 * delta)
    else:
        one = _cme_mean(net, f, T, theta + delta, states, index)[0]
        two = _cme_mean(net, f, T, theta + 2 * delta, states, index)[0]
        sensitivity = (-3 * mean + 4 * one - two) / (2 * delta)
    return CmeResult(
        mean=mean, sensitivity=sensitivity, truncated_mass=truncated, escaped_mass=escaped, n_states=len(states)
    )
