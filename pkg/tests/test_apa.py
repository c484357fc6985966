import json
import math

import numpy as np
import pytest

from scipy.integrate import quad

from utils.apa import (
    APAConfig,
    AuxPathRProvider,
    IQuery,
    ProviderError,
    PsiQuery,
    QueryLedger,
    base_path_decompose,
    build_aux_store,
    draw_alpha,
    estimate_I,
    estimate_psi,
    pathwise_integral_term,
    run_apa_sample,
    score_sample,
)
from utils.methods import estimate_sensitivity
from utils.model import load_model, make_network
from utils.oracle import analytic_provider, mean_sensitivity_ode, sensitivity_closed_form
from utils.sim import RngStream, Trajectory, simulate


@pytest.fixture
def birth_death():
    return load_model("birth-death")


@pytest.fixture
def pure_birth():
    return load_model("pure-birth")


def _staircase():
    return Trajectory(
        jump_times=(0.0, 1.0, 3.0),
        states=((0,), (1,), (2,)),
        reaction_ids=(0, 0),
        t_end=4.0,
        absorbed=False,
        n_jumps=2,
        final_state=(2,),
    )


def test_apa_config_validation():
    assert APAConfig() == APAConfig(M=50, kappa=3.0)
    with pytest.raises(ValueError):
        APAConfig(M=0)
    with pytest.raises(ValueError):
        APAConfig(kappa=0.5)


def test_base_path_decompose():
    base = base_path_decompose(_staircase(), 2.0)
    assert base.eta == 1
    assert base.dt == (1.0, 1.0)
    assert base.states == ((0,), (1,))

    # a jump exactly at T belongs to the next segment
    base = base_path_decompose(_staircase(), 3.0)
    assert base.eta == 1
    assert base.dt == (1.0, 2.0)

    empty = base_path_decompose(_staircase(), 0.0)
    assert empty.eta == -1
    assert empty.dt == ()


def test_pathwise_integral_term(birth_death, pure_birth):
    traj = simulate(pure_birth.network, 0.3, 5.0, RngStream(1))
    assert pathwise_integral_term(traj, pure_birth.network, pure_birth.observable, 5.0) == pytest.approx(5.0)

    net, f = birth_death.network, birth_death.observable
    traj = simulate(net, 0.1, 5.0, RngStream(2))
    assert pathwise_integral_term(traj, net, f, 5.0) == pytest.approx(-traj.integral(f, 0.0, 5.0))


def test_draw_alpha(birth_death):
    net = birth_death.network
    rng = np.random.default_rng(0)
    alphas = [draw_alpha(net, (3,), 0.1, 5.0, 1.0, rng) for _ in range(200)]
    assert all(0.0 <= a <= 4.0 for a in alphas)
    assert min(alphas) < 4.0

    absorbing = make_network(["A"], [({"A": 1}, {}, "k")], {"k": 1.0}, "k", [0])
    with pytest.raises(ValueError, match="absorbing"):
        draw_alpha(absorbing, (0,), 1.0, 5.0, 0.0, rng)


def test_analytic_R_matches_quadrature(birth_death):
    net, f = birth_death.network, birth_death.observable
    for theta in (0.1, 0.01, 1.0):
        provider = analytic_provider(net.with_theta(theta), f)
        for x in ((0,), (3,)):
            lam0 = 1.0 + theta * x[0]
            for k, zeta in enumerate(net.stoich):
                shifted = (x[0] + zeta[0],)
                for t in (0.5, 5.0):
                    def integrand(s):
                        return (provider.psi(shifted, s) - provider.psi(x, s) - zeta[0]) * math.exp(-lam0 * (t - s))

                    expected, _ = quad(integrand, 0.0, t, epsabs=1e-12, epsrel=1e-10)
                    assert provider.R(x, t, k) == pytest.approx(expected, rel=1e-7, abs=1e-10)

                expected, _ = quad(lambda s: provider.psi(x, s), 0.0, 5.0, epsabs=1e-12, epsrel=1e-10)
                assert provider.I(x, 5.0) == pytest.approx(expected, rel=1e-9)


def test_pure_birth_exact_score_is_T(pure_birth):
    net, f = pure_birth.network, pure_birth.observable
    for theta in (0.1, 0.0):
        for T in (1.0, 10.0):
            report = estimate_sensitivity("apa-exact", net.with_theta(theta), f, T, seed=3)
            assert report.estimate == pytest.approx(T, abs=1e-12)
            assert report.sample_variance < 1e-20
            assert report.n == 100
            assert report.converged


def test_birth_death_exact_score_variance(birth_death):
    net, f = birth_death.network, birth_death.observable
    report = estimate_sensitivity("apa-exact", net, f, 1.0, seed=5, fixed_n=20000)
    assert report.sample_variance == pytest.approx(0.2905, rel=0.2)
    expected = sensitivity_closed_form("birth-death", 0.1, 1.0)
    assert abs(report.estimate - expected) < 4 * math.sqrt(report.sample_variance / report.n)


def test_ledger_deduplicates_and_completes():
    calls = []

    class Counting:
        def psi(self, x, t):
            calls.append((x, t))
            return float(x[0])

        def I(self, x, t):
            return 10.0

    ledger = QueryLedger()
    ledger.add(PsiQuery((2,), 0.5, (0, 0, "shifted")), 2.0)
    ledger.add(PsiQuery((2,), 0.5, (1, 0, "current")), -1.0)
    ledger.add(IQuery((2,), 0.5, (2, 1, "integral")), 3.0)
    assert not ledger.complete
    with pytest.raises(ValueError):
        ledger.add(PsiQuery((5,), 1.0, (0, 0, "shifted")), 1.0)

    ledger.resolve(Counting())
    assert ledger.complete
    assert calls == [((2,), 0.5)]
    assert ledger.n_estimates == 2
    assert ledger.total() == pytest.approx(2.0 * 2 - 2.0 + 30.0)


def test_provider_failure_names_the_slot():
    class Broken:
        def psi(self, x, t):
            raise RuntimeError("no paths")

    ledger = QueryLedger()
    ledger.add(PsiQuery((1,), 0.25, (4, 1, "current")), 1.0)
    with pytest.raises(ProviderError, match=r"slot \(i=4, k=1\).*no paths"):
        ledger.resolve(Broken())


def test_aux_store_records_first_visits(birth_death):
    net = birth_death.network
    store = build_aux_store(net, 0.1, 2.0, APAConfig(M=5), RngStream(8))
    assert store.horizon == pytest.approx(6.0)
    assert len(store.paths) == 5
    for state, visits in store.index.items():
        path_ids = [p for p, _ in visits]
        assert len(path_ids) == len(set(path_ids))
        for p, t in visits:
            path = store.paths[p]
            assert path.state_at(t) == state
            first = path.states.index(state)
            assert path.jump_times[first] == t


def test_estimates_are_conditionally_unbiased(birth_death):
    net, f = birth_death.network, birth_death.observable
    exact = analytic_provider(net, f)
    x, t = (2,), 1.0
    cfg = APAConfig(M=10)
    psi, integral = [], []
    for i in range(300):
        store_rng, fallback_rng = RngStream(12, i).generator().spawn(2)
        store = build_aux_store(net, 0.1, 2.0, cfg, store_rng)
        psi.append(estimate_psi(store, net, 0.1, f, x, t, fallback_rng))
        integral.append(estimate_I(store, net, 0.1, f, x, t, fallback_rng))
    for values, expected in ((psi, exact.psi(x, t)), (integral, exact.I(x, t))):
        se = np.std(values, ddof=1) / math.sqrt(len(values))
        assert abs(np.mean(values) - expected) < 4 * se


def test_unvisited_state_falls_back_to_a_fresh_path(birth_death):
    net, f = birth_death.network, birth_death.observable
    provider = AuxPathRProvider(net, 0.1, f, 1.0, APAConfig(M=3), RngStream(1))
    value = provider.psi((60,), 0.5)
    assert provider.n_fallbacks == 1
    assert provider.fallback_jumps >= 0
    assert 40 <= value <= 70
    assert provider.psi((60,), 0.0) == 60.0
    assert provider.I((60,), 0.0) == 0.0
    assert provider.n_fallbacks == 1


def test_score_sample_uses_the_exact_path_with_analytic_R(birth_death):
    net, f = birth_death.network, birth_death.observable
    traj = simulate(net, 0.1, 5.0, RngStream(3))
    score = score_sample(net, f, 5.0, traj, analytic_provider(net, f), RngStream(4))
    assert score.n_queries == 0
    assert score.eta == len(traj.jump_times) - 1
    assert math.isfinite(score.value)


def test_apa_sample_counts(birth_death):
    net, f = birth_death.network, birth_death.observable
    score = run_apa_sample(net, f, 5.0, APAConfig(M=10), RngStream(6))
    assert score.aux_jump_count > 0
    assert score.jumps >= score.aux_jump_count
    assert set(json.loads(score.to_json())) == {"score", "eta", "n_queries", "n_fallbacks", "aux_jump_count"}


def test_apa_is_unbiased_on_birth_death(birth_death):
    net, f = birth_death.network, birth_death.observable
    report = estimate_sensitivity("apa", net, f, 5.0, seed=21, M=20)
    assert report.converged
    expected = sensitivity_closed_form("birth-death", 0.1, 5.0)
    assert abs(report.estimate - expected) < 4 * report.ci_half / 1.96


def test_apa_at_theta_zero(birth_death):
    net, f = birth_death.network.with_theta(0.0), birth_death.observable
    report = estimate_sensitivity("apa", net, f, 5.0, seed=22, M=20, fixed_n=400)
    assert abs(report.estimate - (-12.5)) < 4 * math.sqrt(report.sample_variance / report.n)


def test_apa_on_gene_expression_at_theta_zero():
    gene = load_model("gene-expression")
    net, f = gene.network.with_theta(0.0), gene.observable
    report = estimate_sensitivity("apa", net, f, 5.0, seed=23, M=20, fixed_n=1500)
    expected = mean_sensitivity_ode(net, f, 5.0)
    assert expected < 0
    assert abs(report.estimate - expected) < 4 * math.sqrt(report.sample_variance / report.n)
