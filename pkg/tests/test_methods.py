import json

import pytest

from utils.bench import BenchSpec, run_bench
from utils.girsanov import InapplicableError
from utils.methods import (
    ApaSampler,
    FdSampler,
    GirsanovSampler,
    make_sampler,
    recommend_method,
)
from utils.model import load_model


def test_recommend_method():
    assert recommend_method(0.0) == "apa"
    assert recommend_method(0.001) == "apa"
    assert recommend_method(0.1) == "girsanov"
    assert recommend_method(0.1, bias_tolerated=True) == "cfd"
    assert recommend_method(0.01, theta_small=0.005) == "girsanov"
    with pytest.raises(ValueError):
        recommend_method(-1.0)


def test_make_sampler_dispatch():
    model = load_model("birth-death")
    net, f = model.network, model.observable
    assert isinstance(make_sampler("apa", net, f, 5.0, seed=0, M=10), ApaSampler)
    assert isinstance(make_sampler("girsanov", net, f, 5.0, seed=0), GirsanovSampler)
    sampler = make_sampler("crp", net, f, 5.0, seed=0)
    assert isinstance(sampler, FdSampler)
    assert sampler.cfg.h == pytest.approx(1e-3)
    assert sampler.cfg.coupling == "crp"
    with pytest.raises(ValueError, match="Unknown method"):
        make_sampler("bogus", net, f, 5.0, seed=0)


def test_apa_exact_only_for_closed_forms():
    gene = load_model("gene-expression")
    with pytest.raises(InapplicableError, match="apa-exact"):
        make_sampler("apa-exact", gene.network, gene.observable, 10.0, seed=0)


def test_samplers_are_deterministic_per_stream():
    model = load_model("birth-death")
    for method in ("apa", "girsanov", "cfd", "crn"):
        sampler = make_sampler(method, model.network, model.observable, 2.0, seed=3, M=5, h=0.05)
        assert sampler(17) == sampler(17)


def test_diagnostics_note():
    model = load_model("birth-death")
    sampler = make_sampler("apa", model.network, model.observable, 2.0, seed=3, M=5, diagnostics=True)
    value, jumps, note, fallbacks = sampler(0)
    assert json.loads(note)["n_fallbacks"] == fallbacks
    assert set(json.loads(note)) == {"score", "eta", "n_queries", "n_fallbacks", "aux_jump_count"}
    assert json.loads(note)["score"] == value
    assert jumps >= 0


def test_bench_spec_defaults():
    table3 = BenchSpec.default(3)
    assert 0.0 in table3.theta_grid
    assert table3.model == "gene-expression"
    assert BenchSpec.default(4).h_grid == (1e-2, 1e-3, 1e-4, 1e-5)
    assert BenchSpec.default(1, scale=0.001).samples == 100
    with pytest.raises(ValueError):
        BenchSpec(table=5, theta_grid=(0.1,), T_grid=(1.0,), methods=("apa",))
    with pytest.raises(ValueError):
        BenchSpec(table=2, theta_grid=(), T_grid=(1.0,), methods=("apa",))


def test_bench_table_one_reports_variance_ratios():
    spec = BenchSpec(1, (0.1,), (1.0,), ("girsanov", "apa-exact"), scale=0.02)
    rows = run_bench(spec, seed=1)
    assert [row["method"] for row in rows] == ["girsanov", "apa-exact"]
    assert all(row["n"] == 2000 for row in rows)
    assert rows[0]["variance_ratio"] == rows[1]["variance_ratio"] > 10
    assert all(row["error"] == "" for row in rows)


def test_bench_skips_girsanov_at_theta_zero():
    spec = BenchSpec(3, (0.0,), (1.0,), ("girsanov", "apa"), scale=1e-6)
    rows = run_bench(spec, seed=2)
    assert [row["method"] for row in rows] == ["apa"]
    assert rows[0]["oracle"] < 0
