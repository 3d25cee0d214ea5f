import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import K_oracle, V_oracle, input_entropy_oracle, xi_oracle
from stqrng.completeness import with_calibrated_delta
from stqrng.core import ScoreDistribution, honest_score_distribution, table2_distribution
from stqrng.eat import (
    BETA_MAX,
    BETA_MIN,
    ErrorBudget,
    _smooth_rate,
    asymptotic_rate,
    correction_term_K,
    input_entropy,
    input_length,
    net_rate,
    optimize_beta,
    optimize_rate,
    output_length,
    qaep_xi,
    rate_at_beta,
    single_round_h,
    smooth_minentropy_bound_k,
    tilde_omega,
    variance_term_V,
)
from stqrng.sdp.guessing import DualCertificate

# -- budget --------------------------------------------------------------------------------


def test_budget_defaults_split_eps_s():
    b = ErrorBudget()
    assert b.eps_1 == b.eps_2 == b.eps_s / 4
    assert b.chain_slack > 0


def test_soundness_from_budget():
    # reported as computed; the listed 1e-6 does not follow from the listed parts
    assert ErrorBudget().eps_sou == pytest.approx(2 * 4.99e-7 + 1e-6, rel=1e-12)
    assert ErrorBudget().eps_sou == pytest.approx(1.998e-6, rel=1e-12)


@pytest.mark.parametrize("kw", [
    dict(eps_s=1e-6, eps_1=4e-7, eps_2=3e-7),  # chain-rule argument negative
    dict(eps_2=2e-6, eps_EA=1e-6, eps_s=1e-5),  # eps_2 >= eps_EA
    dict(eps_ext=0.0),
])
def test_budget_rejects(kw):
    with pytest.raises(ValueError):
        ErrorBudget(**kw)


def test_budget_json_round_trip():
    b = ErrorBudget(eps_s=1e-6, eps_ext=1e-8)
    assert ErrorBudget.from_json(b.to_json()) == b


# -- shifted distribution -------------------------------------------------------------------


def _cats(table1):
    return table1.score_layout.categories


def test_tilde_omega_zero_delta(table1):
    om = honest_score_distribution(table1)
    lam = {c: float(i) for i, c in enumerate(_cats(table1))}
    tw = tilde_omega(om, lam, _cats(table1))
    for c in _cats(table1):
        assert tw.omega[c] == pytest.approx(om.omega[c], abs=1e-16)


def test_tilde_omega_constant_lambda_tie_break(table1):
    dist, _ = table2_distribution()
    cats = _cats(table1)
    tw = tilde_omega(dist, {c: 0.3 for c in cats}, cats)
    first = cats[0]
    assert tw.omega[first] < dist.omega[first]
    for c in cats[1:]:
        assert tw.omega[c] == pytest.approx(dist.omega[c] + dist.delta[c], abs=1e-17)


def test_tilde_omega_preserves_total(honest_level2, table1):
    dist, _ = table2_distribution()
    cats = _cats(table1)
    tw = tilde_omega(dist, honest_level2.certificate.lam, cats)
    assert math.fsum(tw.omega.values()) == pytest.approx(math.fsum(dist.omega.values()), abs=1e-15)
    lam = honest_level2.certificate.lam
    c_min = min(cats, key=lambda c: (lam[c], cats.index(c)))
    assert tw.omega[c_min] == pytest.approx(dist.omega[c_min] - sum(dist.delta[c] for c in cats if c != c_min))


def test_tilde_omega_negative_is_error(table1):
    cats = _cats(table1)
    om = {c: 1.0 / len(cats) for c in cats}
    dist = ScoreDistribution(om, {c: 0.1 for c in cats})
    with pytest.raises(ValueError):
        tilde_omega(dist, {c: 0.0 for c in cats}, cats)


def test_tilde_omega_needs_all_lambdas(table1):
    cats = _cats(table1)
    with pytest.raises(ValueError):
        tilde_omega(honest_score_distribution(table1), {cats[0]: 1.0}, cats)


# -- single-round entropy ---------------------------------------------------------------------


def _cert(alpha, lam):
    return DualCertificate(alpha, lam, 2, "test")


def test_h_trivial_certificate(table1):
    cats = _cats(table1)
    assert single_round_h(_cert(1.0, {c: 0.0 for c in cats}), honest_score_distribution(table1), 0.12) == 0.0


def test_h_arithmetic(table1):
    cats = _cats(table1)
    c = _cert(0.75, {k: 0.0 for k in cats})
    assert single_round_h(c, honest_score_distribution(table1), 0.12) == pytest.approx(0.44, abs=1e-15)
    assert single_round_h(c, honest_score_distribution(table1), 1 - 1e-12) == pytest.approx(0.0, abs=1e-11)


def test_h_clamped_and_flagged(table1):
    cats = _cats(table1)
    c = _cert(1.2, {k: 0.0 for k in cats})
    tw = honest_score_distribution(table1)
    assert single_round_h(c, tw, 0.12) == 0.0
    rep = rate_at_beta(1e8, 1e-4, c, tw, table1, ErrorBudget())
    assert "nonpositive_h" in rep.flags
    assert rep.h == 0.0 and rep.h_raw < 0


# -- V, K, xi ---------------------------------------------------------------------------------


def test_V_examples():
    assert variance_term_V(0.5, 3, [0.2, 0.2]) == pytest.approx(V_oracle(0.5, 3, 0.0), rel=1e-13)
    assert variance_term_V(0.5, 3, [0.2, 0.2]) == pytest.approx(9.0663, abs=1e-4)
    assert variance_term_V(0.12, 3, [0.0, 1.0]) == pytest.approx(V_oracle(0.12, 3, 1.0), rel=1e-13)
    assert variance_term_V(0.12, 3, [0.0, 1.0]) == pytest.approx(27.91, abs=5e-3)


@given(st.floats(0.01, 0.99), st.integers(1, 6), st.floats(0, 5), st.floats(0, 5))
def test_V_increasing_in_span(gamma, m, a, b):
    lo, hi = sorted([a, b])
    assert variance_term_V(gamma, m, [0, lo]) <= variance_term_V(gamma, m, [0, hi])
    assert variance_term_V(gamma, m, [0, lo]) > 0


@given(st.floats(1e-6, 0.99), st.floats(0.01, 0.99), st.integers(1, 6), st.floats(0, 3))
def test_K_matches_oracle(beta, gamma, m, dl):
    assert correction_term_K(beta, gamma, m, [0, dl]) == pytest.approx(K_oracle(beta, gamma, m, dl), rel=1e-11)


def test_K_small_beta_limit():
    lim = float(mpmath.log(2 + mpmath.e**2) ** 3 / (6 * mpmath.log(2)))
    assert correction_term_K(1e-12, 0.3, 1, [0.5, 0.5]) == pytest.approx(lim, rel=1e-10)


def test_K_increasing_in_beta():
    betas = np.linspace(1e-6, 0.9, 500)
    K = [correction_term_K(b, 0.12, 3, [0, 1.3]) for b in betas]
    assert np.all(np.diff(K) > 0)


def test_K_near_one_is_finite():
    K = correction_term_K(0.999, 0.12, 3, [0, 1.0])
    assert math.isfinite(K) and K > 1e8
    with pytest.raises(ValueError):
        correction_term_K(1.0, 0.12, 3, [0, 1.0])


def test_xi_examples():
    assert qaep_xi(0.5, 1) == pytest.approx(xi_oracle(0.5, 1), rel=1e-13)
    assert qaep_xi(0.5, 1) == pytest.approx(8.0434, abs=1e-4)
    assert qaep_xi(2.5e-7, 3) == pytest.approx(xi_oracle(2.5e-7, 3), rel=1e-13)
    assert qaep_xi(2.5e-7, 3) == pytest.approx(49.571, abs=1e-3)


@given(st.floats(1e-12, 0.5), st.floats(1e-12, 0.5))
def test_xi_grows_as_eps_shrinks(a, b):
    lo, hi = sorted([a, b])
    assert qaep_xi(lo, 3) >= qaep_xi(hi, 3) > 0


# -- lengths ----------------------------------------------------------------------------------


def test_input_entropy():
    assert input_entropy(0.5) == 2.0
    assert input_entropy(0.12) == pytest.approx(input_entropy_oracle(0.12), rel=1e-14)
    assert input_entropy(0.12) == pytest.approx(0.76937, abs=1e-5)
    assert input_length(3e10, 0.12) == pytest.approx(2.3081e10, rel=1e-4)


def test_output_length_boundary():
    pen = 2 * math.log2(1e6) - 2
    assert pen == pytest.approx(37.863, abs=1e-3)
    assert output_length(pen, 1e-6) == 0
    assert output_length(pen + 0.999, 1e-6) == 0
    assert output_length(pen + 1, 1e-6) == 1


def test_headline_rate_arithmetic():
    # a net rate of 5.11e-4 at n = 3e10 is 15.33 Mbit of net output
    assert net_rate(3e10, 2.3081e10 + 15.33e6, 2.3081e10) == pytest.approx(5.11e-4, rel=1e-3)


def test_k_without_rounds_is_negative():
    b = ErrorBudget()
    k = smooth_minentropy_bound_k(0, 0.0, 0.12, 10, 10, 40, 0.1, b)
    expect = -(1 - 2 * math.log2(b.eps_EA * b.eps_1)) / 0.1 - math.log2(2 / b.chain_slack)
    assert k == pytest.approx(expect, rel=1e-14) and k < 0


# -- finite-size rate at the reference point ------------------------------------------------------


@pytest.fixture(scope="module")
def omega_tilde(table1, honest_level2):
    dist = with_calibrated_delta(table1.n_rounds, table1.gamma, honest_score_distribution(table1), 1e-3)
    return tilde_omega(dist, honest_level2.certificate.lam, table1.score_layout.categories)


def _k_oracle(n, beta, cert, tw, gamma, m, b):
    """Independent high-precision evaluation of the smooth min-entropy bound."""
    mp = mpmath.mp
    with mp.workprec(200):
        n, beta, g = mpmath.mpf(n), mpmath.mpf(beta), mpmath.mpf(gamma)
        lam = list(cert.lam.values())
        dl = mpmath.mpf(max(lam)) - mpmath.mpf(min(lam))
        bound = mpmath.mpf(cert.alpha) + mpmath.fsum(mpmath.mpf(cert.lam[c]) * mpmath.mpf(w) for c, w in tw.omega.items())
        h = 2 * (1 - g) * (1 - bound)
        h2 = -g * mpmath.log(g, 2) - (1 - g) * mpmath.log(1 - g, 2)
        V = mpmath.log(2) / 2 * (mpmath.log(4 * m + 1, 2) + mpmath.sqrt(2 + 4 * (1 - g) ** 2 * dl**2 / g)) ** 2
        e = mpmath.log(2 * m, 2) + 2 * (1 - g) * dl
        K = 2 ** (beta * e) / (6 * mpmath.log(2) * (1 - beta) ** 3) * mpmath.log(2**e + mpmath.e**2) ** 3
        xi = 2 * mpmath.log(1 + 4 * m, 2) * mpmath.sqrt(1 - 2 * mpmath.log(b.eps_2, 2))
        return (n * (h + h2 + 2 * g) - n * (beta * V + beta**2 * K)
                - (1 - 2 * mpmath.log(mpmath.mpf(b.eps_EA) * b.eps_1, 2)) / beta
                - xi * mpmath.sqrt(n) - mpmath.log(2 / (mpmath.mpf(b.eps_s) - b.eps_2 - 2 * mpmath.mpf(b.eps_1)), 2))


def test_k_matches_independent_evaluation(table1, honest_level2, omega_tilde):
    cert, b = honest_level2.certificate, ErrorBudget()
    beta, rep = optimize_beta(3e10, cert, omega_tilde, table1, b)
    ref = _k_oracle(3e10, beta, cert, omega_tilde, table1.gamma, table1.m_x, b)
    assert rep.k_bound == pytest.approx(float(ref), rel=1e-9)


def test_beta_beats_grid(table1, honest_level2, omega_tilde):
    cert, b = honest_level2.certificate, ErrorBudget()
    beta, rep = optimize_beta(3e10, cert, omega_tilde, table1, b)
    h = single_round_h(cert, omega_tilde, table1.gamma)
    V = variance_term_V(table1.gamma, 3, cert.lam)
    xi = qaep_xi(b.eps_2, 3)

    def f(x):
        return _smooth_rate(x, 3e10, h, table1.gamma, V, 3, cert.lam, xi, b)

    grid = np.exp(np.linspace(math.log(BETA_MIN), math.log(BETA_MAX), 10_000))
    best = max(f(x) for x in grid)
    assert f(beta) >= best - 1e-10
    rng = np.random.default_rng(0)
    for x in np.exp(rng.uniform(math.log(BETA_MIN), math.log(BETA_MAX), 100)):
        assert f(beta) >= f(x)


def test_beta_scales_inverse_sqrt_n(table1, honest_level2, omega_tilde):
    ns = [1e8, 1e9, 1e10]
    betas = [optimize_beta(n, honest_level2.certificate, omega_tilde, table1, ErrorBudget())[0] for n in ns]
    slope = np.polyfit(np.log(ns), np.log(betas), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_rate_below_h_and_increasing_in_n(table1, honest_level2, omega_tilde):
    cert = honest_level2.certificate
    h = single_round_h(cert, omega_tilde, table1.gamma)
    rates = [optimize_beta(n, cert, omega_tilde, table1, ErrorBudget())[1].r_net for n in np.logspace(7, 13, 20)]
    assert all(r <= h for r in rates)
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    assert asymptotic_rate(cert, omega_tilde, table1.gamma) == h
    # finite-size curve approaches the asymptote from below
    assert h - rates[-1] < 0.1 * h
    assert rates[-1] > rates[0]


def test_positive_at_reference_point(table1, honest_level2, omega_tilde):
    _, rep = optimize_beta(3e10, honest_level2.certificate, omega_tilde, table1, ErrorBudget())
    assert rep.r_net > 0 and rep.ell_out > 0 and not rep.flags
    assert 0 < rep.beta < 1
    assert rep.r_net <= rep.h


@pytest.mark.parametrize("name", ["eps_s", "eps_1", "eps_2", "eps_EA", "eps_ext"])
def test_tighter_security_costs_rate(name, table1, honest_level2, omega_tilde):
    base = ErrorBudget()
    obj = base.to_json()
    # eps_s cannot halve below eps_2 + 2 eps_1; the rest halve (eps_ext then costs 2 whole bits of l)
    obj[name] = getattr(base, name) * (0.9 if name == "eps_s" else 0.5)
    tighter = ErrorBudget.from_json(obj)
    cert = honest_level2.certificate
    r0 = optimize_beta(3e10, cert, omega_tilde, table1, base)[1].r_net
    r1 = optimize_beta(3e10, cert, omega_tilde, table1, tighter)[1].r_net
    assert r1 < r0


def test_report_json(table1, honest_level2, omega_tilde):
    _, rep = optimize_beta(3e10, honest_level2.certificate, omega_tilde, table1, ErrorBudget())
    obj = rep.to_json()
    for key in ("h", "V", "K", "xi", "beta", "k_bound", "ell_out", "ell_in", "r_net", "epsilon_budget", "tilde_omega"):
        assert key in obj


# -- certificate mixed toward the trivial bound -------------------------------------------


@given(st.floats(0.0, 1.0), st.lists(st.floats(0.0, 1.0), min_size=7, max_size=7))
def test_toward_trivial_is_convex_combination(t, w):
    cats = list(table2_distribution()[0].omega)
    cert = DualCertificate(0.7, {c: v for c, v in zip(cats, np.linspace(-0.5, 0.4, len(cats)))}, 2, "x")
    omega = dict(zip(cats, w))
    assert cert.toward_trivial(t).bound(omega) == pytest.approx(t * cert.bound(omega) + (1 - t), abs=1e-12)


def test_toward_trivial_endpoints(honest_level2):
    cert = honest_level2.certificate
    assert cert.toward_trivial(1.0) == cert
    zero = cert.toward_trivial(0.0)
    assert zero.alpha == 1.0 and all(v == 0.0 for v in zero.lam.values())
    with pytest.raises(ValueError):
        cert.toward_trivial(1.5)


def test_optimize_rate_dominates_both_endpoints(table1, honest_level2, omega_tilde):
    cert = honest_level2.certificate
    for n in (1e8, 1e9, 3e10):
        p = table1.replace(n_rounds=n)
        _, rep = optimize_rate(n, cert, omega_tilde, p, ErrorBudget())
        full = optimize_beta(n, cert, omega_tilde, p, ErrorBudget())[1].r_net
        trivial = optimize_beta(n, cert.toward_trivial(0.0), omega_tilde, p, ErrorBudget())[1].r_net
        assert rep.r_net >= max(full, trivial)
        assert 0.0 <= rep.weight <= 1.0
    # well above threshold the full certificate is kept
    assert rep.weight == 1.0 and rep.r_net == full
