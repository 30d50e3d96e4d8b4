import numpy as np
import pytest

from ltekge.exceptions import DomainError, SingularityError
from ltekge.grad_equivalence import (ANALYTIC, ConvEProbe, NeighborhoodLoss, analytic_grad_conve,
                                     analytic_grad_distmult, analytic_grad_transe_l1,
                                     analytic_grad_transe_l2, backprop_grad, certify,
                                     certify_formula, conve_score, decompose_neighborhood_gradient,
                                     distmult_neighbor_matrix, finite_difference_grad, log_score,
                                     neighborhood_from_triples, sample_probe, vector_rel_error)

D = 6


def rng_vectors(seed, d=D):
    rng = np.random.default_rng(seed)
    return rng.normal(size=d), rng.normal(size=d), rng.normal(size=d), rng.normal(size=(d, d)) / np.sqrt(d)


def test_l1_identity_positive_pattern():
    h = np.array([3.0, 2.0, 5.0])
    r = np.array([1.0, 1.0, 1.0])
    t = np.array([1.0, 1.0, 1.0])
    dist = np.abs(h + r - t).sum()
    assert np.allclose(analytic_grad_transe_l1(h, r, t, np.eye(3)), np.ones(3) / dist)


def test_l1_homogeneity():
    h, r, t, W = rng_vectors(0)
    g = analytic_grad_transe_l1(h, r, t, W)
    assert np.allclose(analytic_grad_transe_l1(3 * h, 3 * r, 3 * t, W), g / 3)


def test_zero_distance_is_singular():
    v = np.ones(3)
    with pytest.raises(SingularityError):
        analytic_grad_transe_l1(v, np.zeros(3), v, np.eye(3))
    with pytest.raises(SingularityError):
        analytic_grad_transe_l2(v, np.zeros(3), v, np.eye(3))


def test_l2_identity_and_isometry():
    h, r, t, _ = rng_vectors(1)
    diff = h + r - t
    assert np.allclose(analytic_grad_transe_l2(h, r, t, np.eye(D)), diff / diff.dot(diff))
    Q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(D, D)))
    g = analytic_grad_transe_l2(h, r, t, Q)
    ref = analytic_grad_transe_l2(Q @ h, r, Q @ t, np.eye(D))
    assert np.linalg.norm(g) == pytest.approx(np.linalg.norm(ref), rel=1e-12)


def test_distmult_scalar_example():
    g = analytic_grad_distmult([2.0], [3.0], [4.0], [[1.0]])
    assert g[0] == pytest.approx(0.5)
    with pytest.raises(DomainError):
        analytic_grad_distmult([2.0], [-3.0], [4.0], [[1.0]])


@pytest.mark.parametrize("kind,tol", [("transe_l1", 1e-6), ("transe_l2", 1e-7), ("distmult", 1e-7)])
def test_formula_matches_finite_differences(kind, tol):
    rng = np.random.default_rng(10)
    for _ in range(20):
        h, r, t, W = sample_probe(kind, rng, D)
        analytic = ANALYTIC[kind](h, r, t, W)
        numeric = finite_difference_grad(lambda x: log_score(kind, x, r, t, W), h)
        assert vector_rel_error(analytic, numeric) < tol


@pytest.mark.parametrize("kind", ["transe_l1", "transe_l2", "distmult"])
def test_formula_matches_backprop(kind):
    rng = np.random.default_rng(11)
    for _ in range(10):
        h, r, t, W = sample_probe(kind, rng, D)
        assert vector_rel_error(ANALYTIC[kind](h, r, t, W), backprop_grad(kind, h, r, t, W)) < 1e-8


def test_conve_gradient_backprop_and_fd():
    probe = ConvEProbe.random(dim=8, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        h, r, t, W = sample_probe("conve", rng, 8, probe=probe)
        a = analytic_grad_conve(h, r, t, W, probe)
        assert vector_rel_error(a, backprop_grad("conve", h, r, t, W, probe)) < 1e-6
        numeric = finite_difference_grad(lambda x: log_score("conve", x, r, t, W, probe), h)
        assert vector_rel_error(a, numeric) < 1e-5


def test_conve_zero_conv_weights():
    probe = ConvEProbe.random(dim=8, seed=5, zero_conv=True)
    rep = certify_formula("conve", probes=20, conve_probe=probe)
    assert rep.passed, rep.to_dict()


def test_conve_nonpositive_score_domain_error():
    probe = ConvEProbe.random(dim=8, seed=6)
    rng = np.random.default_rng(0)
    h, r, t, W = sample_probe("conve", rng, 8, probe=probe)
    assert conve_score(h, r, t, W, probe) > 0
    with pytest.raises(DomainError):
        analytic_grad_conve(h, r, -t, W, probe)


def test_analytic_conve_leaves_params_untouched():
    probe = ConvEProbe.random(dim=8, seed=7)
    before = probe.params.digest()
    h, r, t, W = sample_probe("conve", np.random.default_rng(1), 8, probe=probe)
    analytic_grad_conve(h, r, t, W, probe)
    backprop_grad("conve", h, r, t, W, probe)
    assert probe.params.digest() == before
    assert all(not g.any() for g in probe.params.grads.values())


def test_certify_defaults_pass():
    reports = certify()
    assert set(reports) == {"transe_l1", "transe_l2", "distmult", "conve"}
    for rep in reports.values():
        assert rep.probes >= 20 and rep.passed, rep.to_dict()


def test_certify_detects_perturbed_formula():
    def broken(h, r, t, W):
        return 1.001 * analytic_grad_distmult(h, r, t, W)

    table = dict(ANALYTIC, distmult=broken)
    rep = certify(("distmult",), table=table)["distmult"]
    assert not rep.passed and rep.max_rel_error > 1e-4


# -- decomposition ---------------------------------------------------------------


def _distmult_neighborhood(k, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(D, D)) / np.sqrt(D)
    h = rng.normal(size=D)
    neighbors = []
    while len(neighbors) < k:
        r, t = rng.normal(size=(2, D))
        if (W @ h) @ (r * (W @ t)) > 1e-2:
            neighbors.append((r, t))
    return NeighborhoodLoss(h, neighbors, "distmult", W)


def test_single_neighbor_decomposition():
    for kind in ("transe_l1", "transe_l2", "distmult"):
        h, r, t, W = sample_probe(kind, np.random.default_rng(3), D)
        dec = decompose_neighborhood_gradient(NeighborhoodLoss(h, [(r, t)], kind, W))
        assert dec.residual < 1e-10
        assert np.allclose(dec.contributions[0], dec.total, atol=1e-10)


def test_five_neighbor_distmult_decomposition():
    loss = _distmult_neighborhood(5)
    dec = decompose_neighborhood_gradient(loss)
    assert len(dec.contributions) == 5 and dec.residual < 1e-8


def test_distmult_contribution_is_matrix_action():
    loss = _distmult_neighborhood(5, seed=1)
    dec = decompose_neighborhood_gradient(loss)
    W = loss.W
    for (r, t), c in zip(loss.neighbors, dec.contributions):
        score = (W @ loss.center) @ (r * (W @ t))
        assert np.allclose(c, distmult_neighbor_matrix(r, W, score) @ (W @ t), atol=1e-12)
        M = W.T * r[None, :]
        coef, *_ = np.linalg.lstsq(M, c, rcond=None)
        assert np.linalg.norm(M @ coef - c) < 1e-8


def test_conve_neighbor_order_invariance():
    probe = ConvEProbe.random(dim=8, seed=9)
    rng = np.random.default_rng(2)
    h, _, _, W = sample_probe("conve", rng, 8, probe=probe)
    neighbors = []
    while len(neighbors) < 4:
        r, t = rng.normal(size=(2, 8))
        if conve_score(h, r, t, W, probe) > 1e-3:
            neighbors.append((r, t))
    a = decompose_neighborhood_gradient(NeighborhoodLoss(h, neighbors, "conve", W, probe))
    b = decompose_neighborhood_gradient(NeighborhoodLoss(h, neighbors[::-1], "conve", W, probe))
    assert a.residual < 1e-8
    assert np.allclose(a.total, b.total, atol=1e-12)


def test_neighborhood_from_triples():
    rng = np.random.default_rng(0)
    ent, rel = np.abs(rng.normal(size=(5, D))), np.abs(rng.normal(size=(2, D)))
    triples = np.array([[0, 0, 1], [0, 1, 3], [2, 0, 0]])
    loss = neighborhood_from_triples(0, triples, ent, rel, np.eye(D), "distmult")
    assert loss.neighbor_ids == [(0, 1), (1, 3)]
    dec = decompose_neighborhood_gradient(loss)
    assert dec.residual < 1e-10
