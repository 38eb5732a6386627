"""Loss tests: closed-form identities, independent recomputation oracles,
and gradient checks on the logits."""
import numpy as np
import pytest

from peerfl import (
    ace_loss,
    composite_objective,
    cross_entropy,
    init_model,
    kl_distill,
    ModelSpec,
    prox_term,
    wsm_loss,
)

RNG = np.random.default_rng(2024)


def random_case(b=8, c=5, scale=3.0):
    logits = scale * RNG.normal(size=(b, c))
    labels = RNG.integers(0, c, size=b)
    return logits, labels


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

def test_ce_uniform_logits_is_log_c():
    for c in (2, 5, 11):
        logits = np.zeros((4, c))
        labels = np.arange(4) % c
        loss, _ = cross_entropy(logits, labels)
        assert abs(loss - np.log(c)) < 1e-12


def test_ce_vanishes_with_large_margin():
    logits = np.full((3, 4), -50.0)
    labels = np.array([1, 2, 0])
    logits[np.arange(3), labels] = 50.0
    loss, _ = cross_entropy(logits, labels)
    assert loss < 1e-12


def test_ce_matches_naive_formula():
    # naive (unshifted) recomputation as an independent oracle
    for _ in range(30):
        logits, labels = random_case()
        loss, grad = cross_entropy(logits, labels)
        ez = np.exp(logits)
        p = ez / ez.sum(axis=1, keepdims=True)
        naive = np.mean(np.log(ez.sum(axis=1)) - logits[np.arange(len(labels)), labels])
        assert abs(loss - naive) < 1e-10
        ref = p.copy()
        ref[np.arange(len(labels)), labels] -= 1.0
        assert np.allclose(grad, ref / len(labels), atol=1e-12)


def test_ce_grad_rows_sum_to_zero():
    logits, labels = random_case()
    _, grad = cross_entropy(logits, labels)
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_ce_validation():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))  # label out of range
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0.5, 1.0]))  # non-integer
    with pytest.raises(ValueError):
        cross_entropy(np.array([[np.inf, 0.0]]), np.array([0]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# weighted softmax
# ---------------------------------------------------------------------------

def test_wsm_equals_ce_minus_log_c_under_uniform_weights():
    for _ in range(25):
        logits, labels = random_case(b=6, c=7)
        uniform = np.full(7, 1.0 / 7)
        w_loss, w_grad = wsm_loss(logits, labels, uniform)
        c_loss, c_grad = cross_entropy(logits, labels)
        assert abs(w_loss - (c_loss - np.log(7))) < 1e-9
        assert np.allclose(w_grad, c_grad, atol=1e-12)


def test_wsm_matches_naive_formula():
    for _ in range(25):
        b, c = 5, 6
        logits, _ = random_case(b=b, c=c)
        beta = RNG.dirichlet(np.ones(c))
        labels = RNG.integers(0, c, size=b)
        loss, grad = wsm_loss(logits, labels, beta)
        ez = np.exp(logits)
        norm = (ez * beta).sum(axis=1)
        naive = np.mean(np.log(norm) - logits[np.arange(b), labels])
        assert abs(loss - naive) < 1e-10
        ref = (ez * beta) / norm[:, None]
        ref[np.arange(b), labels] -= 1.0
        assert np.allclose(grad, ref / b, atol=1e-12)


def test_wsm_absent_class_grad_is_exactly_zero():
    logits, _ = random_case(b=4, c=5)
    beta = np.array([0.5, 0.5, 0.0, 0.0, 0.0])
    labels = np.array([0, 1, 0, 1])
    _, grad = wsm_loss(logits, labels, beta)
    assert np.all(grad[:, 2:] == 0.0)


def test_wsm_rejects_label_with_zero_weight():
    logits, _ = random_case(b=2, c=3)
    beta = np.array([1.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="zero proportion"):
        wsm_loss(logits, np.array([0, 1]), beta)


def test_wsm_rejects_bad_proportions():
    logits, labels = random_case(b=2, c=3)
    labels = labels % 3
    with pytest.raises(ValueError):
        wsm_loss(logits, labels, np.array([0.5, 0.5]))  # wrong length
    with pytest.raises(ValueError):
        wsm_loss(logits, labels, np.array([0.9, 0.9, -0.8]))  # negative
    with pytest.raises(ValueError):
        wsm_loss(logits, labels, np.array([0.5, 0.4, 0.2]))  # sums to 1.1


def test_wsm_stable_for_huge_logits():
    logits = np.array([[1e4, -1e4, 0.0], [5e3, 5e3, -5e3]])
    beta = np.array([0.2, 0.3, 0.5])
    loss, grad = wsm_loss(logits, np.array([0, 1]), beta)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


# ---------------------------------------------------------------------------
# restricted cross entropy
# ---------------------------------------------------------------------------

def test_ace_hand_computed():
    logits = np.array([[1.0, 99.0, 1.0]])  # class 1 masked out
    loss, grad = ace_loss(logits, np.array([0]), np.array([0, 2]))
    # restricted lse = log(e^1 + e^1) = 1 + log 2; loss = lse - z_0 = log 2
    assert abs(loss - np.log(2.0)) < 1e-12
    assert grad[0, 1] == 0.0
    assert abs(grad[0, 0] - (0.5 - 1.0)) < 1e-12
    assert abs(grad[0, 2] - 0.5) < 1e-12


def test_ace_equals_ce_when_all_present():
    logits, labels = random_case(b=6, c=4)
    a = ace_loss(logits, labels, np.arange(4))
    c = cross_entropy(logits, labels)
    assert abs(a[0] - c[0]) < 1e-12
    assert np.allclose(a[1], c[1], atol=1e-15)


def test_ace_validation():
    logits, _ = random_case(b=2, c=4)
    with pytest.raises(ValueError, match="not in present"):
        ace_loss(logits, np.array([3, 0]), np.array([0, 1]))
    with pytest.raises(ValueError):
        ace_loss(logits, np.array([0, 0]), np.array([]))
    with pytest.raises(ValueError):
        ace_loss(logits, np.array([0, 0]), np.array([0, 9]))


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def softmax(z):
    ez = np.exp(z - z.max(axis=1, keepdims=True))
    return ez / ez.sum(axis=1, keepdims=True)


def test_kl_zero_for_identical_teacher():
    logits, _ = random_case(b=5, c=6)
    loss, grad = kl_distill(logits, [(logits.copy(), 100)])
    assert abs(loss) < 1e-14
    assert np.allclose(grad, 0.0, atol=1e-15)


def test_kl_matches_naive_two_teacher_formula():
    for _ in range(20):
        b, c = 4, 5
        zs, _ = random_case(b=b, c=c)
        z1, _ = random_case(b=b, c=c)
        z2, _ = random_case(b=b, c=c)
        phi1, phi2 = 300, 100
        loss, grad = kl_distill(zs, [(z1, phi1), (z2, phi2)])
        ps, p1, p2 = softmax(zs), softmax(z1), softmax(z2)
        w1, w2 = phi1 / (phi1 + phi2), phi2 / (phi1 + phi2)
        kl = lambda p, q: np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1))
        naive = w1 * kl(p1, ps) + w2 * kl(p2, ps)
        assert abs(loss - naive) < 1e-10
        ref = (ps - (w1 * p1 + w2 * p2)) / b
        assert np.allclose(grad, ref, atol=1e-12)


def test_kl_vanilla_weighting_is_uniform():
    zs, _ = random_case(b=3, c=4)
    z1, _ = random_case(b=3, c=4)
    z2, _ = random_case(b=3, c=4)
    loss_v, _ = kl_distill(zs, [(z1, 999), (z2, 1)], weighting="vanilla_average")
    loss_eq, _ = kl_distill(zs, [(z1, 5), (z2, 5)], weighting="size_weighted")
    assert abs(loss_v - loss_eq) < 1e-12


def test_kl_weight_permutation_equivariance():
    zs, _ = random_case(b=3, c=4)
    z1, _ = random_case(b=3, c=4)
    z2, _ = random_case(b=3, c=4)
    a = kl_distill(zs, [(z1, 10), (z2, 30)])
    b = kl_distill(zs, [(z2, 30), (z1, 10)])
    assert abs(a[0] - b[0]) < 1e-12
    assert np.allclose(a[1], b[1], atol=1e-15)


def test_kl_temperature_grad_matches_fd():
    zs, _ = random_case(b=3, c=4)
    zt, _ = random_case(b=3, c=4)
    for temp in (0.5, 1.0, 4.0):
        _, grad = kl_distill(zs, [(zt, 10)], temperature=temp)
        h = 1e-6
        for (i, j) in [(0, 0), (1, 2), (2, 3)]:
            up = zs.copy(); up[i, j] += h
            dn = zs.copy(); dn[i, j] -= h
            fd = (kl_distill(up, [(zt, 10)], temperature=temp)[0]
                  - kl_distill(dn, [(zt, 10)], temperature=temp)[0]) / (2 * h)
            assert abs(fd - grad[i, j]) < 1e-7


def test_kl_validation():
    zs, _ = random_case(b=2, c=3)
    with pytest.raises(ValueError, match="empty"):
        kl_distill(zs, [])
    with pytest.raises(ValueError, match="temperature"):
        kl_distill(zs, [(zs, 10)], temperature=0.0)
    with pytest.raises(ValueError):
        kl_distill(zs, [(np.zeros((2, 4)), 10)])  # class count mismatch
    with pytest.raises(ValueError):
        kl_distill(zs, [(zs, 0)])  # non-positive size
    with pytest.raises(ValueError):
        bad = zs.copy(); bad[0, 0] = np.nan
        kl_distill(bad, [(zs, 10)])
    with pytest.raises(ValueError):
        kl_distill(zs, [(zs, 10)], weighting="median")


# ---------------------------------------------------------------------------
# composite / prox
# ---------------------------------------------------------------------------

def test_composite_endpoints_are_exact_passthrough():
    zs, labels = random_case(b=4, c=5)
    zt, _ = random_case(b=4, c=5)
    sup = cross_entropy(zs, labels)
    dist = kl_distill(zs, [(zt, 10)])
    l0, g0 = composite_objective(0.0, sup, dist)
    assert l0 == sup[0] and np.all(g0 == sup[1])
    l1, g1 = composite_objective(1.0, sup, dist)
    assert l1 == dist[0] and np.all(g1 == dist[1])
    lm, gm = composite_objective(0.25, sup, dist)
    assert abs(lm - (0.75 * sup[0] + 0.25 * dist[0])) < 1e-15
    assert np.allclose(gm, 0.75 * sup[1] + 0.25 * dist[1], atol=1e-15)


def test_composite_validation():
    zs, labels = random_case(b=2, c=3)
    sup = cross_entropy(zs, labels)
    with pytest.raises(ValueError):
        composite_objective(-0.1, sup, sup)
    with pytest.raises(ValueError):
        composite_objective(1.1, sup, sup)
    with pytest.raises(ValueError):
        composite_objective(0.5, sup, (0.0, np.zeros((2, 4))))


def test_prox_quadratic_and_grad():
    spec = ModelSpec((4,), 3, 2)
    m = init_model(spec, 1)
    anchor = init_model(spec, 2)
    mu = 2.5
    loss, grads = prox_term(m, anchor, mu)
    manual = 0.0
    for w, wa in zip(m.weights, anchor.weights):
        manual += np.sum((w - wa) ** 2)
    for b, ba in zip(m.biases, anchor.biases):
        manual += np.sum((b - ba) ** 2)
    assert abs(loss - 0.5 * mu * manual) < 1e-12
    assert np.allclose(grads.grad_w[0], mu * (m.weights[0] - anchor.weights[0]), atol=1e-15)
    # anchored at itself: zero penalty, zero gradient
    zloss, zgrads = prox_term(m, m, mu)
    assert zloss == 0.0 and not zgrads.grad_w[0].any()


def test_prox_validation():
    m = init_model(ModelSpec((4,), 3, 2), 1)
    other = init_model(ModelSpec((5,), 3, 2), 1)
    with pytest.raises(ValueError):
        prox_term(m, other, 1.0)
    with pytest.raises(ValueError):
        prox_term(m, m, -1.0)
