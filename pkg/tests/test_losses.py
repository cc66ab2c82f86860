import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cadit import autodiff as ad
from cadit import losses as L
from cadit.autodiff import Tensor, grad_check


def col(*v):
    return Tensor(np.array(v, dtype=float).reshape(-1, 1))


# -------------------------------------------------------------- adversarial

def test_adv_mse_examples():
    assert float(L.adv_loss(col(1, 1), col(0, 0), "mse").data) == 0.0
    assert float(L.adv_loss(None, col(1, 1), "mse", "generator").data) == 0.0
    assert float(L.adv_loss(col(0.5), col(0.5), "mse").data) == pytest.approx(0.5, abs=1e-15)


def test_adv_log_matches_torch():
    rng = np.random.default_rng(0)
    r, f = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
    tr, tf = torch.tensor(r), torch.tensor(f)
    ref_d = -(torch.nn.functional.logsigmoid(tr).mean() + torch.nn.functional.logsigmoid(-tf).mean())
    ref_g = -torch.nn.functional.logsigmoid(tf).mean()
    assert float(L.adv_loss(Tensor(r), Tensor(f), "log").data) == pytest.approx(ref_d.item(), rel=1e-12)
    assert float(L.adv_loss(None, Tensor(f), "log", "generator").data) == pytest.approx(ref_g.item(), rel=1e-12)


def test_adv_log_and_mse_gradients_agree_in_sign():
    # both forms push real scores up and fake scores down for the discriminator
    for mode in ("log", "mse"):
        r = Tensor(np.array([[0.2], [0.4]]), requires_grad=True)
        f = Tensor(np.array([[0.3], [0.6]]), requires_grad=True)
        ad.backward(L.adv_loss(r, f, mode))
        assert (r.grad < 0).all() and (f.grad > 0).all()
        g = Tensor(np.array([[0.3], [0.6]]), requires_grad=True)
        ad.backward(L.adv_loss(None, g, mode, "generator"))
        assert (g.grad < 0).all()


def test_adv_errors():
    with pytest.raises(ValueError):
        L.adv_loss(Tensor(np.zeros((0, 1))), Tensor(np.zeros((0, 1))))
    with pytest.raises(ad.ShapeError):
        L.adv_loss(Tensor(np.zeros((2, 2))), col(0, 0))
    with pytest.raises(ValueError):
        L.adv_loss(col(1), col(0), "hinge")


# ---------------------------------------------------------- cross-entropy

def test_ce_examples():
    big = np.zeros((1, 3))
    big[0, 1] = 1e3
    assert float(L.classifier_ce(Tensor(big), [1]).data) == pytest.approx(0.0, abs=1e-12)
    assert float(L.classifier_ce(Tensor(np.zeros((4, 10))), [0, 3, 5, 9]).data) == pytest.approx(math.log(10), abs=1e-12)
    assert float(L.classifier_ce(Tensor(np.array([[1.0, 0.0]])), [0]).data) == pytest.approx(0.313262, abs=1e-6)


def test_ce_matches_torch():
    rng = np.random.default_rng(1)
    logits, labels = rng.normal(size=(7, 4)), rng.integers(0, 4, size=7)
    ref = torch.nn.functional.cross_entropy(torch.tensor(logits), torch.tensor(labels))
    assert float(L.classifier_ce(Tensor(logits), labels).data) == pytest.approx(ref.item(), rel=1e-12)


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        L.classifier_ce(Tensor(np.zeros((2, 3))), [0, 3])


# ------------------------------------------------------------------ cycle

def test_cycle_examples():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    assert float(L.cycle_loss(x, x).data) == 0.0
    assert float(L.cycle_loss(Tensor(np.zeros(2)), Tensor(np.array([1.0, -1.0]))).data) == 1.0
    d = np.random.default_rng(3).normal(size=(3, 4))
    one = float(L.cycle_loss(x, Tensor(x.data + d)).data)
    two = float(L.cycle_loss(x, Tensor(x.data + 2 * d)).data)
    assert two == pytest.approx(2 * one, rel=1e-14)
    with pytest.raises(ad.ShapeError):
        L.cycle_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


# -------------------------------------------------------------------- DSP

def dsp_reference(x, labels, mode="literal", margin=1.0):
    x = x.reshape(len(x), -1)
    n, total = len(x), 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = np.linalg.norm(x[i] - x[j])
            if labels[i] == labels[j]:
                total += d
            else:
                total -= d if mode == "literal" else min(d, margin)
    return total / (n * (n - 1))


def test_dsp_examples():
    same = Tensor(np.array([[0.3, 0.4], [0.3, 0.4]]))
    assert float(L.dsp_loss(same, [2, 2]).data) == 0.0
    apart = Tensor(np.array([[0.0, 0.0], [0.6, 0.8]]))
    assert float(L.dsp_loss(apart, [0, 1]).data) == pytest.approx(-1.0, abs=1e-15)
    ident = Tensor(np.ones((4, 3)))
    assert float(L.dsp_loss(ident, [0, 1, 0, 1], "margin", 1.0).data) == 0.0


@pytest.mark.parametrize("mode", ["literal", "margin"])
def test_dsp_matches_pair_loop(mode):
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.normal(size=(6, 1, 2, 2))
        y = rng.integers(0, 3, size=6)
        got = float(L.dsp_loss(Tensor(x), y, mode, 1.5).data)
        assert got == pytest.approx(dsp_reference(x, y, mode, 1.5), abs=1e-12)


def test_dsp_permutation_symmetric_and_margin_limit():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(7, 3)), rng.integers(0, 3, size=7)
    perm = rng.permutation(7)
    a = float(L.dsp_loss(Tensor(x), y).data)
    assert float(L.dsp_loss(Tensor(x[perm]), y[perm]).data) == pytest.approx(a, abs=1e-14)
    assert float(L.dsp_loss(Tensor(x), y, "margin", 1e9).data) == pytest.approx(a, abs=1e-14)


def test_dsp_errors():
    with pytest.raises(ValueError):
        L.dsp_loss(Tensor(np.zeros((1, 2))), [0])
    with pytest.raises(ValueError):
        L.dsp_loss(Tensor(np.zeros((2, 2))), [0, 1], "margin", 0.0)


# -------------------------------------------------------------------- CLC

def test_clc_examples():
    p = Tensor(np.array([[0.2, 0.8]]))
    assert float(L.clc_loss(p, p).data) == 0.0
    assert float(L.clc_loss(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]]))).data) == 2.0
    got = float(L.clc_loss(Tensor(np.array([[0.7, 0.3]])), Tensor(np.array([[0.4, 0.6]]))).data)
    assert got == pytest.approx(0.6, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_loss_ranges_for_probability_inputs(c, n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=n)
    q = rng.dirichlet(np.ones(c), size=n)
    assert 0.0 <= float(L.clc_loss(Tensor(p), Tensor(q)).data) <= 2.0 + 1e-12
    logits = rng.normal(size=(n, c)) * 5
    assert float(L.classifier_ce(Tensor(logits), rng.integers(0, c, size=n)).data) >= 0
    assert float(L.adv_loss(Tensor(rng.normal(size=(n, 1))), Tensor(rng.normal(size=(n, 1)))).data) >= 0


# ----------------------------------------------------------------- gamma

def test_gamma_examples():
    assert L.confidence_weight(np.array([0.0, 1.0, 0.0])) == 1.0
    assert L.confidence_weight(np.full(5, 0.2)) == pytest.approx(0.0, abs=1e-12)
    # oracle: direct entropy evaluation with math.log
    h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert h == pytest.approx(0.562335, abs=1e-6)
    assert L.confidence_weight(np.array([0.75, 0.25]), 2) == pytest.approx(1 - h / math.log(2), abs=1e-12)
    assert L.confidence_weight(np.array([0.75, 0.25]), 2) == pytest.approx(0.188722, abs=1e-6)


@pytest.mark.parametrize("bad", [np.array([0.5, 0.6]), np.array([1.2, -0.2]), np.array([1.0])])
def test_gamma_rejects_invalid(bad):
    with pytest.raises(ValueError):
        L.confidence_weight(bad)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([2, 5, 10]), st.integers(0, 2**31))
def test_gamma_bounded_and_permutation_invariant(c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(c, rng.uniform(0.05, 3)))
    g = L.confidence_weight(p)
    assert 0.0 <= g <= 1.0
    assert L.confidence_weight(p[rng.permutation(c)]) == pytest.approx(g, abs=1e-14)


# -------------------------------------------------------------------- JAG

def test_jag_examples():
    real, fake = col(0.5, 0.9), col(0.0, 0.0)
    got = L.jag_loss(real, fake, [1.0, 0.0], "target", "mse")
    assert float(got.data) == pytest.approx(0.125, abs=1e-15)
    zero = L.jag_loss(col(0.1, 0.7), col(0.3, 0.4), [0.0, 0.0], "target", "mse")
    assert float(zero.data) == pytest.approx((0.09 + 0.16) / 2, abs=1e-15)
    for domain in ("target", "source"):
        for mode in ("mse", "log"):
            a = L.jag_loss(col(0.1, 0.7), col(0.3, 0.4), [1.0, 1.0], domain, mode)
            b = L.adv_loss(col(0.1, 0.7), col(0.3, 0.4), mode)
            assert float(a.data) == pytest.approx(float(b.data), abs=1e-15)


def test_jag_source_weights_fake_side():
    got = L.jag_loss(col(1.0, 1.0), col(0.5, 0.9), [1.0, 0.0], "source", "mse")
    assert float(got.data) == pytest.approx(0.125, abs=1e-15)
    gen = L.jag_loss(None, col(0.5, 0.9), [0.0, 1.0], "source", "mse", "generator")
    assert float(gen.data) == pytest.approx(0.01 / 2, abs=1e-15)


def test_jag_rejects_out_of_range_gamma():
    with pytest.raises(ValueError):
        L.jag_loss(col(0.0), col(0.0), [1.5])


# ------------------------------------------------------------- objective

def test_total_objective_examples():
    zeros = {k: 0.0 for k in L.TERMS}
    assert L.total_objective(zeros, 5, 0.1, 1e-4).total == 0.0
    ones = {k: 1.0 for k in L.TERMS}
    assert L.total_objective(ones, 1, 1, 1).total == 7.0
    with pytest.raises(ValueError):
        L.total_objective(ones, 1, -0.1, 1)


def test_breakdown_identity_random():
    rng = np.random.default_rng(6)
    for _ in range(100):
        parts = dict(zip(L.TERMS, rng.normal(size=7) * 10))
        lam = rng.uniform(0, 10, size=3)
        b = L.total_objective(parts, *lam)
        ref = sum(parts[k] for k in ("dgan_t", "dgan_s", "jgan_t", "jgan_s"))
        ref += lam[0] * parts["cyc"] + lam[1] * parts["clc"] + lam[2] * parts["dsp"]
        assert abs(b.total - ref) <= 1e-12


# ---------------------------------------------------------- loss gradients

def _gc(fn, x):
    return grad_check(fn, Tensor(x), 1e-5)


def test_loss_gradients():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(25):
        s1, s2 = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
        gam = rng.uniform(size=5)
        for mode in ("mse", "log"):
            worst = max(worst, _gc(lambda p: L.adv_loss(p, Tensor(s2), mode), s1))
            worst = max(worst, _gc(lambda p: L.adv_loss(Tensor(s1), p, mode), s2))
            worst = max(worst, _gc(lambda p: L.adv_loss(None, p, mode, "generator"), s2))
            for dom in ("target", "source"):
                worst = max(worst, _gc(lambda p: L.jag_loss(p, Tensor(s2), gam, dom, mode), s1))
                worst = max(worst, _gc(lambda p: L.jag_loss(Tensor(s1), p, gam, dom, mode), s2))
        logits, classes = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
        worst = max(worst, _gc(lambda p: L.classifier_ce(p, classes), logits))
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        worst = max(worst, _gc(lambda p: L.cycle_loss(Tensor(y), p), x))
        worst = max(worst, _gc(lambda p: L.clc_loss(ad.softmax(p), ad.softmax(Tensor(y))), x))
        labels = rng.integers(0, 2, 5)
        worst = max(worst, _gc(lambda p: L.dsp_loss(p, labels), x))
        worst = max(worst, _gc(lambda p: L.dsp_loss(p, labels, "margin", 1.0), x))
    assert worst <= 1e-4
