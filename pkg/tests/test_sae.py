import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latent_scalpel import sae as S
from latent_scalpel.model import ActivationRecord

from oracles import jumprelu_scalar, sae_forward_loops


def random_sae(rng, d=4, m=8, layer=0):
    W_dec = rng.normal(size=(m, d))
    W_dec /= np.linalg.norm(W_dec, axis=1, keepdims=True)
    return S.SAEParams(rng.normal(size=(d, m)), rng.normal(size=m) * 0.3, np.abs(rng.normal(size=m)) * 0.5,
                       W_dec, rng.normal(size=d) * 0.1, layer)


def test_jumprelu_examples():
    np.testing.assert_array_equal(S.jumprelu([2.0, 0.5], [1.0, 1.0]), [2.0, 0.0])
    np.testing.assert_array_equal(S.jumprelu([0.7, 1.3], [0.7, 1.3]), [0.0, 0.0])
    np.testing.assert_array_equal(S.jumprelu([-1.0, 3.0], [0.0, 0.0]), [0.0, 3.0])


def test_jumprelu_matches_scalar_oracle_on_grid():
    zs = np.linspace(-2, 2, 41)
    ths = np.linspace(0, 2, 21)
    Z, T = np.meshgrid(zs, ths)
    expect = np.vectorize(jumprelu_scalar)(Z, T)
    np.testing.assert_array_equal(S.jumprelu(Z, T), expect)


def test_encode_hand_example():
    sae = S.SAEParams(np.array([[1.0, -1.0]]), np.zeros(2), np.array([0.5, 0.5]), np.eye(2)[:, :1], np.zeros(1))
    np.testing.assert_array_equal(S.encode(np.array([2.0]), sae), [2.0, 0.0])
    np.testing.assert_array_equal(S.encode(np.zeros(1), sae), [0.0, 0.0])


def test_decode_basics(rng):
    sae = random_sae(rng)
    np.testing.assert_allclose(S.decode(np.zeros(8), sae), sae.b_dec)
    sae.b_dec = np.zeros(4)
    np.testing.assert_allclose(S.decode(np.eye(8)[3], sae), sae.W_dec[3])


def test_loss_hand_example():
    # d=1, d_sae=2, W_dec = [[1], [-1]]: x=2 -> a=(2,0) -> x_hat=2, recon 0, l0 1
    sae = S.SAEParams(np.array([[1.0, -1.0]]), np.zeros(2), np.array([0.5, 0.5]), np.array([[1.0], [-1.0]]),
                      np.zeros(1))
    assert S.sae_loss(np.array([2.0]), sae, 0.25) == (0.25, 0.0, 1.0)
    # x=0.4 is below both thresholds: a=0, recon = 0.16
    total, recon, l0 = S.sae_loss(np.array([0.4]), sae, 0.25)
    assert l0 == 0 and recon == pytest.approx(0.16, abs=1e-12) and total == recon


def test_loss_degenerate_cases(rng):
    x = rng.normal(size=4)
    sae = S.SAEParams(np.zeros((4, 8)), np.zeros(8), np.ones(8), np.eye(8, 4), x.copy())
    assert S.sae_loss(x, sae, 3.0) == (0.0, 0.0, 0.0)
    sae = random_sae(rng)
    total, recon, _ = S.sae_loss(x, sae, 0.0)
    assert total == recon
    with pytest.raises(ValueError):
        S.sae_loss(x, sae, -1.0)


@given(st.integers(0, 100_000))
def test_encode_decode_loss_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    sae = random_sae(rng)
    x = rng.normal(size=4)
    a_ref, xh_ref, loss_ref = sae_forward_loops(x, sae.W_enc.tolist(), sae.b_enc.tolist(), sae.threshold.tolist(),
                                                sae.W_dec.tolist(), sae.b_dec.tolist(), 0.1)
    a = S.encode(x, sae)
    np.testing.assert_allclose(a, a_ref, atol=1e-9)
    np.testing.assert_allclose(S.decode(a, sae), xh_ref, atol=1e-9)
    assert S.sae_loss(x, sae, 0.1)[0] == pytest.approx(loss_ref, abs=1e-9)
    assert (a >= 0).all()


@given(st.integers(0, 100_000), st.floats(0.0, 1.0))
def test_raising_thresholds_never_activates(seed, bump):
    rng = np.random.default_rng(seed)
    sae = random_sae(rng)
    X = rng.normal(size=(20, 4))
    before = S.encode(X, sae) > 0
    raised = S.SAEParams(sae.W_enc, sae.b_enc, sae.threshold + bump * rng.random(8), sae.W_dec, sae.b_dec)
    after = S.encode(X, raised) > 0
    assert not (after & ~before).any()


def test_round_trip_recovers_support(rng):
    d = m = 16
    W_dec = np.linalg.qr(rng.normal(size=(d, d)))[0]
    eps = 0.01
    theta = np.full(m, 0.2)
    # tied orthonormal dictionary: the encoder inverts the decoder exactly
    sae = S.SAEParams(W_dec.T, np.zeros(m), theta, W_dec, np.zeros(d))
    for _ in range(50):
        code = np.zeros(m)
        support = rng.choice(m, size=3, replace=False)
        code[support] = theta[support] + eps + rng.random(3)
        a = S.encode(S.decode(code, sae), sae)
        assert set(np.flatnonzero(code)) <= set(np.flatnonzero(a))


def test_straight_through_recon_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    d, m, eps = 8, 16, 1e-3
    params = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in {
        "W_enc": rng.normal(size=(d, m)) * 0.5, "b_enc": rng.normal(size=m) * 0.1,
        "threshold": np.full(m, 0.3), "W_dec": rng.normal(size=(m, d)), "b_dec": rng.normal(size=d) * 0.1}.items()}
    x = torch.as_tensor(rng.normal(size=(6, d)))
    z = (x @ params["W_enc"] + params["b_enc"]).numpy()

    def recon(p):
        return S.training_loss(p, x, 0.0, eps)[1]

    leaf = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    recon(leaf).backward()
    h = 1e-6
    worst, checked = 0.0, 0
    for name in ("W_enc", "b_enc", "W_dec", "b_dec"):
        for i in range(params[name].numel()):
            plus = {**params, name: params[name].clone()}
            minus = {**params, name: params[name].clone()}
            plus[name].view(-1)[i] += h
            minus[name].view(-1)[i] -= h
            zp = (x @ plus["W_enc"] + plus["b_enc"]).numpy()
            zm = (x @ minus["W_enc"] + minus["b_enc"]).numpy()
            # finite differences are only meaningful away from the threshold jump
            if ((zp > 0.3) != (zm > 0.3)).any():
                continue
            fd = (recon(plus) - recon(minus)).item() / (2 * h)
            an = leaf[name].grad.reshape(-1)[i].item()
            if max(abs(fd), abs(an)) > 1e-8:
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
                checked += 1
    assert checked > 100
    assert worst < 1e-3


def test_threshold_pseudo_gradient_uses_rectangle_kernel():
    eps = 0.1
    z = torch.tensor([[0.52, 0.9, 0.1]], dtype=torch.float64)
    th = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64, requires_grad=True)
    S._Step.apply(z, th, eps).sum().backward()
    np.testing.assert_allclose(th.grad.numpy(), [-1 / eps, 0.0, 0.0])


def _planted(seed=0, **kw):
    return S.PlantedDictionary.random(16, 32, 3 / 32, seed=seed, **kw)


def test_train_sae_invariants_and_determinism():
    X, _ = S.generate_superposition_data(_planted(), 2000, seed=1)
    cfg = S.SAETrainConfig(l0_coef=0.1, steps=150, seed=3)
    a = S.train_sae(X, cfg, layer=2)
    b = S.train_sae(X, cfg, layer=2)
    assert a.d_sae == 8 * a.d_model and a.layer == 2
    np.testing.assert_allclose(np.linalg.norm(a.W_dec, axis=1), 1.0, atol=1e-5)
    assert (a.threshold >= 0).all()
    for k in ("W_enc", "b_enc", "threshold", "W_dec", "b_dec"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    recon = [r for r, _ in a.meta["history"]]
    assert np.mean(recon[90:100]) < np.mean(recon[:10])


def test_large_sparsity_weight_lowers_l0():
    X, _ = S.generate_superposition_data(_planted(), 2000, seed=1)
    sparse = S.train_sae(X, S.SAETrainConfig(l0_coef=1e3, steps=300, seed=0))
    dense = S.train_sae(X, S.SAETrainConfig(l0_coef=0.0, steps=300, seed=0))
    assert S.sae_loss(X, sparse, 0)[2] < S.sae_loss(X, dense, 0)[2]


def test_train_sae_rejects_mixed_layers():
    recs = [ActivationRecord(0, 0, np.zeros(4, np.float32)), ActivationRecord(1, 1, np.zeros(4, np.float32))]
    with pytest.raises(ValueError):
        S.train_sae(recs, S.SAETrainConfig(steps=1))
    with pytest.raises(ValueError):
        S.train_sae([], S.SAETrainConfig(steps=1))
    with pytest.raises(ValueError):
        S.SAETrainConfig(l0_coef=-1)
    with pytest.raises(ValueError):
        S.SAETrainConfig(bandwidth=0)


def test_superposition_generator_cases():
    f = np.eye(4)[:1]
    X, codes = S.generate_superposition_data(S.PlantedDictionary(f, np.array([0.0])), 10)
    assert not X.any() and not codes.any()
    X, _ = S.generate_superposition_data(S.PlantedDictionary(f, np.array([1.0]), 1.0, 1.0), 10)
    np.testing.assert_array_equal(X, np.repeat(f, 10, axis=0))
    with pytest.raises(ValueError):
        S.PlantedDictionary(np.ones((2, 4)), np.array([0.1, 0.1]))


def test_superposition_data_lies_in_dictionary_span():
    pd = S.PlantedDictionary.random(16, 6, 0.3, seed=2, noise_std=0.01)
    X, _ = S.generate_superposition_data(pd, 500, seed=0)
    coef, *_ = np.linalg.lstsq(pd.features.T, X.T, rcond=None)
    resid = X - (pd.features.T @ coef).T
    # noise outside a 6-dim span of R^16 keeps 10/16 of its energy
    assert np.mean(np.sum(resid**2, 1)) <= 1.2 * (10 / 16) * 16 * 0.01**2


def test_match_features_cases(rng):
    pd = _planted()
    assert S.match_features(pd.features, pd).mean_abs_cos == pytest.approx(1.0)
    perm = rng.permutation(32)
    m = S.match_features(pd.features[perm], pd)
    assert m.mean_abs_cos == pytest.approx(1.0)
    assert all(perm[m.assignment[i]] == i for i in range(32))
    basis = np.eye(8)
    true = basis[:4]
    other = basis[4:]
    assert S.match_features(other, true).mean_abs_cos < 0.3
    with pytest.raises(ValueError):
        S.match_features(np.zeros((0, 4)), true)


def test_direction_is_unit(rng):
    sae = random_sae(rng)
    sae.W_dec = sae.W_dec * 3
    assert np.linalg.norm(sae.direction(2)) == pytest.approx(1.0)
