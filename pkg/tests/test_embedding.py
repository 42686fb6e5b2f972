import numpy as np
import pytest

from symlfi import diffcore as dc
from symlfi.embedding import (EncoderConfig, ExpanderConfig, VICRegWeights, WeightSchedule, build_embedding,
                              cluster_separation, encode, expand, freeze_conv, pretrain, standardize_output,
                              vicreg_loss)
from symlfi.signals import default_grid, default_prior, default_shift_prior, generate_dataset


def brute_vicreg(X, Xp, lam=(1.0, 1.0, 1.0), eps=1e-4, target=1.0):
    """Loop-based re-evaluation of the loss terms."""
    n, d = X.shape
    inv = sum((X[i, j] - Xp[i, j]) ** 2 for i in range(n) for j in range(d)) / (n * d)

    def std_cols(A):
        out = []
        for j in range(d):
            m = sum(A[i, j] for i in range(n)) / n
            v = sum((A[i, j] - m) ** 2 for i in range(n)) / (n - 1)
            out.append((v + eps) ** 0.5)
        return out

    def cov_pen(A):
        means = [sum(A[i, j] for i in range(n)) / n for j in range(d)]
        total = 0.0
        for a in range(d):
            for b in range(d):
                if a != b:
                    c = sum((A[i, a] - means[a]) * (A[i, b] - means[b]) for i in range(n)) / (n - 1)
                    total += c * c
        return total / d

    hinge = 0.5 * sum(sum(max(0.0, target - s) for s in std_cols(A)) / d for A in (X, Xp))
    cov = cov_pen(X) + cov_pen(Xp)
    return lam[0] * inv + lam[1] * hinge + lam[2] * cov, inv, hinge, cov


@pytest.mark.parametrize("seed", range(10))
def test_vicreg_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    X, Xp = rng.standard_normal((n, 12)) * rng.uniform(0.1, 2), rng.standard_normal((n, 12))
    w = VICRegWeights(*rng.uniform(0.1, 30, 3))
    got = [t.data for t in vicreg_loss(X, Xp, w)]
    ref = brute_vicreg(X, Xp, (w.lambda1, w.lambda2, w.lambda3))
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_vicreg_zero_point():
    # rows of a scaled orthogonal design: unit column std, zero off-diagonal covariance
    n = 16
    H = np.array([[1.0]])
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    X = H[:, 1:13] * np.sqrt((n - 1) / n)
    total, inv, var, cov = (t.data for t in vicreg_loss(X, X.copy(), VICRegWeights()))
    assert inv == 0.0
    assert abs(var) < 1e-4  # sqrt(1 + eps) exceeds the target, so the hinge is inactive
    assert cov == pytest.approx(0.0, abs=1e-24)


def test_constant_batch_gives_maximal_hinge():
    X = np.ones((5, 12)) * 3.0
    w = VICRegWeights(0.0, 2.0, 0.0)
    total, inv, var, cov = (t.data for t in vicreg_loss(X, X, w))
    assert var == pytest.approx(1.0 - np.sqrt(1e-4), abs=1e-15)
    assert total == pytest.approx(2.0 * (1.0 - np.sqrt(1e-4)), abs=1e-14)
    assert cov == 0.0


def test_covariance_zero_for_diagonal_batch_and_mean_shift_invariant():
    rng = np.random.default_rng(0)
    base = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    X = np.zeros((4, 12))
    X[:, :2] = base * rng.uniform(0.5, 2, 2)
    assert vicreg_loss(X, X, VICRegWeights())[3].data == pytest.approx(0.0, abs=1e-28)
    Y = rng.standard_normal((8, 12))
    c1 = vicreg_loss(Y, Y, VICRegWeights())[3].data
    c2 = vicreg_loss(Y + rng.standard_normal(12), Y, VICRegWeights())[3].data
    assert c1 == pytest.approx(c2, rel=1e-12)


def test_vicreg_symmetry_and_row_permutation():
    rng = np.random.default_rng(2)
    X, Xp = rng.standard_normal((6, 12)), rng.standard_normal((6, 12))
    w = VICRegWeights(25, 25, 1)
    a = [t.data for t in vicreg_loss(X, Xp, w)]
    b = [t.data for t in vicreg_loss(Xp, X, w)]
    np.testing.assert_allclose(a, b, rtol=1e-14)
    perm = rng.permutation(6)
    c = [t.data for t in vicreg_loss(X[perm], Xp[perm], w)]
    np.testing.assert_allclose(a, c, rtol=1e-12)


def test_vicreg_terms_non_negative_and_errors():
    rng = np.random.default_rng(3)
    for _ in range(20):
        X, Xp = rng.standard_normal((4, 12)), rng.standard_normal((4, 12))
        assert all(t.data >= 0 for t in vicreg_loss(X, Xp, VICRegWeights()))
    with pytest.raises(dc.ShapeError):
        vicreg_loss(np.ones((1, 12)), np.ones((1, 12)), VICRegWeights())
    with pytest.raises(dc.ShapeError):
        vicreg_loss(np.ones((3, 12)), np.ones((4, 12)), VICRegWeights())
    with pytest.raises(ValueError):
        VICRegWeights(0, 0, 0)


def test_literal_variance_form_rewards_collapse():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((8, 12))
    w = VICRegWeights(0, 1, 0)
    wide = vicreg_loss(X, X, w, "literal")[2].data
    narrow = vicreg_loss(0.01 * X, 0.01 * X, w, "literal")[2].data
    # the literal term sums mean sqrt(var + eps) of both batches, so shrinking lowers it
    assert narrow < wide
    assert wide == pytest.approx(2 * np.mean(np.sqrt(X.var(0, ddof=1) + 1e-4)), rel=1e-12)
    hinge_wide = vicreg_loss(X, X, w, "hinge")[2].data
    hinge_narrow = vicreg_loss(0.01 * X, 0.01 * X, w, "hinge")[2].data
    assert hinge_narrow > hinge_wide


def test_vicreg_gradcheck():
    rng = np.random.default_rng(5)
    w = VICRegWeights(25, 25, 1)
    X, Xp = rng.standard_normal((5, 12)) * 0.5, rng.standard_normal((5, 12)) * 0.5
    assert dc.gradcheck(lambda a, b: vicreg_loss(a, b, w)[0], [X, Xp]) < 1e-4


def test_schedule():
    s = WeightSchedule()
    assert (s.at(0).lambda1, s.at(0).lambda2, s.at(0).lambda3) == (25, 25, 1)
    assert (s.at(29).lambda1, s.at(30).lambda1, s.at(99).lambda3) == (25, 1, 1)
    assert WeightSchedule.from_list(s.to_list()) == s
    with pytest.raises(ValueError):
        WeightSchedule([(5, VICRegWeights())])
    with pytest.raises(ValueError):
        WeightSchedule([(0, VICRegWeights()), (0, VICRegWeights())])


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(out_dim=4)
    with pytest.raises(ValueError):
        ExpanderConfig((3, 16, 10))


@pytest.fixture(scope="module")
def small_setup():
    cfg = EncoderConfig(n_samples=64, stem_channels=4, channels=(4, 8), fc=(8,))
    grid = default_grid("sho").__class__(64, 0.2, 0.0)
    prior = default_prior("sho")
    sp = default_shift_prior(grid)
    ds = generate_dataset("sho", prior, sp, grid, 0.4, 24, seed=1, ssl_pairs=True)
    return cfg, ds


def test_encode_deterministic_and_batch_consistent(small_setup):
    cfg, ds = small_setup
    enc, exp, store = build_embedding(0, cfg)
    a = encode(enc, store, ds.data[:5])
    assert a.shape == (5, 3)
    assert np.array_equal(a, encode(enc, store, ds.data[:5]))
    np.testing.assert_allclose(encode(enc, store, ds.data[2]), a[2], rtol=1e-12, atol=1e-14)
    x = expand(exp, store, a)
    assert x.shape == (5, 12) and np.all(np.isfinite(x))
    np.testing.assert_allclose(expand(exp, store, a[1]), x[1], rtol=1e-12, atol=1e-14)
    with pytest.raises(dc.ShapeError):
        encode(enc, store, np.zeros((2, 65)))


def test_pretrain_zero_epochs_and_determinism(small_setup):
    cfg, ds = small_setup
    enc, exp, store = build_embedding(0, cfg)
    before = store.state()
    assert pretrain(enc, exp, store, ds, epochs=0, batch_size=8) == []
    for n, v in before.items():
        assert np.array_equal(store[n], v)
    runs = []
    for _ in range(2):
        enc, exp, store = build_embedding(0, cfg)
        runs.append((pretrain(enc, exp, store, ds, epochs=3, seed=4, batch_size=8), store.state()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])
    assert len(runs[0][0]) == 3 and runs[0][0][0]["lambda1"] == 25.0


def test_standardize_output(small_setup):
    cfg, ds = small_setup
    enc, _, store = build_embedding(0, cfg)
    before = {n: store[n].copy() for n in enc.conv_names}
    standardize_output(enc, store, ds.data)
    g = encode(enc, store, ds.data)
    np.testing.assert_allclose(g.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(g.std(axis=0), 1, rtol=1e-12)
    assert all(np.array_equal(store[n], v) for n, v in before.items())


def test_pretrain_needs_pairs(small_setup):
    cfg, ds = small_setup
    enc, exp, store = build_embedding(0, cfg)
    plain = generate_dataset("sho", default_prior("sho"), default_shift_prior(ds.grid), ds.grid, 0.4, 4, 1)
    with pytest.raises(ValueError):
        pretrain(enc, exp, store, plain, epochs=1)


def test_freeze_conv_partitions_parameters(small_setup):
    cfg, ds = small_setup
    enc, exp, store = build_embedding(0, cfg)
    names = freeze_conv(store, enc)
    assert set(names) == set(enc.conv_names)
    assert all(store.is_frozen(n) for n in enc.conv_names)
    assert not any(store.is_frozen(n) for n in enc.fc_names)
    sizes = sum(store[n].size for n in enc.conv_names) + sum(store[n].size for n in enc.fc_names)
    sizes += sum(store[n].size for n in exp.mlp.param_names)
    assert sizes == store.size()
    conv_cost, head_cost = enc.cost(1)
    assert conv_cost.params == sum(store[n].size for n in enc.conv_names)
    assert head_cost.params == sum(store[n].size for n in enc.fc_names)


def test_cluster_separation_examples():
    pts = np.array([[0.0, 0, 0]] * 3 + [[1.0, 0, 0]] * 3)
    assert cluster_separation(pts, [0, 0, 0, 1, 1, 1]) == 0.0
    rng = np.random.default_rng(0)
    mixed = rng.standard_normal((400, 3))
    assert cluster_separation(mixed, rng.integers(0, 4, 400)) == pytest.approx(1.0, abs=0.05)
    with pytest.raises(ValueError):
        cluster_separation(pts[:3], [0, 0, 0])
    with pytest.raises(ValueError):
        cluster_separation(pts[:3], [0, 0, 1])
