import math

import numpy as np
import pytest

from symlfi.signals import (ConfigError, ParamPrior, ShiftPrior, SignalKind, SignalParams, TimeGrid,
                            TimeSeries, add_white_noise, default_grid, default_prior, default_shift_prior,
                            generate_dataset, load_dataset, read_header, record_rng, sample_prior,
                            save_dataset, sg_waveform, sho_waveform, signal_values, waveform)


def _sho_scalar(w0, beta, t):
    if t < 0:
        return 0.0
    return math.exp(-beta * w0 * t) * math.cos(w0 * t * math.sqrt(1 - beta * beta))


def _sg_scalar(f0, tau, t):
    return math.exp(-t * t / (tau * tau)) * math.sin(2 * math.pi * f0 * t)


def test_sho_reference_values():
    g = TimeGrid(3, 1.0, 0.0)
    v = sho_waveform(SignalParams.sho(1.5, 0.2), g).values
    assert v[0] == 1.0
    # frozen from the scalar oracle: exp(-0.3) cos(1.5 sqrt(0.96))
    assert v[1] == pytest.approx(0.07477, abs=5e-6)
    assert v[1] == pytest.approx(_sho_scalar(1.5, 0.2, 1.0), rel=1e-14)


def test_sho_undamped_limit_is_cosine():
    g = TimeGrid(200, 0.03, 0.0)
    v = sho_waveform(SignalParams.sho(2.3, 0.0), g).values
    np.testing.assert_allclose(v, np.cos(2.3 * g.times), rtol=0, atol=1e-15)


def test_sg_reference_values():
    # exp(-0.25) sin(0.21 pi)
    p = SignalParams.sg(0.7, 0.3)
    g = TimeGrid(3, 0.15, -0.15)
    v = sg_waveform(p, g).values
    assert v[1] == 0.0
    assert v[2] == pytest.approx(0.47733, abs=5e-6)
    assert v[2] == pytest.approx(_sg_scalar(0.7, 0.3, 0.15), rel=1e-14)
    far = sg_waveform(p, TimeGrid(2, 1.0, 3.0)).values
    assert abs(far[0]) < 1e-40


def test_vectorized_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = rng.uniform(-2, 10)
        w0, beta = rng.uniform(0.5, 3), rng.uniform(0, 0.95)
        f0, tau = rng.uniform(0.2, 1.5), rng.uniform(0.1, 1)
        assert signal_values(SignalKind.SHO, w0, beta, t) == pytest.approx(_sho_scalar(w0, beta, t), rel=1e-13, abs=1e-300)
        assert signal_values(SignalKind.SG, f0, tau, t) == pytest.approx(_sg_scalar(f0, tau, t), rel=1e-13, abs=1e-300)


def test_sho_zero_before_start_and_envelope():
    g = default_grid("sho")
    p = SignalParams.sho(1.7, 0.3)
    shift = 40 * g.dt
    v = sho_waveform(p, g, shift).values
    t = g.times - shift
    assert np.all(v[t < 0] == 0)
    assert np.all(np.abs(v[t >= 0]) <= np.exp(-0.3 * 1.7 * t[t >= 0]) + 1e-15)


def test_shift_equivariance_is_exact():
    g = default_grid("sho")
    p = SignalParams.sho(1.1, 0.1)
    k = 37
    shifted = sho_waveform(p, g, k * g.dt).values
    base = sho_waveform(p, g, 0.0).values
    np.testing.assert_array_equal(shifted[k:], base[:-k])
    # equivalently, evaluating on a grid whose times are reduced by the shift
    np.testing.assert_allclose(shifted, sho_waveform(p, g.shifted(k * g.dt), 0.0).values, atol=1e-14)


def test_param_domain_errors():
    with pytest.raises(ValueError):
        SignalParams.sho(1.0, 1.0)
    with pytest.raises(ValueError):
        SignalParams.sho(0.0, 0.2)
    with pytest.raises(ValueError):
        SignalParams.sg(0.5, 0.0)
    with pytest.raises(ValueError):
        SignalParams.sg(-0.5, 0.3)
    with pytest.raises(ValueError):
        sho_waveform(SignalParams.sg(0.5, 0.3), default_grid("sg"))
    with pytest.raises(ValueError):
        TimeGrid(1, 0.1)
    with pytest.raises(ValueError):
        TimeSeries(TimeGrid(3, 1.0), np.array([0.0, np.nan, 1.0]))


def test_param_attribute_access():
    p = SignalParams.sg(0.7, 0.3)
    assert (p.f0, p.tau) == (0.7, 0.3)
    with pytest.raises(AttributeError):
        p.omega0


def test_noise_contract():
    g = TimeGrid(4096, 0.01)
    clean = waveform(SignalParams.sho(1.5, 0.2), g)
    assert np.array_equal(add_white_noise(clean, 0.0, np.random.default_rng(0)).values, clean.values)
    a = add_white_noise(clean, 0.4, np.random.default_rng(7))
    b = add_white_noise(clean, 0.4, np.random.default_rng(7))
    assert np.array_equal(a.values, b.values) and a.sigma == 0.4
    assert 0.38 <= np.std(a.values - clean.values) <= 0.42
    with pytest.raises(ValueError):
        add_white_noise(clean, -0.1, np.random.default_rng(0))


def test_sample_prior():
    prior = default_prior("sg")
    rng = np.random.default_rng(1)
    draws = np.array([sample_prior(prior, rng).values for _ in range(10_000)])
    assert np.all((draws >= prior.lower) & (draws <= prior.upper))
    mid = 0.5 * (np.array(prior.lower) + np.array(prior.upper))
    width = np.array(prior.upper) - np.array(prior.lower)
    assert np.all(np.abs(draws.mean(0) - mid) < 3 * width / math.sqrt(12 * 10_000))
    point = ParamPrior("sho", (1.2, 0.3), (1.2, 0.3))
    assert sample_prior(point, rng).values == (1.2, 0.3)


def test_prior_validation():
    with pytest.raises(ValueError):
        ParamPrior("sho", (1.0, 0.5), (0.5, 0.9))
    with pytest.raises(ValueError):
        ParamPrior("sho", (0.5, 0.1), (3.0, 1.2))


def test_shift_prior_bounds():
    g = default_grid("sho")
    assert default_shift_prior(g).n_steps(g) == 128
    with pytest.raises(ConfigError):
        ShiftPrior(g.duration).n_steps(g)
    with pytest.raises(ValueError):
        ShiftPrior(-1.0)


def test_record_streams_are_independent_and_reproducible():
    a = record_rng(5, 3, 1).standard_normal(4)
    assert np.array_equal(a, record_rng(5, 3, 1).standard_normal(4))
    assert not np.array_equal(a, record_rng(5, 3, 2).standard_normal(4))
    assert not np.array_equal(a, record_rng(5, 4, 1).standard_normal(4))


def _kind_setup(kind):
    g = default_grid(kind)
    return g, default_prior(kind), default_shift_prior(g)


def test_ssl_pair_without_noise_or_shift_is_identical():
    g, prior, _ = _kind_setup("sho")
    ds = generate_dataset("sho", prior, ShiftPrior(0.0), g, 0.0, 1, seed=3, ssl_pairs=True)
    assert np.array_equal(ds.data, ds.data_aug)


def test_dataset_determinism_and_bounds():
    g, prior, sp = _kind_setup("sg")
    a = generate_dataset("sg", prior, sp, g, 0.4, 1000, seed=11)
    b = generate_dataset("sg", prior, sp, g, 0.4, 1000, seed=11)
    for name in ("params", "shifts", "data"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.all((a.params >= prior.lower) & (a.params <= prior.upper))
    assert np.all((a.shifts >= 0) & (a.shifts <= sp.shift_max))
    steps = a.shifts / g.dt
    np.testing.assert_allclose(steps, np.round(steps), atol=1e-9)


def test_records_are_independent_of_batch_position():
    g, prior, sp = _kind_setup("sho")
    whole = generate_dataset("sho", prior, sp, g, 0.4, 6, seed=2)
    tail = generate_dataset("sho", prior, sp, g, 0.4, 3, seed=2, start=3)
    assert np.array_equal(whole.data[3:], tail.data)


def test_ssl_views_have_independent_noise():
    g, prior, sp = _kind_setup("sho")
    ds = generate_dataset("sho", prior, sp, g, 0.4, 20, seed=4, ssl_pairs=True)
    for i in range(20):
        rec = ds.record(i)
        n1 = rec.data.values - waveform(rec.params, g, 0.0).values
        n2 = rec.data_aug.values - waveform(rec.params, g, rec.shift).values
        assert abs(np.corrcoef(n1, n2)[0, 1]) < 0.1 * 2  # 0.1 at 512 samples is ~2.3 sd; allow the tail


def test_ssl_noise_correlation_average():
    g, prior, sp = _kind_setup("sho")
    ds = generate_dataset("sho", prior, sp, g, 0.4, 200, seed=8, ssl_pairs=True)
    rho = []
    for rec in ds:
        n1 = rec.data.values - waveform(rec.params, g, 0.0).values
        n2 = rec.data_aug.values - waveform(rec.params, g, rec.shift).values
        rho.append(np.corrcoef(n1, n2)[0, 1])
    rho = np.abs(rho)
    assert np.mean(rho < 0.1) > 0.95


def test_generation_errors():
    g, prior, sp = _kind_setup("sho")
    with pytest.raises(ConfigError):
        generate_dataset("sho", prior, ShiftPrior(g.duration + 1), g, 0.4, 2, 0)
    with pytest.raises(ConfigError):
        generate_dataset("sg", prior, sp, g, 0.4, 2, 0)
    with pytest.raises(ConfigError):
        generate_dataset("sho", prior, sp, g, 0.4, 0, 0)


@pytest.mark.parametrize("pairs", [False, True])
def test_dataset_file_round_trip(tmp_path, pairs):
    g, prior, sp = _kind_setup("sg")
    ds = generate_dataset("sg", prior, sp, g, 0.4, 5, seed=1, ssl_pairs=pairs)
    path = tmp_path / "d.bin"
    save_dataset(path, ds)
    header = read_header(path)
    assert header["n"] == 5 and header["grid"]["n_samples"] == 512
    assert header["provenance"]["seed"] == 1
    back = load_dataset(path)
    assert back.kind is SignalKind.SG and back.grid == g
    for name in ("params", "shifts", "data"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert (back.data_aug is None) == (not pairs)
    size = path.stat().st_size - len(path.read_bytes().partition(b"\n")[0]) - 1
    assert size == 5 * 8 * (3 + 512 * (2 if pairs else 1))


def test_truncated_dataset_file_rejected(tmp_path):
    g, prior, sp = _kind_setup("sho")
    path = tmp_path / "d.bin"
    save_dataset(path, generate_dataset("sho", prior, sp, g, 0.4, 2, seed=1))
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(ValueError):
        load_dataset(path)
