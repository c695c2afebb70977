"""Metrics, walk-forward evaluation, calibration, noise sweeps, embeddings."""

import dataclasses
import datetime as dt
import json

import numpy as np
import pytest
import scipy.stats

from strada import (
    ConfigError,
    DatasetBundle,
    ForecastFan,
    InputError,
    ModelConfig,
    NoiseSpec,
    RolloutConfig,
    chronological_split,
    coverage_check,
    evaluate_point_forecasts,
    nll_comparison,
    perturbation_sweep,
    synth_generate,
)
from strada.data import checkpoint_from_params
from strada.evaluate import (
    HorizonMetrics,
    MetricReport,
    _student_t_nll_values,
    export_embeddings,
    mae,
    mape,
    mape_masked,
    minmax_gaussian_noise,
    persistence_baseline,
    rmse,
    split_range,
    walk_forward_origins,
    write_embeddings_csv,
    write_report,
    write_sweep_csv,
)
from strada.features import FeaturizeConfig, LagSet
from strada.model import init_params
from strada.tensor import RngStream

FEAT = FeaturizeConfig(lags=LagSet((1, 2, 3, 6)), k_hops=1, max_neighbors=3, k_pe=2)


def tiny_checkpoint(d_model=16):
    cfg = ModelConfig(
        token_dim=FEAT.token_dim(1),
        d_model=d_model,
        n_layers=1,
        n_heads=2,
        ffn_dim=32,
        context_length=4,
    )
    return checkpoint_from_params(init_params(cfg, RngStream(0, 1)), FEAT)


@pytest.fixture(scope="module")
def setting():
    bundle = synth_generate(6, 3, 60)
    return tiny_checkpoint(), bundle, chronological_split(bundle)


# ---------------------------------------------------------------------------
# Point metrics


def test_metric_arithmetic():
    assert mae([1.0], [3.0]) == 2.0
    assert rmse([1.0], [3.0]) == 2.0
    assert mape([1.0], [3.0]) == pytest.approx(200.0 / 3.0)
    assert mae([1.0, 2.0], [3.0, 2.0]) == 1.0
    assert rmse([1.0, 2.0], [3.0, 2.0]) == pytest.approx(np.sqrt(2.0))


def test_rmse_dominates_mae():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, y = rng.normal(size=30), rng.normal(size=30)
        assert rmse(p, y) >= mae(p, y) - 1e-12


def test_metric_shape_mismatch():
    with pytest.raises(InputError, match="shape mismatch"):
        mae(np.ones(3), np.ones(4))


def test_mape_masks_near_zero_targets():
    value, n_masked = mape_masked([1.0, 5.0, 2.0], [0.0, 1e-4, 4.0])
    assert n_masked == 2
    assert value == pytest.approx(50.0)  # only the |truth| >= 1e-3 entry counts
    all_masked = mape_masked([1.0], [0.0])
    assert all_masked == (0.0, 1)


def test_persistence_baseline_repeats_last_row():
    history = np.array([[1.0, 10.0], [2.0, 20.0], [5.0, 50.0]])
    out = persistence_baseline(history, 4)
    assert out.shape == (2, 4)
    assert np.array_equal(out, [[5.0] * 4, [50.0] * 4])
    with_channel = persistence_baseline(history[:, :, None], 2)
    assert np.array_equal(with_channel, [[5.0, 5.0], [50.0, 50.0]])
    with pytest.raises(InputError, match="nonempty"):
        persistence_baseline(np.zeros((0, 2)), 3)


def test_persistence_error_grows_on_a_ramp():
    # values equal their time index, so persisting the last value is off by
    # exactly h at horizon h
    t = np.arange(30.0)
    history = np.stack([t, t]).T
    pred = persistence_baseline(history, 3)
    for h in (1, 2, 3):
        truth = np.full(2, 29.0 + h)
        assert mae(pred[:, h - 1], truth) == h


# ---------------------------------------------------------------------------
# Reports


def test_metric_report_lookup_and_json():
    rows = (
        HorizonMetrics(3, 1.0, 2.0, 10.0, 99, 1),
        HorizonMetrics(6, 2.0, 3.0, 20.0, 99, 0),
    )
    report = MetricReport(rows)
    assert report.by_horizon(6).rmse == 3.0
    with pytest.raises(InputError, match="no metrics for horizon 12"):
        report.by_horizon(12)
    first = json.loads(report.json_lines()[0])
    assert first == {"horizon": 3, "mae": 1.0, "rmse": 2.0, "mape": 10.0, "n_pairs": 99, "n_masked": 1}


def test_write_report(tmp_path):
    report = MetricReport((HorizonMetrics(1, 0.5, 0.6, 7.0, 10, 0),))
    path = tmp_path / "metrics.jsonl"
    write_report(path, report)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["mae"] == 0.5


# ---------------------------------------------------------------------------
# Walk-forward scheduling


def test_split_range_validation(setting):
    _, _, splits = setting
    assert split_range(splits, "val") == splits.val
    with pytest.raises(InputError, match="split must be"):
        split_range(splits, "holdout")


def test_walk_forward_origins_spacing():
    got = walk_forward_origins(range(100, 200), min_history=50, horizon=12)
    assert got == [100, 112, 124, 136, 148, 160, 172, 184]
    assert walk_forward_origins(range(100, 200), 150, 12) == [150, 162, 174, 186]


def test_walk_forward_origins_cap_keeps_ends():
    capped = walk_forward_origins(range(100, 200), 50, 12, max_origins=3)
    assert capped == [100, 136, 184]  # first, middle, last of the 8 candidates
    assert walk_forward_origins(range(100, 200), 50, 12, max_origins=99) == [
        100, 112, 124, 136, 148, 160, 172, 184,
    ]


def test_walk_forward_origins_errors():
    with pytest.raises(InputError, match="horizon"):
        walk_forward_origins(range(0, 100), 0, 0)
    with pytest.raises(InputError, match="too short"):
        walk_forward_origins(range(10, 12), 50, 12)


# ---------------------------------------------------------------------------
# Walk-forward evaluation end to end


def test_evaluate_point_forecasts_shapes(setting):
    ckpt, bundle, splits = setting
    model, persist = evaluate_point_forecasts(
        ckpt,
        bundle,
        splits,
        horizons=(1, 2),
        roll_cfg=RolloutConfig(n_samples=5, seed=1),
        split="test",
    )
    for report in (model, persist):
        assert [h.horizon for h in report.horizons] == [1, 2]
        # test split [54, 60) allows origins 54, 56, 58; three nodes each
        assert all(h.n_pairs == 9 for h in report.horizons)
        assert all(np.isfinite(h.mae) for h in report.horizons)


def test_evaluate_never_reads_past_the_last_target(setting):
    ckpt, bundle, splits = setting
    kwargs = dict(
        horizons=(1, 2), roll_cfg=RolloutConfig(n_samples=4, seed=0), split="val"
    )
    clean_model, clean_persist = evaluate_point_forecasts(ckpt, bundle, splits, **kwargs)
    tampered = dataclasses.replace(bundle)
    tampered.series = bundle.series.copy()
    tampered.series[splits.val.stop :] = 1e9  # beyond every val-split target
    got_model, got_persist = evaluate_point_forecasts(ckpt, tampered, splits, **kwargs)
    assert got_model == clean_model
    assert got_persist == clean_persist


def test_evaluate_reproducible(setting):
    ckpt, bundle, splits = setting
    kwargs = dict(horizons=(2,), roll_cfg=RolloutConfig(n_samples=4, seed=3), split="test")
    a, _ = evaluate_point_forecasts(ckpt, bundle, splits, **kwargs)
    b, _ = evaluate_point_forecasts(ckpt, bundle, splits, **kwargs)
    assert a == b


# ---------------------------------------------------------------------------
# Likelihood comparison


def test_student_t_nll_values_against_scipy():
    rng = np.random.default_rng(1)
    nu = rng.uniform(1.0, 20.0, size=16)
    mu = rng.normal(size=16)
    sigma = rng.uniform(0.2, 3.0, size=16)
    y = rng.normal(size=16)
    got = _student_t_nll_values(nu, mu, sigma, y)
    want = -scipy.stats.t.logpdf(y, df=nu, loc=mu, scale=sigma)
    assert np.allclose(got, want, rtol=1e-10)


def test_nll_comparison_basics(setting):
    ckpt, bundle, splits = setting
    model_nll, clim_nll, n = nll_comparison(ckpt, bundle, splits, split="test", cap=50)
    assert n == 18  # test split [54, 60): 6 usable ends x 3 nodes
    assert np.isfinite(model_nll)
    assert np.isfinite(clim_nll)
    again = nll_comparison(ckpt, bundle, splits, split="test", cap=50)
    assert again == (model_nll, clim_nll, n)


def test_nll_comparison_cap(setting):
    ckpt, bundle, splits = setting
    _, _, n = nll_comparison(ckpt, bundle, splits, split="val", cap=7)
    assert n == 7


# ---------------------------------------------------------------------------
# Coverage


def test_coverage_conventions():
    draws = np.arange(101.0).reshape(1, 1, 101)
    fan = ForecastFan(draws, 1, 101)
    # level 0.5 spans the [25, 75] quantiles of 0..100
    assert coverage_check(fan, np.array([[50.0]]), 0.5) == 1.0
    assert coverage_check(fan, np.array([[25.0]]), 0.5) == 1.0  # boundary inclusive
    assert coverage_check(fan, np.array([[10.0]]), 0.5) == 0.0
    assert coverage_check(fan, np.array([[10.0]]), 0.8) == 1.0  # [10, 90]


def test_coverage_fraction_over_pairs():
    rng = np.random.default_rng(2)
    fan = ForecastFan(rng.normal(size=(4, 3, 200)), 3, 200)
    truth = np.zeros((4, 3))
    got = coverage_check(fan, truth, 0.8)
    assert 0.5 <= got <= 1.0  # zero sits comfortably inside a N(0,1) 80% band


def test_coverage_validation():
    fan = ForecastFan(np.zeros((2, 2, 4)), 2, 4)
    with pytest.raises(InputError, match="level"):
        coverage_check(fan, np.zeros((2, 2)), 1.0)
    with pytest.raises(InputError, match="truth shape"):
        coverage_check(fan, np.zeros((2, 3)), 0.8)
    empty = ForecastFan(np.zeros((2, 0, 4)), 0, 4)
    with pytest.raises(InputError, match="at least one"):
        coverage_check(empty, np.zeros((2, 0)), 0.8)


# ---------------------------------------------------------------------------
# Noise sweep


def test_noise_spec_validation():
    for bad in (dict(sigmas=()), dict(sigmas=(0.5, -1.0)), dict(sigmas=(2.0, 1.0))):
        with pytest.raises(ConfigError):
            NoiseSpec(**bad)
    spec = NoiseSpec(sigmas=(0.1, 0.5), seed=4)
    assert NoiseSpec.from_dict(spec.to_dict()) == spec


def test_minmax_noise_normalized_to_unit_range():
    base = np.random.default_rng(3).normal(size=(50, 4))
    out = minmax_gaussian_noise(0.4, base)
    assert out.min() == 0.0
    assert out.max() == 1.0


def test_minmax_noise_sigma_cancels():
    # min-max normalization divides the scale factor straight back out; the
    # sweep's non-degradation guarantee rests on this being exact
    base = np.random.default_rng(4).normal(size=(30, 3))
    a = minmax_gaussian_noise(0.2, base)
    b = minmax_gaussian_noise(2.0, base)
    assert np.allclose(a, b, atol=1e-12)
    assert np.array_equal(minmax_gaussian_noise(1.0, np.zeros((4, 4))), np.zeros((4, 4)))


def test_perturbation_sweep_flat_across_sigmas(setting):
    ckpt, bundle, splits = setting
    sweep = perturbation_sweep(
        ckpt,
        bundle,
        splits,
        NoiseSpec(sigmas=(0.2, 1.0, 2.0)),
        horizons=(1, 2),
        roll_cfg=RolloutConfig(n_samples=4, seed=0),
        split="val",
    )
    assert [s for s, _ in sweep] == [0.2, 1.0, 2.0]
    maes = [r.by_horizon(2).mae for _, r in sweep]
    assert maes[0] == maes[1] == maes[2]
    for h in (1, 2):
        series = [r.by_horizon(h).mae for _, r in sweep]
        assert all(b >= a - 1e-12 for a, b in zip(series, series[1:]))  # never degrades


def test_perturbation_sweep_zero_noise_matches_clean(setting):
    ckpt, bundle, splits = setting
    kwargs = dict(horizons=(1,), roll_cfg=RolloutConfig(n_samples=3, seed=0), split="val")
    clean, _ = evaluate_point_forecasts(ckpt, bundle, splits, **kwargs)
    sweep = perturbation_sweep(
        ckpt,
        bundle,
        splits,
        NoiseSpec(sigmas=(0.5,)),
        noise_fn=lambda sigma, base: np.zeros_like(base),
        **kwargs,
    )
    assert sweep[0][1] == clean


def test_write_sweep_csv(tmp_path):
    report = MetricReport((HorizonMetrics(3, 1.25, 1.5, 12.0, 30, 2),))
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, [(0.2, report), (1.0, report)])
    lines = path.read_text().splitlines()
    assert lines[0] == "sigma,horizon,mae,rmse,mape,n_pairs,n_masked"
    assert lines[1] == "0.2,3,1.250000,1.500000,12.000000,30,2"
    assert lines[2].startswith("1,3,")


# ---------------------------------------------------------------------------
# Embedding export


def test_export_embeddings_header_and_width(setting):
    ckpt, bundle, _ = setting
    lines = export_embeddings(ckpt, bundle, limit=0)
    assert lines == ["dataset,node,time," + ",".join(f"e{j}" for j in range(16))]


def test_export_embeddings_rows(setting):
    ckpt, bundle, _ = setting
    lines = export_embeddings(ckpt, bundle, limit=5, seed=0)
    assert len(lines) == 6
    cells = lines[1].split(",")
    assert cells[0] == bundle.name
    assert 0 <= int(cells[1]) < 3
    ts = dt.datetime.fromisoformat(cells[2])
    assert ts in bundle.timestamps
    assert len(cells) == 3 + 16
    assert all(np.isfinite(float(c)) for c in cells[3:])


def test_export_embeddings_deterministic(setting):
    ckpt, bundle, _ = setting
    a = export_embeddings(ckpt, bundle, limit=5, seed=0)
    b = export_embeddings(ckpt, bundle, limit=5, seed=0)
    c = export_embeddings(ckpt, bundle, limit=5, seed=1)
    assert a == b
    assert a != c


def test_export_embeddings_limit_over_supply(setting):
    ckpt, bundle, _ = setting
    # 60 steps, min end 10 -> 50 usable ends x 3 nodes = 150 pairs
    lines = export_embeddings(ckpt, bundle, limit=10_000)
    assert len(lines) == 151
    with pytest.raises(InputError, match="limit"):
        export_embeddings(ckpt, bundle, limit=-1)


def test_write_embeddings_csv(tmp_path):
    path = tmp_path / "emb.csv"
    write_embeddings_csv(path, ["header", "row1"])
    assert path.read_text() == "header\nrow1\n"
