import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slideflow.core.optim import AdamState
from slideflow.data_io import SlideData, SynthConfig, synth_slide
from slideflow.denoiser import Denoiser, DenoiserConfig
from slideflow.errors import ContractError, NumericError, ShapeError
from slideflow.flow import (
    FlowConfig,
    SampleTrace,
    fit,
    init_output_head,
    interpolate,
    sample,
    train_step,
    validation_score,
)
from slideflow.priors import Gaussian, ZinbParams, Zero

S_GRID = (1, 2, 5, 10, 16)


def toy_slide(n_side=10, seed=0):
    """Expression exactly linear in the features, on a jittered grid."""
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(n_side), np.arange(n_side))
    c = np.stack([xs.ravel(), ys.ravel()], 1) + rng.uniform(-0.3, 0.3, (n_side**2, 2))
    z = rng.normal(size=(n_side**2, 4))
    y = z @ np.random.default_rng(1000).normal(size=(4, 3))
    return SlideData(f"toy{seed}", c, z, y, ["a", "b", "c"], normalized=True)


def toy_model(**kw):
    base = dict(n_genes=3, d_in=4, layers=2, heads=2, hidden=16, dropout=0.0)
    return Denoiser(DenoiserConfig(**{**base, **kw}))


# -- config and interpolation ---------------------------------------------------------


def test_flow_config_defaults():
    cfg = FlowConfig()
    assert (cfg.steps, cfg.lr, cfg.clip, cfg.epochs, cfg.patience) == (5, 5e-4, 1.0, 100, 20)
    assert cfg.prior == ZinbParams(0.2, 2.0, 0.5)


@pytest.mark.parametrize("kw", [dict(steps=0), dict(patience=0), dict(patience=101), dict(lr=-1.0), dict(clip=0.0)])
def test_flow_config_validation(kw):
    with pytest.raises(ContractError):
        FlowConfig(**kw)


def test_interpolate_examples():
    assert interpolate([[2.0]], [[0.0]], 0.25).tolist() == [[0.5]]
    with pytest.raises(ShapeError):
        interpolate(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)
    with pytest.raises(ContractError):
        interpolate(np.zeros(2), np.zeros(2), 1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_interpolate_endpoints_bitwise(seed):
    rng = np.random.default_rng(seed)
    y, y0 = rng.normal(size=(5, 3)) * 100, rng.normal(size=(5, 3))
    assert np.array_equal(interpolate(y, y0, 1.0), y)
    assert np.array_equal(interpolate(y, y0, 0.0), y0)


# -- sampling --------------------------------------------------------------------------


def oracle(truth):
    return lambda coords, features, y_t, t: truth


@pytest.mark.parametrize("steps", S_GRID)
def test_oracle_sampling_exact_and_on_path(steps):
    rng = np.random.default_rng(steps)
    truth = rng.normal(size=(30, 4))
    trace = SampleTrace()
    out = sample(np.zeros((30, 2)), np.zeros((30, 1)), oracle(truth), FlowConfig(steps=steps), rng, n_genes=4, trace=trace)
    assert np.array_equal(out, truth)
    assert trace.calls == steps
    for t, state in zip(trace.times, trace.states):
        np.testing.assert_allclose(state, interpolate(truth, trace.y0, t), rtol=0, atol=1e-12)


def test_two_step_midpoint():
    rng = np.random.default_rng(0)
    truth, y0 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    trace = SampleTrace()
    sample(np.zeros((6, 2)), np.zeros((6, 1)), oracle(truth), FlowConfig(steps=2), rng, y0=y0, trace=trace)
    np.testing.assert_allclose(trace.states[1], (y0 + truth) / 2, atol=1e-15)


def test_single_step_is_one_prediction_at_zero():
    s = toy_slide()
    m = toy_model()
    y0 = np.random.default_rng(1).normal(size=(s.n_spots, 3))
    out = sample(s.coords, s.features, m, FlowConfig(steps=1), np.random.default_rng(2), y0=y0)
    np.testing.assert_array_equal(out, m.predict(m.geometry(s.coords), s.features, y0, 0.0))


@pytest.mark.parametrize("steps", [1, 3, 5])
def test_sampling_cost_is_s_forward_passes(steps):
    s = toy_slide()
    calls = []

    def f(c, z, y_t, t):
        calls.append(t)
        return y_t

    sample(s.coords, s.features, f, FlowConfig(steps=steps), np.random.default_rng(0), n_genes=3)
    assert calls == [i / steps for i in range(steps)]


def test_sampling_seed_determinism():
    s = toy_slide()
    m = toy_model()
    a = sample(s.coords, s.features, m, FlowConfig(), np.random.default_rng(3))
    b = sample(s.coords, s.features, m, FlowConfig(), np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_callable_needs_gene_count():
    with pytest.raises(ContractError):
        sample(np.zeros((3, 2)), np.zeros((3, 1)), oracle(np.zeros((3, 1))), FlowConfig(), np.random.default_rng(0))


# -- training --------------------------------------------------------------------------


def test_train_step_at_exact_fit_leaves_params_unchanged():
    s = toy_slide()
    const_slide = s.with_expression(np.tile([1.0, -2.0, 0.5], (s.n_spots, 1)))
    m = toy_model()
    init_output_head(m, np.array([1.0, -2.0, 0.5]))
    before = {k: v.copy() for k, v in m.params.items()}
    cfg = FlowConfig(log1p_targets=False)
    loss = train_step(const_slide, m, AdamState.for_params(m.params, lr=cfg.lr), cfg, np.random.default_rng(0))
    assert loss == 0.0
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_train_step_loss_finite_nonnegative_on_random_init():
    s = synth_slide(SynthConfig(n_spots=60, n_genes=4, d_in=5))
    m = Denoiser(DenoiserConfig(n_genes=4, d_in=5, layers=2, heads=2, hidden=8))
    cfg = FlowConfig()
    loss = train_step(s, m, AdamState.for_params(m.params), cfg, np.random.default_rng(0))
    assert np.isfinite(loss) and loss >= 0


def test_train_step_nan_reports_location():
    s = toy_slide()
    m = toy_model()
    m.params["input.0.w"][0, 0] = np.nan
    cfg = FlowConfig(log1p_targets=False)
    with pytest.raises(NumericError, match="epoch 3, step 7"):
        train_step(s, m, AdamState.for_params(m.params), cfg, np.random.default_rng(0), where="at epoch 3, step 7")


def test_linear_toy_task_loss_halves_within_200_steps():
    s = toy_slide()
    m = toy_model()
    cfg = FlowConfig(log1p_targets=False, prior=Gaussian())
    opt = AdamState.for_params(m.params, lr=cfg.lr)
    rng = np.random.default_rng(0)
    losses = np.array([train_step(s, m, opt, cfg, rng) for _ in range(200)])
    windows = losses.reshape(4, 50).mean(axis=1)
    assert windows[-1] <= 0.5 * windows[0]
    assert np.all(np.diff(windows) < 0)


# -- fit -------------------------------------------------------------------------------


def _fit_data():
    slides = [toy_slide(6, seed) for seed in range(3)]
    return slides[:2], slides[2:]


def test_fit_rejects_empty_training_set():
    with pytest.raises(ContractError):
        fit([], _fit_data()[1], toy_model(), FlowConfig())


def test_fit_rejects_dimension_mismatch():
    train, val = _fit_data()
    with pytest.raises(ShapeError, match="n_genes"):
        fit(train, val, toy_model(n_genes=5), FlowConfig(log1p_targets=False))


def test_fit_with_zero_lr_stops_at_patience_plus_one():
    train, val = _fit_data()
    cfg = FlowConfig(lr=0.0, epochs=10, patience=3, log1p_targets=False, prior=Zero())
    best, report = fit(train, val, toy_model(), cfg)
    assert report.epochs == 4
    assert len(set(report.val_pearson)) == 1
    assert report.best_epoch == 1
    assert len(report.loss) == len(report.val_pearson) == len(report.seconds)


def test_fit_is_deterministic(tmp_path):
    train, val = _fit_data()
    cfg = FlowConfig(epochs=4, patience=4, log1p_targets=False, seed=5)
    b1, r1 = fit(train, val, toy_model(), cfg)
    b2, r2 = fit(train, val, toy_model(), cfg)
    assert r1.same_metrics(r2)
    assert all(np.array_equal(b1.params[k], b2.params[k]) for k in b1.params)
    lines = r1.write_csv(tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,val_pearson,seconds"
    assert len(lines) == r1.epochs + 1


def test_fit_returns_best_epoch_params():
    train, val = _fit_data()
    cfg = FlowConfig(epochs=6, patience=6, lr=5e-3, log1p_targets=False, seed=1)
    best, report = fit(train, val, toy_model(), cfg)
    assert validation_score(best, val, cfg) == pytest.approx(max(report.val_pearson), abs=1e-12)
