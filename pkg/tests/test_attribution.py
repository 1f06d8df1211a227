import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saliency_audit import attribution as A
from saliency_audit import dsp
from saliency_audit.autonn import Classifier, ConvSpec, ModelConfig, grad_input

from .fakes import SMALL_MEL, SMALL_STFT, LinearWave, QuadraticWave, ReluWave


def spectrogram(seed=0, n=64):
    x = np.random.default_rng(seed).normal(size=n)
    return dsp.stft(x, SMALL_STFT)


def small_model(seed=0, kind="magnitude"):
    cfg = ModelConfig(input_kind=kind, conv=(ConvSpec(4), ConvSpec(6)), hidden=8, stft=SMALL_STFT, mel=SMALL_MEL)
    return Classifier(cfg, seed=seed, dtype=np.float64)


@pytest.fixture
def linear():
    return LinearWave(np.random.default_rng(7).normal(size=(64, 2)), b=[0.3, -0.2])


def test_saliency_linear_is_constant(linear):
    mag, ph = spectrogram()
    ex = A.Explained(linear, ph)
    expected = ex.pullback(linear.w[:, 1])
    a = A.saliency(linear, mag, ph, 1)
    b = A.saliency(linear, 3 * mag + 1, ph, 1)
    assert np.allclose(a.raw, expected) and np.array_equal(a.raw, b.raw)


def test_saliency_is_grad_input_through_vjp():
    m = small_model()
    mag, ph = spectrogram(1)
    a = A.saliency(m, mag, ph)
    wave = dsp.istft(mag, ph, SMALL_STFT)
    expected = dsp.istft_vjp(grad_input(m, wave, a.target_class), ph, SMALL_STFT)
    assert np.array_equal(a.raw, expected)


def test_target_defaults_to_predicted_class():
    m = small_model(2)
    mag, ph = spectrogram(2)
    wave = dsp.istft(mag, ph, SMALL_STFT)
    assert A.saliency(m, mag, ph).target_class == int(np.argmax(m.logits(wave)))


@pytest.mark.parametrize("samples,sigma", [(1, 0.0), (25, 0.0), (4, 0.3), (25, 0.1)])
def test_linear_identities_exact(linear, samples, sigma):
    mag, ph = spectrogram(3)
    cfg = A.AttributionConfig(sg_samples=samples, sg_sigma_rel=sigma)
    s = A.saliency(linear, mag, ph, 0)
    assert np.array_equal(A.smoothgrad(linear, mag, ph, 0, cfg).raw, s.raw)
    assert np.array_equal(A.guided_backprop(linear, mag, ph, 0).raw, s.raw)


@pytest.mark.parametrize("n", [1, 7, 25])
def test_linear_ig_and_shap_equal_w_times_x(linear, n):
    mag, ph = spectrogram(4)
    w = A.saliency(linear, mag, ph, 1).raw
    cfg = A.AttributionConfig(ig_steps=n, shap_samples=n)
    assert np.max(np.abs(A.integrated_gradients(linear, mag, ph, 1, cfg).raw - w * mag)) <= 1e-6
    assert np.max(np.abs(A.gradient_shap(linear, mag, ph, 1, cfg).raw - w * mag)) <= 1e-6


def test_smoothgrad_zero_noise_equals_saliency():
    m = small_model(5)
    mag, ph = spectrogram(5)
    cfg = A.AttributionConfig(sg_sigma_rel=0.0)
    assert np.array_equal(A.smoothgrad(m, mag, ph, 0, cfg).raw, A.saliency(m, mag, ph, 0).raw)


def test_smoothgrad_variance_shrinks_with_samples():
    m = small_model(6)
    mag, ph = spectrogram(6)

    def spread(n):
        runs = [A.smoothgrad(m, mag, ph, 0, A.AttributionConfig(sg_samples=n, seed=s)).raw for s in range(20)]
        return np.std(runs, axis=0).mean()

    assert spread(8) / spread(64) > 2


def test_ig_quadratic_closed_form():
    # logit = g^2 with g = <istft(m), v> linear in m; with k/n nodes, sum(raw) = g^2 (1 + 1/n)
    r = np.random.default_rng(8)
    mag, ph = spectrogram(8)
    v = r.normal(size=64)
    g = dsp.istft(mag, ph, SMALL_STFT) @ v
    model = QuadraticWave(2.0 * v / g)  # scaled so g(x) = 2, the f(x) = x^2 at x = 2 case
    for n in (1, 16, 256):
        a = A.integrated_gradients(model, mag, ph, 0, A.AttributionConfig(ig_steps=n))
        assert a.raw.sum() == pytest.approx(4.0 * (1 + 1 / n), rel=1e-9)
    assert a.raw.sum() == pytest.approx(4.0, rel=5e-3)


def _ig_residual(m, mag, ph, c, n):
    ex = A.Explained(m, ph)
    delta = ex.logits(mag)[c] - ex.logits(np.zeros_like(mag))[c]
    total = A.integrated_gradients(m, mag, ph, c, A.AttributionConfig(ig_steps=n)).raw.sum()
    return abs(total - delta) / abs(delta)


@pytest.mark.parametrize("seed", range(5))
def test_ig_completeness_converges_first_order(seed):
    # right Riemann sum: error falls roughly like 1/n, with jitter from relu kinks on the path
    m = small_model(seed)
    mag, ph = spectrogram(seed)
    for c in (0, 1):
        coarse, fine = (_ig_residual(m, mag, ph, c, n) for n in (256, 4096))
        assert fine <= max(coarse / 4, 2e-4)
        assert fine <= 2e-3


@given(seed=st.integers(0, 10_000))
def test_ig_completeness_linear_any_seed(seed):
    r = np.random.default_rng(seed)
    model = LinearWave(r.normal(size=(64, 2)), b=r.normal(size=2))
    mag, ph = spectrogram(seed)
    assert _ig_residual(model, mag, ph, 1, 256) <= 1e-9


def test_ig_custom_baseline_shape_check(linear):
    mag, ph = spectrogram()
    with pytest.raises(ValueError):
        A.integrated_gradients(linear, mag, ph, 0, baseline=np.zeros((2, 2)))
    b = np.full_like(mag, 0.1)
    a = A.integrated_gradients(linear, mag, ph, 0, baseline=b)
    w = A.saliency(linear, mag, ph, 0).raw
    assert np.allclose(a.raw, w * (mag - b))


def test_guided_sign_agreement_on_positive_net():
    r = np.random.default_rng(10)
    model = ReluWave(r.uniform(0, 1, (64, 12)), r.uniform(0, 1, (12, 2)))
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=64)
        std = grad_input(model, x, 0, "standard")
        gd = grad_input(model, x, 0, "guided")
        both = (std != 0) & (gd != 0)
        assert np.all(np.sign(std[both]) == np.sign(gd[both]))


def test_gradcam_hand_computed():
    act = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0], [2.0, 0.0]]])
    grad = np.array([[[0.1, 0.3], [0.0, 0.4]], [[-1.0, -1.0], [1.0, -3.0]]])
    # alpha = (0.2, -1.0); weighted sum = 0.2*act0 - act1 = [[-0.3, 1.4], [-1.4, 0.8]]
    assert np.allclose(A.gradcam(act, grad), [[0.0, 1.4], [0.0, 0.8]])
    assert np.all(A.gradcam(act, np.zeros_like(grad)) == 0)


def test_guided_gradcam_shape_and_range():
    m = small_model(11)
    mag, ph = spectrogram(11)
    a = A.guided_gradcam(m, mag, ph)
    assert a.raw.shape == mag.shape
    assert np.all(a.normalized >= 0) and np.all(a.normalized <= 1)
    with pytest.raises(ValueError):
        A.guided_gradcam(m, mag, ph, layer_id=7)


@pytest.mark.parametrize("kind", ["magnitude", "log_mel"])
def test_upsample_constant_map(kind):
    m = small_model(kind=kind)
    out = A.upsample_to_spectrogram(np.full((3, 2), 0.7), m, (9, SMALL_STFT.n_bins))
    assert out.shape == (9, SMALL_STFT.n_bins) and np.allclose(out, 0.7)


def test_bilinear_hits_grid_points():
    grid = np.arange(12.0).reshape(3, 4)
    assert np.allclose(A.bilinear(grid, np.arange(3.0), np.arange(4.0)), grid)
    assert A.bilinear(grid, np.array([0.5]), np.array([1.5]))[0, 0] == pytest.approx(3.5)


def test_gradient_shap_converges_to_ig():
    m = small_model(12)
    mag, ph = spectrogram(12)
    ig = A.integrated_gradients(m, mag, ph, 0, A.AttributionConfig(ig_steps=512)).raw
    shap = A.gradient_shap(m, mag, ph, 0, A.AttributionConfig(shap_samples=512)).raw
    assert np.linalg.norm(shap - ig) / np.linalg.norm(ig) <= 0.05


def test_seeded_methods_are_deterministic():
    m = small_model(13)
    mag, ph = spectrogram(13)
    for method in ("smoothgrad", "gradient_shap"):
        a = A.attribute(method, m, mag, ph, key=3)
        b = A.attribute(method, m, mag, ph, key=3)
        c = A.attribute(method, m, mag, ph, key=4)
        assert np.array_equal(a.raw, b.raw) and not np.array_equal(a.raw, c.raw)


def test_normalize_examples():
    assert np.allclose(A.normalize([-2.0, 0.0, 2.0]), [1, 0, 1])
    assert np.all(A.normalize(np.full(5, 3.0)) == 0)
    a = np.array([0.0, 0.25, 1.0])
    assert np.array_equal(A.normalize(a), a)


def test_errors():
    m = small_model()
    mag, ph = spectrogram()
    with pytest.raises(ValueError, match="valid: saliency"):
        A.attribute("lime", m, mag, ph)
    with pytest.raises(A.NumericalFailure):
        A.AttributionMap(np.array([np.nan]), "saliency", 0)
    with pytest.raises(ValueError):
        A.AttributionConfig(ig_steps=0)
    with pytest.raises(ValueError):
        A.Explained(Classifier(ModelConfig(waveform_input=False)), ph)
