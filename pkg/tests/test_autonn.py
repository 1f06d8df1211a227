import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saliency_audit.autonn import (
    Classifier,
    ConvSpec,
    ModelConfig,
    Tensor,
    TrainConfig,
    TrainingDiverged,
    grad_input,
    layer_capture,
    train,
)
from saliency_audit.autonn import tensor as T

from .fakes import SMALL_MEL, SMALL_STFT, LinearWave
from .gradcheck import CASES, check


def small_cfg(kind="magnitude", waveform=True, conv=(ConvSpec(3), ConvSpec(4)), **kw):
    return ModelConfig(input_kind=kind, waveform_input=waveform, conv=conv, hidden=6,
                       stft=SMALL_STFT, mel=SMALL_MEL, **kw)


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__)
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(case, seed):
    f, inputs, wrt = case(np.random.default_rng(seed))
    err, _ = check(f, inputs, wrt)
    assert err <= 1e-3


def test_relu_guided_rule():
    for guided, expected in ((False, -1.0), (True, 0.0)):
        x = Tensor(np.array([2.0]), requires_grad=True)
        T.relu(x, guided).backward(np.array([-1.0]))
        assert x.grad[0] == expected


def test_tape_is_topological():
    a = Tensor(np.ones(3), requires_grad=True)
    b = T.exp(a) * a
    c = (b + a).sum()
    order = c.tape()
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.maxpool2d(x, 2).sum().backward()
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_softmax_and_cross_entropy():
    p = T.softmax(np.array([[np.log(3.0), 0.0], [0.0, 0.0]]))
    assert np.allclose(p, [[0.75, 0.25], [0.5, 0.5]])
    loss = T.softmax_cross_entropy(Tensor(np.array([[50.0, 0.0]])), [0])
    assert float(loss.data) <= 1e-6


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5), st.floats(0.01, 5))
def test_softmax_sums_to_one_and_is_monotone(z, i, bump):
    z = np.array(z)
    i %= len(z)
    p = T.softmax(z)
    assert abs(p.sum() - 1) <= 1e-6
    z2 = z.copy()
    z2[i] += bump
    assert T.softmax(z2)[i] >= p[i]


def test_zero_weight_model_outputs_biases():
    m = Classifier(small_cfg(), seed=0, dtype=np.float64)
    for name, p in m.params.items():
        p.data[...] = 0.0
    m.params["fc2.b"].data[...] = [0.25, -1.5]
    x = np.random.default_rng(0).normal(size=64)
    assert np.allclose(m.logits(x), [0.25, -1.5])


def test_forward_is_deterministic():
    x = np.random.default_rng(0).normal(size=(2, 64)).astype(np.float32)
    a = Classifier(small_cfg(), seed=5).logits(x)
    b = Classifier(small_cfg(), seed=5).logits(x)
    assert a.tobytes() == b.tobytes()


def test_forward_shape_errors():
    m = Classifier(small_cfg(kind="log_mel", waveform=False))
    with pytest.raises(ValueError):
        m.logits(np.ones((9, 5)))
    with pytest.raises(ValueError):
        Classifier(small_cfg()).logits(np.ones((1, 2, 3, 4)))
    with pytest.raises(ValueError):
        ModelConfig(n_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(conv=())


def test_identity_conv_activations_equal_input():
    cfg = small_cfg(kind="magnitude", waveform=False, conv=(ConvSpec(1, kernel=1),), pool=1)
    m = Classifier(cfg, seed=0, dtype=np.float64)
    m.params["conv0.w"].data[...] = 1.0
    m.params["conv0.b"].data[...] = 0.0
    x = np.random.default_rng(0).uniform(0.5, 1.0, size=(9, SMALL_STFT.n_bins))
    act, grad = layer_capture(m, x, 0, 0)
    assert act.shape == grad.shape == (1,) + x.shape
    assert np.allclose(act[0], x)


def test_grad_input_class_check():
    m = Classifier(small_cfg(), seed=0)
    with pytest.raises(ValueError):
        grad_input(m, np.ones(64, np.float32), 2)
    with pytest.raises(ValueError):
        layer_capture(m, np.ones(64, np.float32), 5, 0)


def test_guided_equals_standard_without_relu():
    lin = LinearWave(np.random.default_rng(2).normal(size=(64, 2)))
    x = np.random.default_rng(1).normal(size=64)
    assert np.array_equal(grad_input(lin, x, 1, "standard"), grad_input(lin, x, 1, "guided"))
    assert np.allclose(grad_input(lin, x, 1), lin.w[:, 1])


def test_layer_capture_matches_finite_differences():
    m = Classifier(small_cfg(), seed=3, dtype=np.float64)
    x = np.random.default_rng(4).normal(size=64)
    act, grad = layer_capture(m, x, 0, 1)
    eps = 1e-6
    r = np.random.default_rng(5)
    for _ in range(25):
        idx = tuple(int(r.integers(s)) for s in act.shape)
        hi, lo = act.copy(), act.copy()
        hi[idx] += eps
        lo[idx] -= eps
        f_hi = m.forward(x, replace={0: hi[None]}).data[0, 1]
        f_lo = m.forward(x, replace={0: lo[None]}).data[0, 1]
        fd = (f_hi - f_lo) / (2 * eps)
        assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), np.abs(grad).max())


def test_checkpoint_roundtrip(tmp_path):
    m = Classifier(small_cfg(kind="log_mel"), seed=9)
    m.norm = np.array([1.5, 2.0])
    m.save(tmp_path / "m.samc")
    m2 = Classifier.load(tmp_path / "m.samc")
    assert m2.cfg == m.cfg
    x = np.random.default_rng(0).normal(size=(3, 64)).astype(np.float32)
    assert np.array_equal(m.logits(x), m2.logits(x))
    assert (tmp_path / "m.samc").read_bytes()[:4] == b"SAMC"


def _toy_set(n=200, seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, size=(n, 1, 2))
    y = (x[:, 0, 0] > x[:, 0, 1]).astype(int)
    keep = np.abs(x[:, 0, 0] - x[:, 0, 1]) > 0.1
    return x[keep].astype(np.float32), y[keep]


def _toy_model(seed=0):
    cfg = ModelConfig(input_kind="magnitude", waveform_input=False, conv=(ConvSpec(8, kernel=3),), hidden=16)
    return Classifier(cfg, seed=seed)


def test_train_separable_toy():
    x, y = _toy_set()
    m = _toy_model()
    m, hist = train(m, x, y, TrainConfig(batch_size=16, learning_rate=0.05, epochs=50))
    assert hist[-1]["train_acc"] >= 0.99
    assert hist[-1]["loss"] <= hist[0]["loss"]


def test_train_deterministic_and_degenerate_cases():
    x, y = _toy_set(60)
    a, _ = train(_toy_model(), x, y, TrainConfig(epochs=3, learning_rate=0.05))
    b, _ = train(_toy_model(), x, y, TrainConfig(epochs=3, learning_rate=0.05))
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    fresh = _toy_model()
    before = {k: p.data.copy() for k, p in fresh.params.items()}
    _, hist = train(fresh, x, y, TrainConfig(epochs=0))
    assert hist == []
    _, hist = train(fresh, x, y, TrainConfig(epochs=2, learning_rate=0.0))
    assert all(np.array_equal(before[k], p.data) for k, p in fresh.params.items())
    assert len(hist) == 2 and set(hist[0]) == {"epoch", "loss", "train_acc", "val_acc"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_errors():
    x, y = _toy_set(20)
    with pytest.raises(ValueError):
        train(_toy_model(), x[:0], y[:0], TrainConfig())
    with pytest.raises(ValueError):
        train(_toy_model(), x, y + 5, TrainConfig())
    with pytest.raises(TrainingDiverged):
        train(_toy_model(), x * 1e30, y, TrainConfig(learning_rate=1e30, epochs=3))
