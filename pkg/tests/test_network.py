import copy
import json
import struct

import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression

from sfuda._validation import ConfigError
from sfuda.dat import feature_kl_tensor
from sfuda.network import (
    SmallCNNClassifier,
    TrainConfig,
    TrainingDivergedError,
    UnsupportedObjectiveError,
    build_small_cnn,
    cross_entropy,
    grad_wrt_input,
    load_model,
    loss_grad_wrt_params,
    parameter_digest,
    predict,
    predict_logits,
    predict_proba,
    save_model,
    softmax,
    train_supervised,
)

from helpers import fd_input_grad, fd_param_grad, random_coords, rel_err

GRAD_RTOL = 1e-3
FD_STEP = 1e-3


def _params(model):
    return [p.detach().clone() for p in model.parameters()]


def test_same_seed_same_parameters():
    a = build_small_cnn((8, 8, 3), 4, seed=11)
    b = build_small_cnn((8, 8, 3), 4, seed=11)
    c = build_small_cnn((8, 8, 3), 4, seed=12)
    assert parameter_digest(a) == parameter_digest(b)
    assert parameter_digest(a) != parameter_digest(c)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_small_cnn((8, 8, 3), 4, seed=5)
    assert torch.equal(torch.rand(3), expected)


def test_shapes(tiny_model, rng):
    x = rng.random((5, 8, 8, 3)).astype(np.float32)
    assert predict_logits(tiny_model, x).shape == (5, 4)
    assert tiny_model.features(torch.from_numpy(x)).shape == (5, 16)
    p = predict_proba(tiny_model, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_non_square_inputs(rng):
    m = build_small_cnn((7, 5, 1), 3, seed=0, channels=(4, 4, 4))
    assert predict_logits(m, rng.random((2, 7, 5, 1)).astype(np.float32)).shape == (2, 3)


def test_invalid_shapes_rejected():
    with pytest.raises(ConfigError):
        build_small_cnn((0, 8, 3), 4)
    with pytest.raises(ConfigError):
        build_small_cnn((8, 8, 3), 4, channels=())


def test_predict_is_argmax_of_softmax(tiny_model, rng):
    x = rng.random((20, 8, 8, 3)).astype(np.float32)
    logits = predict_logits(tiny_model, x)
    np.testing.assert_array_equal(predict(tiny_model, x), np.argmax(softmax(logits), axis=1))


def test_softmax_shift_invariance(rng):
    z = rng.normal(size=(6, 5)) * 10
    np.testing.assert_allclose(softmax(z), softmax(z + rng.normal(size=(6, 1)) * 100), atol=1e-6)


def test_predict_invariant_under_positive_logit_scaling(tiny_model, rng):
    x = rng.random((50, 8, 8, 3)).astype(np.float32)
    before = predict(tiny_model, x)
    scaled = copy.deepcopy(tiny_model)
    with torch.no_grad():
        scaled.classifier.weight.mul_(3.7)
        scaled.classifier.bias.mul_(3.7)
    np.testing.assert_array_equal(predict(scaled, x), before)


def test_cross_entropy_of_confident_correct_prediction_is_zero():
    logits = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 100.0]])
    assert cross_entropy(logits, [0, 2]) == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_scalar_oracle(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    brute = 0.0
    for row, label in zip(z, y):
        brute += -(row[label] - np.log(sum(np.exp(v) for v in row)))
    assert cross_entropy(z, y) == pytest.approx(brute / 4, rel=1e-12)


def test_untrained_model_near_chance():
    rng = np.random.default_rng(0)
    x = rng.random((1000, 8, 8, 3)).astype(np.float32)
    y = np.repeat(np.arange(10), 100)
    m = build_small_cnn((8, 8, 3), 10, seed=3)
    acc = 100.0 * np.mean(predict(m, x) == y)
    assert abs(acc - 10.0) <= 5.0


def test_zero_learning_rate_leaves_parameters(tiny_model, rng):
    before = _params(tiny_model)
    x = rng.random((32, 8, 8, 3)).astype(np.float32)
    train_supervised(tiny_model, x, rng.integers(0, 4, 32), TrainConfig(learning_rate=0.0, epochs=2))
    for a, b in zip(before, tiny_model.parameters()):
        assert torch.equal(a, b)


def test_zero_epochs_leaves_parameters(tiny_model, rng):
    before = _params(tiny_model)
    x = rng.random((8, 8, 8, 3)).astype(np.float32)
    train_supervised(tiny_model, x, rng.integers(0, 4, 8), TrainConfig(epochs=0))
    assert all(torch.equal(a, b) for a, b in zip(before, tiny_model.parameters()))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(seed=-1)


def _separable_toy(rng, n=200):
    # class 1 has a bright left half, class 0 a bright right half
    x = rng.random((n, 8, 8, 1)).astype(np.float32) * 0.3
    y = rng.integers(0, 2, n)
    x[y == 1, :4] += 0.6
    x[y == 0, 4:] += 0.6
    return np.clip(x, 0, 1), y


def test_separable_toy_reaches_95_percent(rng):
    x, y = _separable_toy(rng)
    # convex oracle: the data are linearly separable
    lr = LogisticRegression(C=1e4, max_iter=5000).fit(x.reshape(len(x), -1), y)
    assert lr.score(x.reshape(len(x), -1), y) == 1.0
    m = build_small_cnn((8, 8, 1), 2, seed=0)
    train_supervised(m, x, y, TrainConfig(learning_rate=0.05, epochs=20, batch_size=16))
    assert np.mean(predict(m, x) == y) >= 0.95
    assert m.history["final_loss"] <= m.history["initial_loss"]
    assert len(m.history["epoch_loss"]) == 20


def test_training_deterministic(rng):
    x, y = _separable_toy(rng, 64)
    runs = []
    for _ in range(2):
        m = build_small_cnn((8, 8, 1), 2, seed=1)
        train_supervised(m, x, y, TrainConfig(learning_rate=0.05, epochs=3, seed=9))
        runs.append(parameter_digest(m))
    assert runs[0] == runs[1]


def test_nan_loss_raises(tiny_model, rng):
    with torch.no_grad():
        tiny_model.classifier.weight.fill_(float("nan"))
    x = rng.random((8, 8, 8, 3)).astype(np.float32)
    with pytest.raises(TrainingDivergedError) as info:
        train_supervised(tiny_model, x, rng.integers(0, 4, 8), TrainConfig(epochs=1))
    assert info.value.step == 0


def test_label_range_checked(tiny_model, rng):
    with pytest.raises(ValueError):
        train_supervised(tiny_model, rng.random((2, 8, 8, 3)).astype(np.float32), [0, 4], TrainConfig())


# gradients ----------------------------------------------------------------


def test_grad_of_sum_is_ones(tiny_model, rng):
    x = rng.random((2, 8, 8, 3)).astype(np.float32)
    g = grad_wrt_input(tiny_model, lambda m, v: v.sum(), x)
    np.testing.assert_array_equal(g, np.ones_like(x))


def test_grad_of_half_square_norm_is_x(tiny_model, rng):
    x = rng.random((2, 8, 8, 3)).astype(np.float32)
    g = grad_wrt_input(tiny_model, lambda m, v: 0.5 * (v**2).sum(), x)
    np.testing.assert_allclose(g, x, rtol=1e-6)


def test_grad_leaves_parameters_alone(tiny_model, rng):
    before = _params(tiny_model)
    x = rng.random((2, 8, 8, 3)).astype(np.float32)
    grad_wrt_input(tiny_model, lambda m, v: m(v).sum(), x)
    assert all(p.grad is None for p in tiny_model.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, tiny_model.parameters()))
    assert all(p.requires_grad for p in tiny_model.parameters())


def test_unsupported_objectives(tiny_model, rng):
    x = rng.random((2, 8, 8, 3)).astype(np.float32)
    with pytest.raises(UnsupportedObjectiveError):
        grad_wrt_input(tiny_model, lambda m, v: m(v), x)
    with pytest.raises(UnsupportedObjectiveError):
        grad_wrt_input(tiny_model, lambda m, v: torch.tensor(1.0), x)
    with pytest.raises(UnsupportedObjectiveError):
        grad_wrt_input(tiny_model, lambda m, v: 3.0, x)


def sharpened(model, factor=30.0):
    """Scale the feature layer so the feature softmax is far from uniform, as after training."""
    m = copy.deepcopy(model)
    with torch.no_grad():
        m.extractor[-2].weight.mul_(factor)
        m.extractor[-2].bias.mul_(factor)
    return m


def scaled_rel_errors(auto, fd, scale):
    # |a - b| / max(|a|, |b|, 1e-3 * max|grad|): float32 rounding puts an absolute
    # error floor under every coordinate, so tiny coordinates are judged at that scale
    floor = 1e-3 * scale
    return np.array([abs(a - b) / max(abs(a), abs(b), floor) for a, b in zip(auto, fd)])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_feature_kl_input_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = sharpened(build_small_cnn((8, 8, 3), 4, seed=seed, feature_dim=16, channels=(4, 8)))
    xt = rng.random((3, 8, 8, 3)).astype(np.float32)
    xe = rng.random((3, 8, 8, 3)).astype(np.float32)

    def objective(m, v):
        return feature_kl_tensor(m, torch.from_numpy(xt).to(v.dtype), v)

    g = grad_wrt_input(model, objective, xe)
    coords = random_coords(rng, xe.shape, 20)
    fd = fd_input_grad(model, objective, xe, coords, h=FD_STEP)
    errs = scaled_rel_errors([g[c] for c in coords], fd, np.abs(g).max())
    assert errs.max() < GRAD_RTOL, errs


def test_float64_autodiff_matches_finite_differences_tightly():
    # second route: in double precision the only error left is the O(h^2) truncation
    rng = np.random.default_rng(5)
    model = sharpened(build_small_cnn((8, 8, 3), 4, seed=5, feature_dim=16, channels=(4, 8))).double()
    xt = torch.from_numpy(rng.random((3, 8, 8, 3)))
    xe = rng.random((3, 8, 8, 3))

    def objective(m, v):
        return feature_kl_tensor(m, xt, v)

    g = grad_wrt_input(model, objective, torch.from_numpy(xe)).numpy()
    coords = random_coords(rng, xe.shape, 20)
    fd = fd_input_grad(model, objective, xe, coords, h=FD_STEP)
    assert max(rel_err(g[c], f) for c, f in zip(coords, fd)) < 1e-5


@pytest.mark.parametrize("seed", [0, 1])
def test_training_loss_parameter_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = build_small_cnn((8, 8, 3), 4, seed=seed, feature_dim=16, channels=(4, 8))
    x = rng.random((6, 8, 8, 3)).astype(np.float32)
    y = rng.integers(0, 4, 6)
    g = loss_grad_wrt_params(model, x, y)
    idx = rng.choice(len(g), size=20, replace=False)

    def loss(m):
        return torch.nn.functional.cross_entropy(m(torch.from_numpy(x).double()), torch.from_numpy(y))

    fd = fd_param_grad(model, loss, idx, h=FD_STEP)
    errs = scaled_rel_errors(g[idx], fd, np.abs(g).max())
    assert errs.max() < GRAD_RTOL, errs


def test_training_loss_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = build_small_cnn((8, 8, 3), 4, seed=3, feature_dim=16, channels=(4, 8))
    x = rng.random((4, 8, 8, 3)).astype(np.float32)
    y = torch.from_numpy(rng.integers(0, 4, 4))

    def objective(m, v):
        return torch.nn.functional.cross_entropy(m(v), y)

    g = grad_wrt_input(model, objective, x)
    coords = random_coords(rng, x.shape, 20)
    fd = fd_input_grad(model, objective, x, coords, h=FD_STEP)
    errs = scaled_rel_errors([g[c] for c in coords], fd, np.abs(g).max())
    assert errs.max() < GRAD_RTOL, errs


# checkpoints --------------------------------------------------------------


def test_checkpoint_bit_exact(tmp_path, tiny_model, rng):
    x = rng.random((4, 8, 8, 3)).astype(np.float32)
    save_model(tiny_model, tmp_path)
    back = load_model(tmp_path)
    assert parameter_digest(back) == parameter_digest(tiny_model)
    assert predict_logits(back, x).tobytes() == predict_logits(tiny_model, x).tobytes()
    arch = json.loads((tmp_path / "model.json").read_text())
    assert arch["num_classes"] == 4 and arch["feature_dim"] == 16


def test_checkpoint_layout(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path, stem="stage1")
    raw = (tmp_path / "stage1.bin").read_bytes()
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + hlen])
    names = [h["name"] for h in header]
    assert names == list(tiny_model.state_dict())
    n_floats = sum(int(np.prod(h["shape"])) for h in header)
    assert len(raw) == 4 + hlen + 4 * n_floats
    first = tiny_model.state_dict()[names[0]].numpy().ravel()
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4", count=first.size, offset=4 + hlen), first)


def test_truncated_checkpoint_rejected(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path)
    path = tmp_path / "model.bin"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_model(tmp_path)


# estimator ----------------------------------------------------------------


def test_estimator_api(rng):
    x, y = _separable_toy(rng, 200)
    est = SmallCNNClassifier(learning_rate=0.05, epochs=20, batch_size=16, seed=0)
    assert clone(est).get_params() == est.get_params()
    est.fit(x, y)
    assert est.score(x, y) >= 0.9
    assert est.predict_proba(x).shape == (200, 2)
    assert est.transform(x).shape == (200, 128)
    np.testing.assert_array_equal(est.classes_, [0, 1])
