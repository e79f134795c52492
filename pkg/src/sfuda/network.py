"""Small CNN models, softmax/cross-entropy math, SGD training and input gradients.

Every model is a feature extractor followed by a single affine classifier; the
prediction is the argmax of the softmax of the classifier logits.
"""

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import ConfigError, check_images, check_labels, check_seed

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
EVAL_BATCH = 512


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class UnsupportedObjectiveError(TypeError):
    """Objective is not a differentiable scalar of the inputs."""


def configure_threads():
    """Cap torch intra-op parallelism from ``SFUDA_THREADS`` when set."""
    n = os.environ.get("SFUDA_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# numpy reference math


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels):
    """Mean cross-entropy from log-softmax."""
    lp = log_softmax(logits)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-lp[np.arange(len(labels)), labels].mean())


# ---------------------------------------------------------------------------
# model


class Model(nn.Module):
    """Extractor ``g`` and classifier ``h``; ``forward`` returns logits.

    Inputs are channel-last ``(n, W, H, C)`` tensors in ``[0, 1]``.
    """

    def __init__(self, input_shape, num_classes, feature_dim=128, channels=(16, 32)):
        super().__init__()
        w, h, c = (int(v) for v in input_shape)
        if min(w, h, c) <= 0 or num_classes < 1 or feature_dim < 1:
            raise ConfigError(f"invalid model shape: input={input_shape} K={num_classes}")
        if not 1 <= len(channels) <= 3:
            raise ConfigError("between 1 and 3 convolution blocks are supported")
        self.input_shape = (w, h, c)
        self.num_classes = int(num_classes)
        self.feature_dim = int(feature_dim)
        self.channels = tuple(int(ch) for ch in channels)
        layers, in_ch = [], c
        for ch in self.channels:
            # smooth activation and average pooling keep the network differentiable
            # everywhere, which the finite-difference gradient checks rely on
            layers += [nn.Conv2d(in_ch, ch, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2, ceil_mode=True)]
            in_ch = ch
        sw, sh = w, h
        for _ in self.channels:
            sw, sh = math.ceil(sw / 2), math.ceil(sh / 2)
        layers += [nn.Flatten(), nn.Linear(in_ch * sw * sh, self.feature_dim), nn.SiLU()]
        self.extractor = nn.Sequential(*layers)
        self.classifier = nn.Linear(self.feature_dim, self.num_classes)

    def _nchw(self, x):
        return x.permute(0, 3, 2, 1)

    def features(self, x):
        return self.extractor(self._nchw(x))

    def forward(self, x):
        return self.classifier(self.features(x))

    def architecture(self):
        return {
            "type": "small_cnn",
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "channels": list(self.channels),
        }


def build_small_cnn(input_shape, num_classes, seed=0, feature_dim=128, channels=(16, 32)):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(check_seed(seed))
        model = Model(input_shape, num_classes, feature_dim, channels)
    return model.eval()


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


@torch.no_grad()
def _batched(fn, images, batch_size=EVAL_BATCH):
    x = _as_tensor(images)
    outs = [fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(outs).numpy() if outs else np.zeros((0,), np.float32)


def predict_logits(model, images):
    return _batched(model.eval(), images)


def extract_features(model, images):
    return _batched(model.eval().features, images)


def predict_proba(model, images):
    return softmax(predict_logits(model, images))


def predict(model, images):
    return np.argmax(predict_logits(model, images), axis=1)


def parameter_digest(model):
    from .data import array_digest

    return array_digest(*(t.detach().numpy() for t in model.state_dict().values()))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        # lr == 0 is accepted as a no-op run
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        self.seed = check_seed(self.seed)

    def to_dict(self):
        return asdict(self)


@torch.no_grad()
def mean_loss(model, images, labels):
    logits = _as_tensor(predict_logits(model, images)).double()
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    return float(nn.functional.cross_entropy(logits, y))


def train_supervised(model, images, labels, cfg):
    """Minimize mean cross-entropy with minibatch SGD; returns ``model`` (trained in place).

    ``model.history`` receives the initial and final full-data losses plus the
    per-epoch running mean.
    """
    images = check_images(images)
    labels = check_labels(labels, len(images), model.num_classes)
    history = {"initial_loss": None, "epoch_loss": [], "final_loss": None}
    model.history = history
    if len(images) == 0:
        return model
    history["initial_loss"] = mean_loss(model, images, labels)
    if cfg.epochs == 0:
        history["final_loss"] = history["initial_loss"]
        return model
    x_all, y_all = _as_tensor(images), torch.from_numpy(labels)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = nn.functional.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                model.eval()
                raise TrainingDivergedError(step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        history["epoch_loss"].append(total / len(order))
        log.debug("epoch %d loss %.4f", epoch, history["epoch_loss"][-1])
    model.eval()
    history["final_loss"] = mean_loss(model, images, labels)
    if not math.isfinite(history["final_loss"]):
        raise TrainingDivergedError(step, history["final_loss"])
    return model


# ---------------------------------------------------------------------------
# gradients


def grad_wrt_input(model, objective, x):
    """Gradient of ``objective(model, x)`` with respect to the input batch ``x``.

    ``objective`` maps the model and a float tensor of the same shape as ``x`` to
    a scalar tensor. Parameters are left untouched and receive no gradient.
    """
    dtype = x.dtype if isinstance(x, torch.Tensor) and x.is_floating_point() else torch.float32
    xt = (x.detach().clone() if isinstance(x, torch.Tensor) else torch.tensor(np.asarray(x))).to(dtype)
    xt.requires_grad_(True)
    was_training = model.training
    model.eval()
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        out = objective(model, xt)
        if not isinstance(out, torch.Tensor) or out.numel() != 1:
            raise UnsupportedObjectiveError("objective must return a scalar tensor")
        if not out.requires_grad:
            raise UnsupportedObjectiveError("objective does not depend differentiably on the input")
        (grad,) = torch.autograd.grad(out.reshape(()), xt)
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)
    return grad.detach().numpy() if not isinstance(x, torch.Tensor) else grad.detach()


def loss_grad_wrt_params(model, images, labels):
    """Flat gradient of the mean cross-entropy with respect to all parameters."""
    model.zero_grad()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(images)).to(dtype)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    loss = nn.functional.cross_entropy(model(x), y)
    grads = torch.autograd.grad(loss, list(model.parameters()))
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, path, stem="model"):
    """Write ``<stem>.bin`` (JSON header + float32 LE tensors) and ``<stem>.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    header = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    blob = json.dumps(header).encode()
    with open(path / f"{stem}.bin", "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in state.values():
            f.write(np.ascontiguousarray(v.detach().numpy(), dtype="<f4").tobytes())
    (path / f"{stem}.json").write_text(json.dumps(model.architecture(), indent=2))
    return path


def load_model(path, stem="model"):
    path = Path(path)
    arch = json.loads((path / f"{stem}.json").read_text())
    if arch.get("type") != "small_cnn":
        raise ValueError(f"unknown architecture {arch.get('type')!r}")
    model = Model(arch["input_shape"], arch["num_classes"], arch["feature_dim"], arch["channels"])
    raw = (path / f"{stem}.bin").read_bytes()
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + hlen])
    offset, state = 4 + hlen, {}
    for entry in header:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}/{stem}.bin has trailing or missing bytes")
    model.load_state_dict(state)
    return model.eval()


# ---------------------------------------------------------------------------
# estimator


class SmallCNNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Supervised small-CNN classifier; ``transform`` returns extractor features."""

    def __init__(
        self,
        num_classes=None,
        feature_dim=128,
        channels=(16, 32),
        learning_rate=1e-3,
        batch_size=64,
        epochs=10,
        momentum=0.0,
        weight_decay=0.0,
        seed=0,
    ):
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.channels = channels
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            self.learning_rate, self.batch_size, self.epochs, self.seed, self.momentum, self.weight_decay
        )

    def fit(self, X, y):
        X = check_images(X)
        k = self.num_classes or int(np.max(y)) + 1
        y = check_labels(y, len(X), k)
        self.model_ = build_small_cnn(X.shape[1:], k, self.seed, self.feature_dim, self.channels)
        train_supervised(self.model_, X, y, self._train_config())
        self.classes_ = np.arange(k)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_images(X))

    def transform(self, X):
        check_is_fitted(self, "model_")
        return extract_features(self.model_, check_images(X))
