"""Membership-inference harness: shadow-model attack data, FCN attack model, judging.

The attack model sees a victim's softmax output for a sample and guesses
whether that sample was in the victim's training set.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import ConfigError, check_seed
from .data import DomainShift, SyntheticConfig, make_synthetic_shift_suite
from .network import PROB_FLOOR, TrainConfig, TrainingDivergedError, build_small_cnn, predict_proba, train_supervised
from .oracle import Oracle, SourceEnsemble
from .pipeline import evaluate, stage_init_another

log = logging.getLogger(__name__)

HIDDEN = (128, 64, 32, 16)


@dataclass
class AttackDataset:
    x: np.ndarray  # (n, K) soft labels
    y: np.ndarray  # (n,) membership bits

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if np.any((self.y != 0) & (self.y != 1)):
            raise ValueError("membership labels must be 0 or 1")
        if len(self.x) and np.any(np.abs(self.x.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("soft-label rows must sum to 1")

    def __len__(self):
        return len(self.y)

    @property
    def balance(self):
        return float(self.y.mean()) if len(self.y) else float("nan")


def _balanced_pools(member_pool, nonmember_pool):
    if len(member_pool) == 0 or len(nonmember_pool) == 0:
        raise ValueError("member and non-member pools must be non-empty")
    n = min(len(member_pool), len(nonmember_pool))
    return member_pool.images[:n], nonmember_pool.images[:n]


def build_attack_dataset(shadow, member_pool, nonmember_pool):
    members, others = _balanced_pools(member_pool, nonmember_pool)
    x = np.concatenate([predict_proba(shadow, members), predict_proba(shadow, others)])
    y = np.concatenate([np.ones(len(members), np.int64), np.zeros(len(others), np.int64)])
    return AttackDataset(x, y)


class AttackNet(nn.Module):
    """Five affine layers with ReLU between them; two output logits.

    With ``input_map="log-sorted"`` the soft label is first sorted in descending
    order and mapped to scaled log-probabilities. This fixed map has no
    parameters; it makes near-saturated confidences (0.9999 vs 0.99)
    distinguishable and removes the dependence on which class is predicted.
    """

    def __init__(self, num_classes, hidden=HIDDEN, input_map="log-sorted"):
        super().__init__()
        if input_map not in ("log-sorted", "raw"):
            raise ConfigError(f"unknown input_map {input_map!r}")
        self.input_map = input_map
        widths = [num_classes, *hidden, 2]
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        if self.input_map == "log-sorted":
            x = torch.sort(x, dim=1, descending=True).values
            x = torch.log(x.clamp_min(PROB_FLOOR)) / -math.log(PROB_FLOOR)
        return self.layers(x)


@dataclass
class AttackModel:
    net: AttackNet
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")
    history: dict = field(default_factory=dict)

    def membership_proba(self, x):
        with torch.no_grad():
            logits = self.net(torch.as_tensor(np.asarray(x), dtype=torch.float32))
            return torch.softmax(logits, dim=1)[:, 1].numpy().astype(np.float64)

    def predict(self, x):
        return (self.membership_proba(x) > 0.5).astype(np.int64)

    def accuracy(self, data):
        return float(100.0 * np.mean(self.predict(data.x) == data.y))


def train_attack_model(atk_data, cfg, holdout=0.2, hidden=HIDDEN, input_map="log-sorted"):
    """Train the FCN on a random (1 - holdout) split; held-out accuracy is reported."""
    if len(atk_data) < 2:
        raise ValueError("attack dataset is too small")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(atk_data))
    cut = len(order) - int(round(holdout * len(order)))
    tr, te = order[:cut], order[cut:]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = AttackNet(atk_data.x.shape[1], hidden, input_map)
    x = torch.as_tensor(atk_data.x[tr], dtype=torch.float32)
    y = torch.as_tensor(atk_data.y[tr])
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = []
    net.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = nn.functional.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(len(losses), loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(perm))
    net.eval()
    model = AttackModel(net, history={"epoch_loss": losses})
    model.train_accuracy = model.accuracy(AttackDataset(atk_data.x[tr], atk_data.y[tr]))
    if len(te):
        model.heldout_accuracy = model.accuracy(AttackDataset(atk_data.x[te], atk_data.y[te]))
    return model


def judge(atk, victim, member_pool, nonmember_pool):
    """Attack accuracy (%) at telling ``victim``'s members from non-members."""
    return atk.accuracy(build_attack_dataset(victim, member_pool, nonmember_pool))


class MembershipInferenceAttack(ClassifierMixin, BaseEstimator):
    """``fit(soft_labels, membership)``; ``predict`` returns membership bits."""

    def __init__(self, hidden=HIDDEN, input_map="log-sorted", learning_rate=0.05, momentum=0.9, epochs=200,
                 batch_size=64, holdout=0.2, seed=0):
        self.hidden = hidden
        self.input_map = input_map
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.holdout = holdout
        self.seed = seed

    def fit(self, X, y):
        cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.seed, self.momentum)
        self.attack_ = train_attack_model(AttackDataset(X, y), cfg, self.holdout, tuple(self.hidden),
                                          self.input_map)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "attack_")
        p = self.attack_.membership_proba(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        check_is_fitted(self, "attack_")
        return self.attack_.predict(X)


# ---------------------------------------------------------------------------
# experiment


def _membership_suite():
    # noisy sources and wide pose jitter make small-data models memorize
    return SyntheticConfig(
        n_per_domain=1000,
        n_third_party=2000,
        pose_jitter=60.0,
        sources=[
            DomainShift(noise=0.3),
            DomainShift(rotation=-15.0, color_shift=(-0.05, 0.1, 0.0), contrast=0.9, noise=0.3),
        ],
    )


@dataclass
class MembershipConfig:
    suite: SyntheticConfig = field(default_factory=_membership_suite)
    members: int = 200
    # overfit shadow/victim recipe: small data, many epochs
    source_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.05, batch_size=16, epochs=100, momentum=0.9)
    )
    init_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=20))
    attack_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.05, momentum=0.9, epochs=200)
    )

    @classmethod
    def from_dict(cls, d):
        """Partial dicts are merged onto the defaults, the suite included."""
        d = dict(d)
        out = cls()
        if "suite" in d:
            out.suite = SyntheticConfig.from_dict({**out.suite.to_dict(), **d.pop("suite")})
        for key, value in d.items():
            if key not in ("members", "source_train", "init_train", "attack_train"):
                raise ConfigError(f"unknown membership config key {key!r}")
            setattr(out, key, TrainConfig(**value) if key.endswith("_train") else int(value))
        return out

    def to_dict(self):
        return {"suite": self.suite.to_dict(), "members": self.members,
                "source_train": self.source_train.to_dict(), "init_train": self.init_train.to_dict(),
                "attack_train": self.attack_train.to_dict()}


def run_membership_experiment(seed, cfg=None):
    """Shadow on source 0, victim on source 1, plus the oracle-initialized target model.

    Returns a dict of judgement accuracies (%) and diagnostics.
    """
    cfg = cfg or MembershipConfig()
    seed = check_seed(seed)
    sources, target, third_party = make_synthetic_shift_suite(seed, cfg.suite)
    if len(sources) < 2:
        raise ConfigError("membership experiment needs two source domains")
    pools = []
    for i, src in enumerate(sources[:2]):
        members = src.subset(np.arange(cfg.members))
        others = src.subset(np.arange(cfg.members, min(len(src), 2 * cfg.members)))
        pools.append((members, others))
    models = []
    for i, (members, _) in enumerate(pools):
        m = build_small_cnn(members.shape, members.num_classes, seed=seed + 1000 + i)
        train_supervised(m, members.images, members.labels,
                         TrainConfig(**{**cfg.source_train.to_dict(), "seed": cfg.source_train.seed + i}))
        models.append(m)
    shadow, victim = models
    (sh_mem, sh_out), (vi_mem, vi_out) = pools

    atk = train_attack_model(build_attack_dataset(shadow, sh_mem, sh_out), cfg.attack_train)

    ensemble = SourceEnsemble(models)
    for members, others in pools:
        ensemble.register_forbidden(members.images)
        ensemble.register_forbidden(others.images)
    ensemble.register_forbidden(target.images)
    init_model = stage_init_another(Oracle(ensemble), third_party, target.num_classes, cfg.init_train,
                                    seed=seed + 2000)
    result = {
        "shadow_train_accuracy": evaluate(shadow, sh_mem),
        "shadow_test_accuracy": evaluate(shadow, sh_out),
        "attack_heldout_accuracy": atk.heldout_accuracy,
        "acc_judge": {
            "shadow": judge(atk, shadow, sh_mem, sh_out),
            "source_model": judge(atk, victim, vi_mem, vi_out),
            "sfuda_init": judge(atk, init_model, vi_mem, vi_out),
        },
    }
    result["gap"] = result["acc_judge"]["source_model"] - result["acc_judge"]["sfuda_init"]
    return result
