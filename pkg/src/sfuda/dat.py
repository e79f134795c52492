"""Distributionally adversarial training: pull third-party inputs toward the target.

Each third-party batch is paired positionally with a random target batch and its
pixels descend the feature-space KL divergence on the frozen target extractor.
Feature vectors are turned into distributions with a softmax over the feature
axis; the target sample is the reference (first) distribution.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, check_images, check_seed
from .data import UnlabeledDataset, array_digest, save_dataset
from .network import PROB_FLOOR, grad_wrt_input

log = logging.getLogger(__name__)


@dataclass
class DatConfig:
    iterations: int = 5
    step_size: float = 5.0
    batch_size: int = 64
    max_halvings: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        # step_size == 0 is allowed as an identity run
        if not self.step_size >= 0:
            raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        if self.batch_size < 1 or self.max_halvings < 0:
            raise ConfigError("batch_size must be >= 1 and max_halvings >= 0")
        self.seed = check_seed(self.seed)

    def to_dict(self):
        return asdict(self)


def feature_kl_tensor(model, x_t, x_e):
    """Mean over pairs of KL(softmax(g(x_t)) || softmax(g(x_e))) as a scalar tensor."""
    if x_t.shape != x_e.shape:
        raise ValueError(f"paired batches differ in shape: {tuple(x_t.shape)} vs {tuple(x_e.shape)}")
    p_t = torch.softmax(model.features(x_t), dim=1).clamp_min(PROB_FLOOR)
    p_e = torch.softmax(model.features(x_e), dim=1).clamp_min(PROB_FLOOR)
    return (p_t * (p_t.log() - p_e.log())).sum(dim=1).mean()


def feature_kl(model, x_t_batch, x_e_batch):
    x_t = torch.as_tensor(np.asarray(x_t_batch))
    x_e = torch.as_tensor(np.asarray(x_e_batch))
    if x_t.shape != x_e.shape:
        raise ValueError(f"paired batches differ in shape: {tuple(x_t.shape)} vs {tuple(x_e.shape)}")
    model.eval()
    with torch.no_grad():
        return float(feature_kl_tensor(model, x_t.float(), x_e.float()))


def _descend(model, x_t, x_e, cfg):
    """Run the clipped descent on one batch; returns (x_e', kl_before, kl_after)."""

    def objective(m, x):
        return feature_kl_tensor(m, x_t, x)

    with torch.no_grad():
        kl = float(feature_kl_tensor(model, x_t, x_e))
    start = kl
    x = x_e
    for _ in range(cfg.iterations):
        grad = grad_wrt_input(model, objective, x)
        mu = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            cand = torch.clamp(x - mu * grad, 0.0, 1.0)
            with torch.no_grad():
                kl_c = float(feature_kl_tensor(model, x_t, cand))
            if kl_c <= kl:
                x, kl = cand, kl_c
                break
            mu *= 0.5
    return x, start, kl


def perturb_batches(model, target_images, third_images, cfg):
    """Core loop over third-party batches; returns (perturbed images, per-batch stats)."""
    target_images = check_images(target_images, "target images")
    third_images = check_images(third_images, "third-party images")
    if len(third_images) == 0:
        raise ValueError("third-party set is empty")
    if len(target_images) == 0:
        raise ValueError("target set is empty")
    model.eval()
    rng = np.random.default_rng(cfg.seed)
    xt_all = torch.from_numpy(np.ascontiguousarray(target_images))
    xe_all = torch.from_numpy(np.ascontiguousarray(third_images))
    out = np.empty_like(third_images)
    stats = []
    for b, start in enumerate(range(0, len(xe_all), cfg.batch_size)):
        xe = xe_all[start : start + cfg.batch_size]
        idx = rng.choice(len(xt_all), size=len(xe), replace=len(xt_all) < len(xe))
        x, kl0, kl1 = _descend(model, xt_all[idx], xe, cfg)
        out[start : start + len(xe)] = x.numpy()
        stats.append({"batch": b, "size": len(xe), "kl_before": kl0, "kl_after": kl1})
        log.debug("DAT batch %d: KL %.6g -> %.6g", b, kl0, kl1)
    return out, stats


def dat_generate(model, target, third_party, cfg=None):
    """Perturbed copy of ``third_party``; the model and target data are not modified."""
    cfg = cfg or DatConfig()
    images, _ = perturb_batches(model, target.images, third_party.images, cfg)
    return UnlabeledDataset(images)


def save_perturbed(dataset, path, source, cfg):
    """Save in the dataset directory format plus ``provenance.json``."""
    path = save_dataset(dataset, path, dtype="f32")
    provenance = {
        "source_digest": array_digest(source.images),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
    }
    (Path(path) / "provenance.json").write_text(json.dumps(provenance, indent=2))
    return path


class DistributionalAdversarialPerturber(TransformerMixin, BaseEstimator):
    """``fit`` on target images and a frozen model; ``transform`` perturbs third-party images."""

    def __init__(self, model=None, iterations=5, step_size=5.0, batch_size=64, max_halvings=5, seed=0):
        self.model = model
        self.iterations = iterations
        self.step_size = step_size
        self.batch_size = batch_size
        self.max_halvings = max_halvings
        self.seed = seed

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("a frozen target model is required")
        self.target_images_ = check_images(X, "target images")
        return self

    def transform(self, X):
        check_is_fitted(self, "target_images_")
        cfg = DatConfig(self.iterations, self.step_size, self.batch_size, self.max_halvings, self.seed)
        images, self.batch_stats_ = perturb_batches(self.model, self.target_images_, X, cfg)
        return images
