"""Target-side adaptation driven only by hard-label queries to the source oracle.

Stages, in order:

1. query the oracle on the third-party set and train a fresh target model on
   the returned labels (initialization);
2. fine-tune on the target set with centroid pseudo-labels;
3. perturb the third-party set toward the target distribution, query again,
   retrain on the new labels and fine-tune once more.

The centroid (CP) and Gaussian-noise (GNP) query baselines and the synthetic
end-to-end experiment live here as well.
"""

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, check_images, check_seed
from .dat import DatConfig, dat_generate
from .data import SyntheticConfig, UnlabeledDataset, make_synthetic_shift_suite
from .network import (
    TrainConfig,
    build_small_cnn,
    extract_features,
    predict,
    predict_proba,
    save_model,
    train_supervised,
)
from .oracle import Oracle, query_session, train_source_ensemble
from .refine import pseudo_label_target

log = logging.getLogger(__name__)

ABLATIONS = {
    "another": (True, False, False),
    "another+dat": (True, True, False),
    "full": (True, True, True),
}


def _train_config(d, **defaults):
    if isinstance(d, TrainConfig):
        return d
    return TrainConfig(**{**defaults, **(d or {})})


@dataclass
class PipelineConfig:
    init_another: bool = True
    dat_retrain: bool = True
    target_finetune: bool = True
    init_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=20))
    finetune_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=10))
    retrain_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=20))
    dat: DatConfig = field(default_factory=DatConfig)
    pseudo_label_iterations: int = 1
    feature_dim: int = 128
    seed: int = 0
    eval_each_epoch: bool = False
    out_dir: str = None

    def __post_init__(self):
        self.seed = check_seed(self.seed)
        if (self.dat_retrain or self.target_finetune) and not self.init_another:
            raise ConfigError("dat_retrain and target_finetune require init_another")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("init_train", "finetune_train", "retrain_train"):
            if key in d:
                d[key] = _train_config(d[key])
        if "dat" in d and not isinstance(d["dat"], DatConfig):
            d["dat"] = DatConfig(**d["dat"])
        if "ablation" in d:
            d.update(zip(("init_another", "dat_retrain", "target_finetune"), ABLATIONS[d.pop("ablation")]))
        return cls(**d)

    @classmethod
    def for_ablation(cls, name, **kw):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        flags = dict(zip(("init_another", "dat_retrain", "target_finetune"), ABLATIONS[name]))
        return cls(**{**kw, **flags})

    def to_dict(self):
        return asdict(self)


@dataclass
class RunReport:
    stages: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    loss_curves: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def add_stage(self, name, accuracy=None, **info):
        if accuracy is not None and not 0.0 <= accuracy <= 100.0:
            raise ValueError(f"accuracy out of range: {accuracy}")
        self.stages.append({"stage": name, "accuracy": accuracy, **info})

    def accuracy(self, stage):
        for s in reversed(self.stages):
            if s["stage"] == stage:
                return s["accuracy"]
        raise KeyError(stage)

    @property
    def final_accuracy(self):
        return self.stages[-1]["accuracy"] if self.stages else None

    def to_dict(self):
        d = asdict(self)
        d.pop("loss_curves")
        d["final_accuracy"] = self.final_accuracy
        return d

    def write(self, out_dir, timing=True):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        if not timing:
            d.pop("wall_clock")
        (out / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True))
        with open(out / "loss_curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["stage", "epoch", "loss"])
            for stage, epoch, loss in self.loss_curves:
                w.writerow([stage, epoch, f"{loss:.8g}"])
        return out / "report.json"


# ---------------------------------------------------------------------------
# stages


def evaluate(model, labeled_test):
    """Percentage of argmax-correct predictions."""
    if len(labeled_test) == 0:
        return 0.0
    return float(100.0 * np.mean(predict(model, labeled_test.images) == labeled_test.labels))


def _record_losses(report, stage, model):
    if report is not None and getattr(model, "history", None):
        for epoch, loss in enumerate(model.history["epoch_loss"]):
            report.loss_curves.append((stage, epoch, loss))


def _query(oracle, images, stage, report):
    labels = query_session(oracle, images)
    if report is not None:
        report.queries.append({"stage": stage, "count": int(len(images))})
    return labels


def stage_init_another(oracle, third_party, num_classes, cfg, seed=0, feature_dim=128, report=None):
    """Query the oracle on the third-party set and train a fresh target model on its labels."""
    images = getattr(third_party, "images", third_party)
    labels = _query(oracle, images, "init_another", report)
    model = build_small_cnn(images.shape[1:], num_classes, seed=seed, feature_dim=feature_dim)
    train_supervised(model, images, labels, cfg)
    _record_losses(report, "init_another", model)
    return model


def stage_target_finetune(model, target, cfg, iterations=1, report=None, on_epoch=None, stage="target_finetune"):
    """Self-training on the target set; pseudo-labels are recomputed every epoch."""
    images = getattr(target, "images", target)
    for epoch in range(cfg.epochs):
        labels = pseudo_label_target(model, images, iterations)
        if len(np.unique(labels)) == 1:
            warnings.warn(f"{stage}: all pseudo-labels collapsed to class {labels[0]}", RuntimeWarning)
        epoch_cfg = TrainConfig(**{**cfg.to_dict(), "epochs": 1, "seed": cfg.seed + epoch})
        train_supervised(model, images, labels, epoch_cfg)
        if report is not None:
            report.loss_curves.append((stage, epoch, model.history["epoch_loss"][0]))
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model


def stage_dat_retrain(model, oracle, target, third_party, dat_cfg, retrain_cfg,
                      finetune_cfg=None, iterations=1, report=None):
    """Perturb the third-party set, re-query, retrain, then optionally fine-tune again."""
    perturbed = dat_generate(model, _unlabeled(target), _unlabeled(third_party), dat_cfg)
    labels = _query(oracle, perturbed.images, "dat_retrain", report)
    train_supervised(model, perturbed.images, labels, retrain_cfg)
    _record_losses(report, "dat_retrain", model)
    if finetune_cfg is not None:
        stage_target_finetune(model, target, finetune_cfg, iterations, report, stage="final_finetune")
    return model


def _unlabeled(ds):
    if isinstance(ds, UnlabeledDataset):
        return ds
    return UnlabeledDataset(getattr(ds, "images", ds))


def _derive(cfg, seed):
    return TrainConfig(**{**cfg.to_dict(), "seed": cfg.seed + seed})


def run_pipeline(oracle, target, third_party, cfg, num_classes=None, target_test=None):
    """Run the enabled stages; returns ``(model, report)``.

    ``target`` supplies unlabeled images only. When ``target_test`` (labeled) is
    given, accuracy is recorded after every stage.
    """
    t0 = time.perf_counter()
    k = num_classes or oracle.num_classes
    report = RunReport(seeds={"pipeline": cfg.seed}, config=cfg.to_dict())
    evaluate_on = (lambda m: evaluate(m, target_test)) if target_test is not None else (lambda m: None)
    s = cfg.seed
    model = stage_init_another(oracle, third_party, k, _derive(cfg.init_train, s), seed=s,
                               feature_dim=cfg.feature_dim, report=report)
    report.add_stage("init_another", evaluate_on(model))
    _checkpoint(cfg, model, 1)
    on_epoch = None
    if cfg.eval_each_epoch and target_test is not None:
        on_epoch = lambda e, m: report.add_stage(f"finetune_epoch_{e}", evaluate_on(m))  # noqa: E731
    ft_cfg = _derive(cfg.finetune_train, s + 1)
    if cfg.target_finetune:
        stage_target_finetune(model, target, ft_cfg, cfg.pseudo_label_iterations, report, on_epoch)
        report.add_stage("target_finetune", evaluate_on(model))
        _checkpoint(cfg, model, 2)
    if cfg.dat_retrain:
        dat_cfg = DatConfig(**{**cfg.dat.to_dict(), "seed": cfg.dat.seed + s})
        stage_dat_retrain(model, oracle, target, third_party, dat_cfg, _derive(cfg.retrain_train, s + 2),
                          None, cfg.pseudo_label_iterations, report)
        report.add_stage("dat_retrain", evaluate_on(model))
        _checkpoint(cfg, model, 3)
        if cfg.target_finetune:
            stage_target_finetune(model, target, _derive(cfg.finetune_train, s + 3),
                                  cfg.pseudo_label_iterations, report, stage="final_finetune")
            report.add_stage("final_finetune", evaluate_on(model))
            _checkpoint(cfg, model, 4)
    report.wall_clock = time.perf_counter() - t0
    if cfg.out_dir:
        report.write(cfg.out_dir)
    return model, report


def _checkpoint(cfg, model, index):
    if cfg.out_dir:
        save_model(model, cfg.out_dir, stem=f"stage{index}")


# ---------------------------------------------------------------------------
# baselines


def lloyd_kmeans(x, k, seed=0, max_iter=100, tol=1e-6):
    """Lloyd's k-means with a seeded single initialization; returns (centers, labels)."""
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=tol,
                algorithm="lloyd", random_state=check_seed(seed) % 2**32)
    labels = km.fit_predict(np.asarray(x, dtype=np.float64))
    return km.cluster_centers_, labels


def baseline_cp(oracle, target, num_classes, cfg, seed=0, feature_dim=128, report=None):
    """Query the oracle on the k-means centroids of the raw target images."""
    if num_classes < 2:
        raise ConfigError("CP needs at least 2 classes")
    images = check_images(getattr(target, "images", target))
    centers, _ = lloyd_kmeans(images.reshape(len(images), -1), num_classes, seed)
    centroid_images = np.clip(centers, 0.0, 1.0).astype(np.float32).reshape((num_classes,) + images.shape[1:])
    labels = _query(oracle, centroid_images, "cp", report)
    model = build_small_cnn(images.shape[1:], num_classes, seed=seed, feature_dim=feature_dim)
    train_supervised(model, centroid_images, labels, cfg)
    _record_losses(report, "cp", model)
    return model


def gaussian_noise_images(n, shape, seed):
    if n < 1:
        raise ConfigError(f"GNP needs n >= 1, got {n}")
    rng = np.random.default_rng(check_seed(seed))
    # standard-normal draws, clipped into the valid pixel range
    return np.clip(rng.standard_normal((n,) + tuple(shape)), 0.0, 1.0).astype(np.float32)


def baseline_gnp(oracle, num_classes, n, shape, seed, cfg, feature_dim=128, report=None):
    """Query the oracle on clipped Gaussian-noise images and train on the answers."""
    images = gaussian_noise_images(n, shape, seed)
    labels = _query(oracle, images, "gnp", report)
    model = build_small_cnn(tuple(shape), num_classes, seed=seed, feature_dim=feature_dim)
    train_supervised(model, images, labels, cfg)
    _record_losses(report, "gnp", model)
    return model


# ---------------------------------------------------------------------------
# synthetic experiment


@dataclass
class ExperimentConfig:
    suite: SyntheticConfig = field(default_factory=SyntheticConfig)
    source_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=15))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    cp_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=300))
    gnp_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05, epochs=20))
    gnp_samples: int = 2000

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "suite" in d:
            d["suite"] = SyntheticConfig.from_dict(d["suite"])
        for key in ("source_train", "cp_train", "gnp_train"):
            if key in d:
                d[key] = _train_config(d[key])
        if "pipeline" in d:
            d["pipeline"] = PipelineConfig.from_dict(d["pipeline"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def build_synthetic_world(seed, exp):
    """Generate the suite and a sealed oracle over source models trained on it.

    Returns ``(oracle, target, third_party)``; the source datasets stay inside
    the oracle's ensemble registry.
    """
    sources, target, third_party = make_synthetic_shift_suite(seed, exp.suite)
    cfg = TrainConfig(**{**exp.source_train.to_dict(), "seed": exp.source_train.seed + seed})
    ensemble = train_source_ensemble(sources, cfg, forbidden=[target], seed=seed,
                                     feature_dim=exp.pipeline.feature_dim)
    return Oracle(ensemble), target, third_party


def run_synthetic_experiment(seed, exp=None, strategy="sfuda", oracle=None, world=None):
    """End-to-end run on the synthetic suite; returns ``(model, report)``.

    ``oracle`` replaces the locally built one (e.g. a remote client) for the
    queries; the local ensemble is still built for the Source Only figure.
    ``world`` reuses the output of :func:`build_synthetic_world` for this seed.
    """
    exp = exp or ExperimentConfig()
    local_oracle, target, third_party = world or build_synthetic_world(seed, exp)
    source_only = float(100.0 * np.mean(local_oracle.ensemble.predict_unguarded(target.images) == target.labels))
    oracle = oracle or local_oracle
    k = exp.suite.num_classes
    if strategy == "sfuda":
        pcfg = PipelineConfig(**{**exp.pipeline.__dict__, "seed": exp.pipeline.seed + seed})
        model, report = run_pipeline(oracle, target.unlabeled(), third_party, pcfg, k, target_test=target)
    elif strategy in ("cp", "gnp"):
        t0 = time.perf_counter()
        report = RunReport(seeds={"pipeline": seed})
        if strategy == "cp":
            model = baseline_cp(oracle, target.unlabeled(), k, exp.cp_train, seed, exp.pipeline.feature_dim, report)
        else:
            model = baseline_gnp(oracle, k, exp.gnp_samples, target.shape, seed, exp.gnp_train,
                                 exp.pipeline.feature_dim, report)
        report.add_stage(strategy, evaluate(model, target))
        report.wall_clock = time.perf_counter() - t0
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    report.seeds["suite"] = seed
    report.config = {"experiment": _jsonable(exp.to_dict()), "strategy": strategy}
    report.extra["source_only"] = source_only
    report.extra["strategy"] = strategy
    return model, report


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


# ---------------------------------------------------------------------------
# estimators


class _TargetModelMixin(ClassifierMixin, TransformerMixin):
    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_images(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X))

    def transform(self, X):
        check_is_fitted(self, "model_")
        return extract_features(self.model_, check_images(X))


class SFUDAClassifier(_TargetModelMixin, BaseEstimator):
    """Adapt a target classifier to unlabeled target images through an oracle.

    ``fit(X)`` takes the unlabeled target images; ``y`` is ignored. The oracle
    and third-party images are constructor parameters.
    """

    def __init__(self, oracle=None, third_party=None, ablation="full", config=None, num_classes=None):
        self.oracle = oracle
        self.third_party = third_party
        self.ablation = ablation
        self.config = config
        self.num_classes = num_classes

    def fit(self, X, y=None):
        if self.oracle is None or self.third_party is None:
            raise ValueError("oracle and third_party are required")
        X = check_images(X, "target images")
        base = (self.config or PipelineConfig()).to_dict()
        base.update(zip(("init_another", "dat_retrain", "target_finetune"), ABLATIONS[self.ablation]))
        cfg = PipelineConfig.from_dict(base)
        k = self.num_classes or self.oracle.num_classes
        self.model_, self.report_ = run_pipeline(self.oracle, UnlabeledDataset(X), self.third_party, cfg, k)
        self.classes_ = np.arange(k)
        return self


class CentroidQueryClassifier(_TargetModelMixin, BaseEstimator):
    """CP baseline: query the oracle on k-means centroids of the target images."""

    def __init__(self, oracle=None, num_classes=None, learning_rate=0.05, epochs=300, batch_size=64, seed=0):
        self.oracle = oracle
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        k = self.num_classes or self.oracle.num_classes
        cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.seed)
        self.model_ = baseline_cp(self.oracle, check_images(X), k, cfg, self.seed)
        self.classes_ = np.arange(k)
        return self


class GaussianNoiseQueryClassifier(_TargetModelMixin, BaseEstimator):
    """GNP baseline. ``fit(X)`` only reads the image shape from ``X``."""

    def __init__(self, oracle=None, num_classes=None, n_samples=2000, learning_rate=0.05, epochs=20,
                 batch_size=64, seed=0):
        self.oracle = oracle
        self.num_classes = num_classes
        self.n_samples = n_samples
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        k = self.num_classes or self.oracle.num_classes
        shape = check_images(X).shape[1:]
        cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.seed)
        self.model_ = baseline_gnp(self.oracle, k, self.n_samples, shape, self.seed, cfg)
        self.classes_ = np.arange(k)
        return self

