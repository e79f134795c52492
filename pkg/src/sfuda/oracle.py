"""The sealed source side: an ensemble that answers query sessions with hard labels only.

A session collects every query sample first and labels them in one go at
``finalize``, because the refinement step needs column sums over the whole
query set. Samples whose content digest matches a registered source or target
image are refused.
"""

import itertools
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_images
from .data import content_digests
from .network import TrainConfig, build_small_cnn, load_model, predict_logits, save_model, softmax, train_supervised
from .refine import depict_refine

log = logging.getLogger(__name__)

CHUNK = 256


class BoundaryViolation(PermissionError):
    """A query contained a registered source or target sample."""

    def __init__(self, ids):
        super().__init__(f"{len(ids)} forbidden sample(s) in query, e.g. {ids[0]}")
        self.ids = list(ids)


class ProtocolError(RuntimeError):
    pass


class SourceEnsemble:
    def __init__(self, models, forbidden_digests=()):
        if not models:
            raise ValueError("ensemble needs at least one model")
        ks = {m.num_classes for m in models}
        if len(ks) != 1:
            raise ValueError(f"models disagree on the number of classes: {sorted(ks)}")
        self.models = list(models)
        self.num_classes = ks.pop()
        self.input_shape = self.models[0].input_shape
        self.forbidden_digests = set(forbidden_digests)
        for m in self.models:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def register_forbidden(self, images):
        self.forbidden_digests.update(content_digests(check_images(images)))

    def mean_logits(self, images):
        images = np.asarray(images, dtype=np.float32)
        total = np.zeros((len(images), self.num_classes), dtype=np.float64)
        for m in self.models:
            for i in range(0, len(images), CHUNK):
                total[i : i + CHUNK] += predict_logits(m, images[i : i + CHUNK])
        return total / len(self.models)

    def predict_unguarded(self, images):
        """Argmax of the mean logits without the boundary guard.

        For evaluation harnesses only (the no-adaptation baseline); never exposed
        through a session.
        """
        return np.argmax(self.mean_logits(images), axis=1)

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(self.models):
            save_model(m, path / f"source_{i}")
        meta = {"num_models": len(self.models), "forbidden": sorted(self.forbidden_digests)}
        (path / "ensemble.json").write_text(json.dumps(meta))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads((path / "ensemble.json").read_text())
        models = [load_model(path / f"source_{i}") for i in range(meta["num_models"])]
        return cls(models, meta["forbidden"])


def train_source_ensemble(sources, cfg, forbidden=(), seed=0, feature_dim=128):
    """Train one model per labeled source domain; registers sources and ``forbidden`` datasets."""
    models = []
    for i, src in enumerate(sources):
        m = build_small_cnn(src.shape, src.num_classes, seed=seed + i, feature_dim=feature_dim)
        stage_cfg = TrainConfig(**{**cfg.to_dict(), "seed": cfg.seed + i})
        models.append(train_supervised(m, src.images, src.labels, stage_cfg))
    ens = SourceEnsemble(models)
    for ds in itertools.chain(sources, forbidden):
        ens.register_forbidden(ds.images)
    return ens


@dataclass
class GuardResult:
    accepted: bool
    rejected: list = field(default_factory=list)


def boundary_guard(ensemble, images):
    """Accept a batch unless some sample's content digest is registered as forbidden."""
    digests = content_digests(check_images(images))
    bad = [f"{d}:{i}" for i, d in enumerate(digests) if d in ensemble.forbidden_digests]
    return GuardResult(not bad, bad)


def ensemble_confidence(ensemble, images):
    """Softmax of the mean of the member logits. Raises :class:`BoundaryViolation`."""
    verdict = boundary_guard(ensemble, images)
    if not verdict.accepted:
        raise BoundaryViolation(verdict.rejected)
    return softmax(ensemble.mean_logits(images))


def refined_hard_labels(ensemble, images):
    """Hard labels for a complete query set, independent of sample order.

    Samples are processed in content-digest order so that the floating-point
    work, and hence the labels, depend only on the multiset of images.
    """
    images = np.ascontiguousarray(images, dtype=np.float32)
    digests = content_digests(images)
    order = sorted(range(len(images)), key=lambda i: digests[i])
    conf = ensemble_confidence(ensemble, images[order])
    labels = np.empty(len(images), dtype=np.int64)
    labels[order] = np.argmax(depict_refine(conf), axis=1)
    return labels


class QueryLog:
    """Append-only audit trail of oracle traffic."""

    def __init__(self):
        self._events = []
        self._lock = threading.Lock()

    def append(self, session, event, count=0, rejected=()):
        with self._lock:
            self._events.append(
                {"time": time.time(), "session": session, "event": event,
                 "count": int(count), "rejected": list(rejected)}
            )

    @property
    def events(self):
        with self._lock:
            return list(self._events)

    def queried(self, session=None):
        return sum(e["count"] for e in self.events
                   if e["event"] == "submit" and session in (None, e["session"]))

    def rejections(self):
        return [e for e in self.events if e["event"] == "reject"]

    def sessions(self):
        return [e["session"] for e in self.events if e["event"] == "open"]


class _Session:
    def __init__(self, sid):
        self.id = sid
        self.batches = []
        self.labels = None
        self.lock = threading.Lock()


class Oracle:
    """In-process oracle service. Responses carry integers only.

    ``open_session``, ``submit`` and ``finalize`` return the same dictionaries
    that the socket service sends on the wire.
    """

    def __init__(self, ensemble):
        self.ensemble = ensemble
        self.log = QueryLog()
        self._sessions = {}
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def __deepcopy__(self, memo):
        # a service handle: copies (e.g. sklearn.clone) talk to the same oracle
        return self

    @property
    def num_classes(self):
        return self.ensemble.num_classes

    def _get(self, sid):
        with self._lock:
            try:
                return self._sessions[sid]
            except KeyError:
                raise ProtocolError(f"unknown session {sid!r}") from None

    def open_session(self):
        with self._lock:
            sid = f"s{next(self._counter)}"
            self._sessions[sid] = _Session(sid)
        self.log.append(sid, "open")
        return {"session": sid}

    def submit(self, sid, images):
        images = check_images(images)
        if tuple(images.shape[1:]) != tuple(self.ensemble.input_shape):
            raise ProtocolError(f"image shape {images.shape[1:]} != {self.ensemble.input_shape}")
        session = self._get(sid)
        verdict = boundary_guard(self.ensemble, images)
        if not verdict.accepted:
            self.log.append(sid, "reject", len(images), verdict.rejected)
            log.warning("session %s: rejected %d forbidden samples", sid, len(verdict.rejected))
            return {"rejected": verdict.rejected}
        with session.lock:
            if session.labels is not None:
                raise ProtocolError(f"session {sid} is finalized")
            session.batches.append(np.array(images, copy=True))
        self.log.append(sid, "submit", len(images))
        return {"accepted": int(len(images))}

    def finalize(self, sid):
        session = self._get(sid)
        with session.lock:
            if session.labels is None:
                if not session.batches:
                    raise ProtocolError(f"session {sid} has no submitted samples")
                session.labels = refined_hard_labels(self.ensemble, np.concatenate(session.batches))
                session.batches = []
                self.log.append(sid, "finalize", len(session.labels))
            return {"labels": [int(v) for v in session.labels]}

    def describe(self):
        return {"num_classes": int(self.num_classes), "input_shape": list(self.ensemble.input_shape)}


def query_session(oracle, images, batch_size=CHUNK):
    """Run one complete session over ``images`` and return the hard labels.

    Works against :class:`Oracle` and the socket client alike.
    """
    images = getattr(images, "images", images)
    sid = oracle.open_session()["session"]
    for i in range(0, len(images), batch_size):
        reply = oracle.submit(sid, images[i : i + batch_size])
        if "rejected" in reply:
            ids = [f"{d.split(':')[0]}:{int(d.split(':')[1]) + i}" for d in reply["rejected"]]
            raise BoundaryViolation(ids)
    return np.asarray(oracle.finalize(sid)["labels"], dtype=np.int64)
