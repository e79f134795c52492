"""Dataset containers, the on-disk dataset format and the synthetic domain-shift suite.

Images are float32 arrays of shape ``(n, W, H, C)`` with values in ``[0, 1]``,
stored channel-last. A dataset directory holds::

    meta.json    {"n", "w", "h", "c", "dtype": "u8"|"f32", "labeled", "num_classes"?}
    images.bin   raw little-endian array bytes in (n, w, h, c) row-major order
    labels.bin   little-endian int32, only when labeled
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ConfigError, check_images, check_labels, check_seed


class DatasetLoadError(OSError):
    """A dataset directory is missing a required file."""


class DatasetCorruptionError(ValueError):
    """Binary payload does not match what ``meta.json`` declares."""


def content_digest(image):
    """SHA-256 hex digest of one image's float32 little-endian bytes."""
    image = np.ascontiguousarray(image, dtype="<f4")
    return hashlib.sha256(image.tobytes()).hexdigest()


def content_digests(images):
    images = np.ascontiguousarray(images, dtype="<f4")
    return [hashlib.sha256(img.tobytes()).hexdigest() for img in images]


def digest_of_id(sample_id):
    """Content-digest part of a sample id (``"<sha256>:<index>"``)."""
    return sample_id.split(":", 1)[0]


def array_digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = check_images(self.images)
        self.labels = check_labels(self.labels, len(self.images), self.num_classes)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def unlabeled(self):
        return UnlabeledDataset(self.images)

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, fraction, seed=0):
        """Random (train, test) split with ``fraction`` of samples in the first part."""
        rng = np.random.default_rng(check_seed(seed))
        order = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


@dataclass
class UnlabeledDataset:
    images: np.ndarray
    _ids: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.images = check_images(self.images)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def sample_ids(self):
        """``"<sha256 of image bytes>:<index>"`` for each sample; unique within the dataset."""
        if self._ids is None:
            self._ids = [f"{d}:{i}" for i, d in enumerate(content_digests(self.images))]
        return self._ids

    @property
    def digests(self):
        return [digest_of_id(s) for s in self.sample_ids]


def save_dataset(dataset, path, dtype="f32"):
    """Write ``dataset`` in the directory format. ``dtype="u8"`` quantizes to 8 bits."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, w, h, c = dataset.images.shape
    labeled = isinstance(dataset, LabeledDataset)
    meta = {"n": n, "w": w, "h": h, "c": c, "dtype": dtype, "labeled": labeled}
    if labeled:
        meta["num_classes"] = int(dataset.num_classes)
    if dtype == "u8":
        payload = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    elif dtype == "f32":
        payload = dataset.images.astype("<f4")
    else:
        raise ConfigError(f"unknown dtype {dtype!r}")
    (path / "images.bin").write_bytes(np.ascontiguousarray(payload).tobytes())
    if labeled:
        (path / "labels.bin").write_bytes(dataset.labels.astype("<i4").tobytes())
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    return path


def save_labels(labels, path):
    Path(path).write_bytes(np.asarray(labels).astype("<i4").tobytes())


def load_dataset(path):
    path = Path(path)
    for name in ("meta.json", "images.bin"):
        if not (path / name).is_file():
            raise DatasetLoadError(f"{path}: missing {name}")
    meta = json.loads((path / "meta.json").read_text())
    try:
        n, w, h, c = (int(meta[k]) for k in ("n", "w", "h", "c"))
        dtype = meta["dtype"]
        labeled = bool(meta["labeled"])
    except KeyError as exc:
        raise DatasetCorruptionError(f"{path}/meta.json lacks field {exc}") from None
    if dtype not in ("u8", "f32"):
        raise DatasetCorruptionError(f"{path}: unknown dtype {dtype!r}")
    np_dtype = np.dtype("u1") if dtype == "u8" else np.dtype("<f4")
    raw = (path / "images.bin").read_bytes()
    expected = n * w * h * c * np_dtype.itemsize
    if len(raw) != expected:
        raise DatasetCorruptionError(
            f"{path}/images.bin has {len(raw)} bytes, meta declares {expected}"
        )
    images = np.frombuffer(raw, dtype=np_dtype).reshape(n, w, h, c)
    if dtype == "u8":
        images = images.astype(np.float32) / np.float32(255.0)
    else:
        images = images.astype(np.float32)
    if not labeled:
        return UnlabeledDataset(images)
    if not (path / "labels.bin").is_file():
        raise DatasetLoadError(f"{path}: missing labels.bin")
    raw = (path / "labels.bin").read_bytes()
    if len(raw) != 4 * n:
        raise DatasetCorruptionError(f"{path}/labels.bin has {len(raw)} bytes, expected {4 * n}")
    labels = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    if "num_classes" not in meta:
        raise DatasetCorruptionError(f"{path}/meta.json: labeled dataset lacks num_classes")
    try:
        return LabeledDataset(images, labels, int(meta["num_classes"]))
    except ValueError as exc:
        raise DatasetCorruptionError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# synthetic suite


@dataclass
class DomainShift:
    """Deterministic per-domain appearance transform."""

    rotation: float = 0.0  # degrees, added to every sample's pose
    color_shift: tuple = (0.0, 0.0, 0.0)
    contrast: float = 1.0  # scales the foreground/background separation
    noise: float = 0.05
    blur: float = 0.0  # stroke softness added on top of the base rendering

    def __post_init__(self):
        self.color_shift = tuple(float(v) for v in self.color_shift)


@dataclass
class SyntheticConfig:
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    n_per_domain: int = 2000
    n_third_party: int = 2000
    sources: list = field(
        default_factory=lambda: [
            DomainShift(rotation=0.0, color_shift=(0.0, 0.0, 0.0), noise=0.05),
            DomainShift(rotation=-15.0, color_shift=(-0.05, 0.1, 0.0), contrast=0.9, noise=0.08),
        ]
    )
    target: DomainShift = field(
        default_factory=lambda: DomainShift(
            rotation=15.0, color_shift=(0.1, -0.05, 0.1), contrast=0.75, noise=0.1, blur=0.03
        )
    )
    strokes_per_class: int = 3
    pose_jitter: float = 8.0  # per-sample rotation std (degrees) in labeled domains
    third_party_prototypes: int = 48

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "sources" in d:
            d["sources"] = [DomainShift(**s) for s in d["sources"]]
        if "target" in d:
            d["target"] = DomainShift(**d["target"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _random_glyph(rng, n_strokes, extent=0.7):
    pts = rng.uniform(-extent, extent, size=(n_strokes, 2, 2))
    # connected strokes read as glyphs rather than scattered dashes
    for s in range(1, n_strokes):
        pts[s, 0] = pts[s - 1, 1]
    return pts


def _render(segments, size, thickness, softness):
    """Soft antialiased rendering of line segments on a [-1, 1]^2 grid -> (size, size)."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    p = np.stack([gx, gy], axis=-1)[None]  # (1, W, H, 2)
    a = segments[:, 0][:, None, None, :]
    b = segments[:, 1][:, None, None, :]
    ab = b - a
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    dist = np.sqrt(((p - closest) ** 2).sum(-1)).min(axis=0)
    return np.clip(1.0 - (dist - thickness) / softness, 0.0, 1.0)


def _pose(segments, angle_deg, scale, shift):
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return segments @ rot.T * scale + shift


def _draw_domain(rng, glyphs, labels, cfg, shift, pose_jitter=8.0):
    n = len(labels)
    s, c = cfg.image_size, cfg.channels
    out = np.empty((n, s, s, c), dtype=np.float32)
    color_shift = np.resize(np.asarray(shift.color_shift, dtype=np.float64), c)
    for i, y in enumerate(labels):
        seg = _pose(
            glyphs[y],
            shift.rotation + rng.normal(0.0, pose_jitter),
            rng.uniform(0.85, 1.1),
            rng.uniform(-0.12, 0.12, size=2),
        )
        alpha = _render(seg, s, rng.uniform(0.1, 0.16), 0.12 + shift.blur)
        bg = rng.uniform(0.0, 0.35, size=c)
        fg = rng.uniform(0.65, 1.0, size=c)
        mid = 0.5 * (bg + fg)
        bg = mid + shift.contrast * (bg - mid)
        fg = mid + shift.contrast * (fg - mid)
        img = bg + alpha[..., None] * (fg - bg) + color_shift
        img = img + rng.normal(0.0, shift.noise, size=img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def _balanced_labels(rng, n, k):
    return rng.permutation(np.arange(n) % k)


def make_synthetic_shift_suite(seed, config=None):
    """Generate ``(sources, target, third_party)`` deterministically from ``seed``.

    All labeled domains draw glyphs from the same K class prototypes and differ
    only by their :class:`DomainShift`. The third-party set is rendered from an
    unrelated pool of prototypes with random pose and colors.
    """
    cfg = config or SyntheticConfig()
    seed = check_seed(seed)
    if cfg.num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.n_per_domain < 1 or cfg.n_third_party < 1:
        raise ConfigError("domain sizes must be positive")
    if not cfg.sources:
        raise ConfigError("at least one source domain is required")
    root = np.random.SeedSequence(seed)
    class_ss, tp_ss, *domain_ss = root.spawn(3 + len(cfg.sources))
    class_rng = np.random.default_rng(class_ss)
    glyphs = [_random_glyph(class_rng, cfg.strokes_per_class) for _ in range(cfg.num_classes)]

    def labeled(ss, shift):
        rng = np.random.default_rng(ss)
        y = _balanced_labels(rng, cfg.n_per_domain, cfg.num_classes)
        return LabeledDataset(_draw_domain(rng, glyphs, y, cfg, shift, cfg.pose_jitter), y, cfg.num_classes)

    sources = [labeled(ss, shift) for ss, shift in zip(domain_ss[1:], cfg.sources)]
    target = labeled(domain_ss[0], cfg.target)

    tp_rng = np.random.default_rng(tp_ss)
    tp_glyphs = [
        _random_glyph(tp_rng, int(tp_rng.integers(1, 5)), extent=0.9)
        for _ in range(cfg.third_party_prototypes)
    ]
    tp_labels = tp_rng.integers(0, len(tp_glyphs), size=cfg.n_third_party)
    tp_shift = DomainShift(noise=0.05)
    third = _draw_domain(tp_rng, tp_glyphs, tp_labels, cfg, tp_shift, pose_jitter=180.0)
    return sources, target, UnlabeledDataset(third)

