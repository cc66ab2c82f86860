"""Deterministic synthetic domain pairs.

``gen_gaussian_pair`` places C Gaussian blobs on a circle in 2-D and maps the
target copy through a rotation/scale/translation. ``gen_glyph_pair`` renders
ten procedural digit templates into 16x16 bitmaps under two styles.

Target labels are kept behind :class:`TargetDomain`; reading
``hidden_labels`` from anywhere but the evaluation module (or this module's
own serialisation) raises :class:`HiddenLabelAccess`.
"""
import struct
import sys
from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 16
_ALLOWED_READERS = ("cadit.evaluate", "cadit.synthdata")


class HiddenLabelAccess(PermissionError):
    pass


@dataclass(frozen=True)
class GlyphStyle:
    stroke_width: float = 1.0
    invert: bool = False
    noise_sd: float = 0.0
    shear: float = 0.0

    def __post_init__(self):
        if self.stroke_width < 1:
            raise ValueError("stroke_width must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


@dataclass
class SourceDomain:
    samples: np.ndarray
    labels: np.ndarray


class TargetDomain:
    """Unlabelled target samples; true labels readable only by evaluation."""

    visible = False

    def __init__(self, samples, hidden_labels):
        self.samples = samples
        self._hidden = np.asarray(hidden_labels)
        self.audit = []

    @property
    def hidden_labels(self):
        caller = sys._getframe(1).f_globals.get("__name__", "")
        if caller not in _ALLOWED_READERS:
            raise HiddenLabelAccess(f"target labels are hidden (read attempted from {caller})")
        self.audit.append(caller)
        return self._hidden

    def __len__(self):
        return len(self.samples)


@dataclass
class DomainPair:
    source: SourceDomain
    target: TargetDomain
    n_classes: int
    seed: int
    kind: str

    @property
    def sample_shape(self):
        return self.source.samples.shape[1:]


# ------------------------------------------------------------------ gaussian

def gen_gaussian_pair(n_classes, n_per_class, rotation=0.0, translation=(0.0, 0.0), scale=1.0,
                      noise_sd=0.1, seed=0, radius=0.5):
    """Blobs at angles ``2*pi*k/C`` on a circle of ``radius``; the target is the
    source geometry mapped by ``scale * R(rotation) x + translation`` with
    fresh noise. Values are clipped to [-1, 1]."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 4:
        raise ValueError("need at least 4 samples per class")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    xs = centres[labels] + noise_sd * rng.standard_normal((labels.size, 2))
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    t_centres = scale * centres @ rot.T + np.asarray(translation, dtype=np.float64)
    xt = t_centres[labels] + noise_sd * rng.standard_normal((labels.size, 2))
    return DomainPair(
        source=SourceDomain(np.clip(xs, -1, 1), labels.copy()),
        target=TargetDomain(np.clip(xt, -1, 1), labels.copy()),
        n_classes=n_classes, seed=seed, kind="gaussian",
    )


# --------------------------------------------------------------------- glyph

def _arc(cx, cy, rx, ry, a0, a1, n=10):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return list(zip(cx + rx * np.cos(t), cy - ry * np.sin(t)))


# polylines in a unit box, x to the right, y downwards
_TEMPLATES = {
    0: [_arc(0.5, 0.5, 0.28, 0.38, 0, 360, 20)],
    1: [[(0.35, 0.25), (0.52, 0.12), (0.52, 0.88)], [(0.35, 0.88), (0.68, 0.88)]],
    2: [_arc(0.5, 0.33, 0.25, 0.2, 160, -30, 10) + [(0.25, 0.88), (0.76, 0.88)]],
    3: [_arc(0.48, 0.3, 0.24, 0.18, 150, -90, 10), _arc(0.48, 0.68, 0.26, 0.2, 90, -150, 10)],
    4: [[(0.62, 0.88), (0.62, 0.12), (0.22, 0.62), (0.8, 0.62)]],
    5: [[(0.74, 0.12), (0.3, 0.12), (0.27, 0.46)] + _arc(0.48, 0.64, 0.26, 0.23, 120, -150, 12)],
    6: [[(0.68, 0.14)] + _arc(0.5, 0.5, 0.24, 0.36, 110, 200, 6) + _arc(0.5, 0.67, 0.24, 0.2, 180, -180, 16)],
    7: [[(0.24, 0.12), (0.78, 0.12), (0.42, 0.88)], [(0.38, 0.5), (0.66, 0.5)]],
    8: [_arc(0.5, 0.3, 0.21, 0.18, 0, 360, 16), _arc(0.5, 0.68, 0.25, 0.2, 0, 360, 16)],
    9: [_arc(0.5, 0.33, 0.24, 0.2, 0, 360, 16) + [(0.72, 0.4), (0.6, 0.88)]],
}


def _segments(digit):
    segs = []
    for line in _TEMPLATES[digit]:
        pts = np.asarray(line, dtype=np.float64)
        segs.append(np.stack([pts[:-1], pts[1:]], axis=1))
    return np.concatenate(segs)  # m, 2 (endpoints), 2 (xy)


_SEGMENTS = {d: _segments(d) for d in _TEMPLATES}
_grid = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_PX, _PY = np.meshgrid(_grid, _grid)  # pixel centres, [row, col]


def render_glyph(digit, style, rng):
    """Render one 16x16 glyph in [-1, 1] with random jitter under ``style``."""
    segs = _SEGMENTS[digit] - 0.5
    ang = rng.uniform(-0.12, 0.12)
    sc = rng.uniform(0.85, 1.05)
    shift = rng.uniform(-0.06, 0.06, size=2)
    c, s = np.cos(ang), np.sin(ang)
    m = sc * np.array([[c, -s + style.shear], [s, c]])
    segs = segs @ m.T + 0.5 + shift
    a, b = segs[:, 0, :], segs[:, 1, :]
    p = np.stack([_PX.ravel(), _PY.ravel()], axis=1)  # pixels, 2
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = ((p[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((p[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1) * IMAGE_SIZE
    ink = np.clip(style.stroke_width / 2.0 + 0.5 - dist, 0.0, 1.0).reshape(IMAGE_SIZE, IMAGE_SIZE)
    img = 2.0 * ink - 1.0
    if style.invert:
        img = -img
    if style.noise_sd:
        img = img + style.noise_sd * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0)


def _render_domain(n_classes, n_per_class, style, rng):
    labels = np.repeat(np.arange(n_classes), n_per_class)
    imgs = np.stack([render_glyph(int(d), style, rng) for d in labels])
    return imgs[:, None, :, :], labels


def gen_glyph_pair(n_classes, n_per_class, style_s, style_t, seed=0, allow_same_style=False):
    """(n, 1, 16, 16) glyph images; source under ``style_s``, target ``style_t``."""
    if n_classes > len(_TEMPLATES):
        raise ValueError(f"only {len(_TEMPLATES)} glyph templates exist, asked for {n_classes}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if style_s == style_t and not allow_same_style:
        raise ValueError("source and target styles must differ in at least one field")
    rng = np.random.default_rng(seed)
    xs, ys = _render_domain(n_classes, n_per_class, style_s, rng)
    xt, yt = _render_domain(n_classes, n_per_class, style_t, rng)
    return DomainPair(SourceDomain(xs, ys), TargetDomain(xt, yt), n_classes, seed, "glyph")


# ------------------------------------------------------------------ sampling

def batch_sampler(pair, batch, seed):
    """Yield unpaired ``(xs, ys, xt)`` batches forever.

    An epoch is one source permutation split into ``ceil(n_s / batch)``
    near-equal chunks (none larger than ``batch``), so every source sample is
    seen exactly once per epoch. Target samples are drawn in matching chunk
    sizes from their own stream of permutations, without replacement within
    a pass over the target set.
    """
    n_s, n_t = len(pair.source.samples), len(pair.target.samples)
    if batch < 1 or batch > min(n_s, n_t):
        raise ValueError(f"batch {batch} larger than the smaller domain ({min(n_s, n_t)})")
    rng = np.random.default_rng(seed)
    per_epoch = batches_per_epoch(pair, batch)
    pt, pos = rng.permutation(n_t), 0
    while True:
        for i in np.array_split(rng.permutation(n_s), per_epoch):
            if pos + len(i) > n_t:
                pt, pos = rng.permutation(n_t), 0
            j = pt[pos:pos + len(i)]
            pos += len(i)
            yield pair.source.samples[i], pair.source.labels[i], pair.target.samples[j]


def batches_per_epoch(pair, batch):
    return -(-len(pair.source.samples) // batch)


# ----------------------------------------------------------------------- I/O

DATA_MAGIC = b"CDDS"
DATA_VERSION = 1
_KINDS = {"gaussian": 0, "glyph": 1}


def save_pair(path, pair):
    """Little-endian layout::

        magic "CDDS" | u32 version | u8 kind | u32 C | u32 n_source | u32 n_target
        | i64 seed | u32 rank | u32 dims... (per-sample shape)
        | f64 source samples | u16 source labels | f64 target samples | u16 target labels
    """
    shape = pair.source.samples.shape[1:]
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IBIIIqI", DATA_VERSION, _KINDS[pair.kind], pair.n_classes,
                             len(pair.source.samples), len(pair.target.samples), pair.seed, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(np.ascontiguousarray(pair.source.samples, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(pair.source.labels, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(pair.target.samples, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(pair.target._hidden, dtype="<u2").tobytes())


def load_pair(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    head = struct.calcsize("<IBIIIqI")
    version, kind, c, n_s, n_t, seed, rank = struct.unpack_from("<IBIIIqI", buf, 4)
    if version != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 4 + head
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    per = int(np.prod(shape))

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    xs = take("<f8", n_s * per).reshape((n_s,) + shape).astype(np.float64)
    ys = take("<u2", n_s).astype(np.int64)
    xt = take("<f8", n_t * per).reshape((n_t,) + shape).astype(np.float64)
    yt = take("<u2", n_t).astype(np.int64)
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    return DomainPair(SourceDomain(xs, ys), TargetDomain(xt, yt), c, seed, kind_name)
