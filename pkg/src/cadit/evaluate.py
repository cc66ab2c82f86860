"""Evaluation: target accuracy, proxy A-distance, label-flip rate, PCA export.

This is the only module that reads the hidden target labels.
"""
import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .nn import AdamState, Linear, Module


def _model(state):
    return getattr(state, "model", state)


def _batched(fn, x, size=512):
    return np.concatenate([fn(x[i:i + size]) for i in range(0, len(x), size)])


def translate_to_target(state, x):
    model = _model(state)
    with ad.no_grad():
        return _batched(lambda b: model.g_t(Tensor(b)).data, x)


def predict_target(state, x, path="ct"):
    """Argmax class predictions for target-domain samples ``x``.

    ``ct``: C_t on the sample; ``cs_gs``: C_s on the translation G_s(x).
    """
    model = _model(state)
    with ad.no_grad():
        if path == "ct":
            fn = lambda b: model.disc_t.c(model.disc_t.trunk(Tensor(b))).data  # noqa: E731
        elif path == "cs_gs":
            fn = lambda b: model.disc_s.c(model.disc_s.trunk(model.g_s(Tensor(b)))).data  # noqa: E731
        else:
            raise ValueError(f"unknown prediction path {path!r}")
        return np.argmax(_batched(fn, x), axis=1)


def target_labels(pair):
    """Audited accessor for the hidden target labels."""
    return pair.target.hidden_labels


def per_class_accuracy(pred, labels, n_classes):
    return [float(np.mean(pred[labels == k] == k)) if (labels == k).any() else 0.0 for k in range(n_classes)]


def target_accuracy(state, pair, path="ct"):
    pred = predict_target(state, pair.target.samples, path)
    return float(np.mean(pred == target_labels(pair)))


def classifier_accuracy(net, pair):
    """Accuracy of a trunk+classifier network applied directly to target samples."""
    with ad.no_grad():
        logits = _batched(lambda b: net.c(net.trunk(Tensor(b))).data, pair.target.samples)
    return float(np.mean(np.argmax(logits, axis=1) == target_labels(pair)))


# ----------------------------------------------------------- small MLPs

class MLP(Module):
    """One hidden layer with leaky_relu; the output layer starts at zero."""

    def __init__(self, d_in, hidden, d_out, rng):
        super().__init__()
        self.l1 = Linear(self, "l1", d_in, hidden, rng)
        self.l2 = Linear(self, "l2", hidden, d_out, rng, zero=True)

    def __call__(self, x):
        return self.l2(ad.leaky_relu(self.l1(x), 0.2))

    def logits(self, x):
        with ad.no_grad():
            return self(Tensor(x)).data


def fit_mlp(x, y, n_out, hidden, steps, seed, lr=0.01, loss="ce"):
    """Full-batch Adam fit. ``loss='ce'`` uses softmax cross-entropy over
    ``n_out`` classes; ``loss='logistic'`` uses one logit and labels in {0, 1}."""
    rng = np.random.default_rng(seed)
    net = MLP(x.shape[1], hidden, n_out, rng)
    opt = AdamState(net.parameters(), beta1=0.9, beta2=0.999)
    xt = Tensor(x)
    if loss == "logistic":
        sign = Tensor((2.0 * y - 1.0).reshape(-1, 1))
    for _ in range(steps):
        net.zero_grad()
        with ad.Tape() as tape:
            out = net(xt)
            if loss == "ce":
                obj = L.classifier_ce(out, y)
            else:
                # log(1 + exp(-s f)) written as -log sigmoid(s f)
                obj = -ad.reduce_mean(ad.log(ad.sigmoid(ad.mul(out, sign))))
            tape.backward(obj)
        opt.step(lr)
    net.requires_grad_(False)
    return net


# ------------------------------------------------------------- A-distance

A_HIDDEN = 32
A_STEPS = 200


def _fingerprint(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).digest()


def proxy_a_distance(features_a, features_b, seed=0, split=None):
    """``clamp(2 (1 - 2 eps), 0, 2)`` where eps is the held-out error of a
    one-hidden-layer domain classifier trained on a 50/50 split.

    The result is exactly symmetric in its arguments: they are put in a
    canonical order (by content digest) before the split is drawn, and an
    explicit ``split=(idx_a, idx_b)`` (training indices per side) is
    swapped along with them.
    """
    a = np.asarray(features_a.data if isinstance(features_a, Tensor) else features_a, dtype=np.float64)
    b = np.asarray(features_b.data if isinstance(features_b, Tensor) else features_b, dtype=np.float64)
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    if len(a) < 20 or len(b) < 20:
        raise ValueError("proxy_a_distance needs at least 20 samples per side")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if _fingerprint(b) < _fingerprint(a):
        a, b = b, a
        split = None if split is None else (split[1], split[0])
    if split is None:
        ss = np.random.SeedSequence(seed).spawn(2)
        pa = np.random.default_rng(ss[0]).permutation(len(a))
        pb = np.random.default_rng(ss[1]).permutation(len(b))
        split = (pa[:len(a) // 2], pb[:len(b) // 2])
    tr_a, tr_b = np.asarray(split[0]), np.asarray(split[1])
    te_a = np.setdiff1d(np.arange(len(a)), tr_a)
    te_b = np.setdiff1d(np.arange(len(b)), tr_b)
    x_train = np.concatenate([a[tr_a], b[tr_b]])
    y_train = np.concatenate([np.zeros(len(tr_a)), np.ones(len(tr_b))])
    net = fit_mlp(x_train, y_train, 1, A_HIDDEN, A_STEPS, seed, loss="logistic")
    x_test = np.concatenate([a[te_a], b[te_b]])
    y_test = np.concatenate([np.zeros(len(te_a)), np.ones(len(te_b))])
    pred = (net.logits(x_test)[:, 0] > 0).astype(float)
    eps = float(np.mean(pred != y_test))
    return a_distance_from_error(eps)


def a_distance_from_error(eps):
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * eps))))


# ------------------------------------------------------------- label flips

class OracleUnusable(RuntimeError):
    pass


@dataclass
class Oracle:
    """Target-domain classifier fit on true labels; for evaluation only."""

    net: MLP
    accuracy: float

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.argmax(self.net.logits(x.reshape(len(x), -1)), axis=1)


def train_target_oracle(pair, seed=0, hidden=64, steps=300, min_accuracy=0.9):
    x = pair.target.samples.reshape(len(pair.target.samples), -1)
    y = target_labels(pair)
    perm = np.random.default_rng(seed).permutation(len(x))
    half = len(x) // 2
    tr, te = perm[:half], perm[half:]
    net = fit_mlp(x[tr], y[tr], pair.n_classes, hidden, steps, seed)
    acc = float(np.mean(np.argmax(net.logits(x[te]), axis=1) == y[te]))
    oracle = Oracle(net, acc)
    if acc < min_accuracy:
        raise OracleUnusable(f"oracle accuracy {acc:.3f} on held-out target is below {min_accuracy}")
    return oracle


def label_flip_rate(state, pair, oracle):
    """Fraction of source samples whose oracle class after translation to the
    target domain differs from their source label. ``state`` may also be a
    plain callable mapping a sample array to its translation."""
    if oracle.accuracy < 0.9:
        raise OracleUnusable(f"oracle accuracy {oracle.accuracy:.3f} is below 0.9")
    xs = pair.source.samples
    translated = state(xs) if callable(state) and not hasattr(state, "model") and not hasattr(state, "g_t") \
        else translate_to_target(state, xs)
    return float(np.mean(oracle.predict(translated) != pair.source.labels))


# --------------------------------------------------------------------- PCA

def pca_project(x):
    """Project rows of ``x`` onto the top-2 principal components.

    Returns ``(coords, components, mean)``; each component is flipped so its
    largest-magnitude coordinate is positive.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if len(x) < 2:
        raise ValueError("pca needs at least 2 samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order].T
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps)])
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    return xc @ comps.T, comps, mean


def pca_embed_export(groups, path):
    """``groups`` is a list of ``(samples, domain_tag, class_labels)``; writes a
    CSV with columns x, y, domain, class and returns the coordinates."""
    xs = np.concatenate([np.asarray(g[0], dtype=np.float64).reshape(len(g[0]), -1) for g in groups])
    coords, _, _ = pca_project(xs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "domain", "class"])
        i = 0
        for samples, domain, labels in groups:
            for lab in np.asarray(labels):
                w.writerow([repr(float(coords[i, 0])), repr(float(coords[i, 1])), domain, int(lab)])
                i += 1
    return coords


def export_embedding(state, pair, path, limit=400, seed=0):
    """PCA export of source, target and translated-source samples, at most
    ``limit`` of each, tagged with their (true) classes."""
    rng = np.random.default_rng(seed)

    def pick(n):
        return np.sort(rng.permutation(n)[:limit])

    i_s, i_t = pick(len(pair.source.samples)), pick(len(pair.target.samples))
    xs, ys = pair.source.samples[i_s], pair.source.labels[i_s]
    groups = [
        (xs, "source", ys),
        (pair.target.samples[i_t], "target", target_labels(pair)[i_t]),
        (translate_to_target(state, xs), "source_to_target", ys),
    ]
    return pca_embed_export(groups, path)


# ----------------------------------------------------------------- metrics

@dataclass
class Metrics:
    target_accuracy: float
    a_distance_before: float
    a_distance_after: float
    label_flip_rate: float  # None when no usable oracle exists
    per_class_accuracy: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("target_accuracy", "label_flip_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a fraction, got {v}")
        for name in ("a_distance_before", "a_distance_after"):
            v = getattr(self, name)
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"{name} must lie in [0, 2], got {v}")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_run(state, pair, path="ct", seed=0, oracle=None):
    """Full metric set for a trained state."""
    labels = target_labels(pair)
    pred = predict_target(state, pair.target.samples, path)
    xs, xt = pair.source.samples, pair.target.samples
    before = proxy_a_distance(xs, xt, seed)
    after = proxy_a_distance(translate_to_target(state, xs), xt, seed)
    if oracle is None:
        try:
            oracle = train_target_oracle(pair, seed)
        except OracleUnusable:
            oracle = None
    flip = label_flip_rate(state, pair, oracle) if oracle is not None else None
    return Metrics(
        target_accuracy=float(np.mean(pred == labels)),
        a_distance_before=before,
        a_distance_after=after,
        label_flip_rate=flip,
        per_class_accuracy=per_class_accuracy(pred, labels, pair.n_classes),
        extra={"oracle_accuracy": None if oracle is None else oracle.accuracy},
    )
