"""Alternating adversarial optimisation of the combined objective.

Each step runs two phases on one source batch and one target batch:

1. discriminator phase: the trunk, real/fake head and joint head of both
   tri-head discriminators descend the discriminator-side losses (plus the
   labelled cross-entropy terms, which shape the shared trunk);
2. minimiser phase: both generators and both classifier heads descend the
   generator-side adversarial terms, cross-entropy, and the weighted
   cycle, consistency and structure-preserving terms.

Data flow: ``x_st = G_t(x_s)``, ``x_ts = G_s(x_t)``; cycles
``G_s(x_st)`` and ``G_t(x_ts)``; C_t learns from ``(x_st, y_s)``, C_s from
``(x_s, y_s)``; consistency compares ``C_t(x_t)`` with ``C_s(x_ts)``.
"""
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .nn import AdamState, GeneratorNet, TriHeadDiscriminator, lr_schedule
from .synthdata import batch_sampler, batches_per_epoch

TERM_SWITCHES = ("dgan_t", "dgan_s", "cyc", "clc", "jgan", "dsp")
WARMUP_TERMS = frozenset({"dgan_t", "dgan_s", "cyc"})


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 5.0
    lambda2: float = 0.1
    lambda3: float = 1e-4
    epochs: int = 30
    batch: int = 64
    adv_mode: str = "mse"
    dsp_mode: str = "literal"
    dsp_margin: float = 1.0
    dsp_space: str = "raw"
    warmup_epochs: int = 5
    lr_start: float = 0.002
    lr_end: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    enabled_terms: frozenset = frozenset(TERM_SWITCHES)
    gamma_mode: str = "entropy"
    pseudo_label: str = "soft"
    widths: tuple = (8, 16)
    hidden: int = 32
    features: int = 64

    def __post_init__(self):
        object.__setattr__(self, "enabled_terms", frozenset(self.enabled_terms))
        object.__setattr__(self, "widths", tuple(self.widths))
        self.validate()

    def validate(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("lambdas must be nonnegative")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if not self.enabled_terms:
            raise ValueError("enabled_terms must be nonempty")
        unknown = self.enabled_terms - set(TERM_SWITCHES)
        if unknown:
            raise ValueError(f"unknown terms {sorted(unknown)}")
        checks = {"adv_mode": ("log", "mse"), "dsp_mode": ("literal", "margin"),
                  "dsp_space": ("raw", "trunk"), "gamma_mode": ("entropy", "constant-one"),
                  "pseudo_label": ("soft", "onehot")}
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")

    def with_(self, **kw):
        return replace(self, **kw)

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = sorted(v) if isinstance(v, frozenset) else (list(v) if isinstance(v, tuple) else v)
        return out


class CaditModel:
    """Both generators and both tri-head discriminators."""

    def __init__(self, sample_shape, n_classes, seed, widths=(8, 16), hidden=32, features=64):
        rng = np.random.default_rng(seed)
        self.sample_shape = tuple(sample_shape)
        self.n_classes = n_classes
        self.g_t = GeneratorNet(sample_shape, rng, widths, hidden)
        self.g_s = GeneratorNet(sample_shape, rng, widths, hidden)
        self.disc_t = TriHeadDiscriminator(sample_shape, n_classes, rng, widths, hidden, features)
        self.disc_s = TriHeadDiscriminator(sample_shape, n_classes, rng, widths, hidden, features)

    @classmethod
    def from_config(cls, sample_shape, n_classes, cfg):
        return cls(sample_shape, n_classes, cfg.seed, cfg.widths, cfg.hidden, cfg.features)

    def networks(self):
        return {"g_t": self.g_t, "g_s": self.g_s, "disc_t": self.disc_t, "disc_s": self.disc_s}

    def parameters(self):
        return [p for net in self.networks().values() for p in net.parameters()]

    def named_arrays(self):
        return {f"{n}.{k}": p.data for n, net in self.networks().items() for k, p in net.named_parameters()}

    def load_named_arrays(self, arrays):
        for n, net in self.networks().items():
            prefix = n + "."
            net.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})

    def group(self, name):
        return {
            "disc_t": self.disc_t.disc_params,
            "disc_s": self.disc_s.disc_params,
            "gen": lambda: self.g_t.parameters() + self.g_s.parameters(),
            "cls": lambda: self.disc_t.classifier_params() + self.disc_s.classifier_params(),
        }[name]()

    def freeze_all_but(self, *groups):
        ad.set_requires_grad(self.parameters(), False)
        for g in groups:
            ad.set_requires_grad(self.group(g), True)


@dataclass
class TrainState:
    model: CaditModel
    optimizers: dict
    step: int = 0
    history: list = field(default_factory=list)
    disc_history: list = field(default_factory=list)


GROUPS = ("disc_t", "disc_s", "gen", "cls")


def init_state(sample_shape, n_classes, cfg):
    model = CaditModel.from_config(sample_shape, n_classes, cfg)
    opts = {g: AdamState(model.group(g), cfg.beta1, cfg.beta2) for g in GROUPS}
    return TrainState(model, opts)


def pseudo_label(c_logits, gamma_mode="entropy"):
    """``(probs, gammas, hard)`` from classifier logits; nothing stays on the tape."""
    logits = c_logits.data if isinstance(c_logits, Tensor) else np.asarray(c_logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    if gamma_mode == "constant-one":
        gammas = np.ones(len(probs))
    else:
        gammas = L.confidence_weight(probs)
    return probs, gammas, np.argmax(probs, axis=-1)


def _label_vectors(probs, hard, cfg):
    return probs if cfg.pseudo_label == "soft" else L.one_hot(hard, probs.shape[1])


def _guard(name, fn):
    try:
        val = fn()
    except ad.NonFiniteError as exc:
        raise TrainingAborted(f"non-finite value while computing term {name!r}: {exc}") from exc
    if not math.isfinite(float(val.data)):
        raise TrainingAborted(f"term {name!r} is not finite")
    return val


def _translations(model, xs_t, xt_t, active):
    jag = "jgan" in active
    need_st = bool({"dgan_t", "cyc", "dsp"} & active) or jag
    need_ts = bool({"dgan_s", "cyc", "clc"} & active) or jag
    return (model.g_t(xs_t) if need_st else None), (model.g_s(xt_t) if need_ts else None)


def discriminator_losses(model, xs, ys, xt, cfg, active, translated=None):
    """Discriminator-side losses; returns ``(total Tensor or None, values dict)``.

    ``translated`` optionally supplies ``(G_t(xs), G_s(xt))`` already computed
    with the current generator parameters; they are used detached.
    """
    mode = cfg.adv_mode
    xs_t, xt_t = Tensor(xs), Tensor(xt)
    jag = "jgan" in active
    if translated is None:
        with ad.no_grad():
            translated = _translations(model, xs_t, xt_t, active)
    x_st, x_ts = (None if t is None else t.detach() for t in translated)
    c = model.n_classes
    parts = {}
    if "dgan_t" in active or jag:
        f_t, f_st = model.disc_t.trunk(xt_t), model.disc_t.trunk(x_st)
    if "dgan_s" in active or jag:
        f_s, f_ts = model.disc_s.trunk(xs_t), model.disc_s.trunk(x_ts)
    if "dgan_t" in active:
        parts["dgan_t"] = _guard("dgan_t", lambda: L.adv_loss(model.disc_t.d(f_t), model.disc_t.d(f_st), mode)
                                 + L.classifier_ce(model.disc_t.c(f_st), ys))
    if "dgan_s" in active:
        parts["dgan_s"] = _guard("dgan_s", lambda: L.adv_loss(model.disc_s.d(f_s), model.disc_s.d(f_ts), mode)
                                 + L.classifier_ce(model.disc_s.c(f_s), ys))
    if jag:
        onehot = L.one_hot(ys, c)
        p_t, g_t, h_t = pseudo_label(model.disc_t.c(f_t.detach()), cfg.gamma_mode)
        p_s, g_s, h_s = pseudo_label(model.disc_s.c(f_ts.detach()), cfg.gamma_mode)
        parts["jgan_t"] = _guard("jgan_t", lambda: L.jag_loss(
            model.disc_t.j(f_t, _label_vectors(p_t, h_t, cfg)), model.disc_t.j(f_st, onehot),
            g_t, "target", mode))
        parts["jgan_s"] = _guard("jgan_s", lambda: L.jag_loss(
            model.disc_s.j(f_s, onehot), model.disc_s.j(f_ts, _label_vectors(p_s, h_s, cfg)),
            g_s, "source", mode))
    if not parts:
        return None, {}
    total = None
    for v in parts.values():
        total = v if total is None else total + v
    return total, {k: float(v.data) for k, v in parts.items()}


def generator_terms(model, xs, ys, xt, cfg, active, translated=None):
    """Minimiser-side terms as scalar Tensors; disabled terms are absent."""
    mode = cfg.adv_mode
    xs_t, xt_t = Tensor(xs), Tensor(xt)
    jag = "jgan" in active
    if translated is None:
        translated = _translations(model, xs_t, xt_t, active)
    x_st, x_ts = translated
    c = model.n_classes
    terms = {}
    f_st = model.disc_t.trunk(x_st) if ("dgan_t" in active or jag or
                                         ("dsp" in active and cfg.dsp_space == "trunk")) else None
    f_ts = model.disc_s.trunk(x_ts) if ("dgan_s" in active or jag or "clc" in active) else None
    if "dgan_t" in active:
        terms["dgan_t"] = _guard("dgan_t", lambda: L.adv_loss(None, model.disc_t.d(f_st), mode, "generator")
                                 + L.classifier_ce(model.disc_t.c(f_st), ys))
    if "dgan_s" in active:
        f_s = model.disc_s.trunk(xs_t)
        terms["dgan_s"] = _guard("dgan_s", lambda: L.adv_loss(None, model.disc_s.d(f_ts), mode, "generator")
                                 + L.classifier_ce(model.disc_s.c(f_s), ys))
    logits_ts = model.disc_s.c(f_ts) if f_ts is not None and (jag or "clc" in active) else None
    if jag:
        onehot = L.one_hot(ys, c)
        terms["jgan_t"] = _guard("jgan_t", lambda: L.jag_loss(
            None, model.disc_t.j(f_st, onehot), None, "target", mode, "generator"))
        p_s, g_s, h_s = pseudo_label(logits_ts, cfg.gamma_mode)
        terms["jgan_s"] = _guard("jgan_s", lambda: L.jag_loss(
            None, model.disc_s.j(f_ts, _label_vectors(p_s, h_s, cfg)), g_s, "source", mode, "generator"))
    if "cyc" in active:
        terms["cyc"] = _guard("cyc", lambda: L.cycle_loss(xs_t, model.g_s(x_st)) + L.cycle_loss(xt_t, model.g_t(x_ts)))
    if "clc" in active:
        logits_t = model.disc_t.c(model.disc_t.trunk(xt_t))
        terms["clc"] = _guard("clc", lambda: L.clc_loss(ad.softmax(logits_t), ad.softmax(logits_ts)))
    if "dsp" in active:
        space = f_st if cfg.dsp_space == "trunk" else x_st
        terms["dsp"] = _guard("dsp", lambda: L.dsp_loss(space, ys, cfg.dsp_mode, cfg.dsp_margin))
    return terms


def combine(terms, cfg):
    """Weighted Tensor total plus the float breakdown (absent terms count 0)."""
    weights = {"cyc": cfg.lambda1, "clc": cfg.lambda2, "dsp": cfg.lambda3}
    total = None
    for k, v in terms.items():
        w = weights.get(k, 1.0)
        if w == 0.0:
            continue
        v = v if w == 1.0 else ad.scalar_mul(v, w)
        total = v if total is None else total + v
    parts = {k: float(terms[k].data) if k in terms else 0.0 for k in L.TERMS}
    return total, L.total_objective(parts, cfg.lambda1, cfg.lambda2, cfg.lambda3)


def train_step(state, xs, ys, xt, cfg, lr=None, active=None):
    """One discriminator update followed by one minimiser update."""
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("train_step: empty batch")
    model = state.model
    active = cfg.enabled_terms if active is None else frozenset(active)
    lr = cfg.lr_start if lr is None else lr

    model.freeze_all_but("gen", "cls")
    try:
        breakdown, d_parts = _two_phases(state, model, xs, ys, xt, cfg, lr, active)
    except ad.NonFiniteError as exc:
        ad.set_requires_grad(model.parameters(), False)
        raise TrainingAborted(f"non-finite value during the training step: {exc}") from exc
    except TrainingAborted:
        ad.set_requires_grad(model.parameters(), False)
        raise

    if not math.isfinite(breakdown.total):
        raise TrainingAborted("total objective is not finite")
    state.step += 1
    state.history.append(breakdown)
    state.disc_history.append(d_parts)
    return breakdown


def _two_phases(state, model, xs, ys, xt, cfg, lr, active):
    # Phase 1 leaves the generators untouched, so their outputs are computed
    # once on the minimiser tape and handed to phase 1 detached.
    with ad.Tape() as tape:
        translated = _translations(model, Tensor(xs), Tensor(xt), active)

        model.freeze_all_but("disc_t", "disc_s")
        with ad.Tape() as dtape:
            d_total, d_parts = discriminator_losses(model, xs, ys, xt, cfg, active, translated)
            if d_total is not None:
                for g in ("disc_t", "disc_s"):
                    for p in model.group(g):
                        p.zero_grad()
                dtape.backward(d_total)
                if "dgan_t" in active or "jgan" in active:
                    state.optimizers["disc_t"].step(lr)
                if "dgan_s" in active or "jgan" in active:
                    state.optimizers["disc_s"].step(lr)

        model.freeze_all_but("gen", "cls")
        terms = generator_terms(model, xs, ys, xt, cfg, active, translated)
        g_total, breakdown = combine(terms, cfg)
        if g_total is not None and g_total._tape is not None:
            for g in ("gen", "cls"):
                for p in model.group(g):
                    p.zero_grad()
            tape.backward(g_total)
            state.optimizers["gen"].step(lr)
            state.optimizers["cls"].step(lr)
    ad.set_requires_grad(model.parameters(), False)
    return breakdown, d_parts


def active_terms(cfg, epoch):
    if epoch < cfg.warmup_epochs:
        return cfg.enabled_terms & WARMUP_TERMS
    return cfg.enabled_terms


def prediction_path(cfg):
    """Target predictions use C_t, unless C_t is never trained (no dgan_t);
    then C_s on the source-like translation G_s(x_t)."""
    return "ct" if "dgan_t" in cfg.enabled_terms else "cs_gs"


def run_training(pair, cfg, evaluate_epochs=True, progress=None):
    """Train on ``pair``; returns ``(state, per-epoch metrics list)``."""
    from . import evaluate

    state = init_state(pair.sample_shape, pair.n_classes, cfg)
    per_epoch = batches_per_epoch(pair, cfg.batch)
    total_steps = cfg.epochs * per_epoch
    sampler = batch_sampler(pair, cfg.batch, cfg.seed + 7919)
    metrics = []
    path = prediction_path(cfg)
    for epoch in range(cfg.epochs):
        active = active_terms(cfg, epoch)
        for _ in range(per_epoch):
            xs, ys, xt = next(sampler)
            lr = lr_schedule(state.step, total_steps, cfg.lr_start, cfg.lr_end)
            train_step(state, xs, ys, xt, cfg, lr, active)
        row = {"epoch": epoch, "step": state.step}
        if evaluate_epochs:
            row["target_accuracy"] = evaluate.target_accuracy(state, pair, path)
        metrics.append(row)
        if progress:
            progress(row)
    return state, metrics


def train_source_only(pair, cfg):
    """Classifier (trunk + classification head) fit on labelled source data only."""
    rng = np.random.default_rng(cfg.seed)
    net = TriHeadDiscriminator(pair.sample_shape, pair.n_classes, rng, cfg.widths, cfg.hidden, cfg.features)
    params = net.trunk_params() + net.classifier_params()
    opt = AdamState(params, cfg.beta1, cfg.beta2)
    per_epoch = batches_per_epoch(pair, cfg.batch)
    total_steps = cfg.epochs * per_epoch
    sampler = batch_sampler(pair, cfg.batch, cfg.seed + 7919)
    ad.set_requires_grad(params, True)
    for step in range(total_steps):
        xs, ys, _ = next(sampler)
        for p in params:
            p.zero_grad()
        with ad.Tape() as tape:
            loss = L.classifier_ce(net.c(net.trunk(Tensor(xs))), ys)
            tape.backward(loss)
        opt.step(lr_schedule(step, total_steps, cfg.lr_start, cfg.lr_end))
    ad.set_requires_grad(params, False)
    return net
