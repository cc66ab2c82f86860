"""Networks, parameter storage, Adam and the learning-rate schedule.

Two data paths share one set of classes:

* image path: ``(n, 1, S, S)`` inputs with ``S`` divisible by 4. Generators are
  two stride-2 convs followed by two stride-2 transposed convs; the
  discriminator trunk is two stride-2 convs plus a fully-connected layer.
* vector path: ``(n, d)`` inputs. Every conv is replaced by a fully-connected
  layer, keeping the depth.

Parameter counts (k = 3, image channels ch, widths c1, c2, trunk width F,
classes C, S = image side, h = hidden width, d = vector dim):

=====================  =================================================
generator, image       (9*ch + 1)*c1 + (9*c1 + 1)*c2 + (9*c2 + 1)*c1
                       + (9*c1 + 1)*ch
discriminator, image   (9*ch + 1)*c1 + (9*c1 + 1)*c2 + (c2*(S/4)**2 + 1)*F
                       + (F + 1) + (F + 1)*C + (F + C + 1)
generator, vector      (d + 1)*h + 2*(h + 1)*h + (h + 1)*d
discriminator, vector  (d + 1)*h + (h + 1)*h + (h + 1)*F
                       + (F + 1) + (F + 1)*C + (F + C + 1)
=====================  =================================================
"""
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAK = 0.2


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Ordered collection of named parameter tensors."""

    def __init__(self):
        self.params = {}

    def add_param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def requires_grad_(self, flag):
        ad.set_requires_grad(self.params.values(), flag)
        return self

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k!r}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v


class Linear:
    def __init__(self, module, name, fan_in, fan_out, rng, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out)
        self.w = module.add_param(f"{name}.w", w)
        self.b = module.add_param(f"{name}.b", np.zeros(fan_out))

    def __call__(self, x):
        return ad.bias_add(ad.matmul(x, self.w), self.b)


class Conv:
    def __init__(self, module, name, c_in, c_out, rng, k=3, stride=2, transpose=False, zero=False):
        shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
        w = np.zeros(shape) if zero else glorot_uniform(rng, shape, c_in * k * k, c_out * k * k)
        self.w = module.add_param(f"{name}.w", w)
        self.b = module.add_param(f"{name}.b", np.zeros(c_out))
        self.stride = stride
        self.transpose = transpose

    def __call__(self, x):
        op = ad.conv2d_transpose if self.transpose else ad.conv2d
        return ad.bias_add(op(x, self.w, self.stride), self.b)


class GeneratorNet(Module):
    """Domain translator; output has the input's shape with values in (-1, 1)."""

    def __init__(self, input_shape, rng, widths=(8, 16), hidden=32, zero_last=False):
        super().__init__()
        self.input_shape = tuple(input_shape)
        if len(self.input_shape) == 3:
            ch, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ValueError(f"image side must be divisible by 4, got {h}x{w}")
            c1, c2 = widths
            self.layers = [
                Conv(self, "enc1", ch, c1, rng),
                Conv(self, "enc2", c1, c2, rng),
                Conv(self, "dec1", c2, c1, rng, transpose=True),
                Conv(self, "dec2", c1, ch, rng, transpose=True, zero=zero_last),
            ]
        elif len(self.input_shape) == 1:
            (d,) = self.input_shape
            self.layers = [
                Linear(self, "enc1", d, hidden, rng),
                Linear(self, "enc2", hidden, hidden, rng),
                Linear(self, "dec1", hidden, hidden, rng),
                Linear(self, "dec2", hidden, d, rng, zero=zero_last),
            ]
        else:
            raise ValueError(f"unsupported input shape {input_shape}")

    def __call__(self, x):
        return generator_forward(self, x)


def generator_forward(net, batch):
    if batch.shape[1:] != net.input_shape:
        if batch.ndim == 4 and (batch.shape[2] % 4 or batch.shape[3] % 4):
            raise ValueError(f"generator: spatial dims {batch.shape[2:]} not divisible by 4")
        raise ad.ShapeError(f"generator: batch shape {batch.shape} does not match {net.input_shape}")
    h = batch
    for layer in net.layers[:-1]:
        h = ad.leaky_relu(layer(h), LEAK)
    return ad.tanh(net.layers[-1](h))


class TriHeadDiscriminator(Module):
    """Shared trunk with three heads: real/fake (d), classifier (c) and
    joint sample-label authenticity (j). Head j reads the trunk features
    concatenated with a C-dimensional label/probability vector.

    ``trunk_params`` / ``disc_params`` / ``classifier_params`` split the
    parameters into update groups; the trunk belongs to the discriminator.
    """

    def __init__(self, input_shape, n_classes, rng, widths=(8, 16), hidden=32, features=64):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.features = features
        if len(self.input_shape) == 3:
            ch, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ValueError(f"image side must be divisible by 4, got {h}x{w}")
            c1, c2 = widths
            self.body = [Conv(self, "trunk1", ch, c1, rng), Conv(self, "trunk2", c1, c2, rng)]
            flat = c2 * (h // 4) * (w // 4)
        else:
            (d,) = self.input_shape
            self.body = [Linear(self, "trunk1", d, hidden, rng), Linear(self, "trunk2", hidden, hidden, rng)]
            flat = hidden
        self.flat = flat
        self.fc = Linear(self, "trunk_fc", flat, features, rng)
        self.head_d = Linear(self, "head_d", features, 1, rng)
        self.head_c = Linear(self, "head_c", features, n_classes, rng)
        self.head_j = Linear(self, "head_j", features + n_classes, 1, rng)

    def _group(self, prefixes):
        return [p for k, p in self.params.items() if k.startswith(prefixes)]

    def trunk_params(self):
        return self._group(("trunk",))

    def disc_params(self):
        return self._group(("trunk", "head_d", "head_j"))

    def classifier_params(self):
        return self._group(("head_c",))

    def trunk(self, x):
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"discriminator: batch shape {x.shape} does not match {self.input_shape}")
        h = x
        for layer in self.body:
            h = ad.leaky_relu(layer(h), LEAK)
        if h.ndim != 2:
            h = ad.reshape(h, (h.shape[0], self.flat))
        return ad.leaky_relu(self.fc(h), LEAK)

    def d(self, feat):
        return self.head_d(feat)

    def c(self, feat):
        return self.head_c(feat)

    def j(self, feat, label_vec):
        if not isinstance(label_vec, Tensor):
            label_vec = Tensor(label_vec)
        check_probability_rows(label_vec.data, self.n_classes)
        return self.head_j(ad.concat([feat, label_vec], axis=1))

    def __call__(self, x, label_vec=None):
        return discriminate(self, x, label_vec)


def check_probability_rows(p, n_classes, tol=1e-6):
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[1] != n_classes:
        raise ValueError(f"label vectors must have shape (n, {n_classes}), got {p.shape}")
    if (p < 0).any() or (np.abs(p.sum(axis=1) - 1.0) > tol).any():
        raise ValueError("label vector rows must be nonnegative and sum to 1")


def discriminate(disc, batch, label_vec=None):
    """Return ``(d_score, c_logits, j_score)``; ``j_score`` is None without labels."""
    feat = disc.trunk(batch)
    j = disc.j(feat, label_vec) if label_vec is not None else None
    return disc.d(feat), disc.c(feat), j


# --------------------------------------------------------------------- Adam

class AdamState:
    """Adam moments for a fixed parameter list."""

    def __init__(self, params, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        adam_step(self, self.params, grads, lr)


def adam_step(state, params, grads, lr):
    """Bias-corrected Adam update, in place."""
    if lr < 0:
        raise ValueError("adam_step: learning rate must be nonnegative")
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("adam_step: parameter/gradient lists do not match the state")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or m.shape != p.shape:
            raise ad.ShapeError(f"adam_step: gradient shape {np.shape(g)} != parameter shape {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step, total_steps, lr_start=0.002, lr_end=0.0002):
    if total_steps <= 0:
        raise ValueError("lr_schedule: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"lr_schedule: step {step} outside [0, {total_steps}]")
    return lr_start + (lr_end - lr_start) * (step / total_steps)


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"CDCK"
CKPT_VERSION = 1


def save_checkpoint(path, named_arrays, n_classes, image_size):
    """Little-endian layout::

        magic "CDCK" | u32 version | u32 C | u32 image size (0 = vector) | u32 blocks
        per block: u32 name length | utf-8 name | u32 rank | u32 dims... | f64 values
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IIII", CKPT_VERSION, n_classes, image_size, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return ``(named_arrays, n_classes, image_size)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n_classes, image_size, blocks = struct.unpack_from("<IIII", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    out = {}
    for _ in range(blocks):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
    return out, n_classes, image_size
