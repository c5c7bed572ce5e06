"""Small deterministic classifiers: initialization, partitioning, SGD and evaluation.

Weights are held as a flat float32 vector. Gradients are computed in float64 and
every SGD step rounds the updated weights back to float32, so the stored state
(and therefore its hash) is bit-stable for a given platform and input.

Flat weight layout, in order:

* dense stack (linear / MLP): for each layer ``W`` (fan_in x fan_out, row-major)
  followed by bias ``b`` (fan_out).
* CNN ``[height, width, filters, classes]``: conv kernels (filters x 3 x 3),
  conv bias (filters), then the dense head ``W`` ((pooled cells * filters) x
  classes) and its bias. Convolution is 3x3 valid with stride 1, followed by
  ReLU and a 2x2 max-pool (odd trailing rows/columns dropped).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SEED_MASK = (1 << 64) - 1
KERNEL = 3
POOL = 2


class ArchKind(enum.IntEnum):
    LINEAR = 0
    MLP = 1
    CNN = 2


class Activation(enum.IntEnum):
    NONE = 0
    RELU = 1
    TANH = 2


class ModelError(ValueError):
    """Invalid architecture, parameters or dataset."""


class TrainingDivergenceError(ArithmeticError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite weights after epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: ArchKind
    layer_dims: tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "arch_id", ArchKind(self.arch_id))
        object.__setattr__(self, "activation", Activation(self.activation))
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if not dims:
            raise ModelError("layer_dims must be nonempty")
        if any(d < 1 for d in dims):
            raise ModelError(f"all layer dims must be >= 1, got {list(dims)}")
        if self.arch_id == ArchKind.LINEAR and len(dims) != 2:
            raise ModelError("linear architecture takes [inputs, classes]")
        if self.arch_id == ArchKind.MLP and len(dims) < 3:
            raise ModelError("MLP architecture takes [inputs, hidden..., classes]")
        if self.arch_id == ArchKind.CNN:
            if len(dims) != 4:
                raise ModelError("CNN architecture takes [height, width, filters, classes]")
            if min(dims[0], dims[1]) < KERNEL + POOL - 1:
                raise ModelError("CNN input too small for 3x3 conv + 2x2 pool")

    @property
    def input_dim(self) -> int:
        if self.arch_id == ArchKind.CNN:
            return self.layer_dims[0] * self.layer_dims[1]
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def shapes(self) -> list[tuple[int, ...]]:
        """Shapes of the parameter blocks in flat-vector order."""
        if self.arch_id == ArchKind.CNN:
            h, w, f, c = self.layer_dims
            cells = ((h - KERNEL + 1) // POOL) * ((w - KERNEL + 1) // POOL)
            return [(f, KERNEL * KERNEL), (f,), (cells * f, c), (c,)]
        out = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            out += [(fan_in, fan_out), (fan_out,)]
        return out

    def fan_ins(self) -> list[int]:
        if self.arch_id == ArchKind.CNN:
            s = self.shapes()
            return [KERNEL * KERNEL, KERNEL * KERNEL, s[2][0], s[2][0]]
        return [d for d in self.layer_dims[:-1] for _ in range(2)]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes())


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable flat float32 parameter vector tied to its architecture."""

    arch: ArchitectureSpec
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype="<f4").reshape(-1)
        if w.size != self.arch.param_count:
            raise ModelError(
                f"expected {self.arch.param_count} weights for {self.arch}, got {w.size}"
            )
        if not np.isfinite(w).all():
            raise ModelError("weights contain NaN or infinity")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def param_count(self) -> int:
        return self.weights.size

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and self.weights.tobytes() == other.weights.tobytes()

    def __hash__(self):
        return hash((self.arch, self.weights.tobytes()))

    def with_weights(self, weights) -> "ModelParams":
        return ModelParams(self.arch, weights)


@dataclass(frozen=True, eq=False)
class DatasetShard:
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    client_index: int = 0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float32)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ModelError("features must be a (samples x inputs) matrix")
        if x.shape[0] != y.shape[0]:
            raise ModelError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size < 1:
            raise ModelError("a shard needs at least one sample")
        if (y < 0).any():
            raise ModelError("labels must be non-negative class indices")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def num_samples(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.1
    epochs: int = 1
    batch_size: int = 32
    shuffle_seed: int = 0
    loss: str = "cross-entropy"

    def __post_init__(self):
        # zero is allowed: it is the documented fixed point (output == input)
        if not self.learning_rate >= 0:
            raise ModelError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if self.loss != "cross-entropy":
            raise ModelError(f"unsupported loss {self.loss!r}")


def make_rng(*seeds: int) -> np.random.Generator:
    """PCG64 stream keyed by one or more 64-bit seeds (negative values wrap)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([s & SEED_MASK for s in seeds])))


def init_model(arch: ArchitectureSpec, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every block, biases included."""
    rng = make_rng(seed)
    blocks = []
    for shape, fan_in in zip(arch.shapes(), arch.fan_ins()):
        bound = 1.0 / np.sqrt(fan_in)
        blocks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ModelParams(arch, np.concatenate(blocks).astype(np.float32))


def partition_dataset(features, labels, n_clients: int, seed: int) -> list[DatasetShard]:
    """IID split: seed-shuffle, then contiguous chunks whose sizes differ by at most one.

    The first ``n % n_clients`` shards receive the extra sample.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    n = len(labels)
    if n_clients < 1:
        raise ModelError("n_clients must be >= 1")
    if n_clients > n:
        raise ModelError(f"cannot split {n} samples across {n_clients} clients")
    order = make_rng(seed).permutation(n)
    return [
        DatasetShard(features[idx], labels[idx], client_index=i)
        for i, idx in enumerate(np.array_split(order, n_clients))
    ]


def _unpack(w: np.ndarray, arch: ArchitectureSpec) -> list[np.ndarray]:
    out, pos = [], 0
    for shape in arch.shapes():
        size = int(np.prod(shape))
        out.append(w[pos:pos + size].reshape(shape))
        pos += size
    return out


def _act(z, kind):
    if kind == Activation.RELU:
        return np.maximum(z, 0.0)
    if kind == Activation.TANH:
        return np.tanh(z)
    return z


def _act_grad(z, a, kind):
    if kind == Activation.RELU:
        return (z > 0).astype(z.dtype)
    if kind == Activation.TANH:
        return 1.0 - a * a
    return np.ones_like(z)


def _conv_patches(x: np.ndarray, h: int, w: int) -> np.ndarray:
    img = x.reshape(-1, h, w)
    win = np.lib.stride_tricks.sliding_window_view(img, (KERNEL, KERNEL), axis=(1, 2))
    return win.reshape(img.shape[0], h - KERNEL + 1, w - KERNEL + 1, KERNEL * KERNEL)


def _pool_windows(a: np.ndarray) -> np.ndarray:
    b, oh, ow, f = a.shape
    ph, pw = oh // POOL, ow // POOL
    crop = a[:, :ph * POOL, :pw * POOL, :]
    return crop.reshape(b, ph, POOL, pw, POOL, f).transpose(0, 1, 3, 5, 2, 4).reshape(b, ph, pw, f, POOL * POOL)


def _forward(w, arch, x):
    """Logits plus the cache needed for backprop."""
    blocks = _unpack(w, arch)
    if arch.arch_id == ArchKind.CNN:
        h, wd, f, _ = arch.layer_dims
        kern, cb, dw, db = blocks
        patches = _conv_patches(x, h, wd)
        z = patches @ kern.T + cb
        a = np.maximum(z, 0.0)
        win = _pool_windows(a)
        arg = win.argmax(axis=-1)
        pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        flat = pooled.reshape(pooled.shape[0], -1)
        return flat @ dw + db, (patches, z, a.shape, arg, flat)
    acts, pre = [x], []
    n_layers = len(blocks) // 2
    for i in range(n_layers):
        z = acts[-1] @ blocks[2 * i] + blocks[2 * i + 1]
        pre.append(z)
        if i < n_layers - 1:
            acts.append(_act(z, arch.activation))
    return pre[-1], (acts, pre)


def _ce(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    return -logp[np.arange(len(y)), y].mean(), np.exp(logp)


def loss_and_grad(weights, arch: ArchitectureSpec, x, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient (both float64)."""
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if (y >= arch.n_classes).any():
        raise ModelError(f"label out of range for {arch.n_classes} classes")
    logits, cache = _forward(w, arch, x)
    loss, probs = _ce(logits, y)
    d = probs
    d[np.arange(len(y)), y] -= 1.0
    d /= len(y)
    blocks = _unpack(w, arch)
    grads = [None] * len(blocks)
    if arch.arch_id == ArchKind.CNN:
        patches, z, ashape, arg, flat = cache
        kern, cb, dw, db = blocks
        grads[2] = flat.T @ d
        grads[3] = d.sum(axis=0)
        dflat = d @ dw.T
        b, ph, pw, f = arg.shape
        dwin = np.zeros((b, ph, pw, f, POOL * POOL))
        np.put_along_axis(dwin, arg[..., None], dflat.reshape(b, ph, pw, f, 1), axis=-1)
        da = np.zeros(ashape)
        da[:, :ph * POOL, :pw * POOL, :] = (
            dwin.reshape(b, ph, pw, f, POOL, POOL).transpose(0, 1, 4, 2, 5, 3).reshape(b, ph * POOL, pw * POOL, f)
        )
        dz = da * (z > 0)
        grads[0] = dz.reshape(-1, f).T @ patches.reshape(-1, KERNEL * KERNEL)
        grads[1] = dz.reshape(-1, f).sum(axis=0)
    else:
        acts, pre = cache
        n_layers = len(blocks) // 2
        for i in reversed(range(n_layers)):
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            if i > 0:
                d = (d @ blocks[2 * i].T) * _act_grad(pre[i - 1], acts[i], arch.activation)
    return float(loss), np.concatenate([g.reshape(-1) for g in grads])


def batch_loss(model: ModelParams, x, y) -> float:
    return loss_and_grad(model.weights, model.arch, x, y)[0]


def epoch_order(shuffle_seed: int, epoch: int, n: int) -> np.ndarray:
    return make_rng(shuffle_seed, epoch).permutation(n)


def local_train(global_model: ModelParams, shard: DatasetShard, cfg: TrainingConfig) -> ModelParams:
    """Mini-batch SGD from ``global_model`` for ``cfg.epochs`` passes over ``shard``.

    Each epoch visits the shard in the order ``epoch_order(cfg.shuffle_seed, epoch)``;
    the last batch of an epoch may be short. After every step the weights are
    rounded to float32 and checked for NaN/inf.
    """
    arch = global_model.arch
    if shard.features.shape[1] != arch.input_dim:
        raise ModelError(f"shard has {shard.features.shape[1]} inputs, model expects {arch.input_dim}")
    if shard.labels.max() >= arch.n_classes:
        raise ModelError(f"shard labels exceed {arch.n_classes} classes")
    w = global_model.weights.copy()
    x = shard.features
    y = shard.labels
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.shuffle_seed, epoch, shard.num_samples)
        for batch, start in enumerate(range(0, shard.num_samples, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(w, arch, x[idx], y[idx])
            with np.errstate(over="ignore", invalid="ignore"):
                w = (w.astype(np.float64) - cfg.learning_rate * g).astype(np.float32)
            if not np.isfinite(w).all():
                raise TrainingDivergenceError(epoch, batch)
    return ModelParams(arch, w)


def predict(model: ModelParams, features, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    x = np.asarray(features, dtype=np.float64)
    w = model.weights.astype(np.float64)
    out = [
        _forward(w, model.arch, x[i:i + chunk])[0].argmax(axis=1)
        for i in range(0, len(x), chunk)
    ]
    return np.concatenate(out)


def evaluate(model: ModelParams, features, labels) -> float:
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ModelError("cannot evaluate on an empty set")
    if len(features) != labels.size:
        raise ModelError("features and labels disagree in length")
    return float((predict(model, features) == labels).mean())


def parse_arch(arch_id: int, dims: Sequence[int], activation: int = Activation.RELU) -> ArchitectureSpec:
    return ArchitectureSpec(ArchKind(arch_id), tuple(dims), Activation(activation))
