import math
import subprocess
import sys
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpolicy.model import (
    Activation,
    ArchitectureSpec,
    ArchKind,
    DatasetShard,
    ModelError,
    ModelParams,
    TrainingConfig,
    TrainingDivergenceError,
    batch_loss,
    evaluate,
    init_model,
    local_train,
    loss_and_grad,
    partition_dataset,
)

ARCHS = {
    "linear": ArchitectureSpec(ArchKind.LINEAR, (5, 3)),
    "mlp-relu": ArchitectureSpec(ArchKind.MLP, (5, 6, 3), Activation.RELU),
    "mlp-tanh": ArchitectureSpec(ArchKind.MLP, (5, 6, 4, 3), Activation.TANH),
    "cnn": ArchitectureSpec(ArchKind.CNN, (6, 6, 2, 3)),
}


def test_init_is_deterministic():
    arch = ArchitectureSpec(ArchKind.LINEAR, (4, 3))
    assert init_model(arch, 7).weights.tobytes() == init_model(arch, 7).weights.tobytes()


def test_init_seed_changes_weights():
    arch = ArchitectureSpec(ArchKind.LINEAR, (4, 3))
    assert init_model(arch, 7).weights.tobytes() != init_model(arch, 8).weights.tobytes()


def test_zero_dim_rejected():
    with pytest.raises(ModelError):
        ArchitectureSpec(ArchKind.LINEAR, (0, 3))


@pytest.mark.parametrize("name", sorted(ARCHS))
def test_init_respects_fan_in_bound(name):
    arch = ARCHS[name]
    m = init_model(arch, 3)
    pos = 0
    for shape, fan_in in zip(arch.shapes(), arch.fan_ins()):
        size = int(np.prod(shape))
        assert np.abs(m.weights[pos:pos + size]).max() <= 1 / math.sqrt(fan_in)
        pos += size
    assert pos == m.param_count == arch.param_count


def test_negative_seed_allowed():
    arch = ArchitectureSpec(ArchKind.LINEAR, (4, 3))
    assert init_model(arch, -1) == init_model(arch, (1 << 64) - 1)


def test_model_params_reject_nan_and_wrong_length(linear_arch):
    with pytest.raises(ModelError):
        ModelParams(linear_arch, np.full(linear_arch.param_count, np.nan))
    with pytest.raises(ModelError):
        ModelParams(linear_arch, np.zeros(3))


def test_weights_are_read_only(small_model):
    with pytest.raises(ValueError):
        small_model.weights[0] = 1.0


# -- partitioning --------------------------------------------------------------

def _data(n, d=3):
    return np.arange(n * d, dtype=np.float32).reshape(n, d), np.arange(n) % 4


def test_partition_even():
    shards = partition_dataset(*_data(100), 5, seed=1)
    assert [s.num_samples for s in shards] == [20] * 5


def test_partition_remainder():
    shards = partition_dataset(*_data(10), 3, seed=1)
    assert sorted(s.num_samples for s in shards) == [3, 3, 4]


def test_partition_deterministic():
    a = partition_dataset(*_data(50), 4, seed=9)
    b = partition_dataset(*_data(50), 4, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels)


def test_partition_too_many_clients():
    with pytest.raises(ModelError):
        partition_dataset(*_data(3), 4, seed=0)


@given(n=st.integers(1, 200), k=st.integers(1, 20), seed=st.integers(0, 2**63))
@settings(max_examples=60, deadline=None)
def test_partition_is_a_complete_disjoint_cover(n, k, seed):
    if k > n:
        return
    x, y = _data(n)
    shards = partition_dataset(x, y, k, seed)
    rows = Counter(tuple(r) for s in shards for r in s.features.tolist())
    assert rows == Counter(tuple(r) for r in x.tolist())
    sizes = [s.num_samples for s in shards]
    assert max(sizes) - min(sizes) <= 1


# -- training ----------------------------------------------------------------

def _shard(arch, n=24, seed=0):
    rng = np.random.default_rng(seed)
    return DatasetShard(rng.normal(size=(n, arch.input_dim)), rng.integers(0, arch.n_classes, n))


@pytest.mark.parametrize("name", sorted(ARCHS))
def test_zero_learning_rate_is_fixed_point(name):
    arch = ARCHS[name]
    m = init_model(arch, 1)
    out = local_train(m, _shard(arch), TrainingConfig(learning_rate=0.0, epochs=2, batch_size=5))
    assert out.weights.tobytes() == m.weights.tobytes()


def _softmax(z):
    mx = max(z)
    e = [math.exp(v - mx) for v in z]
    s = sum(e)
    return [v / s for v in e]


def test_single_step_matches_closed_form_gradient():
    # two-class linear model, one sample: dL/dW = x (p - onehot)^T, dL/db = p - onehot
    arch = ArchitectureSpec(ArchKind.LINEAR, (2, 2))
    w0 = np.array([0.5, -0.25, 0.125, 1.0, 0.1, -0.2], dtype=np.float32)
    model = ModelParams(arch, w0)
    x, label, lr = [1.5, -2.0], 1, 0.5
    W = [[float(w0[0]), float(w0[1])], [float(w0[2]), float(w0[3])]]
    b = [float(w0[4]), float(w0[5])]
    z = [x[0] * W[0][j] + x[1] * W[1][j] + b[j] for j in range(2)]
    p = _softmax(z)
    err = [p[j] - (1.0 if j == label else 0.0) for j in range(2)]
    grad = [x[0] * err[0], x[0] * err[1], x[1] * err[0], x[1] * err[1], err[0], err[1]]
    expected = np.array([float(w0[i]) - lr * grad[i] for i in range(6)], dtype=np.float32)

    shard = DatasetShard(np.array([x], dtype=np.float32), np.array([label]))
    out = local_train(model, shard, TrainingConfig(learning_rate=lr, epochs=1, batch_size=1))
    assert out.weights.tobytes() == expected.tobytes()


@pytest.mark.parametrize("name", sorted(ARCHS))
def test_gradient_matches_central_differences(name):
    arch = ARCHS[name]
    rng = np.random.default_rng(42)
    w = init_model(arch, 5).weights.astype(np.float64)
    x = rng.normal(size=(8, arch.input_dim))
    y = rng.integers(0, arch.n_classes, 8)
    _, g = loss_and_grad(w, arch, x, y)
    delta = 1e-3
    for i in rng.choice(w.size, size=min(10, w.size), replace=False):
        wp, wm = w.copy(), w.copy()
        wp[i] += delta
        wm[i] -= delta
        fd = (loss_and_grad(wp, arch, x, y)[0] - loss_and_grad(wm, arch, x, y)[0]) / (2 * delta)
        assert abs(fd - g[i]) <= 1e-3 * max(abs(fd), abs(g[i])) + 1e-9, (i, fd, g[i])


def test_training_reduces_loss():
    arch = ARCHS["mlp-relu"]
    shard = _shard(arch, n=64)
    m = init_model(arch, 0)
    out = local_train(m, shard, TrainingConfig(learning_rate=0.1, epochs=20, batch_size=8))
    assert batch_loss(out, shard.features, shard.labels) < batch_loss(m, shard.features, shard.labels)


def test_divergence_names_epoch_and_batch():
    arch = ArchitectureSpec(ArchKind.LINEAR, (3, 2))
    shard = DatasetShard(np.full((4, 3), 1e30, dtype=np.float32), np.array([0, 1, 0, 1]))
    with pytest.raises(TrainingDivergenceError) as exc:
        local_train(init_model(arch, 0), shard, TrainingConfig(learning_rate=1e10, epochs=3, batch_size=2))
    assert exc.value.epoch == 0 and exc.value.batch in (0, 1)
    assert f"epoch {exc.value.epoch}, batch {exc.value.batch}" in str(exc.value)


def test_training_rejects_out_of_range_labels():
    arch = ArchitectureSpec(ArchKind.LINEAR, (3, 2))
    shard = DatasetShard(np.zeros((2, 3)), np.array([0, 5]))
    with pytest.raises(ModelError):
        local_train(init_model(arch, 0), shard, TrainingConfig())


def test_negative_learning_rate_rejected():
    with pytest.raises(ModelError):
        TrainingConfig(learning_rate=-0.1)


_TRAIN_SNIPPET = """
import hashlib, numpy as np
from fedpolicy.model import *
arch = ArchitectureSpec(ArchKind.MLP, (6, 8, 3))
rng = np.random.default_rng(3)
shard = DatasetShard(rng.normal(size=(50, 6)), rng.integers(0, 3, 50))
out = local_train(init_model(arch, 11), shard, TrainingConfig(0.05, 3, 7, 99))
print(hashlib.sha256(out.weights.tobytes()).hexdigest())
"""


def test_training_is_bit_reproducible_across_processes():
    digests = {subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET], capture_output=True, text=True,
                              check=True).stdout.strip() for _ in range(2)}
    assert len(digests) == 1


# -- evaluation ----------------------------------------------------------------

def test_evaluate_constant_prediction():
    arch = ArchitectureSpec(ArchKind.LINEAR, (3, 4))
    w = np.zeros(arch.param_count, dtype=np.float32)
    w[-4:] = [0.0, 0.0, 1.0, 0.0]  # bias favours class 2
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert evaluate(ModelParams(arch, w), x, np.full(20, 2)) == 1.0


def test_evaluate_half_correct():
    arch = ArchitectureSpec(ArchKind.LINEAR, (3, 2))
    zero = ModelParams(arch, np.zeros(arch.param_count))  # all ties -> class 0
    assert evaluate(zero, np.ones((10, 3)), np.array([0, 1] * 5)) == 0.5


def test_fresh_model_is_at_chance_on_random_labels():
    arch = ArchitectureSpec(ArchKind.MLP, (20, 16, 10))
    rng = np.random.default_rng(123)
    acc = evaluate(init_model(arch, 4), rng.normal(size=(10_000, 20)), rng.integers(0, 10, 10_000))
    assert 0.05 <= acc <= 0.15


def test_evaluate_empty_set():
    arch = ArchitectureSpec(ArchKind.LINEAR, (3, 2))
    with pytest.raises(ModelError):
        evaluate(init_model(arch, 0), np.zeros((0, 3)), np.zeros(0, dtype=int))
