import numpy as np
import pytest

from fedpolicy.canon import KeyStore, NonceCounter, derive_key
from fedpolicy.experiments import ExperimentConfig
from fedpolicy.model import ArchitectureSpec, ArchKind, DatasetShard, init_model
from fedpolicy.nodes import Client
from fedpolicy.policy import CostTable, GasLedger

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def linear_arch():
    return ArchitectureSpec(ArchKind.LINEAR, (4, 3))


@pytest.fixture
def small_model(linear_arch):
    return init_model(linear_arch, 7)


@pytest.fixture
def ledger():
    return GasLedger()


@pytest.fixture
def flat_ledger():
    """Cost table with round numbers used by the worked gas examples."""
    return GasLedger(CostTable(deploy_base=100_000, per_storage_word=20_000, per_log_event=0))


def make_client(cid: int, arch: ArchitectureSpec, n: int = 40, seed: int = 0) -> Client:
    rng = np.random.default_rng(seed + cid)
    x = rng.normal(size=(n, arch.input_dim)).astype(np.float32)
    y = rng.integers(0, arch.n_classes, size=n)
    return Client(cid, DatasetShard(x, y, cid - 1), x[:10], y[:10], derive_key(0, cid), NonceCounter())


@pytest.fixture
def clients(linear_arch):
    return [make_client(cid, linear_arch) for cid in range(1, 6)]


@pytest.fixture
def keystore(clients):
    ks = KeyStore()
    for c in clients:
        ks.register(c.client_id, c.key)
    return ks


@pytest.fixture
def tiny_config():
    return ExperimentConfig(n_clients=5, rounds=1, epochs=1, samples_per_client=40, test_per_client=10,
                            holdout_size=100, n_features=4, n_classes=3)


def build_chain(n_blocks: int = 4, arch: ArchitectureSpec | None = None):
    """Chain of ``n_blocks`` finalized (model, aggregation policy) blocks."""
    from fedpolicy.canon import model_hash
    from fedpolicy.chain import Chain, append_block
    from fedpolicy.policy import (deploy_aggregation_policy, finalize_aggregation_policy,
                                  record_aggregation_result)

    arch = arch or ArchitectureSpec(ArchKind.LINEAR, (4, 3))
    ledger = GasLedger()
    chain = Chain()
    for r in range(1, n_blocks + 1):
        m = init_model(arch, r)
        pol = deploy_aggregation_policy(1, r, [1, 2, 3], ledger)
        record_aggregation_result(pol, "50.00", model_hash(m), ledger)
        append_block(chain, m, finalize_aggregation_policy(pol, ledger))
    return chain
