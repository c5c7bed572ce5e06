import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpolicy.canon import ModelDigest, model_hash
from fedpolicy.model import ArchitectureSpec, ArchKind
from fedpolicy.policy import (
    DEFAULT_COSTS,
    AggregationPolicy,
    CostTable,
    DuplicateDeploymentError,
    Expected,
    GasLedger,
    PolicyState,
    PolicyStateError,
    PolicyValidationError,
    WriteOnceError,
    check_accuracy,
    deploy_aggregation_policy,
    deploy_training_policy,
    finalize_aggregation_policy,
    format_accuracy,
    policy_bytes,
    record_aggregation_result,
    record_training_result,
    reference_lifecycle_gas,
    storage_words,
    total_gas,
    validate_local_model,
)

FLAT = CostTable(deploy_base=100_000, per_storage_word=20_000, per_log_event=0)


def recorded_policy(model, ledger, epochs=1, round_=1):
    p = deploy_training_policy(1, int(model.arch.arch_id), round_, epochs, ledger)
    return record_training_result(p, "98.27", model_hash(model), ledger)


def test_deploy_echoes_fields(ledger):
    p = deploy_training_policy(3, 0, 2, 5, ledger)
    assert (p.client_id, p.model_architecture, p.training_round, p.epoch) == (3, 0, 2, 5)
    assert p.state is PolicyState.DEPLOYED
    assert p.model_accuracy == "" and p.local_model_hash is None


def test_duplicate_deployment_rejected(ledger):
    deploy_training_policy(3, 0, 2, 5, ledger)
    with pytest.raises(DuplicateDeploymentError):
        deploy_training_policy(3, 0, 2, 5, ledger)


def test_unregistered_client_rejected(ledger):
    with pytest.raises(PolicyValidationError):
        deploy_training_policy(9, 0, 1, 1, ledger, registered=[1, 2])


def test_training_deploy_gas_flat_table(flat_ledger):
    deploy_training_policy(1, 0, 1, 1, flat_ledger)
    assert flat_ledger.total == 220_000


def test_record_is_write_once(ledger, small_model):
    p = recorded_policy(small_model, ledger)
    assert p.state is PolicyState.RECORDED
    with pytest.raises(WriteOnceError):
        record_training_result(p, "10.00", model_hash(small_model), ledger)
    assert p.model_accuracy == "98.27"


@pytest.mark.parametrize("bad", ["98.2.7", "98.2", "101.00", "abc", "", "-1.00", "1000.00"])
def test_malformed_accuracy_rejected(bad, ledger):
    p = deploy_training_policy(1, 0, 1, 1, ledger)
    with pytest.raises(PolicyValidationError):
        record_training_result(p, bad, ModelDigest(bytes(32)), ledger)
    assert p.state is PolicyState.DEPLOYED


@pytest.mark.parametrize("good", ["98.27", "70.03", "0.00", "100.00"])
def test_wellformed_accuracy_accepted(good):
    assert check_accuracy(good) == good


def test_format_accuracy():
    assert format_accuracy(0.9827) == "98.27"
    assert format_accuracy(0.7003) == "70.03"


def test_validation_passes_and_finalizes(ledger, small_model):
    p = recorded_policy(small_model, ledger)
    report = validate_local_model(p, small_model, Expected(small_model.arch, 1, 1), ledger)
    assert report.passed and report.failures == []
    assert p.state is PolicyState.FINALIZED


def test_validation_detects_perturbed_weight(ledger, small_model):
    p = recorded_policy(small_model, ledger)
    w = small_model.weights.copy()
    w[2] = np.nextafter(w[2], np.float32(1))
    report = validate_local_model(p, small_model.with_weights(w), Expected(small_model.arch, 1, 1))
    assert report.failures == ["hash-mismatch"]
    assert p.state is PolicyState.RECORDED


def test_validation_detects_epoch_mismatch(ledger, small_model):
    p = recorded_policy(small_model, ledger, epochs=10)
    report = validate_local_model(p, small_model, Expected(small_model.arch, 1, 15))
    assert report.failures == ["epoch-mismatch"]


def test_validation_detects_arch_and_round(ledger, small_model):
    p = recorded_policy(small_model, ledger, round_=2)
    other = ArchitectureSpec(ArchKind.MLP, (4, 5, 3))
    report = validate_local_model(p, small_model, Expected(other, 3, 1))
    assert set(report.failures) == {"arch-mismatch", "round-mismatch"}


def test_validation_needs_recorded_state(ledger, small_model):
    p = deploy_training_policy(1, 0, 1, 1, ledger)
    with pytest.raises(PolicyStateError):
        validate_local_model(p, small_model, Expected(small_model.arch, 1, 1))


def test_aggregation_policy_three_participants(flat_ledger):
    p = deploy_aggregation_policy(1, 1, [1, 2, 3], flat_ledger)
    assert p.participant_num == (1, 2, 3)
    assert flat_ledger.total == 100_000 + 20_000 * (5 + 3)


@pytest.mark.parametrize("ids", [[2, 2, 3], [], [3, 1]])
def test_aggregation_policy_rejects_bad_participants(ids, ledger):
    with pytest.raises(PolicyValidationError):
        deploy_aggregation_policy(1, 1, ids, ledger)


def test_aggregation_lifecycle_and_events(ledger, small_model):
    p = deploy_aggregation_policy(7, 2, [1, 4], ledger)
    assert len(ledger.entries) == 1 and len(p.event_log) == 1
    record_aggregation_result(p, "91.00", model_hash(small_model), ledger)
    assert [e.name for e in p.event_log] == ["Deployed", "PGMReport"]
    finalize_aggregation_policy(p, ledger)
    assert p.state is PolicyState.FINALIZED
    assert len(ledger.entries) == 3 and len(p.event_log) == 3
    assert [e.timestamp for e in p.event_log] == [0, 1, 2]
    with pytest.raises(PolicyStateError):
        finalize_aggregation_policy(p, ledger)
    with pytest.raises(WriteOnceError):
        record_aggregation_result(p, "91.00", model_hash(small_model), ledger)


def test_aggregation_record_round_trip(ledger, small_model):
    p = deploy_aggregation_policy(7, 2, [1, 4], ledger)
    record_aggregation_result(p, "91.00", model_hash(small_model), ledger)
    q = AggregationPolicy.from_record(p.to_record())
    assert policy_bytes(q) == policy_bytes(p)


def test_total_gas_examples(flat_ledger):
    assert total_gas(GasLedger(FLAT)) == 0
    deploy_training_policy(1, 0, 1, 1, flat_ledger)
    deploy_aggregation_policy(1, 1, [1, 2, 3], flat_ledger)
    assert total_gas(flat_ledger) == 480_000
    assert total_gas(flat_ledger, ["plm/c1/r1"]) == 220_000


def test_storage_words_for_full_model():
    assert storage_words(4 * 60_000) == 7_500
    assert storage_words(1) == 1 and storage_words(0) == 0


def test_default_lifecycle_matches_calibration():
    assert reference_lifecycle_gas() == 3_537_500
    assert abs(reference_lifecycle_gas() - 3_537_625) <= 0.2 * 3_537_625


# -- properties ---------------------------------------------------------------

ops = st.lists(st.sampled_from(["record", "validate", "bad-record"]), max_size=8)


@given(ops=ops)
@settings(max_examples=60, deadline=None)
def test_state_never_goes_backwards(ops):
    from fedpolicy.model import init_model
    arch = ArchitectureSpec(ArchKind.LINEAR, (2, 2))
    m = init_model(arch, 0)
    ledger = GasLedger()
    p = deploy_training_policy(1, 0, 1, 1, ledger)
    seen = [p.state]
    for op in ops:
        try:
            if op == "record":
                record_training_result(p, "50.00", model_hash(m), ledger)
            elif op == "bad-record":
                record_training_result(p, "5.0.0", model_hash(m), ledger)
            else:
                validate_local_model(p, m, Expected(arch, 1, 1), ledger)
        except (PolicyStateError, WriteOnceError, PolicyValidationError):
            pass
        seen.append(p.state)
    assert seen == sorted(seen)


@given(n_clients=st.integers(1, 12), base=st.integers(0, 10**6), word=st.integers(0, 10**5),
       event=st.integers(0, 10**4))
@settings(max_examples=60, deadline=None)
def test_gas_is_additive(n_clients, base, word, event):
    costs = CostTable(base, word, event)
    ledger = GasLedger(costs)
    for cid in range(1, n_clients + 1):
        deploy_training_policy(cid, 0, 1, 1, ledger)
    deploy_aggregation_policy(1, 1, range(1, n_clients + 1), ledger)
    expected = n_clients * (base + 6 * word + event) + base + (5 + n_clients) * word + event
    assert ledger.total == expected == sum(e.gas for e in ledger.entries)


@given(params=st.integers(256, 200_000), n=st.integers(1, 20))
@settings(max_examples=60, deadline=None)
def test_hash_only_cheaper_than_model_storing(params, n):
    assert reference_lifecycle_gas(DEFAULT_COSTS, n) < reference_lifecycle_gas(DEFAULT_COSTS, n, params)
