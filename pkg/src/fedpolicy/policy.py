"""Contract analogues for the training policy and the aggregation policy.

Both are in-process state machines (Deployed -> Recorded -> Finalized) with
write-once result fields, an append-only event log stamped with a per-policy
logical clock, and a gas ledger that charges every state-mutating call exactly
once. Gas is abstract: a deployment base, a charge per 32-byte storage word
and a charge per emitted event.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Iterable

from .canon import ModelDigest, model_hash
from .model import ArchitectureSpec, ModelParams

RECORD_VERSION = 1
WORD_BYTES = 32
PLM_FIELD_WORDS = 6
PGM_FIXED_WORDS = 5
RESULT_WORDS = 2
STATE_WORDS = 1

ACCURACY_RE = re.compile(r"^\d{1,3}\.\d{2}$")

# Totals of the two-contract deployment used to calibrate DEFAULT_COSTS, and of
# two three-contract designs from prior work (the second stores full models).
REFERENCE_GAS = {
    "hash-storing, two contracts": 3_537_625,
    "baseline A, three contracts": 5_783_731,
    "baseline B (model-storing), three contracts": 10_424_901,
}


class PolicyError(Exception):
    pass


class PolicyStateError(PolicyError):
    pass


class WriteOnceError(PolicyError):
    pass


class DuplicateDeploymentError(PolicyError):
    pass


class PolicyValidationError(PolicyError, ValueError):
    pass


class PolicyState(enum.IntEnum):
    DEPLOYED = 0
    RECORDED = 1
    FINALIZED = 2


@dataclass(frozen=True)
class CostTable:
    deploy_base: int
    per_storage_word: int
    per_log_event: int = 0

    def __post_init__(self):
        if min(self.deploy_base, self.per_storage_word, self.per_log_event) < 0:
            raise ValueError("gas costs are non-negative")


# deploy_base chosen so one full lifecycle of both contracts with five
# participants costs 3,537,500 gas (see reference_lifecycle_gas).
DEFAULT_COSTS = CostTable(deploy_base=1_568_000, per_storage_word=20_000, per_log_event=375)


@dataclass(frozen=True)
class GasEntry:
    contract_id: str
    action: str
    gas: int


@dataclass
class GasLedger:
    cost_table: CostTable = DEFAULT_COSTS
    entries: list[GasEntry] = field(default_factory=list)
    deployed: set[str] = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def charge(self, contract_id: str, action: str, words: int, events: int = 1,
               deploy: bool = False) -> int:
        t = self.cost_table
        gas = (t.deploy_base if deploy else 0) + t.per_storage_word * words + t.per_log_event * events
        with self._lock:
            self.entries.append(GasEntry(contract_id, action, gas))
        return gas

    def register(self, contract_id: str) -> None:
        with self._lock:
            if contract_id in self.deployed:
                raise DuplicateDeploymentError(f"contract {contract_id} already deployed")
            self.deployed.add(contract_id)

    @property
    def total(self) -> int:
        with self._lock:
            return sum(e.gas for e in self.entries)


def total_gas(ledger: GasLedger, contract_ids: Iterable[str] | None = None) -> int:
    if contract_ids is None:
        return ledger.total
    wanted = set(contract_ids)
    return sum(e.gas for e in ledger.entries if e.contract_id in wanted)


def storage_words(n_bytes: int) -> int:
    return math.ceil(n_bytes / WORD_BYTES)


@dataclass(frozen=True)
class LogEvent:
    name: str
    payload_digest: str
    timestamp: int


def _payload_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def check_accuracy(text: str) -> str:
    if not isinstance(text, str) or not ACCURACY_RE.match(text) or float(text) > 100.0:
        raise PolicyValidationError(f"accuracy must look like '98.27' (0-100, two decimals), got {text!r}")
    return text


def format_accuracy(fraction: float) -> str:
    """Accuracy fraction -> percent string with two decimals ('0.9827' -> '98.27')."""
    return check_accuracy(f"{100.0 * fraction:.2f}")


@dataclass
class _Policy:
    contract_id: str
    state: PolicyState = PolicyState.DEPLOYED
    event_log: list[LogEvent] = field(default_factory=list)

    def _emit(self, name: str, payload: dict) -> None:
        self.event_log.append(LogEvent(name, _payload_digest(payload), len(self.event_log)))

    def _advance(self, to: PolicyState) -> None:
        if to != self.state + 1:
            raise PolicyStateError(f"{self.contract_id}: cannot move {self.state.name} -> {to.name}")
        self.state = to


@dataclass
class TrainingPolicy(_Policy):
    client_id: int = 0
    model_architecture: int = 0
    training_round: int = 0
    epoch: int = 0
    model_accuracy: str = ""
    local_model_hash: ModelDigest | None = None

    def to_record(self) -> dict:
        return {
            "kind": "training-policy",
            "version": RECORD_VERSION,
            "contract_id": self.contract_id,
            "client_id": self.client_id,
            "model_architecture": self.model_architecture,
            "training_round": self.training_round,
            "epoch": self.epoch,
            "model_accuracy": self.model_accuracy,
            "local_model_hash": self.local_model_hash.hex() if self.local_model_hash else "",
            "state": self.state.name,
            "event_log": [[e.name, e.payload_digest, e.timestamp] for e in self.event_log],
        }


@dataclass
class AggregationPolicy(_Policy):
    global_model_id: int = 0
    fed_round: int = 0
    participant_num: tuple[int, ...] = ()
    global_model_acc: str = ""
    global_model_hash: ModelDigest | None = None
    stores_model: bool = False

    def to_record(self) -> dict:
        return {
            "kind": "aggregation-policy",
            "version": RECORD_VERSION,
            "contract_id": self.contract_id,
            "global_model_id": self.global_model_id,
            "fed_round": self.fed_round,
            "participant_num": list(self.participant_num),
            "global_model_acc": self.global_model_acc,
            "global_model_hash": self.global_model_hash.hex() if self.global_model_hash else "",
            "stores_model": self.stores_model,
            "state": self.state.name,
            "event_log": [[e.name, e.payload_digest, e.timestamp] for e in self.event_log],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AggregationPolicy":
        if rec.get("kind") != "aggregation-policy" or rec.get("version") != RECORD_VERSION:
            raise PolicyValidationError("not a version-1 aggregation policy record")
        return cls(
            contract_id=rec["contract_id"],
            state=PolicyState[rec["state"]],
            event_log=[LogEvent(*e) for e in rec["event_log"]],
            global_model_id=rec["global_model_id"],
            fed_round=rec["fed_round"],
            participant_num=tuple(rec["participant_num"]),
            global_model_acc=rec["global_model_acc"],
            global_model_hash=ModelDigest.fromhex(rec["global_model_hash"]) if rec["global_model_hash"] else None,
            stores_model=rec["stores_model"],
        )


def policy_bytes(policy: _Policy) -> bytes:
    """Canonical record: compact JSON, fixed field order."""
    return json.dumps(policy.to_record(), separators=(",", ":")).encode()


def plm_contract_id(client_id: int, round_: int) -> str:
    return f"plm/c{client_id}/r{round_}"


def pgm_contract_id(global_model_id: int, fed_round: int, replica: int | None = None) -> str:
    base = f"pgm/g{global_model_id}/r{fed_round}"
    return base if replica is None else f"{base}/n{replica}"


def deploy_training_policy(client_id: int, arch_id: int, round_: int, epochs: int,
                           ledger: GasLedger, registered: Iterable[int] | None = None) -> TrainingPolicy:
    if epochs < 1:
        raise PolicyValidationError("epochs must be >= 1")
    if registered is not None and client_id not in set(registered):
        raise PolicyValidationError(f"client {client_id} is not registered")
    cid = plm_contract_id(client_id, round_)
    ledger.register(cid)
    policy = TrainingPolicy(contract_id=cid, client_id=client_id, model_architecture=int(arch_id),
                            training_round=round_, epoch=epochs)
    ledger.charge(cid, "deploy", PLM_FIELD_WORDS, deploy=True)
    policy._emit("Deployed", {"client_id": client_id, "arch": int(arch_id), "round": round_, "epoch": epochs})
    return policy


def record_training_result(policy: TrainingPolicy, accuracy: str, digest: ModelDigest,
                           ledger: GasLedger) -> TrainingPolicy:
    if policy.model_accuracy or policy.local_model_hash is not None:
        raise WriteOnceError(f"{policy.contract_id}: accuracy/hash already recorded")
    if policy.state != PolicyState.DEPLOYED:
        raise PolicyStateError(f"{policy.contract_id}: record needs Deployed, is {policy.state.name}")
    check_accuracy(accuracy)
    if not isinstance(digest, ModelDigest):
        raise PolicyValidationError("local model hash must be a ModelDigest")
    policy.model_accuracy = accuracy
    policy.local_model_hash = digest
    policy._advance(PolicyState.RECORDED)
    ledger.charge(policy.contract_id, "record", RESULT_WORDS)
    policy._emit("Recorded", {"accuracy": accuracy, "hash": digest.hex()})
    return policy


@dataclass(frozen=True)
class Expected:
    """What the coordinator requires of a local model this round."""

    arch: ArchitectureSpec
    round: int
    epochs: int


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]


def validate_local_model(policy: TrainingPolicy, model: ModelParams, expected: Expected,
                         ledger: GasLedger | None = None) -> ValidationReport:
    """Check a received local model against its recorded policy.

    Failures come back as report entries (``hash-mismatch``, ``arch-mismatch``,
    ``round-mismatch``, ``epoch-mismatch``). A fully passing report finalizes
    the policy.
    """
    if policy.state != PolicyState.RECORDED:
        raise PolicyStateError(f"{policy.contract_id}: validation needs Recorded, is {policy.state.name}")
    digest = model_hash(model)
    checks = (
        Check("hash-mismatch", digest == policy.local_model_hash,
              f"computed {digest.hex()[:16]} recorded {policy.local_model_hash.hex()[:16]}"),
        Check("arch-mismatch",
              model.arch == expected.arch and policy.model_architecture == int(expected.arch.arch_id),
              f"policy {policy.model_architecture} model {int(model.arch.arch_id)} expected {int(expected.arch.arch_id)}"),
        Check("round-mismatch", policy.training_round == expected.round,
              f"policy {policy.training_round} expected {expected.round}"),
        Check("epoch-mismatch", policy.epoch == expected.epochs,
              f"policy {policy.epoch} expected {expected.epochs}"),
    )
    report = ValidationReport(checks)
    if report.passed:
        policy._advance(PolicyState.FINALIZED)
        if ledger is not None:
            ledger.charge(policy.contract_id, "finalize", STATE_WORDS)
        policy._emit("Finalized", {"hash": digest.hex()})
    return report


def deploy_aggregation_policy(global_model_id: int, fed_round: int, participant_ids, ledger: GasLedger,
                              replica: int | None = None, store_model: bool = False) -> AggregationPolicy:
    ids = tuple(int(i) for i in participant_ids)
    if not ids:
        raise PolicyValidationError("an aggregation policy needs at least one participant")
    if len(set(ids)) != len(ids):
        raise PolicyValidationError(f"duplicate participant ids in {list(ids)}")
    if list(ids) != sorted(ids):
        raise PolicyValidationError(f"participant ids must be strictly increasing, got {list(ids)}")
    cid = pgm_contract_id(global_model_id, fed_round, replica)
    ledger.register(cid)
    policy = AggregationPolicy(contract_id=cid, global_model_id=global_model_id, fed_round=fed_round,
                               participant_num=ids, stores_model=store_model)
    ledger.charge(cid, "deploy", PGM_FIXED_WORDS + len(ids), deploy=True)
    policy._emit("Deployed", {"global_model_id": global_model_id, "round": fed_round, "participants": list(ids)})
    return policy


def record_aggregation_result(policy: AggregationPolicy, accuracy: str, digest: ModelDigest,
                              ledger: GasLedger, model_bytes: bytes | None = None) -> AggregationPolicy:
    """Write accuracy and hash, emit the PGM report event.

    A model-storing policy (``stores_model=True``) must also be given the
    model's bytes and pays storage for all of them.
    """
    if policy.global_model_acc or policy.global_model_hash is not None:
        raise WriteOnceError(f"{policy.contract_id}: accuracy/hash already recorded")
    if policy.state != PolicyState.DEPLOYED:
        raise PolicyStateError(f"{policy.contract_id}: record needs Deployed, is {policy.state.name}")
    check_accuracy(accuracy)
    words = RESULT_WORDS
    if policy.stores_model:
        if model_bytes is None:
            raise PolicyValidationError("model-storing policy needs the model bytes")
        words += storage_words(len(model_bytes))
    policy.global_model_acc = accuracy
    policy.global_model_hash = digest
    policy._advance(PolicyState.RECORDED)
    ledger.charge(policy.contract_id, "record", words)
    policy._emit("PGMReport", {"accuracy": accuracy, "hash": digest.hex(),
                               "participants": list(policy.participant_num)})
    return policy


def finalize_aggregation_policy(policy: AggregationPolicy, ledger: GasLedger) -> AggregationPolicy:
    policy._advance(PolicyState.FINALIZED)
    ledger.charge(policy.contract_id, "finalize", STATE_WORDS)
    policy._emit("Finalized", {"hash": policy.global_model_hash.hex()})
    return policy


def reference_lifecycle_gas(costs: CostTable = DEFAULT_COSTS, n_participants: int = 5,
                            model_param_count: int | None = None) -> int:
    """Gas for deploying and recording one training and one aggregation policy.

    With ``model_param_count`` set, the aggregation policy stores the full
    float32 model instead of only its hash.
    """
    ledger = GasLedger(costs)
    plm = deploy_training_policy(1, 0, 1, 1, ledger)
    record_training_result(plm, "0.00", ModelDigest(bytes(32)), ledger)
    pgm = deploy_aggregation_policy(1, 1, range(1, n_participants + 1), ledger,
                                    store_model=model_param_count is not None)
    blob = bytes(4 * model_param_count) if model_param_count is not None else None
    record_aggregation_result(pgm, "0.00", ModelDigest(bytes(32)), ledger, model_bytes=blob)
    return ledger.total
