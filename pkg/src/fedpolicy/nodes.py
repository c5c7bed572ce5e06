"""Protocol actors and the per-round pipeline.

Round pipeline (one ``Federation.run_round`` call)::

    train       clients: deploy policy -> train -> hash -> record -> encrypt
    verify      coordinator: decrypt, check each model against its policy
    aggregate   b aggregation nodes: re-check hashes, FedAvg, record result
    consensus   manager drops inconsistent results; b storage nodes vote by digest
    store       finalize the winning aggregation policy, append a block
    distribute  participants fetch the model; hash re-checked on read

With policies disabled the same phases run as plain federated averaging: no
contracts, no hashes, one aggregator, nothing stored.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .canon import (
    AuthenticationError,
    CanonError,
    CipherEnvelope,
    KeyStore,
    ModelDigest,
    NonceCounter,
    canonical_deserialize,
    canonical_serialize,
    decrypt_model,
    encrypt_model,
    model_hash,
)
from .chain import Chain, append_block
from .model import (
    ArchitectureSpec,
    DatasetShard,
    ModelError,
    ModelParams,
    TrainingConfig,
    TrainingDivergenceError,
    evaluate,
    local_train,
)
from .network import AuditLog, Message, SimNetwork
from .policy import (
    AggregationPolicy,
    Expected,
    GasLedger,
    PolicyState,
    TrainingPolicy,
    deploy_aggregation_policy,
    deploy_training_policy,
    finalize_aggregation_policy,
    format_accuracy,
    record_aggregation_result,
    record_training_result,
    validate_local_model,
)

PHASES = ("train", "verify", "aggregate", "consensus", "store", "distribute")
PCS = "pcs"
BAM = "bam"
# coordinator-side nonces start in the upper half of the 96-bit space so they
# never collide with the client's own counter under the shared key
PCS_NONCE_BASE = 1 << 95


class RoundFailure(RuntimeError):
    def __init__(self, phase: str, reason: str):
        super().__init__(f"round failed in {phase}: {reason}")
        self.phase = phase
        self.reason = reason


class ClientAbort(RuntimeError):
    def __init__(self, client_id: int, reason: str):
        super().__init__(f"client {client_id} aborted: {reason}")
        self.client_id = client_id
        self.reason = reason


class ArchitectureMismatchError(ModelError):
    pass


class AggregationAbort(RuntimeError):
    def __init__(self, node_id: int, client_ids: list[int]):
        super().__init__(f"aggregation node {node_id} refused: invalid local models from clients {client_ids}")
        self.node_id = node_id
        self.client_ids = client_ids


class ConsensusFailure(RuntimeError):
    pass


class AccessDenied(PermissionError):
    pass


class IntegrityError(RuntimeError):
    pass


class GlobalModelRejected(RuntimeError):
    def __init__(self, client_id: int, reason: str):
        super().__init__(f"client {client_id} rejected the global model: {reason}")
        self.client_id = client_id
        self.reason = reason


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([p & ((1 << 64) - 1) for p in parts]).generate_state(1, np.uint64)[0])


# -- clients -----------------------------------------------------------------

ModelHook = Callable[[ModelParams], ModelParams]


@dataclass
class Client:
    client_id: int
    shard: DatasetShard
    test_x: np.ndarray
    test_y: np.ndarray
    key: bytes
    nonces: NonceCounter = field(default_factory=NonceCounter)
    # adversary hooks
    poison_before_hash: ModelHook | None = None
    tamper_after_hash: ModelHook | None = None
    epochs_override: int | None = None


@dataclass(frozen=True)
class PolicyTemplate:
    """What the coordinator hands each client for a round."""

    arch: ArchitectureSpec
    round: int
    epochs: int
    ledger: GasLedger | None = None
    enabled: bool = True


@dataclass
class ClientSubmission:
    client_id: int
    policy: TrainingPolicy | None
    envelope: CipherEnvelope
    num_samples: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.policy is not None and self.policy.client_id != self.client_id:
            raise ValueError("policy belongs to a different client")


def client_round(client: Client, global_model: ModelParams, template: PolicyTemplate,
                 cfg: TrainingConfig) -> ClientSubmission:
    """Deploy -> train -> hash -> record -> encrypt, in that order."""
    epochs = client.epochs_override or template.epochs
    policy = None
    if template.enabled:
        policy = deploy_training_policy(client.client_id, int(template.arch.arch_id), template.round,
                                        epochs, template.ledger)
    run_cfg = replace(cfg, epochs=epochs,
                      shuffle_seed=derive_seed(cfg.shuffle_seed, client.client_id, template.round))
    try:
        local = local_train(global_model, client.shard, run_cfg)
    except TrainingDivergenceError as exc:
        raise ClientAbort(client.client_id, str(exc)) from exc
    if client.poison_before_hash:
        local = client.poison_before_hash(local)
    if template.enabled:
        acc = evaluate(local, client.test_x, client.test_y)
        record_training_result(policy, format_accuracy(acc), model_hash(local), template.ledger)
    if client.tamper_after_hash:
        local = client.tamper_after_hash(local)
    envelope = encrypt_model(local, client.key, client.client_id, client.nonces)
    return ClientSubmission(client.client_id, policy, envelope, client.shard.num_samples)


# -- coordinator (policy control service) --------------------------------------

@dataclass(frozen=True)
class VerifiedSubmission:
    client_id: int
    model: ModelParams | None
    policy: TrainingPolicy | None
    num_samples: int


@dataclass(frozen=True)
class Rejection:
    client_id: int
    reasons: tuple[str, ...]


@dataclass
class VerifiedSet:
    accepted: list[VerifiedSubmission] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)

    @property
    def accepted_ids(self) -> list[int]:
        return [v.client_id for v in self.accepted]


def pcs_verify(submissions: list[ClientSubmission], expected: Expected, keystore: KeyStore,
               ledger: GasLedger | None = None, enabled: bool = True) -> VerifiedSet:
    """Decrypt every submission and validate it against its training policy.

    Transport failures are reported as ``transport-tamper`` and never confused
    with policy failures such as ``hash-mismatch``.
    """
    out = VerifiedSet()
    for sub in sorted(submissions, key=lambda s: s.client_id):
        cid = sub.client_id
        if cid not in keystore:
            out.rejected.append(Rejection(cid, ("unregistered",)))
            continue
        if sub.envelope.sender_id != cid:
            # the sender id is authenticated data; a mismatch means the envelope was altered
            out.rejected.append(Rejection(cid, ("transport-tamper",)))
            continue
        try:
            model = decrypt_model(sub.envelope, keystore.key_for(cid))
        except AuthenticationError:
            out.rejected.append(Rejection(cid, ("transport-tamper",)))
            continue
        except CanonError:
            out.rejected.append(Rejection(cid, ("malformed-model",)))
            continue
        if enabled:
            pol = sub.policy
            if pol is None or pol.client_id != cid:
                out.rejected.append(Rejection(cid, ("policy-mismatch",)))
                continue
            if pol.state != PolicyState.RECORDED:
                out.rejected.append(Rejection(cid, ("policy-state",)))
                continue
            report = validate_local_model(pol, model, expected, ledger)
            if not report.passed:
                out.rejected.append(Rejection(cid, tuple(report.failures)))
                continue
        elif model.arch != expected.arch:
            out.rejected.append(Rejection(cid, ("arch-mismatch",)))
            continue
        out.accepted.append(VerifiedSubmission(cid, model, sub.policy, sub.num_samples))
    return out


# -- aggregation -----------------------------------------------------------------

def fedavg_coefficients(counts: list[int]) -> list[float]:
    """``n_i / N`` in float64; the last entry absorbs rounding so the sum is 1."""
    total = sum(counts)
    coeffs = [n / total for n in counts]
    if len(coeffs) > 1:
        coeffs[-1] = 1.0 - math.fsum(coeffs[:-1])
    return coeffs


def fedavg(models: list[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-weighted average, accumulated in float64 in the given order.

    Callers pass models in ascending client id order; the result is rounded to
    float32 once at the end.
    """
    if not models:
        raise ValueError("fedavg needs at least one model")
    arch = models[0][0].arch
    for m, n in models:
        if m.arch != arch:
            raise ArchitectureMismatchError(f"cannot average {arch} with {m.arch}")
        if n < 1:
            raise ValueError("every model needs num_samples >= 1")
    acc = np.zeros(arch.param_count, dtype=np.float64)
    for (m, _), c in zip(models, fedavg_coefficients([n for _, n in models])):
        acc += c * m.weights.astype(np.float64)
    return ModelParams(arch, acc.astype(np.float32))


@dataclass
class AggregationNode:
    node_id: int
    test_x: np.ndarray
    test_y: np.ndarray
    # adversary hooks: ``corrupt`` changes the model before it is hashed
    # (a self-consistent wrong result); ``tamper_after_record`` after
    corrupt: ModelHook | None = None
    tamper_after_record: ModelHook | None = None


@dataclass(frozen=True)
class PgmTemplate:
    global_model_id: int
    fed_round: int
    participants: tuple[int, ...]
    ledger: GasLedger


def aggregation_node_run(node: AggregationNode, verified: list[VerifiedSubmission],
                         template: PgmTemplate) -> tuple[ModelParams, AggregationPolicy]:
    if not verified:
        raise ValueError("nothing to aggregate")
    pgm = deploy_aggregation_policy(template.global_model_id, template.fed_round, template.participants,
                                    template.ledger, replica=node.node_id)
    mem, bad = [], []
    for item in sorted(verified, key=lambda v: v.client_id):
        pol = item.policy
        if (pol is None or item.model is None or item.client_id not in template.participants
                or model_hash(item.model) != pol.local_model_hash):
            bad.append(item.client_id)
        mem.append((item.model, item.num_samples))
    if bad:
        raise AggregationAbort(node.node_id, bad)
    gm = fedavg(mem)
    if node.corrupt:
        gm = node.corrupt(gm)
    acc = evaluate(gm, node.test_x, node.test_y)
    record_aggregation_result(pgm, format_accuracy(acc), model_hash(gm), template.ledger)
    if node.tamper_after_record:
        gm = node.tamper_after_record(gm)
    return gm, pgm


def bam_validate(results: list[tuple[ModelParams, AggregationPolicy]]) -> list[tuple[ModelParams, AggregationPolicy]]:
    kept = [(gm, pgm) for gm, pgm in results
            if pgm.state == PolicyState.RECORDED and model_hash(gm) == pgm.global_model_hash]
    if not kept:
        raise RoundFailure("consensus", "no aggregation result matches its policy")
    return kept


# -- storage consensus -------------------------------------------------------------

Proposer = Callable[[list[tuple[ModelParams, AggregationPolicy]]], "ModelDigest | None"]


def honest_proposal(results) -> ModelDigest | None:
    """Digest an honest storage node proposes.

    Results whose model does not hash to the policy's recorded value are
    ignored. If every remaining digest agrees that one is proposed; otherwise
    the most frequent one, ties going to the lexicographically smallest digest.
    """
    digests = [model_hash(gm) for gm, pgm in results
               if pgm.state == PolicyState.RECORDED and model_hash(gm) == pgm.global_model_hash]
    if not digests:
        return None
    if len(set(digests)) == 1:
        return digests[0]
    counts = Counter(digests)
    best = max(counts.values())
    return min(d for d, c in counts.items() if c == best)


@dataclass(frozen=True)
class ConsensusOutcome:
    model: ModelParams
    policy: AggregationPolicy
    digest: ModelDigest
    votes: dict[str, int]


def bdm_consensus(results, b_db_nodes: int, byzantine: dict[int, Proposer] | None = None) -> ConsensusOutcome:
    """Every storage node proposes a digest; a strict majority commits it."""
    if not results:
        raise ConsensusFailure("no results to agree on")
    if b_db_nodes < 1 or b_db_nodes % 2 == 0:
        raise ValueError("b_db_nodes must be odd and >= 1")
    byzantine = byzantine or {}
    proposals = [(byzantine[i] if i in byzantine else honest_proposal)(results) for i in range(b_db_nodes)]
    votes = Counter(p for p in proposals if p is not None)
    winner = next((d for d, c in votes.items() if c > b_db_nodes // 2), None)
    tally = {d.hex(): c for d, c in sorted(votes.items())}
    if winner is None:
        raise ConsensusFailure(f"no strict majority among {b_db_nodes} storage nodes: {tally}")
    for gm, pgm in results:
        if pgm.global_model_hash == winner and model_hash(gm) == winner and pgm.state == PolicyState.RECORDED:
            return ConsensusOutcome(gm, pgm, winner, tally)
    raise ConsensusFailure(f"majority digest {winner.hex()[:16]} has no matching result")


# -- distribution -------------------------------------------------------------------

def distribute_global(chain: Chain, pgm: AggregationPolicy, requesting_client_id: int) -> ModelParams:
    if requesting_client_id not in pgm.participant_num:
        raise AccessDenied(f"client {requesting_client_id} did not take part in round {pgm.fed_round}")
    block = chain.find(pgm.global_model_id, pgm.fed_round)
    if block is None:
        raise IntegrityError(f"no stored block for global model {pgm.global_model_id} round {pgm.fed_round}")
    try:
        model = canonical_deserialize(block.model_bytes)
    except CanonError as exc:
        raise IntegrityError(f"stored model undecodable: {exc}") from exc
    if model_hash(model) != pgm.global_model_hash:
        raise IntegrityError(f"stored model for round {pgm.fed_round} does not match the policy hash")
    return model


def receive_global(client: Client, envelope: CipherEnvelope, expected_hash: ModelDigest | None) -> ModelParams:
    try:
        model = decrypt_model(envelope, client.key)
    except AuthenticationError as exc:
        raise GlobalModelRejected(client.client_id, "transport-tamper") from exc
    except CanonError as exc:
        raise GlobalModelRejected(client.client_id, "malformed-model") from exc
    if expected_hash is not None and model_hash(model) != expected_hash:
        raise GlobalModelRejected(client.client_id, "hash-mismatch")
    return model


# -- orchestration ------------------------------------------------------------------

@dataclass
class RoundState:
    round: int
    participants: list[int]
    global_model: ModelParams
    b_agg_nodes: int = 3
    b_db_nodes: int = 3

    def __post_init__(self):
        if self.b_agg_nodes < 1:
            raise ValueError("b_agg_nodes must be >= 1")
        if self.b_db_nodes < 1 or self.b_db_nodes % 2 == 0:
            raise ValueError("b_db_nodes must be odd and >= 1")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    phase: str
    wall_ms: float
    accuracy: float | None = None
    gas_total: int | None = None


@dataclass
class RoundReport:
    round: int
    committed: bool
    digest: str | None = None
    accuracy: float | None = None
    rejected: list[Rejection] = field(default_factory=list)
    aborted_clients: list[int] = field(default_factory=list)
    aborted_nodes: list[AggregationAbort] = field(default_factory=list)
    dropped_results: int = 0
    votes: dict[str, int] = field(default_factory=dict)
    distribution_failures: list[GlobalModelRejected] = field(default_factory=list)
    failure: RoundFailure | None = None


@dataclass
class FederationSettings:
    train: TrainingConfig
    epochs: int
    policy_enabled: bool = True
    on_reject: str = "exclude"  # or "abort"
    deterministic: bool = True
    workers: int = 4

    def __post_init__(self):
        if self.on_reject not in ("exclude", "abort"):
            raise ValueError("on_reject must be 'exclude' or 'abort'")


class Federation:
    """Owns every actor of a simulated deployment and runs rounds over it."""

    def __init__(self, clients: list[Client], holdout: tuple[np.ndarray, np.ndarray],
                 settings: FederationSettings, keystore: KeyStore, ledger: GasLedger | None = None,
                 chain: Chain | None = None, audit: AuditLog | None = None, network: SimNetwork | None = None):
        self.clients = {c.client_id: c for c in clients}
        self.holdout = holdout
        self.settings = settings
        self.keystore = keystore
        self.ledger = ledger if ledger is not None else GasLedger()
        self.chain = chain if chain is not None else Chain()
        self.audit = audit if audit is not None else AuditLog()
        self.network = network if network is not None else SimNetwork()
        self.metrics: list[MetricsRecord] = []
        self.reports: list[RoundReport] = []
        self.agg_hooks: dict[int, dict[str, ModelHook]] = {}
        self.db_byzantine: dict[int, Proposer] = {}
        self.pcs_nonces = {cid: NonceCounter(PCS_NONCE_BASE) for cid in self.clients}
        self.received: dict[int, ModelParams] = {}
        self.last_policy: AggregationPolicy | None = None

    # phase helpers -------------------------------------------------------------

    def _map(self, fn, items):
        if self.settings.deterministic or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.settings.workers) as pool:
            return list(pool.map(fn, items))

    def _train(self, state: RoundState, report: RoundReport) -> list[ClientSubmission]:
        s = self.settings
        template = PolicyTemplate(state.global_model.arch, state.round, s.epochs,
                                  self.ledger, s.policy_enabled)

        def work(cid):
            try:
                return client_round(self.clients[cid], state.global_model, template, s.train)
            except ClientAbort as exc:
                return exc

        subs = []
        for cid, res in zip(state.participants, self._map(work, sorted(state.participants))):
            if isinstance(res, ClientAbort):
                report.aborted_clients.append(cid)
                self.audit.log(state.round, "train", f"client-{cid}", "aborted", reason=res.reason)
                continue
            self.network.send(Message(f"client-{cid}", PCS, "submission", res.envelope.to_bytes(), str(cid)))
            digest = res.policy.local_model_hash.hex() if res.policy else None
            self.audit.log(state.round, "train", f"client-{cid}", "submitted", digest)
            subs.append(res)
        if not subs:
            raise RoundFailure("train", "every client aborted")
        return subs

    def _collect(self, subs: list[ClientSubmission]) -> list[ClientSubmission]:
        by_id = {s.client_id: s for s in subs}
        out = []
        for msg in self.network.receive(PCS, "submission"):
            cid = int(msg.tag)
            try:
                env = CipherEnvelope.from_bytes(msg.payload)
            except CanonError:
                env = CipherEnvelope(bytes(12), b"", bytes(16), cid)
            out.append(replace(by_id[cid], envelope=env))
        return out

    def _verify(self, state: RoundState, subs, report: RoundReport) -> VerifiedSet:
        arch = state.global_model.arch
        expected = Expected(arch, state.round, self.settings.epochs)
        arrived = self._collect(subs)
        missing = sorted(set(s.client_id for s in subs) - set(s.client_id for s in arrived))
        verified = pcs_verify(arrived, expected, self.keystore, self.ledger, self.settings.policy_enabled)
        verified.rejected.extend(Rejection(cid, ("not-delivered",)) for cid in missing)
        for rej in verified.rejected:
            self.audit.log(state.round, "verify", PCS, "rejected", client=rej.client_id, reasons=list(rej.reasons))
        for acc in verified.accepted:
            self.audit.log(state.round, "verify", PCS, "accepted", model_hash(acc.model).hex()
                           if self.settings.policy_enabled else None, client=acc.client_id)
        report.rejected = list(verified.rejected)
        if verified.rejected and self.settings.on_reject == "abort":
            raise RoundFailure("verify", f"clients rejected: {[r.client_id for r in verified.rejected]}")
        if not verified.accepted:
            raise RoundFailure("verify", "no client passed verification")
        if verified.rejected:
            self.audit.log(state.round, "verify", PCS, "exclude-and-continue",
                           excluded=[r.client_id for r in verified.rejected])
        return verified

    def _dispatch(self, state: RoundState, verified: VerifiedSet, node_id: int) -> list[VerifiedSubmission]:
        """Send the accepted local models from the manager to one aggregation node."""
        dst = f"agg-{node_id}"
        for v in verified.accepted:
            self.network.send(Message(BAM, dst, "local-model", canonical_serialize(v.model), str(v.client_id)))
        arrived = {}
        for msg in self.network.receive(dst, "local-model"):
            try:
                arrived[int(msg.tag)] = canonical_deserialize(msg.payload)
            except CanonError:
                arrived[int(msg.tag)] = None
        # a model lost or mangled in transit reaches the node as None
        return [replace(v, model=arrived.get(v.client_id)) for v in verified.accepted]

    def _aggregate_plain(self, state: RoundState, verified: VerifiedSet, report: RoundReport) -> ModelParams:
        gm = fedavg([(v.model, v.num_samples) for v in verified.accepted])
        acc = evaluate(gm, *self.holdout)
        report.accuracy = float(format_accuracy(acc)) / 100.0
        self.audit.log(state.round, "aggregate", "aggregator", "aggregated", accuracy=format_accuracy(acc))
        return gm

    def _aggregate(self, state: RoundState, verified: VerifiedSet, report: RoundReport):
        participants = tuple(verified.accepted_ids)
        template = PgmTemplate(state.round, state.round, participants, self.ledger)
        node_inputs = {n: self._dispatch(state, verified, n) for n in range(state.b_agg_nodes)}

        def work(n):
            hooks = self.agg_hooks.get(n, {})
            node = AggregationNode(n, *self.holdout, corrupt=hooks.get("corrupt"),
                                   tamper_after_record=hooks.get("tamper_after_record"))
            try:
                return aggregation_node_run(node, node_inputs[n], template)
            except AggregationAbort as exc:
                return exc

        results = []
        for n, res in zip(range(state.b_agg_nodes), self._map(work, list(range(state.b_agg_nodes)))):
            if isinstance(res, AggregationAbort):
                report.aborted_nodes.append(res)
                self.audit.log(state.round, "aggregate", f"agg-{n}", "aborted", invalid_clients=res.client_ids)
                continue
            gm, pgm = res
            self.audit.log(state.round, "aggregate", f"agg-{n}", "recorded", pgm.global_model_hash.hex(),
                           accuracy=pgm.global_model_acc)
            results.append((gm, pgm))
        if not results:
            raise RoundFailure("aggregate", "every aggregation node aborted")
        return results

    def _consensus(self, state: RoundState, results, report: RoundReport) -> ConsensusOutcome:
        try:
            kept = bam_validate(results)
        except RoundFailure:
            self.audit.log(state.round, "consensus", BAM, "all-invalid")
            raise
        report.dropped_results = len(results) - len(kept)
        if report.dropped_results:
            self.audit.log(state.round, "consensus", BAM, "dropped", dropped=report.dropped_results)
        try:
            outcome = bdm_consensus(kept, state.b_db_nodes, self.db_byzantine)
        except ConsensusFailure as exc:
            self.audit.log(state.round, "consensus", "bdm", "no-consensus", reason=str(exc))
            raise RoundFailure("consensus", str(exc)) from exc
        report.votes = outcome.votes
        self.audit.log(state.round, "consensus", "bdm", "agreed", outcome.digest.hex(), votes=outcome.votes)
        return outcome

    def _distribute(self, state: RoundState, gm: ModelParams, pgm: AggregationPolicy | None,
                    report: RoundReport) -> None:
        expected = pgm.global_model_hash if pgm is not None else None
        for cid in sorted(pgm.participant_num if pgm is not None else state.participants):
            model = distribute_global(self.chain, pgm, cid) if pgm is not None else gm
            env = encrypt_model(model, self.keystore.key_for(cid), cid, self.pcs_nonces[cid])
            self.network.send(Message(PCS, f"client-{cid}", "global-model", env.to_bytes(), str(cid)))
        self.received = {}
        for cid in sorted(self.clients):
            for msg in self.network.receive(f"client-{cid}", "global-model"):
                try:
                    env = CipherEnvelope.from_bytes(msg.payload)
                    self.received[cid] = receive_global(self.clients[cid], env, expected)
                    self.audit.log(state.round, "distribute", f"client-{cid}", "received",
                                   expected.hex() if expected else None)
                except CanonError:
                    exc = GlobalModelRejected(cid, "malformed-envelope")
                    report.distribution_failures.append(exc)
                    self.audit.log(state.round, "distribute", f"client-{cid}", "rejected", reason=exc.reason)
                except GlobalModelRejected as exc:
                    report.distribution_failures.append(exc)
                    self.audit.log(state.round, "distribute", f"client-{cid}", "rejected", reason=exc.reason)

    def request_global(self, client_id: int, pgm: AggregationPolicy | None = None) -> ModelParams:
        """Access-controlled read of a stored global model (audit-logged)."""
        pgm = pgm or self.last_policy
        try:
            model = distribute_global(self.chain, pgm, client_id)
        except (AccessDenied, IntegrityError) as exc:
            verdict = "access-denied" if isinstance(exc, AccessDenied) else "integrity-error"
            self.audit.log(pgm.fed_round, "distribute", PCS, verdict, client=client_id)
            raise
        self.audit.log(pgm.fed_round, "distribute", PCS, "served", pgm.global_model_hash.hex(), client=client_id)
        return model

    # ------------------------------------------------------------------------

    def run_round(self, state: RoundState) -> RoundState:
        report = RoundReport(state.round, committed=False)
        self.reports.append(report)
        timings: dict[str, float] = {}
        enabled = self.settings.policy_enabled
        phase = "train"

        def timed(name, fn, *args):
            nonlocal phase
            phase = name
            t0 = time.perf_counter()
            try:
                return fn(*args)
            finally:
                timings[name] = (time.perf_counter() - t0) * 1000.0

        try:
            subs = timed("train", self._train, state, report)
            verified = timed("verify", self._verify, state, subs, report)
            if enabled:
                results = timed("aggregate", self._aggregate, state, verified, report)
                outcome = timed("consensus", self._consensus, state, results, report)
                gm, pgm = outcome.model, outcome.policy

                def store():
                    finalize_aggregation_policy(pgm, self.ledger)
                    append_block(self.chain, gm, pgm)
                    self.audit.log(state.round, "store", "bdm", "appended", outcome.digest.hex(),
                                   block=len(self.chain) - 1)

                timed("store", store)
                report.accuracy = float(pgm.global_model_acc) / 100.0
                report.digest = outcome.digest.hex()
                self.last_policy = pgm
            else:
                gm = timed("aggregate", self._aggregate_plain, state, verified, report)
                pgm = None
                timed("consensus", lambda: None)
                timed("store", lambda: None)
                report.digest = model_hash(gm).hex()
            timed("distribute", self._distribute, state, gm, pgm, report)
        except RoundFailure as exc:
            report.failure = exc
            self.audit.log(state.round, exc.phase, "federation", "round-failed", reason=exc.reason)
            raise
        except Exception as exc:
            failure = RoundFailure(phase, f"{type(exc).__name__}: {exc}")
            report.failure = failure
            self.audit.log(state.round, phase, "federation", "round-failed", reason=failure.reason)
            raise failure from exc
        report.committed = True
        gas = self.ledger.total if enabled else None
        for name in PHASES:
            self.metrics.append(MetricsRecord(
                state.round, name, timings.get(name, 0.0),
                accuracy=report.accuracy if name == "aggregate" else None,
                gas_total=gas if name == "store" else None,
            ))
        # clients that could not obtain a verified global model sit out the next round
        nxt = [cid for cid in verified.accepted_ids if cid in self.received] or verified.accepted_ids
        return RoundState(state.round + 1, nxt, gm, state.b_agg_nodes, state.b_db_nodes)


def run_round(state: RoundState, federation: Federation) -> RoundState:
    return federation.run_round(state)
