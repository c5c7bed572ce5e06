"""Injectable attacks and the scenarios that show where each one is caught."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .canon import model_hash
from .chain import verify_chain
from .model import ModelParams, make_rng
from .network import Fault, flip_bit
from .nodes import AccessDenied, Federation, IntegrityError, RoundFailure, RoundState


class AttackKind(str, enum.Enum):
    TAMPER_LOCAL_AFTER_HASH = "TamperLocalAfterHash"
    POISON_LOCAL_BEFORE_HASH = "PoisonLocalBeforeHash"
    TAMPER_GLOBAL_IN_TRANSIT = "TamperGlobalInTransit"
    TAMPER_BLOCK_AT_REST = "TamperBlockAtRest"
    FAKE_PARTICIPANT_REQUEST = "FakeParticipantRequest"


class TamperError(ValueError):
    pass


@dataclass(frozen=True)
class AttackStrategy:
    kind: AttackKind
    target: int = 1
    magnitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))


def tamper_model(model: ModelParams, magnitude: float, seed: int, fraction: float = 0.1) -> ModelParams:
    """Add seeded N(0, magnitude) noise to a seeded ~10% subset of the weights.

    If the noise vanishes in float32 rounding, the weights are nudged by
    +magnitude one coordinate at a time (in a seeded order) until the
    canonical bytes change; ``TamperError`` if no coordinate can be moved.
    """
    if not magnitude > 0:
        raise TamperError("magnitude must be > 0")
    rng = make_rng(seed, 0x7A3)
    n = model.param_count
    idx = rng.choice(n, size=max(1, int(round(fraction * n))), replace=False)
    w = model.weights.astype(np.float64)
    w[idx] += rng.normal(0.0, magnitude, size=idx.size)
    out = w.astype(np.float32)
    if not np.isfinite(out).all():
        raise TamperError(f"magnitude {magnitude} overflows float32")
    if out.tobytes() != model.weights.tobytes():
        return model.with_weights(out)
    base = model.weights
    for j in rng.permutation(n):
        cand = base.copy()
        cand[j] = np.float32(np.float64(base[j]) + magnitude)
        if cand.tobytes() != base.tobytes():
            return model.with_weights(cand)
    raise TamperError(f"magnitude {magnitude} too small to change any weight")


@dataclass
class ScenarioReport:
    kind: str
    detected: bool
    phase: str | None
    detail: str = ""
    residual_risk: bool = False
    committed_rounds: int = 0
    chain_ok: bool = True
    chain_bad_index: int | None = None
    detections: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


DETECTION_VERDICTS = {"rejected", "aborted", "dropped", "no-consensus", "access-denied",
                      "integrity-error", "all-invalid"}


def detections(fed: Federation) -> list[str]:
    """``phase:actor:verdict`` for every audit event that flags misbehaviour."""
    return [f"{e['phase']}:{e['actor']}:{e['verdict']}" for e in fed.audit.events
            if e["verdict"] in DETECTION_VERDICTS]


def install(fed: Federation, attack: AttackStrategy) -> None:
    """Wire the attack's hooks into a federation before its rounds run."""
    kind = attack.kind
    if kind in (AttackKind.TAMPER_LOCAL_AFTER_HASH, AttackKind.POISON_LOCAL_BEFORE_HASH):
        client = fed.clients[attack.target]
        hook = lambda m: tamper_model(m, attack.magnitude, attack.seed)  # noqa: E731
        if kind == AttackKind.TAMPER_LOCAL_AFTER_HASH:
            client.tamper_after_hash = hook
        else:
            client.poison_before_hash = hook
    elif kind == AttackKind.TAMPER_GLOBAL_IN_TRANSIT:
        bit = int(make_rng(attack.seed).integers(0, 1 << 16))
        fed.network.inject(Fault("bitflip", dst=f"client-{attack.target}", kind="global-model", bit=bit))


def tamper_block(fed: Federation, index: int, seed: int) -> int:
    """Flip one seeded bit in the model payload of a stored block; returns the bit."""
    block = fed.chain.blocks[index]
    bit = int(make_rng(seed).integers(0, 8 * len(block.model_bytes)))
    fed.chain.blocks[index] = replace(block, model_bytes=flip_bit(block.model_bytes, bit))
    return bit


def run_rounds(fed: Federation, state: RoundState, rounds: int) -> tuple[RoundState, int]:
    committed = 0
    for _ in range(rounds):
        try:
            state = fed.run_round(state)
            committed += 1
        except RoundFailure:
            state = replace(state, round=state.round + 1)
    return state, committed


def run_threat_scenario(kind: AttackKind | str | None, base_config, rounds: int = 1) -> ScenarioReport:
    """Run ``rounds`` rounds with one attack injected and say where it was caught.

    ``kind=None`` is the honest control run. ``base_config`` is an
    ``ExperimentConfig``; its ``attack`` target/magnitude/seed are reused.
    """
    from .experiments import build_federation

    fed, state = build_federation(replace(base_config, attack=None))
    if kind is None:
        state, committed = run_rounds(fed, state, rounds)
        found = detections(fed)
        verdict = verify_chain(fed.chain)
        return ScenarioReport("Honest", bool(found) or not verdict.ok, None, committed_rounds=committed,
                              chain_ok=verdict.ok, chain_bad_index=verdict.bad_index, detections=found)

    base = base_config.attack
    attack = AttackStrategy(kind, base.target if base else 1, base.magnitude if base else 1.0,
                            base.seed if base else base_config.seed_data)
    install(fed, attack)
    if attack.kind == AttackKind.TAMPER_BLOCK_AT_REST:
        rounds = max(rounds, 2)
    state, committed = run_rounds(fed, state, rounds)
    return assess(fed, attack, committed)


def assess(fed: Federation, attack: AttackStrategy, committed: int) -> ScenarioReport:
    """Inspect a federation that ran with ``attack`` installed.

    At-rest and access attacks happen here, after the rounds: a block is
    corrupted, or an outsider asks for the latest global model.
    """
    kind = attack.kind
    report = ScenarioReport(kind.value, False, None, committed_rounds=committed)

    if kind in (AttackKind.TAMPER_LOCAL_AFTER_HASH, AttackKind.POISON_LOCAL_BEFORE_HASH):
        target = attack.target
        for r in fed.reports:
            for rej in r.rejected:
                if rej.client_id == target:
                    report.detected, report.phase = True, "pcs_verify"
                    report.detail = f"client {target} rejected: {', '.join(rej.reasons)}"
            for ab in r.aborted_nodes:
                if target in ab.client_ids and not report.detected:
                    report.detected, report.phase = True, "aggregation_gate"
                    report.detail = str(ab)
        if kind == AttackKind.POISON_LOCAL_BEFORE_HASH and not report.detected:
            report.residual_risk = True
            report.detail = ("poisoned model was hashed and recorded by its own client; "
                             "every integrity check passes and the model entered aggregation")
    elif kind == AttackKind.TAMPER_GLOBAL_IN_TRANSIT:
        for r in fed.reports:
            for fail in r.distribution_failures:
                if fail.client_id == attack.target:
                    report.detected, report.phase = True, "distribute"
                    report.detail = f"client {fail.client_id}: {fail.reason}"
    elif kind == AttackKind.TAMPER_BLOCK_AT_REST:
        if len(fed.chain):
            index = attack.target % len(fed.chain)
            bit = tamper_block(fed, index, attack.seed)
            verdict = verify_chain(fed.chain)
            report.detected, report.phase = not verdict.ok, "verify_chain"
            report.chain_bad_index = verdict.bad_index
            report.detail = f"flipped model bit {bit} of block {index}: {verdict.reason}"
            pgm = fed.chain.blocks[index].policy()
            try:
                fed.request_global(pgm.participant_num[0], pgm)
                report.detail += "; read still served"
            except IntegrityError:
                report.detail += "; read refused (integrity error)"
    elif kind == AttackKind.FAKE_PARTICIPANT_REQUEST and fed.last_policy is not None:
        pgm = fed.last_policy
        outsider = attack.target if attack.target not in pgm.participant_num else max(fed.clients) + 1
        try:
            fed.request_global(outsider, pgm)
            report.detail = f"client {outsider} was served"
        except AccessDenied as exc:
            report.detected, report.phase = True, "distribute"
            report.detail = str(exc)

    verdict = verify_chain(fed.chain)
    report.chain_ok = verdict.ok
    if report.chain_bad_index is None:
        report.chain_bad_index = verdict.bad_index
    report.detections = detections(fed)
    return report


@dataclass
class ConsensusTrial:
    seed: int
    committed_digest: str | None
    honest_digest: str
    committed_honest: bool
    votes: dict


def consensus_trial(base_config, n_adversarial: int, agree: bool, seed: int) -> ConsensusTrial:
    """One round with ``n_adversarial`` aggregation nodes emitting self-consistent wrong models.

    With ``agree`` the adversaries all emit the same wrong model; otherwise each
    emits its own.
    """
    from .experiments import build_federation

    cfg = replace(base_config, attack=None)
    honest_fed, state = build_federation(cfg)
    honest_digest = model_hash(honest_fed.run_round(state).global_model).hex()

    fed, state = build_federation(cfg)
    rng = make_rng(seed, 0xC0)
    nodes = rng.permutation(cfg.b_agg_nodes)[:n_adversarial]
    for k, node in enumerate(sorted(int(n) for n in nodes)):
        s = seed if agree else seed * 1000 + k + 1
        fed.agg_hooks[node] = {"corrupt": lambda m, s=s: tamper_model(m, 0.5, s)}
    try:
        committed = model_hash(fed.run_round(state).global_model).hex()
    except RoundFailure:
        committed = None
    report = fed.reports[-1]
    return ConsensusTrial(seed, committed, honest_digest, committed == honest_digest, report.votes)
