"""Experiment configuration, runner, metrics files and run comparison.

Output directory layout written by ``run_experiment``::

    metrics.csv     one row per (round, phase)
    chain.bin       length-prefixed blocks (empty file when policies are off)
    audit.jsonl     audit events
    summary.json    config, per-round accuracy and digests, gas, failures
    scenarios.jsonl scenario report (only when an attack is configured)
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adversary import AttackKind, AttackStrategy, assess, install
from .canon import KeyStore, derive_key, model_hash
from .chain import Chain
from .data import load_mnist, synthetic_blobs
from .model import (
    ArchKind,
    ArchitectureSpec,
    ModelParams,
    TrainingConfig,
    init_model,
    make_rng,
    partition_dataset,
)
from .network import AuditLog
from .nodes import PHASES, Client, Federation, FederationSettings, MetricsRecord, RoundFailure, RoundState
from .policy import GasLedger

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 5
    rounds: int = 3
    epochs: int = 1
    arch_id: int = 0
    hidden: int = 32
    filters: int = 4
    dataset: str = "synthetic"
    policy_enabled: bool = True
    b_agg_nodes: int = 3
    b_db_nodes: int = 3
    seed_data: int = 0
    seed_init: int = 0
    seed_shuffle: int = 0
    deterministic: bool = True
    learning_rate: float = 0.1
    batch_size: int = 32
    on_reject: str = "exclude"
    # synthetic data shape
    samples_per_client: int = 200
    test_per_client: int = 50
    holdout_size: int = 500
    n_features: int = 16
    n_classes: int = 4
    separation: float = 0.8
    mnist_dir: str | None = None
    attack: AttackStrategy | None = None

    def validate(self) -> "ExperimentConfig":
        for name in ("n_clients", "rounds", "epochs", "b_agg_nodes", "b_db_nodes", "batch_size",
                     "samples_per_client", "test_per_client", "holdout_size", "n_features", "n_classes",
                     "hidden", "filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.b_db_nodes % 2 == 0:
            raise ConfigError("b_db_nodes must be odd so a strict majority exists")
        if self.dataset not in ("synthetic", "mnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.arch_id not in (0, 1, 2):
            raise ConfigError(f"unknown arch_id {self.arch_id}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.on_reject not in ("exclude", "abort"):
            raise ConfigError("on_reject must be 'exclude' or 'abort'")
        if self.arch_id == 2 and self.dataset == "synthetic":
            side = int(round(self.n_features ** 0.5))
            if side * side != self.n_features or side < 4:
                raise ConfigError("CNN on synthetic data needs n_features to be a square >= 16")
        if self.attack is not None and not 1 <= self.attack.target <= self.n_clients:
            if self.attack.kind != AttackKind.FAKE_PARTICIPANT_REQUEST:
                raise ConfigError(f"attack target {self.attack.target} is not a client id")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.attack is not None:
            d["attack"] = {**d["attack"], "kind": self.attack.kind.value}
        return d

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parse flat ``key = value`` lines (``#`` comments allowed)."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            parser.read_string("[experiment]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        raw = dict(parser["experiment"])
        attack_fields = {k: raw.pop(k) for k in list(raw) if k.startswith("attack")}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value, types[key])
        if attack_fields.get("attack"):
            try:
                kwargs["attack"] = AttackStrategy(
                    AttackKind(attack_fields["attack"]),
                    int(attack_fields.get("attack_target", 1)),
                    float(attack_fields.get("attack_magnitude", 1.0)),
                    int(attack_fields.get("attack_seed", 0)),
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


def _coerce(key, value: str, typ):
    typ = str(typ)
    try:
        if typ.startswith("bool"):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ.startswith("int"):
            return int(value)
        if typ.startswith("float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def architecture_for(cfg: ExperimentConfig, n_features: int, n_classes: int) -> ArchitectureSpec:
    if cfg.arch_id == ArchKind.LINEAR:
        return ArchitectureSpec(ArchKind.LINEAR, (n_features, n_classes))
    if cfg.arch_id == ArchKind.MLP:
        return ArchitectureSpec(ArchKind.MLP, (n_features, cfg.hidden, n_classes))
    side = int(round(n_features ** 0.5))
    return ArchitectureSpec(ArchKind.CNN, (side, side, cfg.filters, n_classes))


def _load_data(cfg: ExperimentConfig):
    """Return train pool, client-test pool and the global held-out split."""
    if cfg.dataset == "mnist":
        tx, ty, vx, vy = load_mnist(cfg.mnist_dir)
        return (tx, ty), (vx, vy), (vx, vy), 10
    n_train = cfg.n_clients * cfg.samples_per_client
    n_test = cfg.n_clients * cfg.test_per_client
    x, y = synthetic_blobs(n_train + n_test + cfg.holdout_size, cfg.n_features, cfg.n_classes, cfg.seed_data,
                           separation=cfg.separation)
    return ((x[:n_train], y[:n_train]), (x[n_train:n_train + n_test], y[n_train:n_train + n_test]),
            (x[n_train + n_test:], y[n_train + n_test:]), cfg.n_classes)


def build_federation(cfg: ExperimentConfig) -> tuple[Federation, RoundState]:
    cfg.validate()
    train, client_test, holdout, n_classes = _load_data(cfg)
    arch = architecture_for(cfg, train[0].shape[1], n_classes)
    shards = partition_dataset(*train, cfg.n_clients, cfg.seed_data)
    tests = partition_dataset(*client_test, cfg.n_clients, cfg.seed_data + 1)
    keystore = KeyStore()
    clients = []
    for i, (shard, test) in enumerate(zip(shards, tests)):
        cid = i + 1
        key = keystore.register(cid, derive_key(cfg.seed_init, cid) if cfg.deterministic else None)
        clients.append(Client(cid, shard, test.features, test.labels, key))
    settings = FederationSettings(
        train=TrainingConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.seed_shuffle),
        epochs=cfg.epochs, policy_enabled=cfg.policy_enabled, on_reject=cfg.on_reject,
        deterministic=cfg.deterministic,
    )
    fed = Federation(clients, holdout, settings, keystore, GasLedger(), Chain(), AuditLog())
    if cfg.attack is not None:
        install(fed, cfg.attack)
    state = RoundState(1, sorted(fed.clients), init_model(arch, cfg.seed_init), cfg.b_agg_nodes, cfg.b_db_nodes)
    return fed, state


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[MetricsRecord]
    federation: Federation
    final_model: ModelParams
    failures: list[RoundFailure] = field(default_factory=list)
    scenario: object = None

    @property
    def chain(self) -> Chain:
        return self.federation.chain

    @property
    def audit(self) -> AuditLog:
        return self.federation.audit

    @property
    def accuracies(self) -> list[float | None]:
        return [r.accuracy for r in self.federation.reports]

    @property
    def final_digest(self) -> str:
        return model_hash(self.final_model).hex()


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    fed, state = build_federation(cfg)
    failures = []
    for _ in range(cfg.rounds):
        try:
            state = fed.run_round(state)
        except RoundFailure as exc:
            log.warning("round %d failed: %s", state.round, exc)
            failures.append(exc)
            state = replace(state, round=state.round + 1)
    result = ExperimentResult(cfg, fed.metrics, fed, state.global_model, failures)
    if cfg.attack is not None:
        result.scenario = assess(fed, cfg.attack, cfg.rounds - len(failures))
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


METRIC_FIELDS = ("round", "phase", "wall_ms", "accuracy", "gas_total")


def write_metrics(metrics: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([m.round, m.phase, f"{m.wall_ms:.4f}",
                        "" if m.accuracy is None else f"{m.accuracy:.4f}",
                        "" if m.gas_total is None else m.gas_total])


def load_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        return [MetricsRecord(int(r["round"]), r["phase"], float(r["wall_ms"]),
                              float(r["accuracy"]) if r["accuracy"] else None,
                              int(r["gas_total"]) if r["gas_total"] else None)
                for r in csv.DictReader(fh)]


def write_outputs(result: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(result.metrics, out / "metrics.csv")
    result.chain.save(out / "chain.bin")
    result.audit.write(out / "audit.jsonl")
    fed = result.federation
    summary = {
        "config": result.config.to_dict(),
        "final_digest": result.final_digest,
        "rounds": [{"round": r.round, "committed": r.committed, "digest": r.digest, "accuracy": r.accuracy,
                    "rejected": {str(x.client_id): list(x.reasons) for x in r.rejected},
                    "failure": str(r.failure) if r.failure else None}
                   for r in fed.reports],
        "gas_total": fed.ledger.total,
        "chain_length": len(result.chain),
        "failures": [str(f) for f in result.failures],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if result.scenario is not None:
        (out / "scenarios.jsonl").write_text(result.scenario.to_json() + "\n")


@dataclass(frozen=True)
class ComparisonRow:
    round: int
    phase: str
    a_ms: float
    b_ms: float
    delta_ms: float
    ratio: float | None
    overhead: bool


def compare_runs(metrics_a: list[MetricsRecord], metrics_b: list[MetricsRecord]) -> list[ComparisonRow]:
    """Per (round, phase) deltas ``b - a``; ``overhead`` marks phases where b is slower."""
    a = {(m.round, m.phase): m for m in metrics_a}
    b = {(m.round, m.phase): m for m in metrics_b}
    if a.keys() != b.keys() or len(a) != len(metrics_a) or len(b) != len(metrics_b):
        raise ValueError("metrics cover different (round, phase) sets")
    rows = []
    for key in sorted(a, key=lambda k: (k[0], PHASES.index(k[1]) if k[1] in PHASES else len(PHASES))):
        x, y = a[key].wall_ms, b[key].wall_ms
        rows.append(ComparisonRow(key[0], key[1], x, y, y - x, y / x if x > 0 else None, y > x))
    return rows


def phase_means(metrics: list[MetricsRecord]) -> dict[str, float]:
    out = {}
    for phase in PHASES:
        vals = [m.wall_ms for m in metrics if m.phase == phase]
        if vals:
            out[phase] = float(np.mean(vals))
    return out


def timing_sweep(base: ExperimentConfig, client_counts=(2, 5, 10, 15, 20), repeats: int = 3,
                 policy_modes=(True, False)) -> dict[bool, dict[int, dict[str, float]]]:
    """Per-round phase wall time (ms): the minimum over every round of ``repeats`` runs.

    Every client holds ``base.samples_per_client`` samples, so total work grows
    with the client count as it does when real participants join. Modes and
    client counts are interleaved within each repeat so slow drift in machine
    load hits all of them alike.
    """
    out: dict[bool, dict[int, dict[str, float]]] = {en: {n: {} for n in client_counts} for en in policy_modes}
    for _ in range(repeats):
        for n in client_counts:
            for enabled in policy_modes:
                res = run_experiment(replace(base, n_clients=n, policy_enabled=enabled))
                best = out[enabled][n]
                for m in res.metrics:
                    best[m.phase] = min(m.wall_ms, best.get(m.phase, float("inf")))
    return out


def monotonicity_report(sweep: dict[int, dict[str, float]], phase: str) -> tuple[list[tuple[int, float]], bool]:
    series = [(n, sweep[n][phase]) for n in sorted(sweep)]
    ok = all(b >= a for (_, a), (_, b) in zip(series, series[1:]))
    return series, ok


def seeded_configs(base: ExperimentConfig, count: int, start: int = 0):
    """``count`` copies of ``base`` with distinct data/init/shuffle seeds."""
    rng = make_rng(base.seed_data, start)
    for i in range(count):
        s = [int(v) for v in rng.integers(0, 2**31, size=3)]
        yield i, replace(base, seed_data=s[0], seed_init=s[1], seed_shuffle=s[2])
