"""End-to-end federated runs driven by a JSON configuration."""
import json
import logging
import os
import subprocess
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .aggregator import GlobalState, plan_round, run_round
from .client import ClientConfig, ClientRuntime
from .datasets import (generate_blobs, load_csv, partition_dirichlet, partition_iid,
                       train_test_split)
from .errors import ConfigError, DescriptorError
from .metrics import (MetricsRecord, SelectionHistogram, evaluate, metrics_csv,
                      summary_json)
from .nn import Network
from .registry import ArchitectureDescriptor, count_parameters, save_model, serialize_model
from .transport import LoopbackHub, TcpHub, TrafficLedger, connect_client

log = logging.getLogger(__name__)

DEFAULT_DATASET = {"kind": "blobs", "classes": 4, "dims": 20, "samples": 20000,
                   "class_sep": 1.0, "std": 1.0}


@dataclass
class RunConfig:
    architecture: str = "toy_mlp"
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    test_fraction: float = 0.2
    n_clients: int = 10
    client_fraction: float = 1.0
    rounds: int = 100
    layers: int | None = None
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    smoothing: bool = False
    partitioning: str = "iid"
    seed: int = 0
    model_seed: int = 0
    data_seed: int = 0
    output_dir: str = "runs/default"
    transport: str = "loopback"
    spawn_clients: bool = True
    quorum: int | None = None
    round_timeout: float = 300.0
    checkpoint_every: int = 0

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**doc)
        if base_dir is not None:
            cfg._rebase(Path(base_dir))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def _rebase(self, base: Path):
        """Resolve relative file references against the config's directory."""
        arch = Path(self.architecture)
        if arch.suffix == ".json" and not arch.is_absolute() and (base / arch).exists():
            self.architecture = str(base / arch)
        csv_path = self.dataset.get("path")
        if csv_path and not Path(csv_path).is_absolute() and (base / csv_path).exists():
            self.dataset = {**self.dataset, "path": str(base / csv_path)}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prepared:
    arch: ArchitectureDescriptor
    train: object
    test: object
    partitions: list
    layer_budget: int
    n_units: int


def partition_scheme(spec: str):
    if spec == "iid":
        return "iid", None
    if spec.startswith("dirichlet:"):
        try:
            alpha = float(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad dirichlet alpha in {spec!r}") from None
        if alpha <= 0:
            raise ConfigError("dirichlet alpha must be positive")
        return "dirichlet", alpha
    raise ConfigError(f"partitioning must be 'iid' or 'dirichlet:<alpha>', got {spec!r}")


def prepare(cfg: RunConfig) -> Prepared:
    """Validate ``cfg`` and build the architecture, splits and client partitions."""
    try:
        arch = ArchitectureDescriptor.load(cfg.architecture)
    except DescriptorError as exc:
        raise ConfigError(f"architecture: {exc}") from None
    n_units = count_parameters(arch).trainable_units
    if n_units == 0:
        raise ConfigError("architecture has no trainable units")
    budget = n_units if cfg.layers is None else int(cfg.layers)
    if not 1 <= budget <= n_units:
        raise ConfigError(f"layers={cfg.layers} must be in [1, {n_units}] for {arch.name}")
    if cfg.rounds < 1:
        raise ConfigError("rounds must be at least 1")
    if cfg.n_clients < 1:
        raise ConfigError("n_clients must be at least 1")
    if not 0 < cfg.client_fraction <= 1:
        raise ConfigError("client_fraction must be in (0, 1]")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be at least 1")
    if cfg.learning_rate < 0:
        raise ConfigError("learning_rate must be non-negative")
    if cfg.optimizer.lower() not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    if not (cfg.transport == "loopback" or cfg.transport.startswith("tcp:")):
        raise ConfigError("transport must be 'loopback' or 'tcp:<host>:<port>'")
    scheme, alpha = partition_scheme(cfg.partitioning)

    spec = dict(cfg.dataset)
    kind = spec.pop("kind", "blobs")
    try:
        if kind == "blobs":
            ds = generate_blobs(int(spec.get("classes", 4)), int(spec.get("dims", 20)),
                                int(spec.get("samples", 20000)), seed=int(spec.get("seed", cfg.data_seed)),
                                class_sep=float(spec.get("class_sep", 1.0)),
                                std=float(spec.get("std", 1.0)))
        elif kind == "csv":
            path = spec.get("path")
            if not path or not Path(path).is_file():
                raise ConfigError(f"dataset CSV {path!r} does not exist")
            ds = load_csv(path, spec.get("classes"))
        else:
            raise ConfigError(f"unknown dataset kind {kind!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"dataset: {exc}") from None
    if ds.features.shape[1:] != arch.input_shape:
        raise ConfigError(f"dataset features {ds.features.shape[1:]} do not match "
                          f"architecture input {arch.input_shape}")
    if ds.n_classes > arch.output_shape[0]:
        raise ConfigError(f"dataset has {ds.n_classes} classes, model outputs {arch.output_shape[0]}")
    try:
        train, test = train_test_split(ds, cfg.test_fraction, seed=cfg.data_seed)
        if scheme == "iid":
            parts = partition_iid(train, cfg.n_clients, seed=cfg.data_seed)
        else:
            parts = partition_dirichlet(train, cfg.n_clients, alpha, seed=cfg.data_seed)
    except ValueError as exc:
        raise ConfigError(f"partitioning: {exc}") from None
    if len(test) == 0:
        test = train
    return Prepared(arch, train, test, parts, budget, n_units)


def make_runtime(cfg: RunConfig, prep: Prepared, client_id: int) -> ClientRuntime:
    ccfg = ClientConfig(
        client_id=client_id,
        partition=prep.partitions[client_id],
        layer_budget=prep.layer_budget,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        seed=cfg.seed,
    )
    return ClientRuntime(prep.arch, ccfg)


@dataclass
class ExperimentResult:
    records: list
    final_state: GlobalState
    history: list
    ledger: TrafficLedger
    histogram: SelectionHistogram
    output_dir: Path | None


def model_crc(state) -> int:
    """CRC32 of the serialized model (the file's own trailer)."""
    # hashing the whole file would always give the CRC residue constant
    blob = serialize_model(state)
    return zlib.crc32(blob[:-4])


def run_experiment(cfg: RunConfig, write=True, keep_history=False) -> ExperimentResult:
    """Execute ``cfg.rounds`` rounds and write the run artifacts.

    On the loopback backend every artifact except wall times in the summary
    is a deterministic function of the config.
    """
    prep = prepare(cfg)
    out = Path(cfg.output_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    evaluator = Network(prep.arch, seed=cfg.model_seed)
    state = GlobalState(evaluator.state())

    def score(model_state):
        evaluator.load_state(model_state)
        return evaluate(evaluator, prep.test.features, prep.test.labels)

    acc0, loss0 = score(state.model)
    records = [MetricsRecord(round=0, accuracy=acc0, loss=loss0,
                             selection_counts=[0] * prep.n_units)]
    history = [state.model.copy()] if keep_history else []
    crcs = [model_crc(state.model)]
    hist = SelectionHistogram(cfg.n_clients, prep.n_units, prep.layer_budget)
    ledger = TrafficLedger()

    hub, procs = _open_hub(cfg, prep, ledger, out)
    try:
        for t in range(1, cfg.rounds + 1):
            plan = plan_round(t, cfg.n_clients, cfg.client_fraction, prep.layer_budget,
                              cfg.rounds, seed=cfg.seed)
            state, rec = run_round(plan, state, hub, smoothing=cfg.smoothing, quorum=cfg.quorum,
                                   timeout=cfg.round_timeout, evaluate=score)
            for k in rec.clients:
                hist.record(k, rec.client_layers[k])
            records.append(rec)
            crcs.append(model_crc(state.model))
            if keep_history:
                history.append(state.model.copy())
            if out is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                (out / "checkpoints").mkdir(exist_ok=True)
                save_model(state.model, out / "checkpoints" / f"round_{t:04d}.ffrz")
            log.info("round %d/%d accuracy %.2f%% loss %.4f uplink %d B",
                     t, cfg.rounds, rec.accuracy, rec.loss, rec.uplink_bytes)
    finally:
        hub.shutdown()
        for p in procs:
            try:
                p.wait(timeout=30)
            except subprocess.TimeoutExpired:
                p.kill()

    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(records, prep.n_units))
        (out / "selection_histogram.csv").write_text(hist.to_csv())
        (out / "traffic.csv").write_text(ledger.to_csv())
        save_model(state.model, out / "final_model.ffrz")
        pc = count_parameters(prep.arch)
        extra = {
            "architecture": {"name": prep.arch.name, "total_params": pc.total,
                             "trainable_units": pc.trainable_units, "unit_params": pc.unit_params},
            "layer_budget": prep.layer_budget,
            "seeds": {"seed": cfg.seed, "model_seed": cfg.model_seed, "data_seed": cfg.data_seed},
            "client_samples": [p.sample_count for p in prep.partitions],
            "model_crc32": crcs,
        }
        (out / "summary.json").write_text(summary_json(cfg.to_dict(), records, extra))
    return ExperimentResult(records, state, history, ledger, hist, out)


def _open_hub(cfg, prep, ledger, out):
    if cfg.transport == "loopback":
        runtimes = {k: make_runtime(cfg, prep, k) for k in range(cfg.n_clients)}
        return LoopbackHub(runtimes, ledger), []
    host, _, port = cfg.transport[len("tcp:"):].rpartition(":")
    hub = TcpHub(host or "127.0.0.1", int(port or 0), ledger)
    procs = []
    if cfg.spawn_clients:
        cfg_path = _client_config_path(cfg, out)
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parents[1])
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        for k in range(cfg.n_clients):
            procs.append(subprocess.Popen(
                [sys.executable, "-m", "fedfreeze", "client", "--connect", hub.address,
                 "--config", str(cfg_path), "--client-id", str(k)],
                env=env, stdout=subprocess.DEVNULL))
    hub.accept(cfg.n_clients, timeout=cfg.round_timeout)
    return hub, procs


def _client_config_path(cfg, out):
    if out is None:
        import tempfile
        out = Path(tempfile.mkdtemp(prefix="fedfreeze-"))
    path = Path(out) / "client_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path


def run_client(addr: str, cfg: RunConfig, client_id=None) -> None:
    """Entry point of a TCP client process."""
    prep = prepare(cfg)
    connect_client(addr, lambda k: make_runtime(cfg, prep, k), client_id=client_id,
                   retry_for=cfg.round_timeout)
