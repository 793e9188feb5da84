"""Client-side local update with random layer-unit selection."""
from dataclasses import dataclass

import numpy as np

from .errors import MaskError, NonFiniteError, ShapeMismatchError
from .datasets import Partition
from .metrics import evaluate, one_hot
from .nn import Network, make_optimizer
from .state import ModelState

_CLIENT_STREAM = 1


def client_rng(seed: int, client_id: int, t: int) -> np.random.Generator:
    """Generator for one client's selection and shuffling in round ``t``."""
    return np.random.default_rng([seed, _CLIENT_STREAM, client_id, t])


def select_layers(n_units: int, layer_budget: int, rng: np.random.Generator) -> frozenset:
    """Uniformly random ``layer_budget``-subset of ``range(n_units)``."""
    if not 1 <= layer_budget <= n_units:
        raise MaskError(f"layer budget {layer_budget} outside [1, {n_units}]")
    return frozenset(int(i) for i in rng.choice(n_units, size=layer_budget, replace=False))


@dataclass
class ClientConfig:
    client_id: int
    partition: Partition
    layer_budget: int
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.partition.sample_count == 0:
            raise ValueError(f"client {self.client_id} has an empty partition")


@dataclass
class PartialUpdate:
    round: int
    client_id: int
    trained_layers: frozenset
    tensors: ModelState
    sample_count: int
    loss: float = 0.0
    accuracy: float = 0.0

    def __post_init__(self):
        if set(self.tensors.units) != set(self.trained_layers):
            raise ValueError("update tensors must cover exactly the trained layers")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")


class ClientRuntime:
    """Holds one client's data and a reusable local model instance."""

    def __init__(self, arch, cfg: ClientConfig, dtype=np.float32):
        self.arch = arch
        self.cfg = cfg
        self.model = Network(arch, dtype=dtype)
        n_out = arch.output_shape[0]
        part = cfg.partition
        self.x = np.asarray(part.features, dtype=self.model.dtype)
        self.y = one_hot(part.labels, n_out, self.model.dtype)
        if self.x.shape[1:] != arch.input_shape:
            raise ShapeMismatchError(f"partition features {self.x.shape[1:]} vs input {arch.input_shape}")
        if self.cfg.layer_budget > self.model.n_units:
            raise MaskError(f"layer budget {cfg.layer_budget} exceeds {self.model.n_units} units")

    @property
    def n_units(self) -> int:
        return self.model.n_units

    def client_update(self, global_state: ModelState, t: int) -> PartialUpdate:
        cfg = self.cfg
        if set(global_state.units) != set(range(self.n_units)):
            raise ShapeMismatchError("client needs the full global model")
        rng = client_rng(cfg.seed, cfg.client_id, t)
        mask = select_layers(self.n_units, cfg.layer_budget, rng)
        order = rng.permutation(len(self.x))
        self.model.load_state(global_state)
        opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
        train_local(self.model, opt, self.x, self.y, mask, order, cfg.epochs, cfg.batch_size)
        acc, loss = evaluate(self.model, self.x, self.cfg.partition.labels)
        return PartialUpdate(
            round=t,
            client_id=cfg.client_id,
            trained_layers=mask,
            tensors=self.model.state(mask),
            sample_count=len(self.x),
            loss=loss,
            accuracy=acc,
        )


def train_local(model, opt, x, y, mask, order, epochs, batch_size):
    """Run ``epochs`` passes over sequential mini-batches of ``x[order]``."""
    xs, ys = x[order], y[order]
    for _ in range(epochs):
        for start in range(0, len(xs), batch_size):
            xb = xs[start:start + batch_size]
            yb = ys[start:start + batch_size]
            try:
                _, _, grads = model.loss_and_grads(xb, yb, mask)
            except NonFiniteError as exc:
                raise NonFiniteError(f"local training diverged: {exc}") from exc
            opt.step(model, grads, mask)
