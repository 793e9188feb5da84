import numpy as np

from ..errors import MaskError, NonFiniteError, ShapeMismatchError
from ..registry import ArchitectureDescriptor, trainable_units
from ..state import ModelState
from .layers import Softmax, make_layer

PROB_CLAMP = 1e-12


class Unit:
    """A selectable group of layers sharing one flat parameter buffer."""

    def __init__(self, index, layer_indices, buffer):
        self.index = index
        self.layer_indices = tuple(layer_indices)
        self.buffer = buffer
        # (layer index, name, view, trainable)
        self.params: list[tuple] = []

    @property
    def trainable_params(self):
        return [p for p in self.params if p[3]]

    @property
    def size(self) -> int:
        return int(self.buffer.size)


class Network:
    """Sequential classifier built from an architecture descriptor.

    Parameters live in one contiguous buffer per trainable unit so that a
    unit can be exported, transferred and averaged as a single vector.
    """

    def __init__(self, arch: ArchitectureDescriptor, dtype=np.float32, seed=0):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.layers = [make_layer(d) for d in arch.layers]
        self.units: list[Unit] = []
        self.unit_of_layer: dict[int, int] = {}
        for u, members in enumerate(trainable_units(arch)):
            specs = [(li, *s) for li in members for s in self.layers[li].param_specs()]
            size = sum(int(np.prod(shape)) for _, _, shape, _ in specs)
            unit = Unit(u, members, np.zeros(size, dtype=self.dtype))
            off = 0
            for li, name, shape, trainable in specs:
                n = int(np.prod(shape))
                view = unit.buffer[off:off + n].reshape(shape)
                self.layers[li].params[name] = view
                unit.params.append((li, name, view, trainable))
                off += n
            for li in members:
                self.unit_of_layer[li] = u
            self.units.append(unit)
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_params(self) -> int:
        return sum(u.size for u in self.units)

    # --- state exchange -----------------------------------------------------

    def state(self, units=None) -> ModelState:
        idx = range(self.n_units) if units is None else sorted(units)
        return ModelState({i: self.units[i].buffer.copy() for i in idx})

    def load_state(self, state: ModelState) -> None:
        """Copy every unit present in ``state`` into this network."""
        for i, vec in state.units.items():
            if not 0 <= i < self.n_units:
                raise ShapeMismatchError(f"state has unit {i}, model has {self.n_units}")
            buf = self.units[i].buffer
            if vec.size != buf.size:
                raise ShapeMismatchError(
                    f"unit {i}: state has {vec.size} values, model expects {buf.size}")
            buf[...] = vec.reshape(-1)

    def check_mask(self, mask) -> frozenset:
        mask = frozenset(int(m) for m in mask)
        bad = [m for m in mask if not 0 <= m < self.n_units]
        if bad:
            raise MaskError(f"mask references units {sorted(bad)}; model has {self.n_units} "
                            "trainable units")
        return mask

    # --- passes -------------------------------------------------------------

    def forward(self, x, training=False, mask=frozenset()) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.arch.input_shape:
            raise ShapeMismatchError(
                f"batch shape {x.shape[1:]} does not match input {self.arch.input_shape}")
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite values in input batch")
        # overflow is reported below as NonFiniteError rather than as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            for i, layer in enumerate(self.layers):
                update = training and self.unit_of_layer.get(i) in mask
                x = layer.forward(x, training=training, update_stats=update)
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite activation in forward pass")
        return x

    def backward_from(self, dout, mask, start=None, input_grad=False):
        """Backpropagate ``dout`` from layer ``start`` down.

        Frozen layers pass input-gradients through but emit no parameter
        gradients.  Propagation stops at the lowest layer of the lowest
        masked unit unless ``input_grad`` asks for the gradient w.r.t. the
        network input.  Returns (GradientSet, input gradient or None).
        """
        start = len(self.layers) - 1 if start is None else start
        if not mask and not input_grad:
            return {}, None
        lowest = 0 if input_grad else min(self.units[u].layer_indices[0] for u in mask)
        per_layer: dict[int, dict] = {}
        for i in range(start, lowest - 1, -1):
            layer = self.layers[i]
            trained = self.unit_of_layer.get(i) in mask
            need_dx = i > lowest or input_grad
            dout, g = layer.backward(dout, param_grads=trained, input_grad=need_dx)
            if trained:
                per_layer[i] = g
        grads = {}
        for u in sorted(mask):
            unit = self.units[u]
            grads[u] = [per_layer[li][name] for li, name, _, trainable in unit.params if trainable]
            for g in grads[u]:
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"non-finite gradient in unit {u}")
        return grads, dout

    def loss_and_grads(self, x, y_onehot, mask):
        """Mean categorical cross-entropy and gradients for masked units.

        The forward pass runs in training mode; batch-norm running statistics
        move only for masked units.
        """
        from ..metrics import cross_entropy

        mask = self.check_mask(mask)
        y = np.asarray(y_onehot, dtype=self.dtype)
        probs = self.forward(x, training=True, mask=mask)
        if y.shape != probs.shape:
            raise ShapeMismatchError(f"labels {y.shape} vs outputs {probs.shape}")
        loss = cross_entropy(y, probs)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite loss")
        n = x.shape[0]
        if isinstance(self.layers[-1], Softmax):
            # fused softmax + cross-entropy gradient on the logits
            dout = (probs - y) / self.dtype.type(n)
            start = len(self.layers) - 2
        else:
            dout = -y / np.maximum(probs, PROB_CLAMP) / self.dtype.type(n)
            start = len(self.layers) - 1
        grads, _ = self.backward_from(dout, mask, start=start)
        return loss, probs, grads

    def predict_proba(self, x, batch_size=4096) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if len(x) == 0:
            return np.zeros((0,) + tuple(self.arch.output_shape), dtype=self.dtype)
        return np.concatenate([self.forward(x[i:i + batch_size])
                               for i in range(0, len(x), batch_size)])


def forward(model: Network, batch) -> np.ndarray:
    """Inference pass returning class probabilities."""
    return model.forward(batch, training=False)


def backward(model: Network, batch, labels, mask) -> dict:
    """Gradient of the mean cross-entropy w.r.t. the masked units only."""
    _, _, grads = model.loss_and_grads(batch, labels, mask)
    return grads
