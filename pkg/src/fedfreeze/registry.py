"""Architecture descriptors, parameter counting and the FFRZ model format.

Descriptors are JSON documents::

    {"name": "toy_mlp", "input_shape": [20],
     "layers": [{"kind": "dense", "units": 64}, {"kind": "relu"}, ...]}

Shapes exclude the batch axis and images are channels-last (H, W, C).
"""
import json
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DescriptorError, ModelFormatError, NonFiniteError
from .state import ModelState

KIND_ALIASES = {
    "conv2d": "conv2d",
    "conv": "conv2d",
    "batch_normalization": "batch_normalization",
    "batchnorm": "batch_normalization",
    "relu": "relu",
    "activation": "relu",
    "max_pooling2d": "max_pooling2d",
    "maxpool": "max_pooling2d",
    "average_pooling2d": "average_pooling2d",
    "avgpool": "average_pooling2d",
    "flatten": "flatten",
    "dense": "dense",
    "softmax": "softmax",
}
PARAMETERIZED = ("conv2d", "batch_normalization", "dense")


@dataclass
class LayerDescriptor:
    kind: str
    name: str = ""
    filters: int | None = None
    kernel_size: int | None = None
    strides: int = 1
    padding: str = "same"
    units: int | None = None
    pool_size: int | None = None
    input_shape: tuple = ()
    output_shape: tuple = ()
    trainable_params: int = 0
    non_trainable_params: int = 0
    flops: int = 0

    @property
    def param_count(self) -> int:
        return self.trainable_params + self.non_trainable_params

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED

    def hyperparams(self) -> dict:
        out = {"kind": self.kind, "name": self.name}
        if self.kind == "conv2d":
            out.update(filters=self.filters, kernel_size=self.kernel_size,
                       strides=self.strides, padding=self.padding)
        elif self.kind == "dense":
            out.update(units=self.units)
        elif self.kind in ("max_pooling2d", "average_pooling2d"):
            out.update(pool_size=self.pool_size, strides=self.strides)
        return out


def _conv_out(size, k, stride, padding):
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def _resolve_layer(layer: LayerDescriptor, shape: tuple) -> None:
    """Fill output shape and closed-form parameter counts in place."""
    kind = layer.kind
    layer.input_shape = shape
    if kind == "conv2d":
        if len(shape) != 3:
            raise DescriptorError(f"{layer.name}: conv2d expects (H, W, C) input, got {shape}")
        if not layer.filters or not layer.kernel_size:
            raise DescriptorError(f"{layer.name}: conv2d needs filters and kernel_size")
        if layer.padding not in ("same", "valid"):
            raise DescriptorError(f"{layer.name}: unknown padding {layer.padding!r}")
        h, w, c = shape
        k = layer.kernel_size
        oh = _conv_out(h, k, layer.strides, layer.padding)
        ow = _conv_out(w, k, layer.strides, layer.padding)
        if oh < 1 or ow < 1:
            raise DescriptorError(f"{layer.name}: kernel larger than input {shape}")
        layer.output_shape = (oh, ow, layer.filters)
        layer.trainable_params = (k * k * c + 1) * layer.filters
        layer.flops = oh * ow * k * k * c * layer.filters
    elif kind == "dense":
        if len(shape) != 1:
            raise DescriptorError(f"{layer.name}: dense expects flat input, got {shape}")
        if not layer.units:
            raise DescriptorError(f"{layer.name}: dense needs units")
        layer.output_shape = (layer.units,)
        layer.trainable_params = (shape[0] + 1) * layer.units
        layer.flops = shape[0] * layer.units
    elif kind == "batch_normalization":
        ch = shape[-1]
        layer.output_shape = shape
        layer.trainable_params = 2 * ch
        layer.non_trainable_params = 2 * ch
        layer.flops = int(np.prod(shape))
    elif kind in ("max_pooling2d", "average_pooling2d"):
        if len(shape) != 3:
            raise DescriptorError(f"{layer.name}: pooling expects (H, W, C) input, got {shape}")
        p = layer.pool_size or 2
        layer.pool_size = p
        h, w, c = shape
        oh = (h - p) // layer.strides + 1
        ow = (w - p) // layer.strides + 1
        if oh < 1 or ow < 1:
            raise DescriptorError(f"{layer.name}: pool larger than input {shape}")
        layer.output_shape = (oh, ow, c)
        layer.flops = oh * ow * c * p * p
    elif kind == "flatten":
        layer.output_shape = (int(np.prod(shape)),)
    elif kind in ("relu", "softmax"):
        layer.output_shape = shape
        layer.flops = int(np.prod(shape))
    else:  # pragma: no cover - kinds are normalized on parse
        raise DescriptorError(f"unknown layer kind {kind!r}")


@dataclass
class ArchitectureDescriptor:
    name: str
    input_shape: tuple
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise DescriptorError(f"invalid input shape {self.input_shape}")
        shape = self.input_shape
        counts: dict[str, int] = {}
        for layer in self.layers:
            if not layer.name:
                n = counts.get(layer.kind, 0)
                layer.name = layer.kind if n == 0 else f"{layer.kind}_{n}"
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
            _resolve_layer(layer, shape)
            shape = layer.output_shape

    @property
    def output_shape(self) -> tuple:
        return self.layers[-1].output_shape if self.layers else self.input_shape

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureDescriptor":
        if not isinstance(doc, dict) or "input_shape" not in doc:
            raise DescriptorError("descriptor must be an object with input_shape and layers")
        layers = []
        seen: dict[str, int] = {}
        for i, rec in enumerate(doc.get("layers", [])):
            rec = dict(rec)
            raw = str(rec.pop("kind", "")).lower()
            kind = KIND_ALIASES.get(raw)
            if kind is None:
                raise DescriptorError(f"layer {i}: unknown or missing kind")
            if kind == "relu" and rec.pop("activation", "relu") != "relu":
                raise DescriptorError(f"layer {i}: only relu activations are supported")
            if not rec.get("name"):
                n = seen.get(raw, 0)
                rec["name"] = raw if n == 0 else f"{raw}_{n}"
            seen[raw] = seen.get(raw, 0) + 1
            if "strides" not in rec and kind in ("max_pooling2d", "average_pooling2d"):
                rec["strides"] = rec.get("pool_size", 2)
            try:
                layers.append(LayerDescriptor(kind=kind, **rec))
            except TypeError as exc:
                raise DescriptorError(f"layer {i}: {exc}") from None
        return cls(name=doc.get("name", "unnamed"), input_shape=doc["input_shape"], layers=layers)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [layer.hyperparams() for layer in self.layers]}

    @classmethod
    def load(cls, ref) -> "ArchitectureDescriptor":
        """Load from a file path or the name of a bundled descriptor."""
        path = Path(ref)
        if not path.exists():
            bundled = resources.files("fedfreeze") / "descriptors" / f"{ref}.json"
            if not bundled.is_file():
                raise DescriptorError(f"no descriptor file or bundled architecture named {ref!r}")
            text = bundled.read_text(encoding="utf-8")
        else:
            text = path.read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DescriptorError(f"malformed descriptor JSON: {exc}") from None
        return cls.from_dict(doc)


def bundled_architectures() -> list[str]:
    root = resources.files("fedfreeze") / "descriptors"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def trainable_units(arch: ArchitectureDescriptor) -> list[list[int]]:
    """Group parameterized layers into selectable units.

    A batch normalization directly following a conv2d or dense layer joins
    that layer's unit; every other parameterized layer is its own unit.
    """
    units: list[list[int]] = []
    for i, layer in enumerate(arch.layers):
        if not layer.parameterized:
            continue
        prev = arch.layers[i - 1] if i > 0 else None
        if (layer.kind == "batch_normalization" and prev is not None
                and prev.kind in ("conv2d", "dense") and units and units[-1][-1] == i - 1):
            units[-1].append(i)
        else:
            units.append([i])
    return units


@dataclass
class ParameterCount:
    total: int
    trainable: int
    non_trainable: int
    per_layer: list
    trainable_units: int
    unit_params: list


def count_parameters(arch: ArchitectureDescriptor) -> ParameterCount:
    per_layer = [
        {"index": i, "name": layer.name, "kind": layer.kind,
         "output_shape": list(layer.output_shape), "params": layer.param_count,
         "trainable": layer.trainable_params, "non_trainable": layer.non_trainable_params}
        for i, layer in enumerate(arch.layers)
    ]
    units = trainable_units(arch)
    unit_params = [sum(arch.layers[i].param_count for i in u) for u in units]
    trainable = sum(layer.trainable_params for layer in arch.layers)
    non_trainable = sum(layer.non_trainable_params for layer in arch.layers)
    return ParameterCount(
        total=trainable + non_trainable,
        trainable=trainable,
        non_trainable=non_trainable,
        per_layer=per_layer,
        trainable_units=len(units),
        unit_params=unit_params,
    )


# --- FFRZ model file format ---------------------------------------------------
#
#   header  : magic "FFRZ" | u16 version | u16 reserved | u32 record count | u32 parameter count
#   records : u16 unit index | u64 byte length | f32 little-endian values
#   trailer : u32 CRC32 of everything before it
#
# All integers little-endian.

MAGIC = b"FFRZ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_RECORD = struct.Struct("<HQ")
_CRC = struct.Struct("<I")
HEADER_BYTES = _HEADER.size
RECORD_BYTES = _RECORD.size
TRAILER_BYTES = _CRC.size


def serialized_size(n_records: int, n_params: int) -> int:
    return HEADER_BYTES + n_records * RECORD_BYTES + 4 * n_params + TRAILER_BYTES


def serialize_model(state: ModelState) -> bytes:
    if not state.is_finite():
        raise NonFiniteError("refusing to serialize non-finite parameters")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(state.units), state.n_params)]
    for idx in state.indices():
        data = np.ascontiguousarray(state.units[idx].ravel(), dtype="<f4").tobytes()
        parts.append(_RECORD.pack(idx, len(data)))
        parts.append(data)
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def deserialize_model(blob: bytes) -> ModelState:
    blob = bytes(blob)
    if len(blob) < HEADER_BYTES + TRAILER_BYTES:
        raise ModelFormatError("truncated model: shorter than header")
    magic, version, _, n_records, n_params = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    (crc,) = _CRC.unpack_from(blob, len(blob) - TRAILER_BYTES)
    if zlib.crc32(blob[:-TRAILER_BYTES]) != crc:
        if len(blob) < serialized_size(n_records, n_params):
            raise ModelFormatError("truncated model")
        raise ModelFormatError("checksum mismatch")
    units = {}
    pos = HEADER_BYTES
    end = len(blob) - TRAILER_BYTES
    for _ in range(n_records):
        if pos + RECORD_BYTES > end:
            raise ModelFormatError("truncated record header")
        idx, nbytes = _RECORD.unpack_from(blob, pos)
        pos += RECORD_BYTES
        if nbytes % 4 or pos + nbytes > end:
            raise ModelFormatError(f"bad record length for unit {idx}")
        if idx in units:
            raise ModelFormatError(f"duplicate unit {idx}")
        units[idx] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32)
        pos += nbytes
    if pos != end:
        raise ModelFormatError("trailing bytes after last record")
    state = ModelState(units)
    if state.n_params != n_params:
        raise ModelFormatError("parameter count does not match header")
    return state


def save_model(state: ModelState, path) -> None:
    Path(path).write_bytes(serialize_model(state))


def load_model(path) -> ModelState:
    return deserialize_model(Path(path).read_bytes())
