import numpy as np
import pytest

from fedfreeze.registry import ArchitectureDescriptor


def make_arch(layers, input_shape, name="test"):
    return ArchitectureDescriptor.from_dict({"name": name, "input_shape": list(input_shape),
                                             "layers": layers})


def mlp_layers(widths, n_out):
    layers = []
    for w in widths:
        layers += [{"kind": "dense", "units": w}, {"kind": "relu"}]
    return layers + [{"kind": "dense", "units": n_out}, {"kind": "softmax"}]


@pytest.fixture
def toy_arch():
    return ArchitectureDescriptor.load("toy_mlp")


@pytest.fixture
def small_cnn():
    return make_arch([
        {"kind": "conv2d", "filters": 4, "kernel_size": 3},
        {"kind": "batch_normalization"},
        {"kind": "relu"},
        {"kind": "max_pooling2d", "pool_size": 2},
        {"kind": "conv2d", "filters": 5, "kernel_size": 3, "padding": "valid"},
        {"kind": "batch_normalization"},
        {"kind": "relu"},
        {"kind": "average_pooling2d", "pool_size": 2},
        {"kind": "flatten"},
        {"kind": "dense", "units": 3},
        {"kind": "softmax"},
    ], (8, 8, 2), name="small_cnn")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
