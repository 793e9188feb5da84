"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each kernel on VGG-like shapes and a full conv-net training step with
either backend swapped in, and checks that both give bit-identical results.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from fedfreeze import _kernels
from fedfreeze._kernels import _pykernels
from fedfreeze.metrics import one_hot
from fedfreeze.nn import Network, make_optimizer
from fedfreeze.registry import ArchitectureDescriptor

KERNELS = ("im2col", "col2im", "maxpool_forward", "maxpool_backward", "adam_update")


def kernel_cases(rng):
    x = rng.normal(size=(32, 16, 16, 64)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _pykernels.im2col(xp, 3, 3, 1)
    dcols = rng.normal(size=cols.shape).astype(np.float32)
    pooled, arg = _pykernels.maxpool_forward(x, 2, 2)
    dpool = rng.normal(size=pooled.shape).astype(np.float32)
    n = 2_359_808  # one 3x3x512x512 conv kernel plus bias
    p = rng.normal(size=n).astype(np.float32)
    g = rng.normal(size=n).astype(np.float32)
    return {
        "im2col": lambda k: k.im2col(xp, 3, 3, 1),
        "col2im": lambda k: k.col2im(dcols, xp.shape, 3, 3, 1),
        "maxpool_forward": lambda k: k.maxpool_forward(x, 2, 2),
        "maxpool_backward": lambda k: k.maxpool_backward(dpool, arg, x.shape, 2, 2),
        "adam_update": lambda k: _adam(k, p, g),
    }


def _adam(k, p, g):
    out = p.copy()
    k.adam_update(out, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-7)
    return out


def small_cnn():
    layers = []
    for f in (16, 32):
        layers += [{"kind": "conv2d", "filters": f, "kernel_size": 3},
                   {"kind": "batch_normalization"}, {"kind": "relu"},
                   {"kind": "max_pooling2d", "pool_size": 2}]
    layers += [{"kind": "flatten"}, {"kind": "dense", "units": 10}, {"kind": "softmax"}]
    return ArchitectureDescriptor.from_dict({"name": "bench_cnn", "input_shape": [32, 32, 3],
                                             "layers": layers})


def train_step_fn(rng):
    arch = small_cnn()
    x = rng.normal(size=(32, 32, 32, 3)).astype(np.float32)
    y = one_hot(rng.integers(0, 10, 32), 10, np.float32)

    def step():
        net = Network(arch, seed=0)
        opt = make_optimizer("adam", 0.01)
        mask = range(net.n_units)
        _, _, g = net.loss_and_grads(x, y, mask)
        opt.step(net, g, mask)
        return net.state()

    return step


def use_backend(impl):
    for name in KERNELS:
        setattr(_kernels, name, getattr(impl, name))


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    compiled = _kernels.load_compiled()
    if compiled is None:
        print("compiled kernels are not built; install with the Cython extension enabled")
        return 1
    backends = {"python": _pykernels, "cython": compiled}
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'benchmark':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    cases = kernel_cases(rng)
    rows = [(name, (lambda fn: lambda impl: fn(impl))(cases[name])) for name in KERNELS]
    step = train_step_fn(rng)

    def run_step(impl):
        use_backend(impl)
        return step()

    rows.append(("conv train step", run_step))
    for name, fn in rows:
        times, outs = {}, {}
        for label, impl in backends.items():
            outs[label] = fn(impl)
            times[label] = best_of(lambda: fn(impl), args.repeat)
        same = _identical(outs["python"], outs["cython"])
        speed = times["python"] / times["cython"]
        results[name] = {"python_s": times["python"], "cython_s": times["cython"],
                         "speedup": speed, "identical": same}
        print(f"{name:<20}{1e3 * times['python']:>12.2f}{1e3 * times['cython']:>12.2f}"
              f"{speed:>9.2f}x  {same}")
    use_backend(backends[_kernels.BACKEND])
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


def _identical(a, b):
    if a is None or b is None:
        return a is b
    if isinstance(a, tuple):
        return all(_identical(x, y) for x, y in zip(a, b))
    if hasattr(a, "equals"):
        return a.equals(b)
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


if __name__ == "__main__":
    sys.exit(main())
