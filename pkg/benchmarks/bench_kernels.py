"""Compare the compiled and numpy kernel backends.

Times each kernel at the shapes the default model uses, then one training
step (forward + backward) of the default trimodal model under each backend.

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]
"""

import argparse
import json
import platform
import timeit

import numpy as np

from vidtox import autodiff as ad
from vidtox import kernels
from vidtox.data import GeneratorSpec, generate_dataset
from vidtox.model import Model, ModelConfig
from vidtox.text import build_vocab

KERNEL_NAMES = ("conv1d_forward", "conv1d_backward", "masked_softmax", "softmax_backward", "attention_forward", "attention_backward")


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(24, 16)).astype(dtype)
    w = rng.normal(size=(3, 16, 16)).astype(dtype)
    b = rng.normal(size=16).astype(dtype)
    y = _py().conv1d_forward(x, w, b, 2, 1)
    gy = rng.normal(size=y.shape).astype(dtype)
    s = rng.normal(size=(21, 21)).astype(dtype)
    mask = (rng.random(21) < 0.8).astype(np.uint8)
    mask[0] = 1
    p = _py().masked_softmax(s, mask)
    q, k, v = (rng.normal(size=(21, 32)).astype(dtype) for _ in range(3))
    o, pa = _py().attention_forward(q, k, v, mask, 4)
    go = rng.normal(size=o.shape).astype(dtype)
    return {
        "conv1d_forward": (x, w, b, 2, 1),
        "conv1d_backward": (gy, x, w, 2, 1),
        "masked_softmax": (s, mask),
        "softmax_backward": (p, rng.normal(size=p.shape).astype(dtype)),
        "attention_forward": (q, k, v, mask, 4),
        "attention_backward": (go, q, k, v, pa, 4),
    }


def _py():
    return kernels.available_backends()["python"]


def time_call(fn, args, repeat):
    t = timeit.Timer(lambda: fn(*args))
    number, _ = t.autorange()
    best = min(t.repeat(repeat=max(3, repeat // 50), number=number))
    return best / number


def bench_kernels(backends, repeat, dtype):
    cases = kernel_cases(dtype)
    return {name: {b: time_call(getattr(mod, name), cases[name], repeat) for b, mod in backends.items()} for name in KERNEL_NAMES}


def bench_model(backends, n_samples=20):
    recs = generate_dataset(GeneratorSpec(preset="crossmodal-xor", total=n_samples, seed=0))
    vocab = build_vocab([r.transcript for r in recs], 2000)
    model = Model(ModelConfig(), vocab)
    samples = [model.prepare(r) for r in recs]
    saved = {n: getattr(kernels, n) for n in KERNEL_NAMES}
    out = {}
    try:
        for b, mod in backends.items():
            for n in KERNEL_NAMES:
                setattr(kernels, n, getattr(mod, n))

            def step():
                for s in samples:
                    ad.backward(model.loss(s))
                ad.zero_grad(model.parameters())

            def infer():
                with ad.no_grad():
                    for s in samples:
                        model.forward(s)

            out[b] = {
                "train_step_ms_per_sample": 1e3 * min(timeit.repeat(step, number=1, repeat=5)) / n_samples,
                "forward_ms_per_sample": 1e3 * min(timeit.repeat(infer, number=1, repeat=5)) / n_samples,
            }
    finally:
        for n, fn in saved.items():
            setattr(kernels, n, fn)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--json", default=None, help="also write results here")
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    res = {
        "machine": platform.platform(),
        "numpy": np.__version__,
        "dtype": args.dtype,
        "kernels_seconds": bench_kernels(backends, args.repeat, np.dtype(args.dtype)),
        "model": bench_model(backends),
    }
    names = sorted(backends)
    print(f"{'kernel':<20}" + "".join(f"{b + ' (us)':>14}" for b in names) + ("   speedup" if len(names) == 2 else ""))
    for name, row in res["kernels_seconds"].items():
        line = f"{name:<20}" + "".join(f"{row[b] * 1e6:>14.2f}" for b in names)
        if len(names) == 2:
            line += f"   {row['python'] / row['cython']:>6.2f}x"
        print(line)
    print()
    for b, m in res["model"].items():
        print(f"default model, {b:<7} train step {m['train_step_ms_per_sample']:.3f} ms/sample, forward {m['forward_ms_per_sample']:.3f} ms/sample")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()
