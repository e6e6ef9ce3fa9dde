"""Compare the compiled and numpy kernel backends.

Times each row kernel on shapes seen during training (attention scores
for a batch of 32 dialogues of ~80 tokens, and layer norm over the same
batch), checks that both backends agree, then times a full training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from carformer import kernels


def kernel_cases(rng):
    scores = rng.normal(size=(32 * 4 * 80, 80))
    soft = kernels.py_softmax_forward(scores)
    hidden = rng.normal(size=(32 * 80, 64))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    _, xhat, rstd = kernels.py_layer_norm_forward(hidden, gain, bias, 1e-5)
    gy = rng.normal(size=hidden.shape)
    return {
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(soft, scores),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(hidden, gain, bias, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(gy, xhat, rstd, gain),
    }


def training_step():
    from carformer import autograd as ag
    from carformer.data.synth import generate_dataset
    from carformer.data.vocab import Vocab
    from carformer.model import CarModel, ModelConfig, make_batch

    data = generate_dataset(200, seed=0)
    vocab = Vocab.from_world(data.world)
    model = CarModel(ModelConfig(vocab_size=len(vocab)), seed=0)
    batch = make_batch(data.train[:32], vocab, model.config)

    def step():
        loss, _ = model.loss(batch)
        ag.backward(loss)
        model.zero_grad()
    return step


def best_of(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", default=None, help="Write the timings here.")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    results: dict[str, dict[str, float]] = {}
    outputs: dict[str, dict[str, object]] = {}
    original = kernels.BACKEND
    try:
        for backend in backends:
            kernels.use_backend(backend)
            cases = kernel_cases(np.random.default_rng(0))
            results[backend] = {name: best_of(fn, args.repeat) for name, fn in cases.items()}
            outputs[backend] = {name: fn() for name, fn in cases.items()}
            results[backend]["training_step"] = best_of(training_step(), max(3, args.repeat // 5))
    finally:
        kernels.use_backend(original)

    if len(backends) == 2:
        for name, out in outputs["python"].items():
            a = out if isinstance(out, tuple) else (out,)
            b = outputs["compiled"][name]
            b = b if isinstance(b, tuple) else (b,)
            worst = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))
            print(f"{name:<20} max |python - compiled| = {worst:.2e}")

    print(f"\n{'kernel':<20}" + "".join(f"{b:>14}" for b in backends) +
          ("   speedup" if len(backends) == 2 else ""))
    for name in results[backends[0]]:
        row = f"{name:<20}" + "".join(f"{results[b][name] * 1e3:>11.3f} ms" for b in backends)
        if len(backends) == 2:
            row += f"   {results['python'][name] / results['compiled'][name]:6.2f}x"
        print(row)
    if len(backends) == 1:
        print("\ncompiled kernels unavailable; only the numpy backend was timed")
    del rng
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return results


if __name__ == "__main__":
    main()
