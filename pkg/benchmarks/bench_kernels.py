"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each hot kernel at the shapes one training batch of 32 produces, plus
one full forward/backward step, for every available backend.
"""

import argparse
import timeit

import numpy as np

from fabfix import kernels, neural

BATCH = 32


def kernel_cases(rng):
    cases = []
    for size, cin, cout in ((128, 1, 8), (64, 8, 8), (32, 8, 16), (16, 16, 16)):
        x = rng.standard_normal((BATCH, size, size, cin)).astype(np.float32)
        k = rng.standard_normal((3, 3, cin, cout)).astype(np.float32)
        b = np.zeros(cout, np.float32)
        g = rng.standard_normal((BATCH, size, size, cout)).astype(np.float32)
        cases.append((f"conv fwd {size}x{size} {cin}->{cout}",
                      lambda m, x=x, k=k, b=b: m.conv3x3_forward(x, k, b)))
        cases.append((f"conv bwd {size}x{size} {cin}->{cout}",
                      lambda m, x=x, k=k, g=g: m.conv3x3_backward(x, k, g, True)))
    x = rng.standard_normal((BATCH, 128, 128, 8)).astype(np.float32)
    cases.append(("avgpool fwd 128x128x8", lambda m: m.avgpool2_forward(x)))
    g = rng.standard_normal((BATCH, 64, 64, 8)).astype(np.float32)
    cases.append(("avgpool bwd 64x64x8", lambda m: m.avgpool2_backward(g)))
    n = neural.param_count()
    p, gr = rng.standard_normal(n).astype(np.float32), rng.standard_normal(n).astype(np.float32)
    m1, v1 = np.zeros(n, np.float32), np.zeros(n, np.float32)
    cases.append((f"adam {n} params",
                  lambda m: m.adam_update(p, gr, m1, v1, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)))
    return cases


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def step_time(backend, repeat, rng):
    """One forward + backward + Adam step on a batch, with ``backend`` active."""
    saved = kernels._impl
    kernels._impl = kernels.get_backend(backend)
    try:
        w = neural.init_weights(0)
        state = neural.AdamState.for_weights(w)
        x = (rng.random((BATCH, 128, 128, 1)) < 0.5).astype(np.float32)

        def step():
            _, g = neural.loss_and_grads(w, x, x)
            neural.adam_step(w, g, state)
        return best_of(step, repeat)
    finally:
        kernels._impl = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; timing {', '.join(backends)} (best of {args.repeat})")
    print(f"{'kernel':34s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in kernel_cases(rng) + [("train step (batch 32)", None)]:
        times = []
        for b in backends:
            if fn is None:
                times.append(step_time(b, args.repeat, rng))
            else:
                mod = kernels.get_backend(b)
                times.append(best_of(lambda: fn(mod), args.repeat))
        row = f"{name:34s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[1] / times[0]:8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
