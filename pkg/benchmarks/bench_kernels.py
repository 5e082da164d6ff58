"""Compare the compiled kernels with the numpy fallback.

Times every kernel at the shapes a 64x64, batch-8 training step uses, then a
whole training step with each backend. Run with::

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from vluu import kernels, nn
from vluu.train import ce_and_grad

# (N, H, W, C) inputs seen by the segmenter's 3x3 convolutions and pools
SHAPES = [(8, 64, 64, 3), (8, 32, 32, 16), (8, 16, 16, 32), (8, 32, 32, 64), (8, 64, 64, 32)]


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(rng):
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        n, h, w, c = shape
        cols = kernels.PURE["im2col3x3"](x, 1)
        pooled, arg = kernels.PURE["maxpool2_forward"](x)
        tag = "x".join(map(str, shape))
        yield f"im2col3x3 {tag}", lambda impl, x=x: impl["im2col3x3"](x, 1)
        yield f"col2im3x3 {tag}", lambda impl, c_=cols, h=h, w=w: impl["col2im3x3"](c_, h, w, 1)
        yield f"maxpool2_forward {tag}", lambda impl, x=x: impl["maxpool2_forward"](x)
        yield (f"maxpool2_backward {tag}",
               lambda impl, d=pooled, a=arg: impl["maxpool2_backward"](d, a))
        yield f"upsample2_forward {tag}", lambda impl, x=x: impl["upsample2_forward"](x)
        yield f"upsample2_backward {tag}", lambda impl, x=x: impl["upsample2_backward"](x)


def train_step_fn(rng):
    arch = nn.ArchConfig(in_channels=3, num_classes=3)
    net = nn.SegNet(arch).init(rng)
    opt = nn.AdamState()
    x = rng.standard_normal((8, 64, 64, 3)).astype(np.float32)
    t = rng.dirichlet(np.ones(4), size=(8, 64, 64)).astype(np.float32)

    def step():
        _, d, _ = ce_and_grad(net.logits(x), t)
        net.backward(d)
        nn.adam_step(net.params, net.grads, opt)

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if kernels.COMPILED is None:
        raise SystemExit("compiled kernels are not built; run 'pip install -e .' first")

    rng = np.random.default_rng(0)
    print(f"{'case':42s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng):
        tp = _time(lambda: fn(kernels.PURE), args.repeat)
        tc = _time(lambda: fn(kernels.COMPILED), args.repeat)
        print(f"{name:42s} {tp * 1e3:10.3f} {tc * 1e3:12.3f} {tp / tc:7.2f}x")

    saved = kernels._active
    try:
        step = train_step_fn(np.random.default_rng(1))
        timings = {}
        for label, impl in (("python", kernels.PURE), ("compiled", kernels.COMPILED)):
            kernels._active = impl
            timings[label] = _time(step, max(3, args.repeat // 4))
    finally:
        kernels._active = saved
    tp, tc = timings["python"], timings["compiled"]
    print(f"{'full training step (batch 8, 64x64)':42s} {tp * 1e3:10.1f} {tc * 1e3:12.1f} "
          f"{tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
