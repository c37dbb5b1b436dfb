"""Compare the compiled and pure-numpy kernel lanes.

Times each hot kernel on realistic desk-scale shapes, then a full dense
train step under whichever lane this process imported. Lane selection is
fixed at import, so the driver re-executes itself once per lane:

    python3 benchmarks/bench_kernels.py            # both lanes, summary table
    DIVE_KERNELS=py python3 benchmarks/bench_kernels.py --one-lane
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "src"))

REPEAT = 200


def _time(fn, repeat=REPEAT):
    fn()  # warm
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_kernels():
    from divemoe import kernels

    rng = np.random.default_rng(0)
    x1 = rng.normal(size=512 * 344).astype(np.float32)
    dy1 = rng.normal(size=512 * 344).astype(np.float32)
    dx1 = np.zeros_like(x1)
    xn = rng.normal(size=(512, 128)).astype(np.float32)
    gn = rng.normal(size=128).astype(np.float32)
    yn, invn = kernels.rmsnorm_fwd(xn, gn, 1e-5)
    dyn = rng.normal(size=(512, 128)).astype(np.float32)
    dxn = np.zeros_like(xn)
    dgn = np.zeros_like(gn)
    zc = rng.normal(size=(32, 64, 64)).astype(np.float32)
    yc = kernels.causal_softmax_fwd(zc)
    dzc = np.zeros_like(zc)
    lg = rng.normal(size=(512, 256)).astype(np.float32)
    tg = rng.integers(0, 256, size=512).astype(np.int64)
    pr, _ = kernels.cross_entropy_fwd(lg, tg)
    dlg = np.zeros_like(lg)
    xr = rng.normal(size=(32, 64, 32)).astype(np.float32)
    cos = np.cos(rng.normal(size=(64, 16))).astype(np.float32)
    sin = np.sin(rng.normal(size=(64, 16))).astype(np.float32)
    w = rng.normal(size=100_000).astype(np.float32)
    g = rng.normal(size=100_000).astype(np.float32)
    m = np.zeros_like(w)
    v = np.zeros_like(w)

    rows = {
        "swish_fwd [176k]": lambda: kernels.swish_fwd(x1),
        "swish_bwd [176k]": lambda: kernels.swish_bwd(x1, dy1, dx1),
        "rmsnorm_fwd [512x128]": lambda: kernels.rmsnorm_fwd(xn, gn, 1e-5),
        "rmsnorm_bwd [512x128]": lambda: kernels.rmsnorm_bwd(xn, gn, invn, dyn, dxn, dgn),
        "causal_softmax_fwd [32x64x64]": lambda: kernels.causal_softmax_fwd(zc),
        "causal_softmax_bwd [32x64x64]": lambda: kernels.causal_softmax_bwd(yc, zc, dzc),
        "cross_entropy_fwd [512x256]": lambda: kernels.cross_entropy_fwd(lg, tg),
        "cross_entropy_bwd [512x256]": lambda: kernels.cross_entropy_bwd(pr, tg, 1 / 512, dlg),
        "rope_fwd [32x64x32]": lambda: kernels.rope_fwd(xr, cos, sin),
        "adamw_update [100k]": lambda: kernels.adamw_update(
            w, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001),
    }
    return {name: _time(fn) for name, fn in rows.items()}


def bench_train_step():
    from divemoe.model import DenseModel, ModelConfig
    from divemoe.optim import AdamW

    cfg = ModelConfig(d_model=128, n_layers=4, n_heads=4, d_ff=344,
                      vocab=256, max_seq_len=64)
    model = DenseModel.init(cfg, seed=0)
    opt = AdamW(model.parameters(), lr=1e-4)
    ids = np.random.default_rng(0).integers(0, 256, size=(8, 65), dtype=np.int64)

    def step():
        loss = model.loss_on_batch(ids)
        loss.backward()
        opt.step()

    return _time(step, repeat=20)


def run_one_lane():
    from divemoe import kernels

    out = {"backend": kernels.BACKEND, "kernels": bench_kernels(),
           "train_step": bench_train_step()}
    print(json.dumps(out))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--one-lane", action="store_true",
                        help="benchmark only the lane this process imported")
    args = parser.parse_args()
    if args.one_lane:
        run_one_lane()
        return

    results = {}
    for lane in ("py", "cython"):
        env = dict(os.environ, DIVE_KERNELS=lane)
        proc = subprocess.run([sys.executable, os.path.abspath(__file__), "--one-lane"],
                              capture_output=True, text=True, env=env)
        if proc.returncode != 0:
            print("lane %s failed:\n%s" % (lane, proc.stderr), file=sys.stderr)
            continue
        doc = json.loads(proc.stdout.splitlines()[-1])
        results[doc["backend"]] = doc

    if len(results) < 2:
        print("need both lanes for a comparison; got %s" % sorted(results))
        return

    py, cy = results["numpy"], results["cython"]
    width = max(len(k) for k in py["kernels"]) + 2
    print("%s %12s %12s %8s" % ("kernel".ljust(width), "numpy", "cython", "speedup"))
    for name in py["kernels"]:
        a, b = py["kernels"][name], cy["kernels"][name]
        print("%s %9.1f us %9.1f us %7.2fx" % (name.ljust(width), a * 1e6, b * 1e6, a / b))
    a, b = py["train_step"], cy["train_step"]
    print("%s %9.1f ms %9.1f ms %7.2fx" % ("dense train step [d128 L4]".ljust(width),
                                           a * 1e3, b * 1e3, a / b))


if __name__ == "__main__":
    main()
