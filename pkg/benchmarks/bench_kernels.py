"""Compare the compiled scan kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times the selective scan and the dechunk EMA, forward and forward+backward,
at sizes typical of the desk presets, and checks both backends agree. Also
times the one-byte SSM block step that drives incremental generation.
"""
import argparse
import json
import time

import torch

from lobbyte import kernels

SHAPES = {  # name: (T, channels, state)
    "tiny-outer": (512, 128, 8),
    "tiny-inner": (128, 192, 8),
    "small-outer": (2048, 512, 16),
}


def scan_args(T, Ch, N, dtype, seed=0):
    g = torch.Generator().manual_seed(seed)
    u = torch.randn(T, Ch, generator=g, dtype=dtype)
    delta = torch.rand(T, Ch, generator=g, dtype=dtype) * 0.1 + 1e-3
    A = -torch.rand(Ch, N, generator=g, dtype=dtype) - 0.1
    B = torch.randn(T, N, generator=g, dtype=dtype)
    C = torch.randn(T, N, generator=g, dtype=dtype)
    D = torch.randn(Ch, generator=g, dtype=dtype)
    reset = torch.zeros(T, dtype=torch.bool)
    reset[0] = True
    return u, delta, A, B, C, D, reset


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench(repeat, dtype):
    rows = []
    for name, (T, Ch, N) in SHAPES.items():
        args = scan_args(T, Ch, N, dtype)
        P = torch.rand(T, dtype=dtype)
        z = torch.randn(T, Ch, dtype=dtype)
        res = {"shape": name, "T": T, "channels": Ch, "state": N}
        outs = {}
        for be in ("python", "compiled"):
            if be == "compiled" and kernels.BACKEND != "compiled":
                continue
            leaves = [a.clone().requires_grad_(True) for a in args[:6]]

            def fwd():
                with torch.no_grad():
                    return kernels.selective_scan(*args, backend=be)

            def fwd_bwd():
                kernels.selective_scan(*leaves, args[6], backend=be).sum().backward()

            def ema():
                with torch.no_grad():
                    return kernels.ema_scan(P, z, backend=be)

            outs[be] = fwd()
            res[f"{be}_scan_fwd_ms"] = 1e3 * best_of(fwd, repeat)
            res[f"{be}_scan_fwd_bwd_ms"] = 1e3 * best_of(fwd_bwd, repeat)
            res[f"{be}_ema_fwd_ms"] = 1e3 * best_of(ema, repeat)
        if len(outs) == 2:
            res["max_abs_diff"] = float((outs["python"] - outs["compiled"]).abs().max())
            for k in ("scan_fwd", "scan_fwd_bwd", "ema_fwd"):
                res[f"speedup_{k}"] = res[f"python_{k}_ms"] / res[f"compiled_{k}_ms"]
        rows.append(res)
    return rows


STEP_WIDTHS = {"tiny-outer": 64, "tiny-inner": 96}


def bench_step(repeat, n_steps=256):
    from lobbyte.generation import _BlockStep
    from lobbyte.model.layers import MLP, IsotropicBlock, RMSNorm, SelectiveSSM

    rows = []
    for name, d in STEP_WIDTHS.items():
        torch.manual_seed(0)
        blk = IsotropicBlock(SelectiveSSM(d, d_state=8), MLP(d, 2 * d), RMSNorm(d), RMSNorm(d)).double()
        xs = torch.randn(n_steps, d, dtype=torch.float64).numpy()
        res = {"shape": name, "d_model": d, "steps": n_steps}
        outs = {}
        for be in ("python", "compiled"):
            if be == "compiled" and kernels.BACKEND != "compiled":
                continue
            step = _BlockStep(blk, backend=be)

            def run():
                st = step.init()
                return [step(x, st) for x in xs]

            outs[be] = run()
            res[f"{be}_step_us"] = 1e6 * best_of(run, repeat) / n_steps
        if len(outs) == 2:
            res["max_abs_diff"] = max(float(abs(a - b).max()) for a, b in zip(outs["python"], outs["compiled"]))
        rows.append(res)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--json")
    a = ap.parse_args()
    torch.set_num_threads(1)
    rows = bench(a.repeat, getattr(torch, a.dtype))
    print(f"default backend: {kernels.BACKEND}   dtype: {a.dtype}")
    print(f"{'shape':<12} {'kernel':<13} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for r in rows:
        for k, label in (("scan_fwd", "scan fwd"), ("scan_fwd_bwd", "scan fwd+bwd"), ("ema_fwd", "ema fwd")):
            py, c = r[f"python_{k}_ms"], r.get(f"compiled_{k}_ms")
            cs = "-" if c is None else f"{c:.2f}"
            sp = "-" if c is None else f"{py / c:.1f}x"
            print(f"{r['shape']:<12} {label:<13} {py:>10.2f} {cs:>12} {sp:>8}")
    steps = bench_step(a.repeat)
    print(f"\n{'shape':<12} {'kernel':<13} {'python us':>10} {'compiled us':>12} {'speedup':>8}")
    for r in steps:
        py, c = r["python_step_us"], r.get("compiled_step_us")
        cs = "-" if c is None else f"{c:.1f}"
        sp = "-" if c is None else f"{py / c:.1f}x"
        print(f"{r['shape']:<12} {'block step':<13} {py:>10.1f} {cs:>12} {sp:>8}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump({"scan": rows, "step": steps}, f, indent=1)


if __name__ == "__main__":
    main()
