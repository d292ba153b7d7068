"""Compare the compiled kernels with the numpy fallback.

Times forward and backward rasterization plus the nearest-neighbour grid on
the same inputs for both backends, and checks that their outputs agree
bitwise. Run from the repository root:

    python3 benchmarks/bench_backends.py --gaussians 20000 --size 256
"""

import argparse
import json
import time

import numpy as np

from gsmaps import _backend
from gsmaps.optimize import nearest_neighbors
from gsmaps.render import RenderOptions, SplatScene, look_at, render, render_backward


def random_scene(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, (n, 3))
    rot = rng.normal(size=(n, 4))
    scale = np.exp(rng.uniform(-4.5, -2.5, (n, 3)))
    return SplatScene(pos, rot, scale, rng.uniform(0.2, 0.95, n), rng.uniform(0, 1, (n, 3)))


def timed(fn, repeats):
    times, result = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(1e3 * (time.perf_counter() - t0))
    return float(np.median(times)), result


def run(n, size, repeats, threads, seed=0):
    scene = random_scene(n, seed)
    cam = look_at([0, 0, 4], [0, 0, 0], fov_deg=40, width=size, height=size)
    rng = np.random.default_rng(seed + 1)
    d_color = rng.normal(size=(size, size, 3))
    pts = scene.positions
    rows, outputs = [], {}
    names = ["python"] + (["compiled"] if _backend._core is not None else [])
    for name in names:
        opts = RenderOptions(threads=threads, backend=name)
        fwd_ms, out = timed(lambda: render(cam, scene, (0, 0, 0), opts), repeats)
        bwd_ms, grads = timed(lambda: render_backward(out, scene, d_color), repeats)
        nn_ms, nn = timed(lambda: nearest_neighbors(pts, threads=threads, backend=name), repeats)
        outputs[name] = (out.color, grads.opacity, grads.scale, nn[0])
        rows.append({"backend": name, "forward_ms": fwd_ms, "backward_ms": bwd_ms, "nearest_ms": nn_ms})
    if len(outputs) == 2:
        same = all(np.array_equal(a, b) for a, b in zip(outputs["python"], outputs["compiled"]))
        for r in rows:
            r["bitwise_equal"] = same
        base = rows[0]
        for key in ("forward_ms", "backward_ms", "nearest_ms"):
            rows[1][key.replace("_ms", "_speedup")] = base[key] / max(rows[1][key], 1e-9)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, default=20000)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    rows = run(args.gaussians, args.size, args.repeats, args.threads)
    print(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
