import numpy as np
import pytest

from gsmaps.mesh import Joint, RigBundle, build_shell_stack
from gsmaps.render import SplatScene, look_at, render, render_backward
from gsmaps.shellmap import sample_gaussians
from gsmaps.template import load_template, sphere_rig


def random_scene(rng, n, spread=1.0, log_scale=(-3.0, -1.5), opacity=(0.2, 0.95)):
    pos = rng.uniform(-spread, spread, (n, 3))
    rot = rng.normal(size=(n, 4))
    scale = np.exp(rng.uniform(*log_scale, (n, 3)))
    return SplatScene(pos, rot, scale, rng.uniform(*opacity, n), rng.uniform(0, 1, (n, 3)))


def front_camera(size=32, distance=4.0, fov=40.0):
    return look_at([0.0, 0.0, distance], [0.0, 0.0, 0.0], fov_deg=fov, width=size, height=size)


def triangle_rig(vertices=((0, 0, 0), (1, 0, 0), (0, 1, 0)), uvs=((0, 0), (1, 0), (0, 1))):
    v = np.asarray(vertices, dtype=np.float64)
    return RigBundle(v, np.array([[0, 1, 2]]), np.asarray(uvs, dtype=np.float64), np.array([[0, 1, 2]]),
                     [Joint("root", None, np.zeros(3))], np.ones((3, 1)), parts={"all": [0]})


def fd_check(scene, cam, rng, h=1e-4, bg=(0.2, 0.3, 0.4)):
    """(passing, checked) coordinates: those with |grad| > 1e-6 pass at relative error <= 1e-3 vs central differences."""
    out = render(cam, scene, bg)
    dC = rng.normal(size=out.color.shape)
    dA = rng.normal(size=out.alpha.shape)
    g = render_backward(out, scene, dC, dA)

    def loss(sc):
        o = render(cam, sc, bg)
        return np.sum(o.color * dC) + np.sum(o.alpha * dA)

    ok = total = 0
    for field, grad in (("colors", g.color), ("opacities", g.opacity), ("scales", g.scale), ("rotations", g.rotation)):
        base = getattr(scene, field)
        for idx in np.ndindex(base.shape):
            if abs(grad[idx]) <= 1e-6:
                continue
            vals = []
            for sgn in (1, -1):
                arr = base.copy()
                arr[idx] += sgn * h
                kw = {f: getattr(scene, f) for f in ("positions", "rotations", "scales", "opacities", "colors")}
                kw[field] = arr
                vals.append(loss(SplatScene(**kw)))
            fd = (vals[0] - vals[1]) / (2 * h)
            total += 1
            ok += abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), abs(grad[idx]))
    return ok, total


@pytest.fixture(scope="session")
def template():
    return load_template()


@pytest.fixture(scope="session")
def sphere():
    return sphere_rig(2)


@pytest.fixture(scope="session")
def sphere_stack(sphere):
    return build_shell_stack(sphere, 2, 0.1)


@pytest.fixture(scope="session")
def sphere_anchors(sphere_stack):
    return sample_gaussians(sphere_stack, 2000, 3)
