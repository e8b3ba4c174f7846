"""Shared fixtures: meshes, slices, fast episode configs, and the
calibrated baseline operating point used across suites."""

import numpy as np
import pytest

from diwsim import dataset, envmdp, fluid, geom, policy

# calibrated open-loop operating point (see test_acceptance: the
# calibration criterion re-derives this from a grid search)
CAL_PRESSURE = 36.0
CAL_VELOCITY = 1.0


def make_box_mesh(x0, y0, z0, x1, y1, z1):
    """Axis-aligned box as 12 triangles."""
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]],
                 dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 3, 2],        # bottom
                  [4, 5, 6], [4, 6, 7],        # top
                  [0, 1, 5], [0, 5, 4],        # front
                  [1, 2, 6], [1, 6, 5],        # right
                  [2, 3, 7], [2, 7, 6],        # back
                  [3, 0, 4], [3, 4, 7]])       # left
    return geom.Mesh(vertices=v, triangles=f)


def make_sphere_mesh(radius=5.0, center=(11.0, 11.0, 0.0), nu=48, nv=24):
    """UV sphere (longitude/latitude tessellation)."""
    cx, cy, cz = center
    verts = [(cx, cy, cz - radius)]
    for j in range(1, nv):
        phi = np.pi * j / nv - np.pi / 2
        for i in range(nu):
            th = 2 * np.pi * i / nu
            verts.append((cx + radius * np.cos(phi) * np.cos(th),
                          cy + radius * np.cos(phi) * np.sin(th),
                          cz + radius * np.sin(phi)))
    verts.append((cx, cy, cz + radius))
    tris = []
    for i in range(nu):
        tris.append([0, 1 + i, 1 + (i + 1) % nu])
    for j in range(nv - 2):
        a = 1 + j * nu
        b = 1 + (j + 1) * nu
        for i in range(nu):
            i2 = (i + 1) % nu
            tris.append([a + i, a + i2, b + i])
            tris.append([a + i2, b + i2, b + i])
    top = len(verts) - 1
    a = 1 + (nv - 2) * nu
    for i in range(nu):
        tris.append([a + i, a + (i + 1) % nu, top])
    return geom.Mesh(vertices=np.array(verts), triangles=np.array(tris))


@pytest.fixture(scope="session")
def cube_mesh():
    return make_box_mesh(8.0, 8.0, 0.0, 14.0, 14.0, 6.0)


@pytest.fixture(scope="session")
def sphere_mesh():
    return make_sphere_mesh()


@pytest.fixture(scope="session")
def square_slice():
    return dataset.simple_slice("square", size=6.0)


@pytest.fixture(scope="session")
def holed_slice():
    outer = geom.Polygon(np.array([[7, 7], [15, 7], [15, 15], [7, 15]],
                                  dtype=np.float64))
    hole = geom.Polygon(np.array([[10, 10], [12, 10], [12, 12], [10, 12]],
                                 dtype=np.float64))
    return geom.orient_slices([outer, hole])


def fast_episode_config(**kw):
    """Episode config for tests: no final settle unless asked."""
    kw.setdefault("settle_time_end", 0.0)
    return envmdp.EpisodeConfig(**kw)


@pytest.fixture(scope="session")
def baseline_params():
    return policy.BaselineParams(pressure=CAL_PRESSURE, velocity=CAL_VELOCITY)


def settled_block(n_side=10, spacing=None, center=(11.0, 11.0),
                  material=None, seed=0):
    """Cubic lattice block at rest spacing, resting on the bed."""
    material = material or fluid.MaterialParams()
    spacing = spacing or 2 * material.r_p
    state = fluid.SimState(material=material, seed=seed)
    ax = np.arange(n_side) * spacing
    xs = center[0] + ax - ax.mean()
    ys = center[1] + ax - ax.mean()
    zs = material.r_p + ax
    pts = np.array([[x, y, z] for z in zs for y in ys for x in xs])
    state.add_particles(pts, np.zeros_like(pts))
    return state
