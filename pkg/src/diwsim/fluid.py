"""Approximate deposition simulator.

Position-based dynamics with an SPH density constraint, a moving
pressure-driven particle emitter at the nozzle orifice, nozzle and bed
collision, XSPH velocity smoothing, and heightmap extraction.

Units: millimetres, seconds, unit particle mass.  All solver kernels are
gather-style (each particle accumulates its own neighbor sums in a fixed
order), so results are bit-identical run to run even when numba executes
the outer loop in parallel.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

GRAVITY = 9810.0  # mm/s^2
_Z_TOP = 8.0      # soft ceiling for the neighbor grid / clamping
_SURF_EPS = 1e-6  # projection slack so constraints are strictly satisfied


class FluidError(Exception):
    pass


class ParticleBudgetExceeded(FluidError):
    """Runaway emission hit the particle cap."""


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MaterialParams:
    h: float = 0.28            # SPH smoothing scale
    xsph_c: float = 0.1        # viscosity smoothing coefficient
    r_p: float = 0.07          # particle radius
    settle_time: float = 5.0
    rho0: float = field(default=None)
    bed_friction: float = field(default=None)  # per-substep contact damping
    damping: float = field(default=None)       # per-substep bulk drag
    friction: float = field(default=None)      # contact tangential friction
    bed_grip: float = 1.0                      # tangential stick to the bed

    def __post_init__(self):
        if self.h <= 2 * self.r_p:
            raise FluidError("smoothing scale must exceed the particle diameter")
        if not (0.0 <= self.xsph_c <= 1.0):
            raise FluidError("xsph_c must lie in [0, 1]")
        if self.rho0 is None:
            self.rho0 = lattice_rest_density(self.h, 2.0 * self.r_p)
        if self.bed_friction is None:
            # ties post-deposition spread to the viscosity knob
            self.bed_friction = self.xsph_c
        if self.damping is None:
            # deposited material is quasi-plastic: lacking a yield-stress
            # model, bulk drag (tied to the same knob) stops slow creep
            self.damping = self.xsph_c
        if self.friction is None:
            # quasi-static spreading is resisted by contact slip, so the
            # viscosity knob scales tangential friction too; capped below
            # 0.5 where summed pair corrections start to inject jitter
            self.friction = min(0.45, 0.2 + self.xsph_c)


VISCOSITY_PRESETS = {
    "low": dict(xsph_c=0.02, settle_time=15.0),
    "medium": dict(xsph_c=0.1, settle_time=5.0),
    "high": dict(xsph_c=0.4, settle_time=5.0),
}


def material_preset(name: str) -> MaterialParams:
    try:
        return MaterialParams(**VISCOSITY_PRESETS[name])
    except KeyError:
        raise FluidError(f"unknown viscosity preset {name!r}") from None


@dataclass
class Nozzle:
    center: np.ndarray = field(default_factory=lambda: np.array([11.0, 11.0]))
    tip_height: float = 0.254
    radius: float = 0.2
    travel_dir: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.travel_dir = np.asarray(self.travel_dir, dtype=np.float64)
        if self.tip_height <= 0 or self.radius <= 0:
            raise FluidError("nozzle tip_height and radius must be positive")


@dataclass
class SimConfig:
    dt: float = 1.0 / 240.0
    solver_iters: int = 4
    eps_cfm: float = 100.0
    particle_cap: int = 200_000
    active_radius: float = 0.9  # mm around the nozzle; None = never sleep
    sleep_speed: float = 2.0    # mm/s
    max_speed: float = 200.0    # mm/s safety clamp on solver velocities

    def __post_init__(self):
        if self.dt <= 0 or self.solver_iters < 1:
            raise FluidError("dt must be positive and solver_iters >= 1")


def poly6(r: float, h: float) -> float:
    """Poly6 smoothing kernel; zero outside the support radius."""
    if r >= h:
        return 0.0
    c = 315.0 / (64.0 * math.pi * h ** 9)
    return c * (h * h - r * r) ** 3


def lattice_rest_density(h: float, spacing: float, mass: float = 1.0) -> float:
    """Rest density of an infinite cubic lattice at the given spacing,
    evaluated with the poly6 kernel.  Computed at startup, not hardcoded."""
    k = int(math.ceil(h / spacing))
    rho = 0.0
    for ix in range(-k, k + 1):
        for iy in range(-k, k + 1):
            for iz in range(-k, k + 1):
                r = spacing * math.sqrt(ix * ix + iy * iy + iz * iz)
                rho += mass * poly6(r, h)
    return rho


# ---------------------------------------------------------------------------
# state


class SimState:
    """Particle set plus nozzle, emitter pressure, bed bounds, and RNG.

    Exclusively owned by one environment instance; evolution is
    deterministic given the seed.
    """

    def __init__(self, material: MaterialParams = None, config: SimConfig = None,
                 seed: int = 0, bed=(0.0, 0.0, 22.0, 22.0), nozzle: Nozzle = None):
        self.material = material or MaterialParams()
        self.config = config or SimConfig()
        self.nozzle = nozzle or Nozzle()
        self.bed = tuple(float(b) for b in bed)
        self.pressure = 0.0
        self.time = 0.0
        self.emission_fraction = 0.0
        self.rng = np.random.default_rng(seed)
        self._emit_counter = 0
        self.n = 0
        cap0 = 1024
        self._pos = np.zeros((cap0, 3))
        self._prev = np.zeros((cap0, 3))
        self._vel = np.zeros((cap0, 3))
        self._mass = np.ones(cap0)
        self._rho = np.full(cap0, self.material.rho0)
        self._bufs = {}  # reusable solver scratch, keyed by name

    @property
    def pos(self) -> np.ndarray:
        return self._pos[:self.n]

    @property
    def vel(self) -> np.ndarray:
        return self._vel[:self.n]

    @property
    def mass(self) -> np.ndarray:
        return self._mass[:self.n]

    @property
    def rho(self) -> np.ndarray:
        return self._rho[:self.n]

    def _grow(self, extra: int):
        need = self.n + extra
        if need > self.config.particle_cap:
            raise ParticleBudgetExceeded(
                f"{need} particles exceed cap {self.config.particle_cap}")
        cap = len(self._pos)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        cap = min(cap, self.config.particle_cap)
        for name in ("_pos", "_prev", "_vel"):
            old = getattr(self, name)
            new = np.zeros((cap, 3))
            new[:self.n] = old[:self.n]
            setattr(self, name, new)
        for name, fill in (("_mass", 1.0), ("_rho", self.material.rho0)):
            old = getattr(self, name)
            new = np.full(cap, fill)
            new[:self.n] = old[:self.n]
            setattr(self, name, new)

    def add_particles(self, pos, vel=None, mass=None):
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        k = len(pos)
        self._grow(k)
        sl = slice(self.n, self.n + k)
        self._pos[sl] = pos
        self._vel[sl] = 0.0 if vel is None else np.asarray(vel, dtype=np.float64)
        self._prev[sl] = self._pos[sl] - self._vel[sl] * self.config.dt
        self._mass[sl] = 1.0 if mass is None else mass
        self._rho[sl] = self.material.rho0
        self.n += k


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _aabb(pos):
    n = pos.shape[0]
    x0 = x1 = pos[0, 0]
    y0 = y1 = pos[0, 1]
    z0 = z1 = pos[0, 2]
    for i in range(1, n):
        x, y, z = pos[i, 0], pos[i, 1], pos[i, 2]
        if x < x0:
            x0 = x
        elif x > x1:
            x1 = x
        if y < y0:
            y0 = y
        elif y > y1:
            y1 = y
        if z < z0:
            z0 = z
        elif z > z1:
            z1 = z
    return x0, y0, z0, x1, y1, z1


@njit(cache=True)
def _counting_sort(pos, ox, oy, oz, inv_cell, nxc, nyc, nzc, cid, order,
                   cell_start):
    n = pos.shape[0]
    ncell = nxc * nyc * nzc
    for c in range(ncell + 1):
        cell_start[c] = 0
    for i in range(n):
        cx = int((pos[i, 0] - ox) * inv_cell)
        cy = int((pos[i, 1] - oy) * inv_cell)
        cz = int((pos[i, 2] - oz) * inv_cell)
        c = (cz * nyc + cy) * nxc + cx
        cid[i] = c
        cell_start[c + 1] += 1
    for c in range(ncell):
        cell_start[c + 1] += cell_start[c]
    for i in range(n):  # stable: ascending index within each cell
        c = cid[i]
        order[cell_start[c]] = i
        cell_start[c] += 1
    for c in range(ncell, 0, -1):
        cell_start[c] = cell_start[c - 1]
    cell_start[0] = 0


@njit(cache=True)
def _awake_mask(pos, vel, prev, cx, cy, r2, s2, mask):
    """Sleep rule fused with velocity zeroing; returns the awake count."""
    n = pos.shape[0]
    k = 0
    for i in range(n):
        dx = pos[i, 0] - cx
        dy = pos[i, 1] - cy
        sp = (vel[i, 0] * vel[i, 0] + vel[i, 1] * vel[i, 1]
              + vel[i, 2] * vel[i, 2])
        if dx * dx + dy * dy <= r2 or sp > s2:
            mask[k] = i
            k += 1
        else:
            vel[i, 0] = 0.0
            vel[i, 1] = 0.0
            vel[i, 2] = 0.0
            prev[i, 0] = pos[i, 0]
            prev[i, 1] = pos[i, 1]
            prev[i, 2] = pos[i, 2]
    return k


@njit(cache=True, parallel=True, fastmath=True)
def _build_neighbors(pos, act, order, cell_start, nxc, nyc, nzc,
                     ox, oy, oz, inv_cell, search2, nbr, cnt):
    """Cache, for each awake particle, its neighbors within the search
    radius (cell-walk order, so reuse is deterministic)."""
    n = act.shape[0]
    cap = nbr.shape[1]
    for ii in prange(n):
        i = act[ii]
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        cx = int((xi - ox) * inv_cell)
        cy = int((yi - oy) * inv_cell)
        cz = int((zi - oz) * inv_cell)
        k = 0
        for dz in range(-1, 2):
            z = cz + dz
            if z < 0 or z >= nzc:
                continue
            for dy in range(-1, 2):
                y = cy + dy
                if y < 0 or y >= nyc:
                    continue
                for dx in range(-1, 2):
                    x = cx + dx
                    if x < 0 or x >= nxc:
                        continue
                    c = (z * nyc + y) * nxc + x
                    for idx in range(cell_start[c], cell_start[c + 1]):
                        j = order[idx]
                        if j == i:
                            continue
                        rx = xi - pos[j, 0]
                        ry = yi - pos[j, 1]
                        rz = zi - pos[j, 2]
                        if rx * rx + ry * ry + rz * rz < search2 and k < cap:
                            nbr[ii, k] = j
                            k += 1
        cnt[ii] = k


@njit(cache=True, parallel=True, fastmath=True)
def _density_lambda(pos, mass, act, nbr, cnt, h, rho0, eps_cfm, rho, lam):
    n = act.shape[0]
    h2 = h * h
    poly6_c = 315.0 / (64.0 * math.pi * h ** 9)
    spiky_c = -45.0 / (math.pi * h ** 6)
    for ii in prange(n):
        i = act[ii]
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        rho_i = mass[i] * poly6_c * h2 * h2 * h2  # self-contribution
        gx = gy = gz = 0.0
        grad2 = 0.0
        for k in range(cnt[ii]):
            j = nbr[ii, k]
            rx = xi - pos[j, 0]
            ry = yi - pos[j, 1]
            rz = zi - pos[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 >= h2:
                continue
            d = h2 - r2
            rho_i += mass[j] * poly6_c * d * d * d
            r = math.sqrt(r2)
            if r < 1e-9:
                # coincident pair: deterministic +X tie-break
                r = 1e-9
                rx = 1.0 if i < j else -1.0
                ry = 0.0
                rz = 0.0
            else:
                rx /= r
                ry /= r
                rz /= r
            w = spiky_c * (h - r) * (h - r) / rho0
            gx += w * rx
            gy += w * ry
            gz += w * rz
            grad2 += w * w
        rho[i] = rho_i
        grad2 += gx * gx + gy * gy + gz * gz
        # one-sided: free-surface particles always read a density deficit,
        # so only compression is corrected
        ci = rho_i / rho0 - 1.0
        if ci < 0.0:
            ci = 0.0
        lam[i] = -ci / (grad2 + eps_cfm)


@njit(cache=True, parallel=True, fastmath=True)
def _position_delta(pos, disp, act, nbr, cnt, h, rho0, lam, r_min, mu,
                    mu_bed, dp_max, dp):
    n = act.shape[0]
    h2 = h * h
    contact2 = (1.2 * r_min) * (1.2 * r_min)
    spiky_c = -45.0 / (math.pi * h ** 6)
    for ii in prange(n):
        i = act[ii]
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        sx = sy = sz = 0.0
        fx = fy = fz = 0.0
        hx = hy = hz = 0.0
        slip2 = 0.0
        omax = 0.0
        ncontact = 0
        li = lam[i]
        for k in range(cnt[ii]):
            j = nbr[ii, k]
            rx = xi - pos[j, 0]
            ry = yi - pos[j, 1]
            rz = zi - pos[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 >= h2:
                continue
            r = math.sqrt(r2)
            if r < 1e-9:
                r = 1e-9
                rx = 1.0 if i < j else -1.0
                ry = 0.0
                rz = 0.0
            else:
                rx /= r
                ry /= r
                rz /= r
            w = (li + lam[j]) * spiky_c * (h - r) * (h - r) / rho0
            sx += w * rx
            sy += w * ry
            sz += w * rz
            if r < 0.9 * r_min:
                # hard-core separation with 10% slack so it does not
                # fight the density solver at rest spacing
                ov = 0.5 * (0.9 * r_min - r)
                if ov > omax:
                    omax = ov
                hx += ov * rx
                hy += ov * ry
                hz += ov * rz
            if mu > 0.0 and r2 < contact2:
                # contact friction: damp the tangential part of the
                # pair's relative displacement this substep
                dxr = disp[i, 0] - disp[j, 0]
                dyr = disp[i, 1] - disp[j, 1]
                dzr = disp[i, 2] - disp[j, 2]
                dn = dxr * rx + dyr * ry + dzr * rz
                tx = dxr - dn * rx
                ty = dyr - dn * ry
                tz = dzr - dn * rz
                t2 = tx * tx + ty * ty + tz * tz
                if t2 > slip2:
                    slip2 = t2
                fx += 0.5 * tx
                fy += 0.5 * ty
                fz += 0.5 * tz
                ncontact += 1
        if omax > 0.0:
            # cap the summed hard-core push at the largest single-pair
            # overlap so congested contacts cannot overshoot
            h2c = hx * hx + hy * hy + hz * hz
            if h2c > omax * omax:
                s = omax / math.sqrt(h2c)
                hx *= s
                hy *= s
                hz *= s
            sx += hx
            sy += hy
            sz += hz
        if ncontact > 0:
            # cap the summed correction at the largest single-pair slip so
            # many stacked contacts cannot overshoot and inject jitter
            f2 = fx * fx + fy * fy + fz * fz
            if f2 > slip2 and f2 > 0.0:
                s = mu * math.sqrt(slip2 / f2)
            else:
                s = mu
            sx -= s * fx
            sy -= s * fy
            sz -= s * fz
        if mu_bed > 0.0 and zi < r_min:
            # bed contact: damp tangential slip against the static floor
            sx -= mu_bed * disp[i, 0]
            sy -= mu_bed * disp[i, 1]
        if dp_max > 0.0:
            # cap the per-pass correction so badly overlapped initial
            # states relax instead of exploding
            mag2 = sx * sx + sy * sy + sz * sz
            if mag2 > dp_max * dp_max:
                s = dp_max / math.sqrt(mag2)
                sx *= s
                sy *= s
                sz *= s
        dp[i, 0] = sx
        dp[i, 1] = sy
        dp[i, 2] = sz


@njit(cache=True, parallel=True, fastmath=True)
def _inelastic_contacts(pos, vel, act, nbr, cnt, r_contact, r_floor, vel_out):
    """Zero-restitution contact pass: cancel the approaching normal
    component of each contact pair's relative velocity (own half), so
    unresolved gravity penetration cannot keep a pile vibrating."""
    n = act.shape[0]
    for ii in prange(n):
        i = act[ii]
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        ax = ay = az = 0.0
        amax2 = 0.0
        for k in range(cnt[ii]):
            j = nbr[ii, k]
            rx = xi - pos[j, 0]
            ry = yi - pos[j, 1]
            rz = zi - pos[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 >= r_contact * r_contact:
                continue
            r = math.sqrt(r2)
            if r < 1e-9:
                r = 1e-9
                rx = 1.0 if i < j else -1.0
                ry = 0.0
                rz = 0.0
            else:
                rx /= r
                ry /= r
                rz /= r
            vn = ((vel[i, 0] - vel[j, 0]) * rx + (vel[i, 1] - vel[j, 1]) * ry
                  + (vel[i, 2] - vel[j, 2]) * rz)
            if vn >= 0.0:
                continue  # separating
            c2 = vn * vn * 0.25
            if c2 > amax2:
                amax2 = c2
            ax -= 0.5 * vn * rx
            ay -= 0.5 * vn * ry
            az -= 0.5 * vn * rz
        a2 = ax * ax + ay * ay + az * az
        if a2 > amax2 and a2 > 0.0:
            # cap at the largest single-pair impulse to avoid overshoot
            s = math.sqrt(amax2 / a2)
            ax *= s
            ay *= s
            az *= s
        vz = vel[i, 2] + az
        if zi < r_floor and vz < 0.0:
            vz = 0.0  # floor contact is perfectly inelastic too
        vel_out[i, 0] = vel[i, 0] + ax
        vel_out[i, 1] = vel[i, 1] + ay
        vel_out[i, 2] = vz


@njit(cache=True, parallel=True, fastmath=True)
def _xsph(pos, vel, mass, rho, act, nbr, cnt, h, c_coef, vel_out):
    n = act.shape[0]
    h2 = h * h
    poly6_c = 315.0 / (64.0 * math.pi * h ** 9)
    for ii in prange(n):
        i = act[ii]
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        ax = ay = az = 0.0
        for k in range(cnt[ii]):
            j = nbr[ii, k]
            rx = xi - pos[j, 0]
            ry = yi - pos[j, 1]
            rz = zi - pos[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 >= h2:
                continue
            d = h2 - r2
            w = poly6_c * d * d * d * mass[j] / rho[j]
            ax += w * (vel[j, 0] - vel[i, 0])
            ay += w * (vel[j, 1] - vel[i, 1])
            az += w * (vel[j, 2] - vel[i, 2])
        vel_out[i, 0] = vel[i, 0] + c_coef * ax
        vel_out[i, 1] = vel[i, 1] + c_coef * ay
        vel_out[i, 2] = vel[i, 2] + c_coef * az


@njit(cache=True)
def _splat_heights(pos, r_p, ox, oy, pitch, out):
    ny, nx = out.shape
    rp2 = r_p * r_p
    for k in range(pos.shape[0]):
        x, y, z = pos[k, 0], pos[k, 1], pos[k, 2]
        i0 = int(math.floor((x - r_p - ox) / pitch - 0.5))
        i1 = int(math.floor((x + r_p - ox) / pitch - 0.5)) + 1
        j0 = int(math.floor((y - r_p - oy) / pitch - 0.5))
        j1 = int(math.floor((y + r_p - oy) / pitch - 0.5)) + 1
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if i1 >= nx:
            i1 = nx - 1
        if j1 >= ny:
            j1 = ny - 1
        for j in range(j0, j1 + 1):
            cy = oy + (j + 0.5) * pitch
            for i in range(i0, i1 + 1):
                cx = ox + (i + 0.5) * pitch
                d2 = (cx - x) ** 2 + (cy - y) ** 2
                if d2 < rp2:
                    hgt = z + math.sqrt(rp2 - d2)
                    if hgt > out[j, i]:
                        out[j, i] = hgt


# ---------------------------------------------------------------------------
# operations


_NBR_CAP = 48  # cached neighbors per particle (cell-walk order)


def _get_buf(state: SimState, name: str, shape, dtype=np.float64):
    """Reusable scratch array; grown (never shrunk) on demand."""
    buf = state._bufs.get(name)
    if buf is None or buf.dtype != dtype or \
            any(b < s for b, s in zip(buf.shape, shape)):
        grown = tuple(max(int(1.5 * s) + 1, s) for s in shape)
        state._bufs[name] = buf = np.zeros(grown, dtype=dtype)
    return buf[tuple(slice(0, s) for s in shape)]


def _neighbor_lists(state: SimState, pos: np.ndarray, act: np.ndarray):
    """Uniform-grid neighbor lists over the occupied bounding box
    (cell = h), built once per substep and reused across solver passes."""
    n = pos.shape[0]
    cell = state.material.h
    x0, y0, z0, x1, y1, z1 = _aabb(pos)
    ox, oy, oz = x0 - cell, y0 - cell, z0 - cell
    nxc = int(math.ceil((x1 - x0 + 2 * cell) / cell)) + 1
    nyc = int(math.ceil((y1 - y0 + 2 * cell) / cell)) + 1
    nzc = int(math.ceil((z1 - z0 + 2 * cell) / cell)) + 1
    ncell = nxc * nyc * nzc
    cid = _get_buf(state, "cid", (n,), np.int64)
    order = _get_buf(state, "order", (n,), np.int64)
    cell_start = _get_buf(state, "cell_start", (ncell + 1,), np.int64)
    _counting_sort(pos, ox, oy, oz, 1.0 / cell, nxc, nyc, nzc,
                   cid, order, cell_start)
    nbr = _get_buf(state, "nbr", (len(act), _NBR_CAP), np.int64)
    cnt = _get_buf(state, "cnt", (len(act),), np.int64)
    search = 1.05 * state.material.h  # slack for intra-step motion
    _build_neighbors(pos, act, order, cell_start, nxc, nyc, nzc,
                     ox, oy, oz, 1.0 / cell, search * search, nbr, cnt)
    return nbr, cnt


def compute_density(state: SimState, i: int = None):
    """SPH density estimate for all particles (or one of them)."""
    if state.n == 0:
        return np.zeros(0) if i is None else 0.0
    pos = np.ascontiguousarray(state.pos)
    act = np.arange(state.n, dtype=np.int64)
    nbr, cnt = _neighbor_lists(state, pos, act)
    rho = np.zeros(state.n)
    lam = np.zeros(state.n)
    _density_lambda(pos, state.mass, act, nbr, cnt, state.material.h,
                    state.material.rho0, state.config.eps_cfm, rho, lam)
    return rho if i is None else float(rho[i])


def emit(state: SimState, dt: float) -> int:
    """Generate ``floor(P*dt + carry)`` particles stratified over the
    emitter rectangle, each with velocity (0, 0, -2P)."""
    budget = state.pressure * dt + state.emission_fraction
    k = int(math.floor(budget))
    state.emission_fraction = budget - k
    if k <= 0:
        return 0
    noz = state.nozzle
    side = noz.radius * math.sqrt(2.0)  # square inscribed in the orifice
    t = noz.travel_dir
    nrm = np.array([-t[1], t[0]])
    pts = np.empty((k, 3))
    for m in range(k):
        sx, sy = divmod(state._emit_counter % 4, 2)
        state._emit_counter += 1
        u = (sx + state.rng.random()) * 0.5 * side - 0.5 * side
        w = (sy + state.rng.random()) * 0.5 * side - 0.5 * side
        pts[m, 0] = noz.center[0] + u * t[0] + w * nrm[0]
        pts[m, 1] = noz.center[1] + u * t[1] + w * nrm[1]
        pts[m, 2] = noz.tip_height - _SURF_EPS
    vel = np.zeros((k, 3))
    vel[:, 2] = -2.0 * state.pressure
    state.add_particles(pts, vel)
    return k


def collide_nozzle(pos: np.ndarray, vel: np.ndarray, nozzle: Nozzle,
                   sub: np.ndarray = None):
    """Project particles out of the nozzle cylinder (in place).

    Penetrating particles move to the nearest surface point; the velocity
    component into the surface is removed.  ``sub`` restricts the check
    to an index subset.
    """
    cand = slice(None) if sub is None else sub
    rel = pos[cand, :2] - nozzle.center
    d = np.sqrt((rel ** 2).sum(axis=1))
    inside = (d < nozzle.radius) & (pos[cand, 2] >= nozzle.tip_height - _SURF_EPS)
    if not inside.any():
        return
    if sub is None:
        idx = np.nonzero(inside)[0]
    else:
        idx = sub[inside]
    rel = rel[inside]
    d = d[inside]
    push_r = nozzle.radius - d
    push_z = pos[idx, 2] - (nozzle.tip_height - _SURF_EPS)
    radial = push_r <= push_z
    # radial projection to the cylinder wall
    ir = idx[radial]
    dr = d[radial]
    safe = dr > 1e-12
    unit = np.zeros((len(ir), 2))
    unit[safe] = rel[radial][safe] / dr[safe, None]
    unit[~safe] = (1.0, 0.0)
    pos[ir, :2] = nozzle.center + unit * (nozzle.radius + _SURF_EPS)
    vn = (vel[ir, :2] * unit).sum(axis=1)
    neg = vn < 0
    vel[ir[neg], 0] -= vn[neg] * unit[neg, 0]
    vel[ir[neg], 1] -= vn[neg] * unit[neg, 1]
    # downward projection to the tip plane
    iz = idx[~radial]
    pos[iz, 2] = nozzle.tip_height - _SURF_EPS
    up = vel[iz, 2] > 0
    vel[iz[up], 2] = 0.0


def _project_bounds(state: SimState, pos: np.ndarray, sub: np.ndarray = None):
    x0, y0, x1, y1 = state.bed
    if sub is None:
        np.clip(pos[:, 0], x0, x1, out=pos[:, 0])
        np.clip(pos[:, 1], y0, y1, out=pos[:, 1])
        np.clip(pos[:, 2], 0.0, _Z_TOP, out=pos[:, 2])
    else:
        p = pos[sub]
        np.clip(p[:, 0], x0, x1, out=p[:, 0])
        np.clip(p[:, 1], y0, y1, out=p[:, 1])
        np.clip(p[:, 2], 0.0, _Z_TOP, out=p[:, 2])
        pos[sub] = p


def _awake_indices(state: SimState, nozzle_active: bool) -> np.ndarray:
    """Deterministic sleep rule: particles far from the nozzle and slower
    than the sleep speed are frozen (velocity zeroed, excluded from
    integration) but still act as static neighbors.  With no nozzle every
    particle is awake."""
    cfg = state.config
    if not nozzle_active or cfg.active_radius is None or state.n == 0:
        return np.arange(state.n, dtype=np.int64)
    mask = _get_buf(state, "awake", (state.n,), np.int64)
    k = _awake_mask(state.pos, state.vel, state._prev[:state.n],
                    state.nozzle.center[0], state.nozzle.center[1],
                    cfg.active_radius ** 2, cfg.sleep_speed ** 2, mask)
    return mask[:k]


def step_sim(state: SimState, dt: float = None, nozzle_active: bool = True):
    """One fixed-timestep PBD pass: integrate gravity, predict, emit,
    collide, enforce incompressibility, update velocities, XSPH smooth,
    bed friction."""
    dt = state.config.dt if dt is None else dt
    mat, cfg = state.material, state.config
    n0 = state.n
    act = _awake_indices(state, nozzle_active)
    vel = state.vel
    pos = state.pos
    vel[act, 2] -= GRAVITY * dt
    state._prev[:n0][act] = pos[act]
    pos[act] += vel[act] * dt
    emitted = emit(state, dt)
    if emitted:
        act = np.concatenate([act, np.arange(n0, state.n, dtype=np.int64)])
        pos = state.pos
        vel = state.vel

    if nozzle_active:
        collide_nozzle(pos, vel, state.nozzle, act)
    _project_bounds(state, pos, act)

    if state.n and len(act):
        cpos = np.ascontiguousarray(pos)
        nbr, cnt = _neighbor_lists(state, cpos, act)
        prev = state._prev[:state.n]
        rho = state._rho[:state.n]
        lam = np.zeros(state.n)
        dp = np.zeros((state.n, 3))
        disp = np.zeros_like(cpos)
        for _ in range(cfg.solver_iters):
            disp[act] = cpos[act] - prev[act]
            _density_lambda(cpos, state.mass, act, nbr, cnt,
                            mat.h, mat.rho0, cfg.eps_cfm, rho, lam)
            _position_delta(cpos, disp, act, nbr, cnt,
                            mat.h, mat.rho0, lam, 2.0 * mat.r_p, mat.friction,
                            mat.bed_grip, 2.0 * mat.r_p, dp)
            cpos[act] += dp[act]
            if nozzle_active:
                collide_nozzle(cpos, vel, state.nozzle, act)
            _project_bounds(state, cpos, act)
        pos[:] = cpos
        vel[act] = (pos[act] - state._prev[:state.n][act]) / dt
        speed = np.sqrt((vel[act] ** 2).sum(axis=1))
        fast = speed > cfg.max_speed
        if fast.any():
            vel[act[fast]] *= (cfg.max_speed / speed[fast])[:, None]
        vel_out = np.empty_like(vel)
        for _ in range(1):
            _inelastic_contacts(cpos, np.ascontiguousarray(vel), act, nbr,
                                cnt, 2.2 * mat.r_p, 1.5 * mat.r_p, vel_out)
            vel[act] = vel_out[act]
        if mat.xsph_c > 0.0:
            _xsph(cpos, np.ascontiguousarray(vel), state.mass, rho, act,
                  nbr, cnt, mat.h, mat.xsph_c, vel_out)
            vel[act] = vel_out[act]
        if mat.damping > 0.0:
            # quasi-plastic drag: proxy for unmodeled yield-stress rheology
            vel[act] *= 1.0 - mat.damping
        if mat.bed_friction > 0.0:
            contact = np.zeros(state.n, dtype=bool)
            contact[act] = pos[act, 2] < 1.5 * mat.r_p
            vel[contact, 0] *= 1.0 - mat.bed_friction
            vel[contact, 1] *= 1.0 - mat.bed_friction
    state.time += dt


def solve_incompressibility(state: SimState):
    """Run the constraint passes alone on current positions (no gravity,
    emission, or velocity update).  Returns the compression residual
    max(rho/rho0 - 1, 0) after the passes."""
    if state.n == 0:
        return 0.0
    mat, cfg = state.material, state.config
    act = np.arange(state.n, dtype=np.int64)
    cpos = np.ascontiguousarray(state.pos)
    nbr, cnt = _neighbor_lists(state, cpos, act)
    rho = np.zeros(state.n)
    lam = np.zeros(state.n)
    dp = np.zeros((state.n, 3))
    for _ in range(cfg.solver_iters):
        _density_lambda(cpos, state.mass, act, nbr, cnt, mat.h, mat.rho0,
                        cfg.eps_cfm, rho, lam)
        # density passes only: contact terms belong to dynamic stepping
        _position_delta(cpos, cpos, act, nbr, cnt, mat.h, mat.rho0, lam,
                        0.0, 0.0, 0.0, 0.0, dp)
        cpos += dp
        _project_bounds(state, cpos)
    state.pos[:] = cpos
    _density_lambda(cpos, state.mass, act, nbr, cnt, mat.h, mat.rho0,
                    cfg.eps_cfm, rho, lam)
    state._rho[:state.n] = rho
    return float(np.maximum(rho / mat.rho0 - 1.0, 0.0).max())


def heightmap(state: SimState, grid) -> np.ndarray:
    """Max-splat heightfield: each particle contributes a spherical cap of
    radius r_p; empty cells stay at 0.  Returns (ny, nx) float64 mm."""
    out = np.zeros((grid.ny, grid.nx))
    if state.n:
        _splat_heights(np.ascontiguousarray(state.pos), state.material.r_p,
                       grid.origin[0], grid.origin[1], grid.pitch, out)
    return out


# ---------------------------------------------------------------------------
# persistence

_SNAPSHOT_MAGIC = b"DIWSIM1"


def save_particles(state: SimState, path):
    """Versioned binary snapshot: magic, u64 count, 7 x f32 LE per particle."""
    with open(path, "wb") as f:
        f.write(_SNAPSHOT_MAGIC)
        f.write(struct.pack("<Q", state.n))
        rec = np.empty((state.n, 7), dtype="<f4")
        rec[:, 0:3] = state.pos
        rec[:, 3:6] = state.vel
        rec[:, 6] = state.mass
        f.write(rec.tobytes())


def load_particles(path, state: SimState):
    with open(path, "rb") as f:
        magic = f.read(len(_SNAPSHOT_MAGIC))
        if magic != _SNAPSHOT_MAGIC:
            raise FluidError(f"bad snapshot magic {magic!r}")
        (count,) = struct.unpack("<Q", f.read(8))
        data = np.frombuffer(f.read(count * 28), dtype="<f4")
    if data.size != count * 7:
        raise FluidError("truncated particle snapshot")
    rec = data.reshape(count, 7).astype(np.float64)
    state.n = 0
    state.add_particles(rec[:, 0:3], rec[:, 3:6], rec[:, 6])


def export_heightfield_pgm(heights: np.ndarray, path):
    """16-bit PGM quantized at 1 micron per LSB."""
    q = np.clip(np.round(heights * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def export_heightfield_raw(heights: np.ndarray, path, mm_per_pixel: float):
    """Raw little-endian f32 with a JSON sidecar describing the grid."""
    heights.astype("<f4").tofile(path)
    sidecar = {"ny": int(heights.shape[0]), "nx": int(heights.shape[1]),
               "dtype": "f32le", "mm_per_pixel": mm_per_pixel}
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f)
