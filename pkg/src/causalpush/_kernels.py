"""Compiled per-environment contact loop; mirrors ``sim2d.step_reference`` step for step."""
import math

import numba
import numpy as np


@numba.njit(cache=True)
def _wrap(a):
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@numba.njit(cache=True)
def _disc_box(px, py, radius, bx, by, bpsi, hx, hy):
    c = math.cos(bpsi)
    s = math.sin(bpsi)
    dx = px - bx
    dy = py - by
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    cx = min(max(qx, -hx), hx)
    cy = min(max(qy, -hy), hy)
    ex = qx - cx
    ey = qy - cy
    dist = math.hypot(ex, ey)
    if dist > 1e-12:
        nx = ex / dist
        ny = ey / dist
        depth = radius - dist
        ptx = cx
        pty = cy
    else:
        g0 = hx - qx
        g1 = hx + qx
        g2 = hy - qy
        g3 = hy + qy
        face = 0
        gmin = g0
        if g1 < gmin:
            face = 1
            gmin = g1
        if g2 < gmin:
            face = 2
            gmin = g2
        if g3 < gmin:
            face = 3
            gmin = g3
        nx = 1.0 if face == 0 else (-1.0 if face == 1 else 0.0)
        ny = 1.0 if face == 2 else (-1.0 if face == 3 else 0.0)
        depth = radius + gmin
        ptx = hx if face == 0 else (-hx if face == 1 else qx)
        pty = hy if face == 2 else (-hy if face == 3 else qy)
    if depth < 0.0:
        depth = 0.0
    wnx = -(c * nx - s * ny)
    wny = -(s * nx + c * ny)
    wpx = bx + c * ptx - s * pty
    wpy = by + s * ptx + c * pty
    return depth, wnx, wny, wpx, wpy


@numba.njit(cache=True)
def _box_box(ax, ay, apsi, ahx, ahy, bx, by, bpsi, bhx, bhy):
    ca = math.cos(apsi)
    sa = math.sin(apsi)
    cb = math.cos(bpsi)
    sb = math.sin(bpsi)
    axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
    dx = ax - bx
    dy = ay - by
    best = 1e300
    bnx = 0.0
    bny = 0.0
    for k in range(4):
        ux, uy = axes[k]
        ra = ahx * abs(ca * ux + sa * uy) + ahy * abs(-sa * ux + ca * uy)
        rb = bhx * abs(cb * ux + sb * uy) + bhy * abs(-sb * ux + cb * uy)
        proj = dx * ux + dy * uy
        ov = ra + rb - abs(proj)
        if ov < best:
            best = ov
            sg = 1.0 if proj >= 0 else -1.0
            bnx = ux * sg
            bny = uy * sg
    if best < 0.0:
        best = 0.0
    return best, bnx, bny


@numba.njit(cache=True)
def step_batch(robot_pose, robot_vel, object_pose, object_vel, action, walls,
               half, radius, object_mass, friction, dt, n_sub,
               tau, max_accel, robot_mass, lin_damp, quad_damp, ang_damp, rot_comp, n_iter):
    n = robot_pose.shape[0]
    rp = robot_pose.copy()
    rv = robot_vel.copy()
    op = object_pose.copy()
    ov = object_vel.copy()
    gyration2 = 2.0 * half * half / 3.0
    share = robot_mass / (robot_mass + object_mass)
    ang_fac = max(0.0, 1.0 - ang_damp * dt)
    n_walls = walls.shape[0]
    for i in range(n):
        for _ in range(n_sub):
            vcmd = np.empty(3)
            for j in range(3):
                dvm = max_accel[j] * dt
                dv = (action[i, j] - rv[i, j]) * (dt / tau)
                dv = min(max(dv, -dvm), dvm)
                vcmd[j] = rv[i, j] + dv
            pr0x = rp[i, 0]
            pr0y = rp[i, 1]
            prx = pr0x + vcmd[0] * dt
            pry = pr0y + vcmd[1] * dt
            psir = _wrap(rp[i, 2] + vcmd[2] * dt)

            po0x = op[i, 0]
            po0y = op[i, 1]
            psio0 = op[i, 2]
            speed = math.hypot(ov[i, 0], ov[i, 1])
            fac = 1.0 - friction * (lin_damp + quad_damp * speed) * dt
            fac = min(max(fac, 0.0), 1.0)
            pox = po0x + ov[i, 0] * fac * dt
            poy = po0y + ov[i, 1] * fac * dt
            psio = psio0 + ov[i, 2] * ang_fac * dt

            for it in range(n_iter):
                final = it == n_iter - 1
                depth, nx, ny, cx, cy = _disc_box(prx, pry, radius, pox, poy, psio, half, half)
                if final:
                    prx -= depth * nx
                    pry -= depth * ny
                else:
                    pushx = share * depth * nx
                    pushy = share * depth * ny
                    lx = cx - pox
                    ly = cy - poy
                    psio += rot_comp * (lx * pushy - ly * pushx) / gyration2
                    pox += pushx
                    poy += pushy
                    prx -= (1.0 - share) * depth * nx
                    pry -= (1.0 - share) * depth * ny
                for w in range(n_walls):
                    if not final:
                        d_o, nox, noy = _box_box(pox, poy, psio, half, half,
                                                 walls[w, 0], walls[w, 1], walls[w, 2], walls[w, 3], walls[w, 4])
                        pox += d_o * nox
                        poy += d_o * noy
                    d_r, nrx, nry, _, _ = _disc_box(prx, pry, radius, walls[w, 0], walls[w, 1], walls[w, 2],
                                                    walls[w, 3], walls[w, 4])
                    prx -= d_r * nrx
                    pry -= d_r * nry
            psio = _wrap(psio)
            rv[i, 0] = (prx - pr0x) / dt
            rv[i, 1] = (pry - pr0y) / dt
            rv[i, 2] = vcmd[2]
            rp[i, 0] = prx
            rp[i, 1] = pry
            rp[i, 2] = psir
            ov[i, 0] = (pox - po0x) / dt
            ov[i, 1] = (poy - po0y) / dt
            ov[i, 2] = _wrap(psio - psio0) / dt
            op[i, 0] = pox
            op[i, 1] = poy
            op[i, 2] = psio
    return rp, rv, op, ov
