"""Slow scalar re-implementations used as test oracles.

Written from the defining formulas with plain loops and math-module calls;
they share no code with the package beyond the parameter containers.
"""
import math

import numpy as np

SH_C0 = 0.28209479177387814
DILATION = 0.3
GRAZING = 0.05
NEAR = 0.01


def quat_rotmat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / math.sqrt(sum(c * c for c in q))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project_scalar(xyz, log_scale, quat, opacity_logit, f_dc, cam, cutoff=3.0):
    """One surfel: returns dict(u, conic, depth, dgrad, normal, opacity, color) or None if culled."""
    p = cam.R @ (np.asarray(xyz) - cam.center)
    if p[2] <= NEAR:
        return None
    z = p[2]
    Rot = quat_rotmat(quat)
    S = np.diag([math.exp(log_scale[0]), math.exp(log_scale[1]), 0.0])
    cov3 = Rot @ S @ S @ Rot.T
    J = np.array([[cam.fx / z, 0, -cam.fx * p[0] / z ** 2], [0, cam.fy / z, -cam.fy * p[1] / z ** 2]])
    cov = J @ cam.R @ cov3 @ cam.R.T @ J.T + DILATION * np.eye(2)
    u = np.array([cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy])
    lam = np.linalg.eigvalsh(cov).max()
    r = math.ceil(cutoff * math.sqrt(lam))
    if u[0] + r < 0 or u[0] - r > cam.width - 1 or u[1] + r < 0 or u[1] - r > cam.height - 1:
        return None
    n = cam.R @ Rot[:, 2]
    den = float(n @ p)
    # tangent-plane depth along pixel rays: z(u) = (n.p) / (n.ray(u)); derivative at u_i
    if abs(den) < GRAZING * np.linalg.norm(p):
        den = math.copysign(GRAZING * np.linalg.norm(p), den) if den != 0 else GRAZING * np.linalg.norm(p)
    dgrad = np.array([-z * z * n[0] / (cam.fx * den), -z * z * n[1] / (cam.fy * den)])
    if n @ p > 0:
        n = -n
    inv = np.linalg.inv(cov)
    return dict(u=u, conic=inv, depth=z, dgrad=dgrad, normal=n,
                opacity=1 / (1 + math.exp(-opacity_logit)),
                color=np.maximum(SH_C0 * np.asarray(f_dc) + 0.5, 0.0))


def composite_scalar(surfels, cam, cutoff=3.0, t_min=1e-4):
    """Front-to-back alpha compositing evaluated independently at every pixel."""
    prims = []
    for i in range(len(surfels)):
        pr = project_scalar(surfels.xyz[i], surfels.log_scale[i], surfels.quat[i],
                            surfels.opacity_logit[i], surfels.f_dc[i], cam, cutoff)
        if pr is not None:
            prims.append((pr["depth"], i, pr))
    prims.sort(key=lambda t: (t[0], t[1]))
    h, w = cam.height, cam.width
    color, alpha = np.zeros((h, w, 3)), np.zeros((h, w))
    depth, normal = np.zeros((h, w)), np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            T = 1.0
            c, d, n = [0.0] * 3, 0.0, [0.0] * 3
            for _, _, pr in prims:
                dx, dy = x - pr["u"][0], y - pr["u"][1]
                q = pr["conic"]
                m = q[0, 0] * dx * dx + 2 * q[0, 1] * dx * dy + q[1, 1] * dy * dy
                if m > cutoff * cutoff or m < 0:
                    continue
                a = pr["opacity"] * math.exp(-0.5 * m)
                wgt = T * a
                for ch in range(3):
                    c[ch] += wgt * pr["color"][ch]
                    n[ch] += wgt * pr["normal"][ch]
                d += wgt * max(pr["depth"] + pr["dgrad"][0] * dx + pr["dgrad"][1] * dy, NEAR)
                T *= 1 - a
                if T < t_min:
                    break
            acc = 1 - T
            color[y, x], alpha[y, x] = c, acc
            if acc > 1e-8:
                depth[y, x] = d / acc
                normal[y, x] = np.array(n) / acc
    return color, alpha, depth, normal


def fresnel_scalar(cos_i, eta):
    """Classical Fresnel reflectances from angles; returns (T+, T-, R+, R-)."""
    ti = math.acos(min(1.0, max(0.0, cos_i)))
    tt = math.asin(math.sin(ti) / eta)
    ci, ct = math.cos(ti), math.cos(tt)
    rs = ((ci - eta * ct) / (ci + eta * ct)) ** 2
    rp = ((eta * ci - ct) / (eta * ci + ct)) ** 2
    return 1 - (rs + rp) / 2, (rp - rs) / 2, (rs + rp) / 2, (rs - rp) / 2


def cube_lookup_scalar(tex, d):
    """Bilinear cube-map lookup (clamped within a face), texel [face, row=v, col=u]."""
    F = tex.shape[1]
    ax = int(np.argmax(np.abs(d)))
    s = 1 if d[ax] >= 0 else -1
    ma = abs(d[ax])
    x, y, zc = d / ma
    if ax == 0:
        face, sc, tc = (0, -zc, -y) if s > 0 else (1, zc, -y)
    elif ax == 1:
        face, sc, tc = (2, x, zc) if s > 0 else (3, x, -zc)
    else:
        face, sc, tc = (4, x, -y) if s > 0 else (5, -x, -y)
    fu, fv = 0.5 * (sc + 1) * F - 0.5, 0.5 * (tc + 1) * F - 0.5
    x0, y0 = math.floor(fu), math.floor(fv)
    ax_, ay_ = fu - x0, fv - y0
    cl = lambda i: min(max(i, 0), F - 1)
    out = np.zeros(3)
    for yy, wy in ((y0, 1 - ay_), (y0 + 1, ay_)):
        for xx, wx in ((x0, 1 - ax_), (x0 + 1, ax_)):
            out += wy * wx * tex[face, cl(yy), cl(xx)]
    return out


def shade_scalar(color, alpha, normal, cam, tex, eta, alpha_min=1e-3):
    """Per-pixel specular lookup and Stokes composition with scalar math."""
    h, w = alpha.shape
    spec, s0, s1, s2 = (np.zeros((h, w, 3)) for _ in range(4))
    for y in range(h):
        for x in range(w):
            nl = np.linalg.norm(normal[y, x])
            if alpha[y, x] <= alpha_min or nl <= 1e-8:
                continue
            n = normal[y, x] / nl
            rd = np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0])
            rd /= np.linalg.norm(rd)
            r = rd - 2 * (rd @ n) * n
            L = cube_lookup_scalar(tex, cam.R.T @ r)
            tp, tm, rp, rm = fresnel_scalar(-(rd @ n), eta)
            phi = math.atan2(n[1], n[0])
            spec[y, x] = L
            s0[y, x] = color[y, x] * tp + L * rp
            pol = color[y, x] * tm + L * rm
            s1[y, x] = pol * math.cos(2 * phi)
            s2[y, x] = -pol * math.sin(2 * phi)
    return spec, s0, s1, s2


def sphere_normal(point, center=(0, 0, 0)):
    v = np.asarray(point, dtype=np.float64) - center
    return v / np.linalg.norm(v)
