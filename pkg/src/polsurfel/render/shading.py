"""Deferred per-pixel shading: cube-map specular along the mirrored view ray,
then the polarized diffuse + specular Stokes composition.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from ..polcore import fresnel_with_grad

ALPHA_THRESHOLD = 1e-3
NORMAL_EPS = 1e-8


def unit_view_rays(cam):
    d = cam.camera_rays()
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def shading_mask(alpha, normal):
    return (alpha > ALPHA_THRESHOLD) & (np.linalg.norm(normal, axis=-1) > NORMAL_EPS)


def _unit(normal, valid):
    nlen = np.linalg.norm(normal, axis=-1, keepdims=True)
    return np.where(valid[..., None], normal / np.where(nlen > 0, nlen, 1.0), 0.0), nlen


def reflect(rd, n):
    return rd - 2 * np.sum(rd * n, -1, keepdims=True) * n


def shade_specular(alpha, normal, cubemap, cam):
    """Specular radiance per pixel and a cache for the backward pass.

    ``normal`` is the raw blended camera-space normal; it is renormalized
    here.  Pixels failing :func:`shading_mask` get zero radiance.
    """
    valid = shading_mask(alpha, normal)
    n, nlen = _unit(normal, valid)
    rd = unit_view_rays(cam)
    refl = reflect(rd, n)
    refl_w = refl @ cam.R
    spec = np.zeros(alpha.shape + (3,))
    spec[valid] = cubemap.sample(refl_w[valid])
    return spec, dict(valid=valid, n=n, nlen=nlen, rd=rd, refl_w=refl_w)


def shade_specular_backward(cache, cubemap, cam, g_spec):
    """Returns (d_texels, d_normal_raw) for an upstream gradient on the specular buffer."""
    valid, n, nlen, rd = cache["valid"], cache["n"], cache["nlen"], cache["rd"]
    d_tex, d_refl_w = cubemap.sample_backward(cache["refl_w"][valid], g_spec[valid])
    d_refl = np.zeros(g_spec.shape)
    d_refl[valid] = d_refl_w @ cam.R.T
    dn = -2 * (np.sum(rd * n, -1, keepdims=True) * d_refl + np.sum(d_refl * n, -1, keepdims=True) * rd)
    return d_tex, _unit_backward(n, nlen, dn, valid)


def _unit_backward(n, nlen, dn, valid):
    out = (dn - n * np.sum(n * dn, -1, keepdims=True)) / np.where(nlen > 0, nlen, 1.0)
    return np.where(valid[..., None], out, 0.0)


def _double_angle(n):
    x, y = n[..., 0], n[..., 1]
    q = x * x + y * y
    ok = q > 1e-20
    qs = np.where(ok, q, 1.0)
    c2 = np.where(ok, (x * x - y * y) / qs, 1.0)
    s2 = np.where(ok, 2 * x * y / qs, 0.0)
    return c2, s2, ok, qs


def stokes_compose(color, spec, alpha, normal, cam, eta):
    """Stokes (s0, s1, s2) from diffuse colour and specular radiance.

    The azimuth enters through cos/sin of twice the camera-space normal
    azimuth atan2(n_y, n_x); the Fresnel angle uses cos = n . v.
    """
    valid = shading_mask(alpha, normal)
    n, nlen = _unit(normal, valid)
    rd = unit_view_rays(cam)
    cos_raw = -np.sum(rd * n, -1)
    cos_t = np.clip(cos_raw, 0.0, 1.0)
    fr, dfr = fresnel_with_grad(cos_t, eta)
    c2, s2, ok, qs = _double_angle(n)
    ex = lambda a: a[..., None]
    s0 = color * ex(fr.t_plus) + spec * ex(fr.r_plus)
    pol = color * ex(fr.t_minus) + spec * ex(fr.r_minus)
    s1 = pol * ex(c2)
    s2_ = -pol * ex(s2)
    cache = dict(valid=valid, n=n, nlen=nlen, rd=rd, cos_raw=cos_raw, fr=fr, dfr=dfr,
                 c2=c2, s2=s2, ok=ok, qs=qs, pol=pol, color=color, spec=spec)
    return s0, s1, s2_, cache


def stokes_compose_backward(cache, g0, g1, g2):
    """Returns (d_color, d_spec, d_normal_raw)."""
    fr, dfr = cache["fr"], cache["dfr"]
    c2, s2, pol = cache["c2"], cache["s2"], cache["pol"]
    color, spec = cache["color"], cache["spec"]
    ex = lambda a: a[..., None]
    gp = g1 * ex(c2) - g2 * ex(s2)
    d_color = g0 * ex(fr.t_plus) + gp * ex(fr.t_minus)
    d_spec = g0 * ex(fr.r_plus) + gp * ex(fr.r_minus)
    d_cos = (np.sum(g0 * color, -1) * dfr.t_plus + np.sum(g0 * spec, -1) * dfr.r_plus
             + np.sum(gp * color, -1) * dfr.t_minus + np.sum(gp * spec, -1) * dfr.r_minus)
    cr = cache["cos_raw"]
    d_cos = np.where((cr > 0) & (cr < 1), d_cos, 0.0)
    n, rd, ok, q = cache["n"], cache["rd"], cache["ok"], cache["qs"]
    dn = -ex(d_cos) * rd
    d_c2 = np.sum(g1 * pol, -1)
    d_s2 = -np.sum(g2 * pol, -1)
    x, y = n[..., 0], n[..., 1]
    q2 = q * q
    dx = d_c2 * 4 * x * y * y / q2 + d_s2 * 2 * y * (y * y - x * x) / q2
    dy = -d_c2 * 4 * x * x * y / q2 + d_s2 * 2 * x * (x * x - y * y) / q2
    dn[..., 0] += np.where(ok, dx, 0.0)
    dn[..., 1] += np.where(ok, dy, 0.0)
    return d_color, d_spec, _unit_backward(n, cache["nlen"], dn, cache["valid"])


# fused per-pixel kernels -----------------------------------------------------
# Same maths as the functions above, evaluated pixel by pixel in compiled
# code.  The array versions remain the reference the kernels are tested
# against.

@nb.njit(cache=True, fastmath=True)
def _fresnel_scalar(c, eta):
    """(T+, T-, R+, R-) and their derivatives w.r.t. the clipped cosine."""
    ct = np.sqrt(1.0 - (1.0 - c * c) / (eta * eta))
    ds_den = c + eta * ct
    dp_den = eta * c + ct
    rs = (c - eta * ct) / ds_den
    rp = (eta * c - ct) / dp_den
    dct = c / (eta * eta * ct)
    drs = ((1 - eta * dct) * ds_den - (c - eta * ct) * (1 + eta * dct)) / (ds_den * ds_den)
    drp = ((eta - dct) * dp_den - (eta * c - ct) * (eta + dct)) / (dp_den * dp_den)
    Rs = rs * rs
    Rp = rp * rp
    dRs = 2 * rs * drs
    dRp = 2 * rp * drp
    return (1.0 - 0.5 * (Rs + Rp), 0.5 * (Rp - Rs), 0.5 * (Rs + Rp), 0.5 * (Rs - Rp),
            -0.5 * (dRs + dRp), 0.5 * (dRp - dRs), 0.5 * (dRs + dRp), 0.5 * (dRs - dRp))


@nb.njit(cache=True, fastmath=True)
def _cube_taps(d0, d1, d2, faces, F):
    a0, a1, a2 = abs(d0), abs(d1), abs(d2)
    ax = 0
    if a1 > a0:
        ax = 1
    if a2 > max(a0, a1):
        ax = 2
    d = (d0, d1, d2)
    major = d[ax]
    face = 2 * ax + (1 if major < 0 else 0)
    ma = abs(major)
    sc = faces[face, 3] * d[faces[face, 2]]
    tc = faces[face, 5] * d[faces[face, 4]]
    x = 0.5 * (sc / ma + 1) * F - 0.5
    y = 0.5 * (tc / ma + 1) * F - 0.5
    xf = np.floor(x)
    yf = np.floor(y)
    fx = x - xf
    fy = y - yf
    x0 = min(max(int(xf), 0), F - 1)
    x1 = min(max(int(xf) + 1, 0), F - 1)
    y0 = min(max(int(yf), 0), F - 1)
    y1 = min(max(int(yf) + 1, 0), F - 1)
    return face, x0, x1, y0, y1, fx, fy, sc, tc, ma


@nb.njit(cache=True, fastmath=True)
def _shade_forward(color, alpha, normal, rd, R, tex, faces, eta, spec_on, alpha_thr, normal_eps):
    h, w = alpha.shape
    F = tex.shape[1]
    spec = np.zeros((h, w, 3))
    s0 = np.zeros((h, w, 3))
    s1 = np.zeros((h, w, 3))
    s2 = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            nx, ny, nz = normal[i, j, 0], normal[i, j, 1], normal[i, j, 2]
            nl = np.sqrt(nx * nx + ny * ny + nz * nz)
            if not (alpha[i, j] > alpha_thr and nl > normal_eps):
                continue
            nx /= nl
            ny /= nl
            nz /= nl
            rx, ry, rz = rd[i, j, 0], rd[i, j, 1], rd[i, j, 2]
            dn = rx * nx + ry * ny + rz * nz
            if spec_on:
                fx_ = rx - 2 * dn * nx
                fy_ = ry - 2 * dn * ny
                fz_ = rz - 2 * dn * nz
                w0 = fx_ * R[0, 0] + fy_ * R[1, 0] + fz_ * R[2, 0]
                w1 = fx_ * R[0, 1] + fy_ * R[1, 1] + fz_ * R[2, 1]
                w2 = fx_ * R[0, 2] + fy_ * R[1, 2] + fz_ * R[2, 2]
                face, x0, x1, y0, y1, fx, fy, _, _, _ = _cube_taps(w0, w1, w2, faces, F)
                for c in range(3):
                    spec[i, j, c] = ((1 - fy) * ((1 - fx) * tex[face, y0, x0, c] + fx * tex[face, y0, x1, c])
                                     + fy * ((1 - fx) * tex[face, y1, x0, c] + fx * tex[face, y1, x1, c]))
            cos = min(max(-dn, 0.0), 1.0)
            tp, tm, rp, rm, _, _, _, _ = _fresnel_scalar(cos, eta)
            q = nx * nx + ny * ny
            c2 = 1.0
            sn2 = 0.0
            if q > 1e-20:
                c2 = (nx * nx - ny * ny) / q
                sn2 = 2 * nx * ny / q
            for c in range(3):
                s0[i, j, c] = color[i, j, c] * tp + spec[i, j, c] * rp
                pol = color[i, j, c] * tm + spec[i, j, c] * rm
                s1[i, j, c] = pol * c2
                s2[i, j, c] = -pol * sn2
    return spec, s0, s1, s2


@nb.njit(cache=True, fastmath=True)
def _shade_backward(color, alpha, normal, rd, R, tex, faces, eta, spec_on, alpha_thr, normal_eps,
                    spec, g0, g1, g2, gs):
    h, w = alpha.shape
    F = tex.shape[1]
    d_color = np.zeros((h, w, 3))
    d_normal = np.zeros((h, w, 3))
    d_tex = np.zeros(tex.shape)
    for i in range(h):
        for j in range(w):
            nx, ny, nz = normal[i, j, 0], normal[i, j, 1], normal[i, j, 2]
            nl = np.sqrt(nx * nx + ny * ny + nz * nz)
            if not (alpha[i, j] > alpha_thr and nl > normal_eps):
                continue
            nx /= nl
            ny /= nl
            nz /= nl
            rx, ry, rz = rd[i, j, 0], rd[i, j, 1], rd[i, j, 2]
            dn = rx * nx + ry * ny + rz * nz
            cos_raw = -dn
            cos = min(max(cos_raw, 0.0), 1.0)
            tp, tm, rp, rm, dtp, dtm, drp, drm = _fresnel_scalar(cos, eta)
            q = nx * nx + ny * ny
            ok = q > 1e-20
            c2 = 1.0
            sn2 = 0.0
            if ok:
                c2 = (nx * nx - ny * ny) / q
                sn2 = 2 * nx * ny / q
            d_cos = 0.0
            d_c2 = 0.0
            d_s2 = 0.0
            gsp0 = 0.0
            gsp1 = 0.0
            gsp2 = 0.0
            for c in range(3):
                col = color[i, j, c]
                sp = spec[i, j, c]
                gp = g1[i, j, c] * c2 - g2[i, j, c] * sn2
                d_color[i, j, c] = g0[i, j, c] * tp + gp * tm
                dsp = g0[i, j, c] * rp + gp * rm + gs[i, j, c]
                if c == 0:
                    gsp0 = dsp
                elif c == 1:
                    gsp1 = dsp
                else:
                    gsp2 = dsp
                d_cos += g0[i, j, c] * (col * dtp + sp * drp) + gp * (col * dtm + sp * drm)
                pol = col * tm + sp * rm
                d_c2 += g1[i, j, c] * pol
                d_s2 -= g2[i, j, c] * pol
            if not (cos_raw > 0 and cos_raw < 1):
                d_cos = 0.0
            gnx = -d_cos * rx
            gny = -d_cos * ry
            gnz = -d_cos * rz
            if ok:
                q2 = q * q
                gnx += d_c2 * 4 * nx * ny * ny / q2 + d_s2 * 2 * ny * (ny * ny - nx * nx) / q2
                gny += -d_c2 * 4 * nx * nx * ny / q2 + d_s2 * 2 * nx * (nx * nx - ny * ny) / q2
            if spec_on:
                fx_ = rx - 2 * dn * nx
                fy_ = ry - 2 * dn * ny
                fz_ = rz - 2 * dn * nz
                w0 = fx_ * R[0, 0] + fy_ * R[1, 0] + fz_ * R[2, 0]
                w1 = fx_ * R[0, 1] + fy_ * R[1, 1] + fz_ * R[2, 1]
                w2 = fx_ * R[0, 2] + fy_ * R[1, 2] + fz_ * R[2, 2]
                face, x0, x1, y0, y1, fx, fy, sc, tc, ma = _cube_taps(w0, w1, w2, faces, F)
                gx = 0.0
                gy = 0.0
                for c in range(3):
                    g = gsp0 if c == 0 else (gsp1 if c == 1 else gsp2)
                    d_tex[face, y0, x0, c] += g * (1 - fy) * (1 - fx)
                    d_tex[face, y0, x1, c] += g * (1 - fy) * fx
                    d_tex[face, y1, x0, c] += g * fy * (1 - fx)
                    d_tex[face, y1, x1, c] += g * fy * fx
                    t00 = tex[face, y0, x0, c]
                    t01 = tex[face, y0, x1, c]
                    t10 = tex[face, y1, x0, c]
                    t11 = tex[face, y1, x1, c]
                    gx += g * ((1 - fy) * (t01 - t00) + fy * (t11 - t10))
                    gy += g * ((1 - fx) * (t10 - t00) + fx * (t11 - t01))
                gx *= F
                gy *= F
                dw = np.zeros(3)
                dw[faces[face, 2]] += gx * 0.5 / ma * faces[face, 3]
                dw[faces[face, 4]] += gy * 0.5 / ma * faces[face, 5]
                dw[faces[face, 0]] += (gx * (-0.5 * sc / (ma * ma)) + gy * (-0.5 * tc / (ma * ma))) * faces[face, 1]
                # world -> camera: d_refl = dw @ R.T
                dr0 = dw[0] * R[0, 0] + dw[1] * R[0, 1] + dw[2] * R[0, 2]
                dr1 = dw[0] * R[1, 0] + dw[1] * R[1, 1] + dw[2] * R[1, 2]
                dr2 = dw[0] * R[2, 0] + dw[1] * R[2, 1] + dw[2] * R[2, 2]
                drn = dr0 * nx + dr1 * ny + dr2 * nz
                gnx += -2 * (dn * dr0 + drn * rx)
                gny += -2 * (dn * dr1 + drn * ry)
                gnz += -2 * (dn * dr2 + drn * rz)
            # through the normalization
            proj = gnx * nx + gny * ny + gnz * nz
            d_normal[i, j, 0] = (gnx - nx * proj) / nl
            d_normal[i, j, 1] = (gny - ny * proj) / nl
            d_normal[i, j, 2] = (gnz - nz * proj) / nl
    return d_color, d_normal, d_tex


_FACE_TABLE = None


def _faces():
    global _FACE_TABLE
    if _FACE_TABLE is None:
        from .cubemap import _FACES
        _FACE_TABLE = np.ascontiguousarray(_FACES, dtype=np.int64)
    return _FACE_TABLE


def shade(color, alpha, normal, cam, cubemap, eta, specular=True):
    """Fused specular lookup and Stokes composition.

    Returns ``(spec, s0, s1, s2, cache)``.  With ``specular=False`` the
    specular radiance is zero but the Fresnel-weighted diffuse part is still
    polarized.  Pixels failing :func:`shading_mask` are black, as in the
    array implementation (zero normal means grazing incidence, where the
    Fresnel transmission vanishes).
    """
    rd = unit_view_rays(cam)
    tex = cubemap.texels if specular else np.zeros((6, 1, 1, 3))
    args = (np.ascontiguousarray(color, dtype=np.float64), np.ascontiguousarray(alpha, dtype=np.float64),
            np.ascontiguousarray(normal, dtype=np.float64), rd, np.ascontiguousarray(cam.R),
            np.ascontiguousarray(tex), _faces(), float(eta), bool(specular), ALPHA_THRESHOLD, NORMAL_EPS)
    spec, s0, s1, s2 = _shade_forward(*args)
    return spec, s0, s1, s2, dict(args=args, spec=spec)


def shade_backward(cache, g0, g1, g2, g_spec=None):
    """Returns ``(d_color, d_normal_raw, d_texels)`` for gradients on s0, s1, s2 (and spec)."""
    args = cache["args"]
    shape = args[0].shape
    z = lambda g: np.zeros(shape) if g is None else np.ascontiguousarray(g, dtype=np.float64)
    return _shade_backward(*args, cache["spec"], z(g0), z(g1), z(g2), z(g_spec))
