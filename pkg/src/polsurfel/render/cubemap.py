"""Learnable RGB environment cube map with bilinear lookup and its adjoint."""
from __future__ import annotations

import numpy as np

FACE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")

# per face: (major axis, major sign, sc axis, sc sign, tc axis, tc sign)
_FACES = np.array([
    (0, 1, 2, -1, 1, -1),
    (0, -1, 2, 1, 1, -1),
    (1, 1, 0, 1, 2, 1),
    (1, -1, 0, 1, 2, -1),
    (2, 1, 0, 1, 1, -1),
    (2, -1, 0, -1, 1, -1),
])


def face_coords(dirs):
    """Face index and continuous texel-space (u, v) in [0, 1] per direction."""
    d = np.asarray(dirs, dtype=np.float64)
    ax = np.argmax(np.abs(d), axis=-1)
    major = np.take_along_axis(d, ax[..., None], -1)[..., 0]
    face = 2 * ax + (major < 0)
    tab = _FACES[face]
    ma = np.abs(major)
    sc = tab[..., 3] * np.take_along_axis(d, tab[..., 2:3], -1)[..., 0]
    tc = tab[..., 5] * np.take_along_axis(d, tab[..., 4:5], -1)[..., 0]
    return face, 0.5 * (sc / ma + 1), 0.5 * (tc / ma + 1), (tab, sc, tc, ma)


def face_directions(res):
    """Unit directions through the texel centres of every face, (6, F, F, 3)."""
    t = (np.arange(res) + 0.5) / res * 2 - 1
    tc, sc = np.meshgrid(t, t, indexing="ij")
    out = np.zeros((6, res, res, 3))
    for f, (a, s, ai, si, bi, sb) in enumerate(_FACES):
        out[f, ..., a] = s
        out[f, ..., ai] = si * sc
        out[f, ..., bi] = sb * tc
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


class Cubemap:
    """Six F x F RGB faces ordered px, nx, py, ny, pz, nz; texel [row=v, col=u]."""

    def __init__(self, texels):
        self.texels = np.asarray(texels, dtype=np.float64)
        if self.texels.ndim != 4 or self.texels.shape[0] != 6 or self.texels.shape[1] != self.texels.shape[2]:
            raise ValueError(f"cube map texels must be (6, F, F, 3), got {self.texels.shape}")

    @classmethod
    def constant(cls, value, res=64):
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (6, res, res, 3)).copy())

    @classmethod
    def from_function(cls, fn, res=64):
        return cls(fn(face_directions(res)))

    @property
    def res(self):
        return self.texels.shape[1]

    def clamp(self):
        np.maximum(self.texels, 0.0, out=self.texels)

    def _taps(self, dirs):
        face, u, v, geo = face_coords(dirs)
        F = self.res
        x = u * F - 0.5
        y = v * F - 0.5
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        xs = (np.clip(x0, 0, F - 1), np.clip(x0 + 1, 0, F - 1))
        ys = (np.clip(y0, 0, F - 1), np.clip(y0 + 1, 0, F - 1))
        return face, xs, ys, fx, fy, geo

    def sample(self, dirs):
        face, xs, ys, fx, fy, _ = self._taps(dirs)
        t = self.texels
        fx = fx[..., None]
        fy = fy[..., None]
        return ((1 - fy) * ((1 - fx) * t[face, ys[0], xs[0]] + fx * t[face, ys[0], xs[1]])
                + fy * ((1 - fx) * t[face, ys[1], xs[0]] + fx * t[face, ys[1], xs[1]]))

    def sample_backward(self, dirs, grad_out):
        """Gradients of ``sum(grad_out * sample(dirs))`` w.r.t. texels and ``dirs``."""
        dirs = np.asarray(dirs, dtype=np.float64)
        face, xs, ys, fx, fy, (tab, sc, tc, ma) = self._taps(dirs)
        t = self.texels
        F = self.res
        g = np.asarray(grad_out, dtype=np.float64)
        fxe, fye = fx[..., None], fy[..., None]
        n_tex = 6 * F * F
        d_flat = np.zeros((n_tex, 3))
        g2 = g.reshape(-1, 3)
        for yi, wy in ((ys[0], 1 - fy), (ys[1], fy)):
            for xi, wx in ((xs[0], 1 - fx), (xs[1], fx)):
                flat = ((face * F + yi) * F + xi).reshape(-1)
                w = (wy * wx).reshape(-1)
                for c in range(3):
                    d_flat[:, c] += np.bincount(flat, g2[:, c] * w, minlength=n_tex)
        d_tex = d_flat.reshape(t.shape)
        t00, t01 = t[face, ys[0], xs[0]], t[face, ys[0], xs[1]]
        t10, t11 = t[face, ys[1], xs[0]], t[face, ys[1], xs[1]]
        dval_dx = (1 - fye) * (t01 - t00) + fye * (t11 - t10)
        dval_dy = (1 - fxe) * (t10 - t00) + fxe * (t11 - t01)
        # a tap outside the face is clamped, so the lookup is flat there
        gx = np.sum(g * dval_dx, -1) * F
        gy = np.sum(g * dval_dy, -1) * F
        d_dirs = np.zeros_like(dirs)
        major_ax = tab[..., 0]
        major_s = tab[..., 1]
        du_dsc = 0.5 / ma
        dv_dtc = 0.5 / ma
        du_dma = -0.5 * sc / ma ** 2
        dv_dma = -0.5 * tc / ma ** 2
        np.put_along_axis(d_dirs, tab[..., 2:3], (gx * du_dsc * tab[..., 3])[..., None], -1)
        cur = np.take_along_axis(d_dirs, tab[..., 4:5], -1)
        np.put_along_axis(d_dirs, tab[..., 4:5], cur + (gy * dv_dtc * tab[..., 5])[..., None], -1)
        cur = np.take_along_axis(d_dirs, major_ax[..., None], -1)
        np.put_along_axis(d_dirs, major_ax[..., None],
                          cur + ((gx * du_dma + gy * dv_dma) * major_s)[..., None], -1)
        return d_tex, d_dirs
