"""Forward rendering of surfels to colour/Stokes/depth/normal buffers and the
matching reverse-mode pass back to surfel and cube-map parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..polcore import DEFAULT_ETA
from ..surfel import Camera, SurfelSet, project, project_backward
from .cubemap import FACE_NAMES, Cubemap
from .raster import T_MIN, TILE, RasterContext, rasterize_reference
from .shading import ALPHA_THRESHOLD, shade, shade_backward, shading_mask

__all__ = ["Cubemap", "FACE_NAMES", "RenderBuffers", "rasterize", "render", "backward",
           "rasterize_reference", "ALPHA_THRESHOLD", "TILE", "T_MIN"]


@dataclass
class RenderBuffers:
    color: np.ndarray          # (H, W, 3) diffuse colour, premultiplied by coverage
    alpha: np.ndarray          # (H, W)
    depth: np.ndarray          # (H, W) camera z, normalized by alpha
    normal: np.ndarray         # (H, W, 3) camera space, normalized by alpha (not unit)
    specular: Optional[np.ndarray] = None
    s0: Optional[np.ndarray] = None
    s1: Optional[np.ndarray] = None
    s2: Optional[np.ndarray] = None
    polarized: bool = False
    camera: Optional[Camera] = None
    _ctx: object = field(default=None, repr=False)
    _shade_cache: dict = field(default=None, repr=False)
    screen_grad: Optional[dict] = field(default=None, repr=False)

    def normal_world(self):
        return self.normal @ self.camera.R

    def valid(self):
        return shading_mask(self.alpha, self.normal)


def rasterize(surfels: SurfelSet, cam: Camera, cutoff_sigma=3.0, tile=TILE) -> RenderBuffers:
    proj = project(surfels, cam, cutoff_sigma)
    ctx = RasterContext(proj, cam.width, cam.height, cutoff_sigma=cutoff_sigma, tile=tile)
    c, a, d, n = ctx.forward()
    return RenderBuffers(c, a, d, n, camera=cam, _ctx=ctx)


def render(surfels: SurfelSet, cam: Camera, cubemap: Optional[Cubemap] = None,
           eta: float = DEFAULT_ETA, polarized: bool = True, cutoff_sigma=3.0) -> RenderBuffers:
    """Rasterize, then shade.

    With ``polarized=False`` (warm-up) the diffuse colour is the whole
    image: s0 = colour and s1 = s2 = 0, with no specular lookup.
    """
    buf = rasterize(surfels, cam, cutoff_sigma)
    if polarized:
        if cubemap is None:
            raise ValueError("polarized rendering needs a cube map")
        buf.specular, buf.s0, buf.s1, buf.s2, buf._shade_cache = shade(
            buf.color, buf.alpha, buf.normal, cam, cubemap, eta)
        buf.polarized = True
    else:
        buf.specular = np.zeros_like(buf.color)
        buf.s0 = buf.color.copy()
        buf.s1 = np.zeros_like(buf.color)
        buf.s2 = np.zeros_like(buf.color)
    return buf


def backward(buf: RenderBuffers, surfels: SurfelSet, cubemap: Optional[Cubemap] = None, **grads):
    """Gradients of a scalar loss given its gradients on buffers.

    Keyword gradients may name any of ``s0, s1, s2, specular, color, alpha,
    depth, normal``.  Returns ``(surfel_grads, texel_grad)``; ``texel_grad``
    is ``None`` when the render was unpolarized.
    """
    h, w = buf.alpha.shape
    z3 = lambda: np.zeros((h, w, 3))
    g_color = grads.get("color")
    g_color = z3() if g_color is None else np.array(g_color, dtype=np.float64)
    g_normal = grads.get("normal")
    g_normal = z3() if g_normal is None else np.array(g_normal, dtype=np.float64)
    d_tex = None
    if buf.polarized:
        dc, dn, d_tex = shade_backward(buf._shade_cache, grads.get("s0"), grads.get("s1"),
                                       grads.get("s2"), grads.get("specular"))
        g_color += dc
        g_normal += dn
    elif grads.get("s0") is not None:
        g_color += grads["s0"]
    screen = buf._ctx.backward(g_color, grads.get("alpha"), grads.get("depth"), g_normal)
    buf.screen_grad = screen
    return project_backward(surfels, buf._ctx.proj, screen), d_tex
