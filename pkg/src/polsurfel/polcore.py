"""Polarization math: Stokes vectors, angle of polarization, Fresnel terms and
the diffuse/specular polarized reflectance used to form rendered Stokes images.

Angles follow the image frame of the camera (x right, y down).  Only linear
polarization is modelled, so the fourth Stokes component is always zero and
is never stored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ETA = 1.5
DOLP_EPS = 1e-6


class PolarizationInputError(ValueError):
    pass


@dataclass
class PolarizedQuadruple:
    """Four intensity rasters behind linear polarizers at 0, 45, 90, 135 degrees."""

    i0: np.ndarray
    i45: np.ndarray
    i90: np.ndarray
    i135: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.i0, self.i45, self.i90, self.i135)}
        if len(shapes) != 1:
            raise PolarizationInputError(f"quadruple rasters differ in shape: {sorted(shapes)}")
        for a in (self.i0, self.i45, self.i90, self.i135):
            a = np.asarray(a)
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise PolarizationInputError("quadruple rasters must be finite and non-negative")

    @property
    def shape(self):
        return np.shape(self.i0)


@dataclass
class StokesImage:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    @property
    def shape(self):
        return np.shape(self.s0)

    def dolp(self) -> np.ndarray:
        return dolp(self.s0, self.s1, self.s2)

    def aop(self):
        return aop(self.s1, self.s2)


def stokes_from_quadruple(q: PolarizedQuadruple) -> StokesImage:
    i0, i45, i90, i135 = (np.asarray(a, dtype=np.float64) for a in (q.i0, q.i45, q.i90, q.i135))
    return StokesImage(0.5 * (i0 + i45 + i90 + i135), i0 - i90, i45 - i135)


def intensity_at(s: StokesImage, theta: float) -> np.ndarray:
    """Intensity seen through an ideal linear polarizer at angle ``theta``."""
    return 0.5 * (s.s0 + s.s1 * np.cos(2 * theta) + s.s2 * np.sin(2 * theta))


def quadruple_from_stokes(s: StokesImage) -> PolarizedQuadruple:
    return PolarizedQuadruple(*(np.maximum(intensity_at(s, t), 0.0)
                                for t in (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)))


def aop(s1, s2):
    """Angle of polarization in [0, pi) and a validity flag.

    Pixels with s1 = s2 = 0 carry no linear polarization; they get angle 0 and
    ``valid = False``.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    phi = np.mod(0.5 * np.arctan2(s2, s1), np.pi)
    phi = np.where(phi >= np.pi, 0.0, phi)
    valid = (s1 != 0) | (s2 != 0)
    phi = np.where(valid, phi, 0.0)
    if phi.ndim == 0:
        return float(phi), bool(valid)
    return phi, valid


def dolp(s0, s1, s2):
    s0 = np.asarray(s0, dtype=np.float64)
    mag = np.hypot(s1, s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s0 > 0, mag / np.where(s0 > 0, s0, 1.0), 0.0)


@dataclass
class FresnelTerms:
    """Averaged and differential Fresnel power coefficients.

    ``t_minus`` is (Ts - Tp)/2, which is <= 0 for a dielectric; ``r_minus`` is
    (Rs - Rp)/2 >= 0.  The sign difference is what puts the diffuse and
    specular angle of polarization 90 degrees apart.
    """

    t_plus: np.ndarray
    t_minus: np.ndarray
    r_plus: np.ndarray
    r_minus: np.ndarray
    eta: float


def _check_eta(eta):
    if not eta > 1.0:
        raise ValueError(f"refractive index must exceed 1 for a dielectric, got {eta}")


def _reflectances(cos_theta, eta):
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), 0.0, 1.0)
    ct = np.sqrt(1.0 - (1.0 - c * c) / (eta * eta))
    rs = (c - eta * ct) / (c + eta * ct)
    rp = (eta * c - ct) / (eta * c + ct)
    return c, ct, rs, rp


def fresnel(cos_theta, eta: float = DEFAULT_ETA) -> FresnelTerms:
    _check_eta(eta)
    _, _, rs, rp = _reflectances(cos_theta, eta)
    Rs, Rp = rs * rs, rp * rp
    Ts, Tp = 1.0 - Rs, 1.0 - Rp
    return FresnelTerms(0.5 * (Ts + Tp), 0.5 * (Ts - Tp), 0.5 * (Rs + Rp), 0.5 * (Rs - Rp), eta)


def fresnel_with_grad(cos_theta, eta: float = DEFAULT_ETA):
    """Fresnel terms plus their derivatives with respect to ``cos_theta``.

    Returns ``(terms, d_terms)`` where ``d_terms`` holds d/dcos of each field.
    The derivative is taken on the clipped input, i.e. it is the one-sided
    derivative of the clipped function.
    """
    _check_eta(eta)
    c, ct, rs, rp = _reflectances(cos_theta, eta)
    dct = c / (eta * eta * ct)
    ds_den = c + eta * ct
    dp_den = eta * c + ct
    drs = ((1 - eta * dct) * ds_den - (c - eta * ct) * (1 + eta * dct)) / ds_den ** 2
    drp = ((eta - dct) * dp_den - (eta * c - ct) * (eta + dct)) / dp_den ** 2
    dRs, dRp = 2 * rs * drs, 2 * rp * drp
    Rs, Rp = rs * rs, rp * rp
    terms = FresnelTerms(1.0 - 0.5 * (Rs + Rp), 0.5 * (Rp - Rs), 0.5 * (Rs + Rp), 0.5 * (Rs - Rp), eta)
    d_terms = FresnelTerms(-0.5 * (dRs + dRp), 0.5 * (dRp - dRs), 0.5 * (dRs + dRp), 0.5 * (dRs - dRp), eta)
    return terms, d_terms


def pbrdf_stokes(diffuse, specular, phi_n, fres: FresnelTerms):
    """Stokes vector from a diffuse radiance and a specular radiance.

    ``diffuse`` and ``specular`` may carry a trailing colour axis; ``phi_n``
    and the Fresnel fields broadcast against the leading axes.  Returns
    ``(s0, s1, s2)``.
    """
    diffuse = np.asarray(diffuse, dtype=np.float64)
    specular = np.asarray(specular, dtype=np.float64)
    phi_n = np.asarray(phi_n, dtype=np.float64)
    extra = diffuse.ndim - phi_n.ndim

    def lift(a):
        a = np.asarray(a, dtype=np.float64)
        return a.reshape(a.shape + (1,) * extra)

    c2, s2 = lift(np.cos(2 * phi_n)), lift(np.sin(2 * phi_n))
    tp, tm, rp, rm = lift(fres.t_plus), lift(fres.t_minus), lift(fres.r_plus), lift(fres.r_minus)
    pol = diffuse * tm + specular * rm
    return diffuse * tp + specular * rp, pol * c2, -pol * s2
