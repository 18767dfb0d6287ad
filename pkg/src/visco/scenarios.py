"""Built-in presets.

=================  =========================================================
relax              unit square, left edge clamped, no load, 10 steps
shear              unit square, bottom clamped, f = (gamma t, 0), 40 steps
bend-to-contact    hairpin bar clamped along its bottom; a rotational body
                   force swings the upper arm onto the lower arm
press-flaps        U-shaped body with clamped base; the two flaps are pushed
                   towards each other until their tips meet
=================  =========================================================

The contact presets start at a penalty weight of 1e4 and count a boundary
sample as touching when a partner lies within the kernel range 4 delta.
"""

from __future__ import annotations

import math

from .config import (BoundarySettings, CNSettings, GridSettings, OutputSettings,
                     RunConfig, TimeSettings)
from .loads import LoadSpec

# shear rate tuned so that max_q |F - I| (Frobenius) is about 0.3 at t = T
SHEAR_GAMMA = 1.45
BEND_GAMMA = 1.0
FLAP_GAMMA = 4.0
FLAP_W = 13  # flap width in cells
BASE_H = 4  # base height in cells
CONTACT_KAPPA = 1e4


def _contact_cn(h):
    delta = math.sqrt(2.0) * h / 4.0  # default kernel width for square cells of size h
    return CNSettings(kappa=CONTACT_KAPPA, eps_contact=4.0 * delta)


def _relax():
    return RunConfig(
        grid=GridSettings(nx=32, ny=32),
        boundary=BoundarySettings(dirichlet=("left",)),
        time=TimeSettings(T=1.0, tau=0.1),
        load=LoadSpec(kind="zero"),
        output=OutputSettings(),
    )


def _shear():
    return RunConfig(
        grid=GridSettings(nx=32, ny=32),
        boundary=BoundarySettings(dirichlet=("bottom",)),
        time=TimeSettings(T=1.0, tau=0.025),
        load=LoadSpec(kind="uniform", gamma=SHEAR_GAMMA, direction=(1.0, 0.0)),
    )


def _bend():
    # bounding box 2 x 0.875 with square cells h = 1/16; the hairpin opens to the left
    h = 1.0 / 16.0
    return RunConfig(
        grid=GridSettings(x_range=(0.0, 2.0), y_range=(0.0, 14 * h), nx=32, ny=14,
                          holes=((0, 26, 5, 9),)),
        boundary=BoundarySettings(dirichlet=("bottom",)),
        time=TimeSettings(T=2.0, tau=0.05),
        load=LoadSpec(kind="rotational", gamma=BEND_GAMMA, center=(26 * h, 7 * h),
                      t_ramp=1.5, region=(0.0, 9 * h, 26 * h, 14 * h)),
        cn=_contact_cn(h),
    )


def _flaps():
    h = 1.0 / 32.0
    return RunConfig(
        grid=GridSettings(nx=32, ny=32, holes=((FLAP_W, 32 - FLAP_W, BASE_H, 32),)),
        boundary=BoundarySettings(dirichlet=("bottom",)),
        time=TimeSettings(T=2.0, tau=0.05),
        load=LoadSpec(kind="flaps", gamma=FLAP_GAMMA, center=(0.5, 0.5), t_ramp=1.5,
                      region=(0.0, BASE_H * h, 1.0, 1.0)),
        cn=_contact_cn(h),
    )


_PRESETS = {
    "relax": _relax,
    "shear": _shear,
    "bend-to-contact": _bend,
    "press-flaps": _flaps,
}

NAMES = tuple(_PRESETS)


def scenario(name):
    """Preset RunConfig by name."""
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; valid names: {', '.join(NAMES)}") from None


def refine(cfg, factor=2):
    """Same problem on a grid with ``factor`` times as many cells per direction.

    Holes are given in cell indices.  The overlap length scales (kernel
    width, exclusion radius, contact tolerance, pixel size) are frozen at the
    values of the original grid, so only the discretisation changes and not
    the regularised contact model.
    """
    from dataclasses import replace

    g = cfg.grid
    grid = replace(g, nx=g.nx * factor, ny=g.ny * factor,
                   holes=tuple(tuple(i * factor for i in hole) for hole in g.holes))
    p = cfg.penalty_params()
    cn = replace(cfg.cn, delta=p.delta, r_min=p.r_min, eps_contact=p.eps_contact,
                 h_pix=p.h_pix, tol_cn=p.tol_cn)
    return cfg.replace(grid=grid, cn=cn)


__all__ = ["scenario", "refine", "NAMES"]
