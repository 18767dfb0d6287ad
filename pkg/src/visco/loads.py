"""Bulk body forces f(t, x) and their per-step interval averages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("zero", "uniform", "rotational", "flaps", "tabulated")

_GAUSS_T = np.polynomial.legendre.leggauss(3)


@dataclass(frozen=True)
class LoadSpec:
    """f(t, x) = ramp(t) * g(x), optionally restricted to a reference rectangle.

    ``ramp(t) = min(t, t_ramp)`` (``t_ramp = None`` means unbounded linear
    growth).  Spatial shapes:

    uniform     gamma * direction
    rotational  gamma * J (x - center), J the quarter-turn counterclockwise
    flaps       -gamma * sign(x1 - center_1) e1  (pushes both halves inward)
    tabulated   values linearly interpolated in ``times``; no ramp applied
    """

    kind: str = "zero"
    gamma: float = 0.0
    direction: tuple = (1.0, 0.0)
    center: tuple = (0.0, 0.0)
    t_ramp: float | None = None
    region: tuple | None = None
    times: tuple = ()
    values: tuple = ()

    def violations(self):
        out = []
        if self.kind not in KINDS:
            out.append(f"load.kind: unknown kind {self.kind!r} (expected one of {', '.join(KINDS)})")
            return out
        if len(self.direction) != 2 or len(self.center) != 2:
            out.append("load.direction and load.center must have two components")
        if self.t_ramp is not None and not self.t_ramp > 0:
            out.append("load.t_ramp: must be positive")
        if self.region is not None:
            r = self.region
            if len(r) != 4 or not (r[0] < r[2] and r[1] < r[3]):
                out.append("load.region: expected [x0, y0, x1, y1] with x0 < x1, y0 < y1")
        if self.kind == "tabulated":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or len(t) < 1 or np.any(np.diff(t) <= 0):
                out.append("load.times: need a strictly increasing list")
            elif v.shape != (len(t), 2):
                out.append("load.values: need one [fx, fy] pair per entry of load.times")
        return out

    def ramp(self, t):
        return t if self.t_ramp is None else min(t, self.t_ramp)

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = len(x)
        if self.kind == "zero":
            f = np.zeros((n, 2))
        elif self.kind == "tabulated":
            t_arr = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            fv = np.array([np.interp(t, t_arr, v[:, 0]), np.interp(t, t_arr, v[:, 1])])
            f = np.broadcast_to(fv, (n, 2)).copy()
        else:
            r = self.ramp(t) * self.gamma
            if self.kind == "uniform":
                f = np.broadcast_to(r * np.asarray(self.direction, dtype=float), (n, 2)).copy()
            elif self.kind == "rotational":
                d = x - np.asarray(self.center, dtype=float)
                f = r * np.column_stack([-d[:, 1], d[:, 0]])
            else:  # flaps
                f = np.zeros((n, 2))
                f[:, 0] = -r * np.sign(x[:, 0] - self.center[0])
        if self.region is not None:
            x0, y0, x1, y1 = self.region
            inside = (x[:, 0] >= x0) & (x[:, 0] <= x1) & (x[:, 1] >= y0) & (x[:, 1] <= y1)
            f[~inside] = 0.0
        return f

    def step_average(self, t0, t1, x):
        """(1/tau) * int_{t0}^{t1} f(t, x) dt by three-point Gauss in time.

        The ramp kink at ``t_ramp`` and tabulation nodes are honoured by
        splitting the interval there, so piecewise-linear loads are exact.
        """
        cuts = [t0, t1]
        if self.kind == "tabulated":
            cuts += [s for s in self.times if t0 < s < t1]
        elif self.t_ramp is not None and t0 < self.t_ramp < t1:
            cuts.append(self.t_ramp)
        cuts = sorted(cuts)
        nodes, weights = _GAUSS_T
        acc = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            for s, w in zip(nodes, weights):
                acc = acc + 0.5 * (b - a) * w * self(0.5 * (a + b) + 0.5 * (b - a) * s, x)
        return acc / (t1 - t0)

    def to_dict(self):
        d = {"kind": self.kind, "gamma": self.gamma, "direction": list(self.direction),
             "center": list(self.center)}
        if self.t_ramp is not None:
            d["t_ramp"] = self.t_ramp
        if self.region is not None:
            d["region"] = list(self.region)
        if self.kind == "tabulated":
            d["times"] = list(self.times)
            d["values"] = [list(v) for v in self.values]
        return d
