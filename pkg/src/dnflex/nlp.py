"""Primal-dual interior-point method for smooth nonlinear programs.

    minimize f(x)  subject to  g(x) = 0,  h(x) <= 0

Newton steps on the perturbed KKT conditions with slack variables and a
centring parameter, in the style of MATPOWER's MIPS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class NlpResult:
    x: np.ndarray
    lam: np.ndarray  # equality multipliers
    mu: np.ndarray  # inequality multipliers
    z: np.ndarray  # inequality slacks
    f: float
    converged: bool
    iterations: int
    message: str
    trace: list = field(default_factory=list)

    @property
    def stationarity(self) -> float:
        return self.trace[-1]["gradcond"] if self.trace else float("nan")


def pdipm(f_fcn, gh_fcn, hess_fcn, x0, *, feastol=1e-9, gradtol=1e-8, comptol=1e-9, costtol=1e-9,
          max_iter=150, sigma=0.1, z0=1.0, xi=0.99995) -> NlpResult:
    """``f_fcn(x) -> (f, df)``; ``gh_fcn(x) -> (h, g, dh, dg)`` with row Jacobians;
    ``hess_fcn(x, lam, mu) -> Hessian of f + lam'g + mu'h``."""
    x = np.array(x0, dtype=float)
    nx = x.size
    f, df = f_fcn(x)
    h, g, dh, dg = gh_fcn(x)
    neq, niq = g.size, h.size
    lam = np.zeros(neq)
    z = np.full(niq, z0)
    z = np.where(h < -z0, -h, z)
    gamma = 1.0
    mu = np.where(gamma / z > z0, gamma / z, z0)
    f0 = f
    trace: list[dict] = []

    def conditions():
        lx = df + dg.T @ lam + dh.T @ mu
        maxh = max(float(np.max(h)), 0.0) if niq else 0.0
        nrm_g = float(np.max(np.abs(g))) if neq else 0.0
        xz = max(np.max(np.abs(x)) if nx else 0.0, np.max(np.abs(z)) if niq else 0.0)
        lm = max(np.max(np.abs(lam)) if neq else 0.0, np.max(np.abs(mu)) if niq else 0.0)
        return dict(
            feascond=max(nrm_g, maxh) / (1.0 + xz),
            gradcond=float(np.max(np.abs(lx))) / (1.0 + lm) if nx else 0.0,
            compcond=float(z @ mu) / (1.0 + (np.max(np.abs(x)) if nx else 0.0)),
            costcond=abs(f - f0) / (1.0 + abs(f0)),
        ), lx

    cond, lx = conditions()
    trace.append(dict(it=0, f=f, gamma=gamma, alphap=0.0, alphad=0.0, **cond))
    for it in range(1, max_iter + 1):
        hess = hess_fcn(x, lam, mu)
        zinv = 1.0 / z
        dh_w = dh * (mu * zinv)[:, None]
        m = hess + dh.T @ dh_w
        rhs_n = lx + dh.T @ (zinv * (mu * h + gamma))
        kkt = np.zeros((nx + neq, nx + neq))
        kkt[:nx, :nx] = m
        kkt[:nx, nx:] = dg.T
        kkt[nx:, :nx] = dg
        try:
            sol = np.linalg.solve(kkt, -np.concatenate([rhs_n, g]))
        except np.linalg.LinAlgError:
            return NlpResult(x, lam, mu, z, f, False, it, "singular KKT system", trace)
        if not np.all(np.isfinite(sol)):
            return NlpResult(x, lam, mu, z, f, False, it, "non-finite Newton step", trace)
        dx, dlam = sol[:nx], sol[nx:]
        dz = -h - z - dh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)
        neg = dz < 0
        alphap = min(xi * float(np.min(z[neg] / -dz[neg])), 1.0) if np.any(neg) else 1.0
        neg = dmu < 0
        alphad = min(xi * float(np.min(mu[neg] / -dmu[neg])), 1.0) if np.any(neg) else 1.0
        x = x + alphap * dx
        z = z + alphap * dz
        lam = lam + alphad * dlam
        mu = mu + alphad * dmu
        if niq:
            gamma = sigma * float(z @ mu) / niq
        f, df = f_fcn(x)
        h, g, dh, dg = gh_fcn(x)
        cond, lx = conditions()
        trace.append(dict(it=it, f=f, gamma=gamma, alphap=alphap, alphad=alphad, **cond))
        if (cond["feascond"] < feastol and cond["gradcond"] < gradtol and cond["compcond"] < comptol
                and cond["costcond"] < costtol):
            return NlpResult(x, lam, mu, z, f, True, it, "converged", trace)
        if (not np.all(np.isfinite(x)) or alphap < 1e-10 or alphad < 1e-10
                or gamma < np.finfo(float).eps or gamma > 1.0 / np.finfo(float).eps):
            return NlpResult(x, lam, mu, z, f, False, it, "numerically failed", trace)
        f0 = f
    return NlpResult(x, lam, mu, z, f, False, max_iter, "iteration limit", trace)
