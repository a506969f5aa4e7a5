"""Dense primal-dual interior-point solver for small second-order cone programs.

Solves::

    minimize    c'x
    subject to  G x + s = h
                A x = b
                s in K

where K is the product of a nonnegative orthant and second-order cones
``{(u0, u1): ||u1|| <= u0}``. Search directions use Nesterov-Todd scaling with
a Mehrotra predictor-corrector; the reduced KKT system is solved densely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import InfeasibleError, SolverError

STEP = 0.95
EXPON = 3
REFINE = 1


@dataclass(frozen=True)
class Cones:
    """Cone layout: ``l`` orthant entries followed by SOC blocks of sizes ``q``."""

    l: int
    q: tuple = ()

    @property
    def m(self) -> int:
        return self.l + int(sum(self.q))

    @property
    def degree(self) -> int:
        return self.l + len(self.q)

    @cached_property
    def runs(self) -> list[tuple[int, int, int]]:
        """Consecutive SOC blocks of equal size as (offset, dim, count)."""
        runs = []
        off = self.l
        for d in self.q:
            if runs and runs[-1][1] == d and runs[-1][0] + runs[-1][1] * runs[-1][2] == off:
                o, dd, cnt = runs[-1]
                runs[-1] = (o, dd, cnt + 1)
            else:
                runs.append((off, d, 1))
            off += d
        return runs

    def blocks(self, u, run):
        off, d, cnt = run
        return u[off:off + d * cnt].reshape(cnt, d, *u.shape[1:])

    def identity(self) -> np.ndarray:
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for off, d, cnt in self.runs:
            e[off:off + d * cnt:d] = 1.0
        return e

    def product(self, u, v):
        """Jordan product u o v."""
        out = np.empty_like(u)
        out[: self.l] = u[: self.l] * v[: self.l]
        for run in self.runs:
            ub, vb, ob = self.blocks(u, run), self.blocks(v, run), self.blocks(out, run)
            ob[:, 0] = np.einsum("ij,ij->i", ub, vb)
            ob[:, 1:] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out

    def quotient(self, u, v):
        """Solve u o x = v for x (u in the interior of K)."""
        out = np.empty_like(v)
        out[: self.l] = v[: self.l] / u[: self.l]
        for run in self.runs:
            ub, vb, ob = self.blocks(u, run), self.blocks(v, run), self.blocks(out, run)
            u0, u1 = ub[:, 0], ub[:, 1:]
            det = u0**2 - np.einsum("ij,ij->i", u1, u1)
            x0 = (u0 * vb[:, 0] - np.einsum("ij,ij->i", u1, vb[:, 1:])) / det
            ob[:, 0] = x0
            ob[:, 1:] = (vb[:, 1:] - x0[:, None] * u1) / u0[:, None]
        return out

    def violation(self, u) -> float:
        """Smallest t with u + t e in K (negative when u is interior)."""
        worst = -np.inf
        if self.l:
            worst = max(worst, float(np.max(-u[: self.l])))
        for run in self.runs:
            ub = self.blocks(u, run)
            worst = max(worst, float(np.max(np.linalg.norm(ub[:, 1:], axis=1) - ub[:, 0])))
        return worst

    def max_step(self, u, d) -> float:
        """Largest alpha with u + alpha d in K, for u in the interior (inf if unbounded)."""
        alpha = np.inf
        if self.l:
            neg = d[: self.l] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-u[: self.l][neg] / d[: self.l][neg])))
        for run in self.runs:
            ub, db = self.blocks(u, run), self.blocks(d, run)
            a = db[:, 0] ** 2 - np.einsum("ij,ij->i", db[:, 1:], db[:, 1:])
            bq = 2.0 * (ub[:, 0] * db[:, 0] - np.einsum("ij,ij->i", ub[:, 1:], db[:, 1:]))
            cq = ub[:, 0] ** 2 - np.einsum("ij,ij->i", ub[:, 1:], ub[:, 1:])
            alpha = min(alpha, float(np.min(_smallest_positive_root(a, bq, cq))))
        return alpha


def _smallest_positive_root(a, b, c):
    """Per-entry smallest positive root of a t^2 + b t + c (c > 0), inf if none."""
    out = np.full(a.shape, np.inf)
    disc = b * b - 4.0 * a * c
    lin = np.abs(a) <= 1e-14 * (np.abs(b) + np.abs(c))
    with np.errstate(divide="ignore", invalid="ignore"):
        r_lin = np.where(b < 0, -c / b, np.inf)
        sq = np.sqrt(np.maximum(disc, 0.0))
        qq = -0.5 * (b + np.where(b >= 0, sq, -sq))
        r1 = qq / a
        r2 = c / qq
    r1 = np.where(r1 > 0, r1, np.inf)
    r2 = np.where(r2 > 0, r2, np.inf)
    quad = np.where(disc >= 0, np.minimum(r1, r2), np.inf)
    out = np.where(lin, r_lin, quad)
    return np.where(np.isnan(out), np.inf, out)


class _Scaling:
    """Nesterov-Todd scaling W with W z = W^{-1} s = lambda."""

    def __init__(self, cones: Cones, s, z):
        self.cones = cones
        self.d = np.sqrt(s[: cones.l] / z[: cones.l])
        self.soc = []
        for run in cones.runs:
            sb, zb = cones.blocks(s, run), cones.blocks(z, run)
            sn = _jnorm(sb)
            zn = _jnorm(zb)
            if np.any(sn <= 0) or np.any(zn <= 0):
                raise SolverError("iterate left the cone interior")
            sbar, zbar = sb / sn[:, None], zb / zn[:, None]
            gamma = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", sbar, zbar)))
            w = sbar.copy()
            w[:, 0] += zbar[:, 0]
            w[:, 1:] -= zbar[:, 1:]
            w /= 2.0 * gamma[:, None]
            # 2ww' - J maps z to s; its square root uses the half-way vector
            v = w.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (w[:, 0] + 1.0))[:, None]
            self.soc.append((np.sqrt(sn / zn), v))

    def apply(self, v, inverse=False):
        cones = self.cones
        out = np.empty_like(v)
        dl = self.d if v.ndim == 1 else self.d[:, None]
        out[: cones.l] = v[: cones.l] / dl if inverse else v[: cones.l] * dl
        for run, (beta, w) in zip(cones.runs, self.soc):
            vb, ob = cones.blocks(v, run), cones.blocks(out, run)
            jv = vb.copy()
            jv[:, 1:] *= -1.0
            ww = w.copy()
            if inverse:
                ww[:, 1:] *= -1.0
            if v.ndim == 1:
                coef = np.einsum("ij,ij->i", ww, vb)
                ob[...] = 2.0 * ww * coef[:, None] - jv
                ob *= (1.0 / beta if inverse else beta)[:, None]
            else:
                coef = np.einsum("ij,ijk->ik", ww, vb)
                ob[...] = 2.0 * ww[:, :, None] * coef[:, None, :] - jv
                ob *= (1.0 / beta if inverse else beta)[:, None, None]
        return out


def _jnorm(ub):
    r = np.linalg.norm(ub[:, 1:], axis=1)
    return np.sqrt(np.maximum((ub[:, 0] - r) * (ub[:, 0] + r), 0.0))


@dataclass
class ConicSolution:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    pcost: float
    dcost: float
    gap: float
    pres: float
    dres: float
    trace: list = field(default_factory=list)


def solve_socp(c, G, h, cones: Cones, A=None, b=None, *, feastol=1e-9, abstol=1e-9,
               reltol=1e-9, max_iter=100, fallback_tol=1e-8) -> ConicSolution:
    """Solve the cone program.

    If rounding stalls the iteration after an iterate met ``fallback_tol`` on
    residuals and gap, that iterate is returned instead of raising.
    """
    c = np.asarray(c, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    n = c.size
    if A is None:
        A, b = np.zeros((0, n)), np.zeros(0)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, p = cones.m, b.size
    if G.shape != (m, n) or h.shape != (m,) or A.shape != (p, n):
        raise SolverError(f"inconsistent problem dimensions G{G.shape} h{h.shape} A{A.shape} m={m}")

    accepted = None
    resx0, resy0, resz0 = max(1.0, np.linalg.norm(c)), max(1.0, np.linalg.norm(b)), max(1.0, np.linalg.norm(h))
    e = cones.identity()
    trace: list[dict] = []

    def factor(gt):
        kkt = np.zeros((n + p, n + p))
        kkt[:n, :n] = gt.T @ gt
        kkt[:n, n:] = A.T
        kkt[n:, :n] = A
        try:
            lu = sla.lu_factor(kkt, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"KKT factorisation failed: {exc}", trace) from exc
        if np.any(np.abs(np.diag(lu[0])) < 1e-300):
            raise SolverError("singular KKT matrix", trace)
        return lu

    # starting point: least-norm slack and least-norm dual, shifted into K
    lu = factor(G)
    sol = sla.lu_solve(lu, np.concatenate([G.T @ h, b]))
    x = sol[:n]
    s = h - G @ x
    sol = sla.lu_solve(lu, np.concatenate([-c, np.zeros(p)]))
    y = sol[n:]
    z = G @ sol[:n]
    for u in (s, z):
        t = cones.violation(u)
        if t >= -1e-8 * max(np.linalg.norm(u), 1.0):
            u += (1.0 + t) * e

    for it in range(max_iter + 1):
        rx = c + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        pcost = float(c @ x)
        dcost = pcost + float(y @ ry) + float(z @ rz) - gap
        pres = max(np.linalg.norm(ry) / resy0, np.linalg.norm(rz) / resz0)
        dres = np.linalg.norm(rx) / resx0
        if pcost < 0:
            relgap = gap / -pcost
        elif dcost > 0:
            relgap = gap / dcost
        else:
            relgap = np.inf
        trace.append(dict(it=it, pcost=pcost, dcost=dcost, gap=gap, pres=pres, dres=dres))

        if pres <= feastol and dres <= feastol and (gap <= abstol or relgap <= reltol):
            return ConicSolution(x, s, y, z, "optimal", it, pcost, dcost, gap, pres, dres, trace)
        if pres <= fallback_tol and dres <= fallback_tol and (gap <= fallback_tol or relgap <= fallback_tol):
            accepted = ConicSolution(x, s, y, z, "optimal", it, pcost, dcost, gap, pres, dres, trace)

        # Farkas test: A'y + G'z ~ 0 with b'y + h'z < 0 and z in K proves infeasibility
        farkas = -(float(h @ z) + float(b @ y))
        if farkas > 0 and np.linalg.norm(A.T @ y + G.T @ z) <= 1e-8 * farkas and (
                np.linalg.norm(y) + np.linalg.norm(z)) > 1e6:
            raise InfeasibleError("primal infeasible", certificate=(y / farkas, z / farkas), trace=trace)
        if it == max_iter:
            break

        try:
            scaling = _Scaling(cones, s, z)
        except SolverError as exc:
            if accepted is not None:
                return accepted
            raise SolverError(f"{exc} at iteration {it}", trace) from exc
        lmbda = scaling.apply(z)
        gt = scaling.apply(G, inverse=True)
        lu = factor(gt)

        def solve_newton(bx, by, bz, q):
            """A'dy + G'dz = -bx, A dx = -by, G dx + ds = -bz, W dz + W^-1 ds = q."""
            wbz = scaling.apply(bz, inverse=True)
            d = sla.lu_solve(lu, np.concatenate([-bx - gt.T @ (q + wbz), -by]))
            dx, dy = d[:n], d[n:]
            return dx, dy, scaling.apply(gt @ dx + q + wbz, inverse=True), -bz - G @ dx

        def direction(q):
            dx, dy, dz, ds = solve_newton(rx, ry, rz, q)
            for _ in range(REFINE):
                fix = solve_newton(A.T @ dy + G.T @ dz + rx, A @ dx + ry, G @ dx + ds + rz,
                                   q - scaling.apply(dz) - scaling.apply(ds, inverse=True))
                dx, dy, dz, ds = (u + v for u, v in zip((dx, dy, dz, ds), fix))
            # steps are taken in unscaled space so G x + s - h tracks the linear equations
            return dx, dy, scaling.apply(dz), scaling.apply(ds, inverse=True), ds, dz

        def step_to_boundary(ds, dz):
            return min(cones.max_step(s, ds), cones.max_step(z, dz))

        # predictor
        dx, dy, dz_s, ds_s, ds, dz = direction(-lmbda)
        alpha = min(1.0, step_to_boundary(ds, dz))
        dsdz = float(ds_s @ dz_s)
        sigma = min(1.0, max(0.0, 1.0 - alpha + dsdz / gap * alpha**2)) ** EXPON
        mu = gap / cones.degree

        # corrector
        q = -lmbda - cones.quotient(lmbda, cones.product(ds_s, dz_s) - sigma * mu * e)
        dx, dy, dz_s, ds_s, ds, dz = direction(q)
        alpha = min(1.0, STEP * step_to_boundary(ds, dz))
        if not np.isfinite(alpha) or alpha < 1e-12:
            if accepted is not None:
                return accepted
            raise SolverError(f"step length collapsed at iteration {it}", trace)

        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz

    if accepted is not None:
        return accepted
    raise SolverError(
        f"no convergence in {max_iter} iterations (gap {gap:.2e}, pres {pres:.2e}, dres {dres:.2e})", trace
    )
