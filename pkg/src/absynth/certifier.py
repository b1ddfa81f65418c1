"""Sound certification of abstraction error bounds.

Decides whether |f_j(x) - N_j(x)| <= eps_j - delta holds for every x in a
box (or polyhedron-restricted) region, by interval branch-and-bound with
outward rounding.  A Certified outcome is unconditionally valid; refuted
outcomes carry a concrete counterexample that violates the bound under
exact evaluation, or are flagged unconfirmed when the search bottoms out
at the minimum box width.  Exhausting the box or time budget yields
Inconclusive, distinct from both.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .intervals import IntervalBox
from .network import Network
from .trainer import Dataset
from .vectorfield import VectorField


@dataclass(frozen=True)
class ErrorBound:
    """Per-dimension nonnegative error radii."""

    eps: np.ndarray

    def __post_init__(self):
        eps = np.array(self.eps, dtype=np.float64).reshape(-1)
        if np.any(eps < 0.0):
            raise ValueError("error bounds must be nonnegative")
        eps.flags.writeable = False
        object.__setattr__(self, "eps", eps)

    @property
    def l1(self) -> float:
        return float(np.sum(self.eps))

    def __len__(self) -> int:
        return self.eps.shape[0]


CERTIFIED = "certified"
REFUTED = "refuted"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class CertOutcome:
    status: str
    boxes_explored: int
    max_residual: float
    cex_point: Optional[np.ndarray] = None
    cex_dim: Optional[int] = None
    cex_magnitude: Optional[float] = None
    cex_confirmed: bool = False
    message: str = ""

    @property
    def certified(self) -> bool:
        return self.status == CERTIFIED


@dataclass(frozen=True)
class CertifierConfig:
    w_min_frac: float = 1e-6  # minimum box width, as a fraction of domain width
    box_budget: int = 1_000_000
    time_budget: Optional[float] = None  # seconds; None = unlimited
    batch: int = 4096


def estimate_error(
    field: VectorField, net: Network, data: Dataset, rho: float
) -> ErrorBound:
    """Empirical bound: eps_j = (1+rho) * max_s |f_j(s) - N_j(s)| + delta."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if rho < 0.0:
        raise ValueError("margin must be nonnegative")
    err = np.max(np.abs(data.targets - net.forward(data.points)), axis=0)
    return ErrorBound((1.0 + rho) * err + field.delta)


class _AffineFlow:
    """Adapter so a mode's affine flow A x + c certifies like a network."""

    def __init__(self, A: np.ndarray, c: np.ndarray):
        self.A = np.asarray(A, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.A.T + self.c

    def forward_interval(self, lo: np.ndarray, hi: np.ndarray):
        from . import intervals as iv

        out_lo, out_hi = iv.imatvec(self.A, lo, hi)
        return iv._outward(out_lo + self.c, out_hi + self.c)


def _residual_enclosure(field, approx, lo, hi):
    from . import intervals as iv

    flo, fhi = field.eval_interval(lo, hi)
    nlo, nhi = approx.forward_interval(lo, hi)
    return iv.isub(flo, fhi, nlo, nhi)


def _certify_boxes(
    field,
    approx,
    lo0: np.ndarray,
    hi0: np.ndarray,
    bound: np.ndarray,
    cfg: CertifierConfig,
    poly=None,
) -> CertOutcome:
    """Shared branch-and-bound over an initial stack of boxes.

    bound is the per-dimension residual allowance eps - delta.  When poly
    is given, sub-boxes provably disjoint from it are discarded and
    midpoint counterexamples must lie inside it; straddling boxes must
    still satisfy the bound.
    """
    t_start = time.monotonic()
    w_min = cfg.w_min_frac * np.maximum(hi0.max(axis=0) - lo0.min(axis=0), 1e-30)
    lo_stack, hi_stack = lo0, hi0
    explored = 0
    max_resid = 0.0
    while lo_stack.shape[0] > 0:
        if explored > cfg.box_budget:
            return CertOutcome(
                INCONCLUSIVE,
                explored,
                max_resid,
                message=f"box budget {cfg.box_budget} exhausted",
            )
        if cfg.time_budget is not None and time.monotonic() - t_start > cfg.time_budget:
            return CertOutcome(
                INCONCLUSIVE, explored, max_resid, message="time budget exhausted"
            )
        lo, hi = lo_stack[: cfg.batch], hi_stack[: cfg.batch]
        lo_stack, hi_stack = lo_stack[cfg.batch :], hi_stack[cfg.batch :]
        explored += lo.shape[0]

        rlo, rhi = _residual_enclosure(field, approx, lo, hi)
        resid_mag = np.maximum(np.abs(rlo), np.abs(rhi))
        passed = np.all(resid_mag <= bound[None, :], axis=1)
        max_resid = max(max_resid, float(resid_mag[passed].max(initial=0.0)))
        keep = ~passed
        if poly is not None and np.any(keep):
            # a box is provably outside the polyhedron when even the most
            # favourable corner violates some halfspace
            lo_k, hi_k = lo[keep], hi[keep]
            a_pos = np.maximum(poly.normals, 0.0)
            a_neg = np.minimum(poly.normals, 0.0)
            min_ax = lo_k @ a_pos.T + hi_k @ a_neg.T
            outside = np.any(min_ax > poly.offsets[None, :], axis=1)
            sub = np.where(keep)[0][outside]
            keep[sub] = False
        if not np.any(keep):
            continue
        lo, hi = lo[keep], hi[keep]

        mids = 0.5 * (lo + hi)
        rexact = np.abs(field.eval(mids) - approx.forward(mids))
        viol = np.any(rexact > bound[None, :], axis=1)
        if poly is not None and np.any(viol):
            inside = np.all(mids @ poly.normals.T <= poly.offsets[None, :] + 1e-12, axis=1)
            viol &= inside
        if np.any(viol):
            i = int(np.argmax(viol))
            j = int(np.argmax(rexact[i] - bound))
            return CertOutcome(
                REFUTED,
                explored,
                max_resid,
                cex_point=mids[i].copy(),
                cex_dim=j,
                cex_magnitude=float(rexact[i, j]),
                cex_confirmed=True,
            )

        widths = hi - lo
        too_small = np.all(widths < w_min[None, :], axis=1)
        if np.any(too_small):
            stubborn = np.where(too_small)[0]
            if poly is not None:
                # exact LP check before giving up: a stubborn box may in
                # fact lie entirely outside the polyhedron
                from .hybridizer import box_intersects_poly

                stubborn = np.array(
                    [k for k in stubborn if box_intersects_poly(lo[k], hi[k], poly)],
                    dtype=int,
                )
            if stubborn.size > 0:
                i = int(stubborn[0])
                return CertOutcome(
                    REFUTED,
                    explored,
                    max_resid,
                    cex_point=mids[i].copy(),
                    cex_dim=None,
                    cex_magnitude=None,
                    cex_confirmed=False,
                    message="minimum box width reached without a confirmed violation",
                )
            keep_going = ~too_small
            lo, hi, widths = lo[keep_going], hi[keep_going], widths[keep_going]
            if lo.shape[0] == 0:
                continue

        split = np.argmax(widths, axis=1)
        rows = np.arange(lo.shape[0])
        cut = 0.5 * (lo[rows, split] + hi[rows, split])
        lo_a, hi_a = lo.copy(), hi.copy()
        hi_a[rows, split] = cut
        lo_b, hi_b = lo.copy(), hi.copy()
        lo_b[rows, split] = cut
        lo_stack = np.concatenate([lo_a, lo_b, lo_stack])
        hi_stack = np.concatenate([hi_a, hi_b, hi_stack])
    return CertOutcome(CERTIFIED, explored, max_resid)


def certify(
    field: VectorField,
    net: Network,
    domain: IntervalBox,
    eps: ErrorBound,
    delta: float,
    cfg: CertifierConfig = CertifierConfig(),
) -> CertOutcome:
    """Certify |f_j(x) - N_j(x)| <= eps_j - delta for all x in the domain."""
    bound = eps.eps - delta
    if np.any(bound <= 0.0):
        raise ValueError("error bound leaves no budget beyond the disturbance radius")
    return _certify_boxes(
        field, net, domain.lo[None, :].copy(), domain.hi[None, :].copy(), bound, cfg
    )


def certify_mode(
    field: VectorField,
    A: np.ndarray,
    c: np.ndarray,
    poly,
    eps: ErrorBound,
    delta: float,
    cfg: CertifierConfig = CertifierConfig(),
) -> CertOutcome:
    """Certify the bound for an affine mode flow over its polyhedron.

    Branch-and-bound runs over the polyhedron's bounding box; sub-boxes
    provably disjoint from the polyhedron are discarded, and boxes that
    straddle its boundary must still satisfy the bound.
    """
    bound = eps.eps - delta
    if np.any(bound <= 0.0):
        raise ValueError("error bound leaves no budget beyond the disturbance radius")
    lo, hi = poly.bounding_box()
    return _certify_boxes(
        field, _AffineFlow(A, c), lo[None, :].copy(), hi[None, :].copy(), bound, cfg, poly=poly
    )
