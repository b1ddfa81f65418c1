"""Cast piecewise abstractions into explicit linear hybrid automata.

Modes are the LP-nonempty activation-pattern cells of the net restricted
to the domain box, each carrying its affine (or constant) flow and a
per-mode error bound; transitions connect modes whose invariants share a
facet, with the guard equal to the target invariant.  Strict pattern
inequalities are closed, so invariants are closed convex polyhedra that
overlap only on boundaries.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .certifier import CertifierConfig, CertOutcome, ErrorBound, certify_mode
from .intervals import IntervalBox
from .network import Network, affine_piece
from .trainer import Dataset
from .vectorfield import VectorField

_LP_TOL = 1e-9


class LPError(RuntimeError):
    """The LP solver failed numerically; never silently decided."""


class ModeExplosion(RuntimeError):
    """Mode enumeration exceeded the configured cap."""


@dataclass(frozen=True)
class Polyhedron:
    """Conjunction of non-strict halfspaces normals @ x <= offsets."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        a = np.array(self.normals, dtype=np.float64)
        b = np.array(self.offsets, dtype=np.float64).reshape(-1)
        if a.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ValueError("inconsistent halfspace arrays")
        a.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", b)

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def contains(self, x: np.ndarray, atol: float = 1e-12) -> bool:
        return bool(np.all(self.normals @ np.asarray(x) <= self.offsets + atol))

    def contains_strict(self, x: np.ndarray, margin: float) -> bool:
        return bool(np.all(self.normals @ np.asarray(x) <= self.offsets - margin))

    def bounding_box(self):
        """Tight axis box around the polyhedron, via 2n LPs."""
        n = self.dim
        lo = np.empty(n)
        hi = np.empty(n)
        for d in range(n):
            c = np.zeros(n)
            c[d] = 1.0
            for sign, out in ((1.0, lo), (-1.0, hi)):
                res = linprog(
                    sign * c,
                    A_ub=self.normals,
                    b_ub=self.offsets,
                    bounds=[(None, None)] * n,
                    method="highs",
                )
                if res.status != 0:
                    raise LPError(f"bounding box LP failed: {res.message}")
                out[d] = sign * res.fun
        return lo, hi


def box_to_poly(box: IntervalBox) -> Polyhedron:
    n = box.dim
    eye = np.eye(n)
    return Polyhedron(
        np.concatenate([eye, -eye], axis=0), np.concatenate([box.hi, -box.lo])
    )


def chebyshev_center(poly: Polyhedron):
    """Center and radius of the largest inscribed ball; the polyhedron must
    be bounded (ours always include the domain box rows)."""
    n = poly.dim
    norms = np.linalg.norm(poly.normals, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0  # maximize r
    a = np.concatenate([poly.normals, norms[:, None]], axis=1)
    res = linprog(
        c,
        A_ub=a,
        b_ub=poly.offsets,
        bounds=[(None, None)] * n + [(0.0, None)],
        method="highs",
    )
    if res.status == 2:  # infeasible
        return None, 0.0
    if res.status != 0:
        raise LPError(f"Chebyshev LP failed: {res.message}")
    return res.x[:n], float(res.x[n])


def lp_feasible(poly: Polyhedron, tol: float = _LP_TOL) -> Optional[np.ndarray]:
    """Witness strictly inside the polyhedron, or None when it has no
    interior at the decision tolerance."""
    center, radius = chebyshev_center(poly)
    if center is None or radius <= tol:
        return None
    return center


def box_intersects_poly(lo: np.ndarray, hi: np.ndarray, poly: Polyhedron) -> bool:
    """Exact (LP) test whether a box meets a polyhedron."""
    res = linprog(
        np.zeros(poly.dim),
        A_ub=poly.normals,
        b_ub=poly.offsets,
        bounds=list(zip(lo, hi)),
        method="highs",
    )
    if res.status == 2:
        return False
    if res.status != 0:
        raise LPError(f"intersection LP failed: {res.message}")
    return True


def canonicalize(poly: Polyhedron, tol: float = _LP_TOL) -> Polyhedron:
    """Drop duplicate and LP-implied rows; normalises row scales."""
    norms = np.linalg.norm(poly.normals, axis=1)
    keep = norms > tol
    a = poly.normals[keep] / norms[keep, None]
    b = poly.offsets[keep] / norms[keep]
    # deduplicate near-identical rows, keeping the tightest offset
    order = np.lexsort(np.round(a / (10 * tol)).astype(np.int64).T)
    a, b = a[order], b[order]
    rows: List[int] = []
    for i in range(a.shape[0]):
        dup = False
        for j in rows:
            if np.all(np.abs(a[i] - a[j]) <= 10 * tol):
                if b[i] < b[j]:
                    rows.remove(j)
                    break
                dup = True
                break
        if not dup:
            rows.append(i)
    a, b = a[rows], b[rows]
    # redundancy: row i is implied when max a_i.x over the others is <= b_i
    essential = np.ones(a.shape[0], dtype=bool)
    for i in range(a.shape[0]):
        others = essential.copy()
        others[i] = False
        if not np.any(others):
            continue
        res = linprog(
            -a[i],
            A_ub=a[others],
            b_ub=b[others] + tol,
            bounds=[(None, None)] * poly.dim,
            method="highs",
        )
        if res.status == 0 and -res.fun <= b[i] + tol:
            essential[i] = False
        elif res.status not in (0, 3):  # 3 = unbounded: row is needed
            raise LPError(f"redundancy LP failed: {res.message}")
    return Polyhedron(a[essential], b[essential])


@dataclass(frozen=True)
class Mode:
    id: int
    pattern: np.ndarray
    invariant: Polyhedron
    A: np.ndarray
    c: np.ndarray
    eps: np.ndarray  # per-dimension error radius valid inside this mode

    def __post_init__(self):
        pat = np.array(self.pattern, dtype=bool)
        pat.flags.writeable = False
        object.__setattr__(self, "pattern", pat)
        for name in ("A", "c", "eps"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Transition:
    source: int
    target: int
    guard: Polyhedron


@dataclass(frozen=True)
class HybridAutomaton:
    modes: tuple
    transitions: tuple
    domain: IntervalBox
    label: str = "hop"

    def mode_of(self, net: Network, x: np.ndarray) -> Optional[Mode]:
        pat = net.pattern_at(x)
        for m in self.modes:
            if np.array_equal(m.pattern, pat):
                return m
        return None

    @property
    def constant_flows(self) -> bool:
        return all(np.all(m.A == 0.0) for m in self.modes)


def _pattern_cell(net: Network, pattern: np.ndarray, domain_poly: Polyhedron) -> Polyhedron:
    piece = affine_piece(net, pattern)
    return Polyhedron(
        np.concatenate([piece.normals, domain_poly.normals], axis=0),
        np.concatenate([piece.offsets, domain_poly.offsets]),
    )


def _seed_points(domain: IntervalBox, per_dim_cap: int = 6561) -> np.ndarray:
    n = domain.dim
    g = max(3, int(round(per_dim_cap ** (1.0 / n))))
    axes = [np.linspace(domain.lo[d], domain.hi[d], g) for d in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    rng = np.random.default_rng(0)
    extra = domain.sample(2048, rng)
    return np.concatenate([grid, extra, domain.midpoint[None, :]], axis=0)


def enumerate_modes(
    net: Network, domain: IntervalBox, cap: int = 10_000
) -> List[Mode]:
    """All LP-nonempty activation cells inside the domain.

    Patterns seen on a dense sample grid seed a breadth-first search over
    single-neuron flips, which walks the cell adjacency graph; every
    returned cell has nonempty interior.
    """
    if net.template not in ("pwa", "pwc"):
        raise ValueError("mode enumeration applies to relu/step templates")
    domain_poly = box_to_poly(domain)
    seen = {}
    queue = deque()

    def visit(pattern: np.ndarray):
        key = pattern.tobytes()
        if key in seen:
            return
        cell = _pattern_cell(net, pattern, domain_poly)
        witness = lp_feasible(cell)
        seen[key] = None
        if witness is not None:
            seen[key] = (pattern.copy(), cell)
            queue.append(pattern.copy())
            if sum(1 for v in seen.values() if v is not None) > cap:
                raise ModeExplosion(f"more than {cap} modes; raise the cap to proceed")

    for pat in np.unique(net.pattern_at(_seed_points(domain)), axis=0):
        visit(pat)
    while queue:
        pattern = queue.popleft()
        for j in range(pattern.shape[0]):
            flipped = pattern.copy()
            flipped[j] = ~flipped[j]
            visit(flipped)

    cells = [v for v in seen.values() if v is not None]
    cells.sort(key=lambda pc: tuple(pc[0].astype(int)))
    n = net.dim
    modes = []
    for i, (pattern, cell) in enumerate(cells):
        piece = affine_piece(net, pattern)
        modes.append(
            Mode(
                id=i,
                pattern=pattern,
                invariant=canonicalize(cell),
                A=piece.A,
                c=piece.c,
                eps=np.zeros(n),
            )
        )
    return modes


def build_lha(abstraction, mode_cap: int = 10_000) -> HybridAutomaton:
    """Explicit automaton for a certified piecewise abstraction: modes with
    invariants and flows, facet transitions with guard = target invariant,
    every mode starting at the global error bound."""
    net = abstraction.net
    if net.template not in ("pwa", "pwc"):
        raise ValueError("only piecewise templates cast to hybrid automata")
    domain = abstraction.domain
    modes = enumerate_modes(net, domain, cap=mode_cap)
    eps = abstraction.eps.eps
    modes = [replace(m, eps=eps.copy()) for m in modes]
    transitions = []
    domain_poly = box_to_poly(domain)
    by_key = {m.pattern.tobytes(): m for m in modes}
    for m in modes:
        for j in range(m.pattern.shape[0]):
            flipped = m.pattern.copy()
            flipped[j] = ~flipped[j]
            other = by_key.get(flipped.tobytes())
            if other is None or other.id <= m.id:
                continue
            if _facet_adjacent_cells(net, m, other, j, domain_poly):
                transitions.append(Transition(m.id, other.id, other.invariant))
                transitions.append(Transition(other.id, m.id, m.invariant))
    return HybridAutomaton(tuple(modes), tuple(transitions), domain)


def _facet_adjacent_cells(
    net: Network, a: Mode, b: Mode, flipped_neuron: int, domain_poly: Polyhedron
) -> bool:
    piece_a = affine_piece(net, a.pattern)
    g = piece_a.normals[flipped_neuron]
    g_off = piece_a.offsets[flipped_neuron]
    g_norm = np.linalg.norm(g)
    if g_norm <= _LP_TOL:
        return False
    g_unit = g / g_norm

    def stripped(pattern):
        piece = affine_piece(net, pattern)
        keep = np.ones(piece.normals.shape[0], dtype=bool)
        keep[flipped_neuron] = False
        rows = np.concatenate([piece.normals[keep], domain_poly.normals], axis=0)
        offs = np.concatenate([piece.offsets[keep], domain_poly.offsets])
        return rows, offs

    rows_a, offs_a = stripped(a.pattern)
    rows_b, offs_b = stripped(b.pattern)
    rows = np.concatenate([rows_a, rows_b], axis=0)
    offs = np.concatenate([offs_a, offs_b])
    proj = rows - (rows @ g_unit)[:, None] * g_unit[None, :]
    proj_norm = np.linalg.norm(proj, axis=1)
    n = net.dim
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(
        c,
        A_ub=np.concatenate([rows, proj_norm[:, None]], axis=1),
        b_ub=offs,
        A_eq=np.concatenate([g, [0.0]])[None, :],
        b_eq=[g_off],
        bounds=[(None, None)] * n + [(0.0, None)],
        method="highs",
    )
    if res.status == 2:
        return False
    if res.status != 0:
        raise LPError(f"facet LP failed: {res.message}")
    return float(res.x[-1]) > _LP_TOL


def refine_errors(
    lha: HybridAutomaton,
    field: VectorField,
    data: Dataset,
    cert_cfg: CertifierConfig = CertifierConfig(),
    rho: float = 0.1,
    eps_floor: float = 1e-3,
) -> HybridAutomaton:
    """Per-mode error tightening: certify the empirical per-mode bound and
    keep the global bound wherever certification does not go through.
    Never increases any mode's bound."""
    new_modes = []
    for mode in lha.modes:
        inside = np.all(
            data.points @ mode.invariant.normals.T <= mode.invariant.offsets[None, :] + 1e-12,
            axis=1,
        )
        if not np.any(inside):
            new_modes.append(mode)
            continue
        err = np.abs(
            data.targets[inside]
            - (data.points[inside] @ mode.A.T + mode.c[None, :])
        ).max(axis=0)
        candidate = np.maximum((1.0 + rho) * err + field.delta, field.delta + eps_floor)
        candidate = np.minimum(candidate, mode.eps)
        if np.all(candidate >= mode.eps - 1e-15):
            new_modes.append(mode)
            continue
        outcome = certify_mode(
            field, mode.A, mode.c, mode.invariant, ErrorBound(candidate), field.delta, cert_cfg
        )
        if outcome.certified:
            new_modes.append(replace(mode, eps=candidate))
        else:
            new_modes.append(mode)
    return HybridAutomaton(tuple(new_modes), lha.transitions, lha.domain, lha.label)


# ---------------------------------------------------------------------------
# serialization

def lha_to_json(lha: HybridAutomaton) -> str:
    doc = {
        "label": lha.label,
        "domain": {"lo": lha.domain.lo.tolist(), "hi": lha.domain.hi.tolist()},
        "modes": [
            {
                "id": m.id,
                "pattern": m.pattern.astype(int).tolist(),
                "normals": m.invariant.normals.tolist(),
                "offsets": m.invariant.offsets.tolist(),
                "A": m.A.tolist(),
                "c": m.c.tolist(),
                "eps": m.eps.tolist(),
            }
            for m in lha.modes
        ],
        "transitions": [
            {"source": t.source, "target": t.target} for t in lha.transitions
        ],
    }
    return json.dumps(doc, indent=2)


def lha_from_json(text: str) -> HybridAutomaton:
    doc = json.loads(text)
    domain = IntervalBox(np.array(doc["domain"]["lo"]), np.array(doc["domain"]["hi"]))
    modes = tuple(
        Mode(
            id=m["id"],
            pattern=np.array(m["pattern"], dtype=bool),
            invariant=Polyhedron(np.array(m["normals"]), np.array(m["offsets"])),
            A=np.array(m["A"]),
            c=np.array(m["c"]),
            eps=np.array(m["eps"]),
        )
        for m in doc["modes"]
    )
    by_id = {m.id: m for m in modes}
    transitions = tuple(
        Transition(t["source"], t["target"], by_id[t["target"]].invariant)
        for t in doc["transitions"]
    )
    return HybridAutomaton(modes, transitions, domain, doc.get("label", "hop"))
