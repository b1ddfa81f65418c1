"""Fit template networks to vector fields over sampled data.

Gradient descent (hand-rolled full-batch backprop) covers the relu and
sigmoidal templates; the step-output template has zero gradient almost
everywhere, so it is trained by particle swarm optimisation against the
worst-case sample error instead.  Everything is deterministic under the
configured seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .intervals import IntervalBox
from .network import Network, flatten_params, make_template, unflatten_params
from .vectorfield import VectorField


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during gradient descent."""


PROVENANCE_INITIAL = 0
PROVENANCE_COUNTEREXAMPLE = 1


@dataclass(frozen=True)
class Dataset:
    """Sample points with their exact field values and a provenance tag."""

    points: np.ndarray
    targets: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        tgt = np.array(self.targets, dtype=np.float64)
        prov = np.array(self.provenance, dtype=np.int8)
        if pts.ndim != 2 or pts.shape != tgt.shape or prov.shape != (pts.shape[0],):
            raise ValueError("inconsistent dataset shapes")
        for arr in (pts, tgt, prov):
            arr.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def extend(self, points: np.ndarray, targets: np.ndarray, provenance: int) -> "Dataset":
        points = np.atleast_2d(points)
        targets = np.atleast_2d(targets)
        tag = np.full(points.shape[0], provenance, dtype=np.int8)
        return Dataset(
            np.concatenate([self.points, points]),
            np.concatenate([self.targets, targets]),
            np.concatenate([self.provenance, tag]),
        )


@dataclass(frozen=True)
class TrainConfig:
    # gradient descent; "gd" is plain descent, "momentum" adds a Nesterov
    # velocity term, "adam" adds per-parameter step scaling (needed to fit
    # cusps like |x|^(2/3) at small widths in reasonable time)
    lr: float = 1e-2
    epochs: int = 5000
    batch_size: Optional[int] = None  # None = full batch
    optimizer: str = "gd"
    momentum: float = 0.9
    plateau_patience: int = 200
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    # particle swarm
    swarm: int = 100
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    iterations: int = 200
    init_range: float = 2.0  # parameters initialised in [-r, r]
    pso_sample_cap: Optional[int] = 4000  # swarm fitness on at most this many points
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.epochs + 1, self.swarm, self.iterations + 1, self.init_range) <= 0:
            raise ValueError("train parameters must be positive")
        if self.optimizer not in ("gd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def sample_domain(field: VectorField, box: IntervalBox, m: int, seed: int) -> Dataset:
    """m points uniform over the box, with exact targets attached."""
    if m < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    pts = box.sample(m, rng)
    return Dataset(pts, field.eval(pts), np.zeros(m, dtype=np.int8))


def loss_mse(net: Network, data: Dataset) -> float:
    """Mean over samples of the 2-norm of the residual vector."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    err = data.targets - net.forward(data.points)
    return float(np.mean(np.linalg.norm(err, axis=1)))


def loss_max(net: Network, data: Dataset) -> float:
    """Worst-case sample error in the infinity norm."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    err = data.targets - net.forward(data.points)
    return float(np.max(np.abs(err)))


def residuals(net: Network, data: Dataset) -> np.ndarray:
    return data.targets - net.forward(data.points)


def fit_output_layer(net: Network, data: Dataset) -> Network:
    """Least-squares refit of the linear output layer on frozen hidden
    features; deterministic, and a strong starting point for descent."""
    x = data.points
    for w, b, a in zip(net.weights[:-1], net.biases[:-1], net.activations):
        from .network import _act

        x = _act(a, x @ w.T + b)
    feats = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(feats, data.targets, rcond=None)
    w_out = sol[:-1].T
    b_out = sol[-1]
    return Network(net.weights[:-1] + (w_out,), net.biases[:-1] + (b_out,), net.activations)


def _forward_cached(net_ws, net_bs, acts, x):
    pres, outs = [], [x]
    y = x
    for w, b, a in zip(net_ws[:-1], net_bs[:-1], acts):
        pre = y @ w.T + b
        pres.append(pre)
        if a == "relu":
            y = np.maximum(pre, 0.0)
        elif a == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-np.clip(pre, -500, 500)))
        elif a == "tanh":
            y = np.tanh(pre)
        else:
            raise ValueError(f"gradient descent cannot train {a!r} activations")
        outs.append(y)
    out = y @ net_ws[-1].T + net_bs[-1]
    return pres, outs, out


def train_gd(net: Network, field: VectorField, data: Dataset, cfg: TrainConfig) -> Network:
    """Gradient descent on the mean-of-2-norms loss, full batch by default.

    The best parameters seen are returned, so the result never scores
    worse than the input net on the training data.  The learning rate
    halves when the loss plateaus; relu backpropagates subgradient 0 at
    the kink.  cfg.optimizer selects the update rule.
    """
    if net.template not in ("pwa", "sig"):
        raise ValueError("gradient training applies to relu or sigmoidal templates only")
    if len(data) == 0:
        raise ValueError("empty dataset")
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    acts = net.activations
    x, t = data.points, data.targets
    m = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    batch = cfg.batch_size if cfg.batch_size is not None else m
    vel = None
    adam_m = adam_v = None
    if cfg.optimizer == "momentum":
        vel = [np.zeros_like(w) for w in ws] + [np.zeros_like(b) for b in bs]
    elif cfg.optimizer == "adam":
        adam_m = [np.zeros_like(w) for w in ws] + [np.zeros_like(b) for b in bs]
        adam_v = [np.zeros_like(w) for w in ws] + [np.zeros_like(b) for b in bs]

    def full_loss() -> float:
        _, _, out = _forward_cached(ws, bs, acts, x)
        return float(np.mean(np.linalg.norm(t - out, axis=1)))

    best_loss = full_loss()
    best = ([w.copy() for w in ws], [b.copy() for b in bs])
    lr = cfg.lr
    since_improvement = 0
    n_layers = len(ws)
    for epoch in range(1, cfg.epochs + 1):
        if batch >= m:
            bx, bt = x, t
        else:
            idx = rng.integers(0, m, size=batch)
            bx, bt = x[idx], t[idx]
        pres, outs, out = _forward_cached(ws, bs, acts, bx)
        err = out - bt
        norms = np.linalg.norm(err, axis=1, keepdims=True)
        loss = float(np.mean(norms))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
        delta = np.divide(err, norms, out=np.zeros_like(err), where=norms > 0) / bx.shape[0]
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            grads[i] = delta.T @ outs[i]
            grads[n_layers + i] = delta.sum(axis=0)
            if i > 0:
                back = delta @ ws[i]
                pre, a = pres[i - 1], acts[i - 1]
                if a == "relu":
                    back *= pre > 0.0
                elif a == "sigmoid":
                    s = outs[i]
                    back *= s * (1.0 - s)
                else:  # tanh
                    back *= 1.0 - outs[i] ** 2
                delta = back
        params = ws + bs
        if cfg.optimizer == "gd":
            for p, g in zip(params, grads):
                p -= lr * g
        elif cfg.optimizer == "momentum":
            mu = cfg.momentum
            for j, (p, g) in enumerate(zip(params, grads)):
                vel[j] = mu * vel[j] - lr * g
                p += mu * vel[j] - lr * g  # Nesterov lookahead
        else:  # adam
            b1, b2, eps = 0.9, 0.999, 1e-8
            c1 = 1.0 - b1**epoch
            c2 = 1.0 - b2**epoch
            for j, (p, g) in enumerate(zip(params, grads)):
                adam_m[j] = b1 * adam_m[j] + (1.0 - b1) * g
                adam_v[j] = b2 * adam_v[j] + (1.0 - b2) * g * g
                p -= lr * (adam_m[j] / c1) / (np.sqrt(adam_v[j] / c2) + eps)
        cur = full_loss()
        if cur < best_loss - 1e-12:
            best_loss = cur
            best = ([w.copy() for w in ws], [b.copy() for b in bs])
            since_improvement = 0
        else:
            since_improvement += 1
            if since_improvement >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                since_improvement = 0
                if lr < cfg.min_lr:
                    break
    return Network(tuple(best[0]), tuple(best[1]), acts)


def _decode_particles(theta: np.ndarray, template: Network):
    """Split a (p, dim_params) matrix into per-layer weight/bias stacks."""
    ws, bs = [], []
    k = 0
    p = theta.shape[0]
    for w in template.weights:
        ws.append(theta[:, k : k + w.size].reshape(p, *w.shape))
        k += w.size
    for b in template.biases:
        bs.append(theta[:, k : k + b.size])
        k += b.size
    return ws, bs


def _swarm_losses(theta: np.ndarray, template: Network, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """loss_max for every particle, vectorised in float32 (training signal
    only; the returned net is always evaluated in float64 downstream)."""
    p = theta.shape[0]
    out = np.empty(p)
    x32 = x.astype(np.float32)
    t32 = t.astype(np.float32)
    chunk = max(1, int(8e6 // max(1, x.shape[0])))
    for s in range(0, p, chunk):
        ws, bs = _decode_particles(theta[s : s + chunk].astype(np.float32), template)
        y = np.broadcast_to(x32, (ws[0].shape[0],) + x32.shape)
        for i, a in enumerate(template.activations):
            pre = y @ ws[i].transpose(0, 2, 1) + bs[i][:, None, :]
            if a == "relu":
                y = np.maximum(pre, np.float32(0.0))
            elif a == "step":
                y = (pre > 0.0).astype(np.float32)
            elif a == "sigmoid":
                y = 1.0 / (1.0 + np.exp(-np.clip(pre, -80, 80)))
            else:
                y = np.tanh(pre)
        pred = y @ ws[-1].transpose(0, 2, 1) + bs[-1][:, None, :]
        out[s : s + chunk] = np.max(np.abs(t32[None] - pred), axis=(1, 2)).astype(np.float64)
    return out


def train_pso(
    widths: Sequence[int],
    field: VectorField,
    data: Dataset,
    cfg: TrainConfig,
    seed_net: Optional[Network] = None,
) -> Network:
    """Particle swarm optimisation of a step-output (piecewise constant)
    template against loss_max; returns the global best decoded as a net.

    The swarm is initialised uniformly in [-r, r]; velocities are clamped
    to half that range.  A seed net, when given, joins as one particle so
    resumed runs warm-start from the previous best.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    template = make_template("pwc", data.dim, widths, rng)
    if seed_net is not None and seed_net.template != "pwc":
        raise ValueError("seed net must be a piecewise constant template")
    dim = flatten_params(template).size
    r = cfg.init_range
    vmax = r  # half of the parameter range [-r, r]
    pos = rng.uniform(-r, r, size=(cfg.swarm, dim))
    if seed_net is not None:
        pos[0] = flatten_params(seed_net)
    vel = np.zeros((cfg.swarm, dim))
    x, t = data.points, data.targets
    if cfg.pso_sample_cap is not None and len(data) > cfg.pso_sample_cap:
        keep = rng.choice(len(data), size=cfg.pso_sample_cap, replace=False)
        x, t = x[keep], t[keep]
    fitness = _swarm_losses(pos, template, x, t)
    pbest, pbest_fit = pos.copy(), fitness.copy()
    g = int(np.argmin(pbest_fit))
    gbest, gbest_fit = pbest[g].copy(), float(pbest_fit[g])
    for _ in range(cfg.iterations):
        r1 = rng.uniform(size=(cfg.swarm, dim))
        r2 = rng.uniform(size=(cfg.swarm, dim))
        vel = (
            cfg.inertia * vel
            + cfg.cognitive * r1 * (pbest - pos)
            + cfg.social * r2 * (gbest[None] - pos)
        )
        np.clip(vel, -vmax, vmax, out=vel)
        pos = pos + vel
        fitness = _swarm_losses(pos, template, x, t)
        improved = fitness < pbest_fit
        pbest[improved] = pos[improved]
        pbest_fit[improved] = fitness[improved]
        g = int(np.argmin(pbest_fit))
        if pbest_fit[g] < gbest_fit:
            gbest, gbest_fit = pbest[g].copy(), float(pbest_fit[g])
    return unflatten_params(template, gbest)
