"""Counterexample-guided synthesis of certified abstractions.

Loop: sample the domain, fit the template net, estimate a per-dimension
error bound empirically, then try to certify it.  Failed certifications
yield concrete counterexamples that are added (with perturbed neighbours)
to the training set, and the same network trains further.  Parallel
restarts run the loop under different seeds and keep the first success.
"""

from __future__ import annotations

import json
import os
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import numpy as np

from .certifier import (
    CertifierConfig,
    CertOutcome,
    ErrorBound,
    certify,
    estimate_error,
)
from .intervals import IntervalBox
from .network import Network, make_template
from .trainer import (
    Dataset,
    TrainConfig,
    fit_output_layer,
    loss_mse,
    sample_domain,
    train_gd,
    train_pso,
    PROVENANCE_COUNTEREXAMPLE,
)
from .vectorfield import BenchmarkSpec


class SynthesisExhausted(RuntimeError):
    """All iterations (or the timeout) were spent without certification."""

    def __init__(self, message: str, candidate=None, diagnostics=None):
        super().__init__(message)
        self.candidate = candidate
        self.diagnostics = diagnostics or []


class SynthesisCancelled(RuntimeError):
    """A sibling restart already succeeded."""


@dataclass(frozen=True)
class SynthesisMeta:
    seed: int
    template: str
    widths: tuple
    iterations: int
    t_train: float
    t_cert: float
    t_total: float
    dataset_size: int
    winner_seed: Optional[int] = None


@dataclass(frozen=True)
class Abstraction:
    """A template net with a certified per-dimension error bound over the
    domain: every concrete trajectory is a trajectory of the disturbed
    neural ODE  dx/dt = N(x) + d,  |d_j| <= eps_j."""

    net: Network
    eps: ErrorBound
    domain: IntervalBox
    template: str
    delta: float
    meta: SynthesisMeta

    def __post_init__(self):
        if np.any(self.eps.eps <= self.delta):
            raise ValueError("certified bound must exceed the disturbance radius")


@dataclass(frozen=True)
class CegisConfig:
    template: str
    widths: tuple
    max_iters: int = 10
    cex_count: int = 20  # perturbed neighbours added per counterexample
    cex_sigma_frac: float = 0.01  # neighbour spread, fraction of domain width
    eps_floor: float = 1e-3
    rho: float = 0.1  # safety margin on the empirical error estimate
    dataset_size: Optional[int] = None  # None: 10^4 per dimension pair
    init_sweep: int = 1  # seeded inits pre-trained briefly; best continues
    sweep_epochs: int = 600
    target_l1: Optional[float] = None  # keep refining until |eps|_1 meets this
    timeout: float = 1800.0
    seed: int = 0
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    cert: CertifierConfig = dc_field(default_factory=CertifierConfig)

    def __post_init__(self):
        if self.template not in ("pwc", "pwa", "sig"):
            raise ValueError(f"unknown template {self.template!r}")
        if self.max_iters < 1:
            raise ValueError("need at least one iteration")
        if not self.widths:
            raise ValueError("need at least one hidden layer")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


def default_dataset_size(dim: int) -> int:
    return 10_000 * max(1, (dim + 1) // 2)


def _augment(
    data: Dataset, spec: BenchmarkSpec, point: np.ndarray, cfg: CegisConfig, rng
) -> Dataset:
    sigma = cfg.cex_sigma_frac * spec.domain.width
    neighbours = point[None, :] + rng.normal(size=(cfg.cex_count, spec.domain.dim)) * sigma
    pts = np.clip(
        np.concatenate([point[None, :], neighbours]), spec.domain.lo, spec.domain.hi
    )
    return data.extend(pts, spec.field.eval(pts), PROVENANCE_COUNTEREXAMPLE)


def _initial_net(
    spec: BenchmarkSpec, cfg: CegisConfig, data: Dataset, rng
) -> Network:
    best = None
    best_score = np.inf
    sweep = max(1, cfg.init_sweep)
    for _ in range(sweep):
        net = make_template(cfg.template, spec.domain.dim, cfg.widths, rng)
        net = fit_output_layer(net, data)
        if sweep > 1:
            short = replace(
                cfg.train,
                epochs=cfg.sweep_epochs,
                seed=int(rng.integers(2**31)),
            )
            net = train_gd(net, spec.field, data, short)
        score = loss_mse(net, data)
        if score < best_score:
            best, best_score = net, score
    return best


def synthesize(
    spec: BenchmarkSpec,
    cfg: CegisConfig,
    cancel: Optional[threading.Event] = None,
) -> Abstraction:
    """One synthesis run; raises SynthesisExhausted when iterations or the
    timeout run out, and SynthesisCancelled when a sibling run wins."""
    t_start = time.monotonic()
    rng = np.random.default_rng(cfg.seed)
    size = cfg.dataset_size or default_dataset_size(spec.domain.dim)
    data = sample_domain(spec.field, spec.domain, size, cfg.seed)
    delta = spec.field.delta
    net: Optional[Network] = None
    t_train = 0.0
    t_cert = 0.0
    diagnostics = []
    eps = None
    for iteration in range(1, cfg.max_iters + 1):
        if cancel is not None and cancel.is_set():
            raise SynthesisCancelled("sibling restart succeeded")
        if time.monotonic() - t_start > cfg.timeout:
            raise SynthesisExhausted(
                f"timeout after {iteration - 1} iterations", net, diagnostics
            )
        t0 = time.perf_counter()
        train_cfg = replace(cfg.train, seed=int(rng.integers(2**31)))
        if cfg.template == "pwc":
            net = train_pso(cfg.widths, spec.field, data, train_cfg, seed_net=net)
        else:
            if net is None:
                net = _initial_net(spec, cfg, data, rng)
            else:
                net = fit_output_layer(net, data)
            net = train_gd(net, spec.field, data, train_cfg)
            net = fit_output_layer(net, data)
        t_train += time.perf_counter() - t0

        eps = estimate_error(spec.field, net, data, cfg.rho)
        eps = ErrorBound(np.maximum(eps.eps, delta + cfg.eps_floor))
        t0 = time.perf_counter()
        outcome = certify(spec.field, net, spec.domain, eps, delta, cfg.cert)
        t_cert += time.perf_counter() - t0
        diagnostics.append(
            {
                "iteration": iteration,
                "status": outcome.status,
                "eps_l1": eps.l1,
                "boxes": outcome.boxes_explored,
                "dataset": len(data),
            }
        )
        if outcome.certified:
            if cfg.target_l1 is not None and eps.l1 > cfg.target_l1:
                # certified but not at the requested precision: densify
                # around the empirically worst point and keep training
                err = np.abs(data.targets - net.forward(data.points))
                worst = data.points[int(np.argmax(err.max(axis=1)))]
                data = _augment(data, spec, worst, cfg, rng)
                continue
            meta = SynthesisMeta(
                seed=cfg.seed,
                template=cfg.template,
                widths=cfg.widths,
                iterations=iteration,
                t_train=t_train,
                t_cert=t_cert,
                t_total=time.monotonic() - t_start,
                dataset_size=len(data),
            )
            return Abstraction(net, eps, spec.domain, cfg.template, delta, meta)
        if outcome.cex_point is not None:
            data = _augment(data, spec, outcome.cex_point, cfg, rng)
        else:
            fresh = spec.domain.sample(cfg.cex_count + 1, rng)
            data = data.extend(
                fresh, spec.field.eval(fresh), PROVENANCE_COUNTEREXAMPLE
            )
    raise SynthesisExhausted(
        f"no certified abstraction after {cfg.max_iters} iterations", net, diagnostics
    )


def worker_count(requested: int) -> int:
    cap = os.environ.get("NA_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def parallel_synthesize(spec: BenchmarkSpec, cfg: CegisConfig, k: int = 4) -> Abstraction:
    """k restarts with seeds cfg.seed .. cfg.seed+k-1; first success wins
    and cancels the rest.  With one worker the runs execute in seed order,
    so the winner is deterministic."""
    if k < 1:
        raise ValueError("need at least one restart")
    workers = worker_count(k)
    failures = []
    if k == 1 or workers == 1:
        for i in range(k):
            run_cfg = replace(cfg, seed=cfg.seed + i)
            try:
                result = synthesize(spec, run_cfg)
                return replace(
                    result, meta=replace(result.meta, winner_seed=run_cfg.seed)
                )
            except SynthesisExhausted as e:
                failures.append((run_cfg.seed, str(e), e.diagnostics))
        raise SynthesisExhausted(
            f"all {k} restarts exhausted: " + "; ".join(f"seed {s}: {m}" for s, m, _ in failures),
            diagnostics=[d for _, _, ds in failures for d in ds],
        )
    cancel = threading.Event()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(synthesize, spec, replace(cfg, seed=cfg.seed + i), cancel): cfg.seed + i
            for i in range(k)
        }
        pending = set(futures)
        result = None
        while pending:
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                seed = futures[fut]
                try:
                    candidate = fut.result()
                except SynthesisCancelled:
                    continue
                except SynthesisExhausted as e:
                    failures.append((seed, str(e), e.diagnostics))
                    continue
                if result is None:
                    result = replace(
                        candidate, meta=replace(candidate.meta, winner_seed=seed)
                    )
                    cancel.set()
        if result is not None:
            return result
    raise SynthesisExhausted(
        f"all {k} restarts exhausted: " + "; ".join(f"seed {s}: {m}" for s, m, _ in failures),
        diagnostics=[d for _, _, ds in failures for d in ds],
    )


# ---------------------------------------------------------------------------
# serialization: the JSON bytes are deterministic for a fixed seed and flags,
# so wall-clock timings stay out of this file (reports carry them instead)

def abstraction_to_json(abstraction: Abstraction) -> str:
    net = abstraction.net
    doc = {
        "template": abstraction.template,
        "delta": abstraction.delta,
        "eps": abstraction.eps.eps.tolist(),
        "domain": {
            "lo": abstraction.domain.lo.tolist(),
            "hi": abstraction.domain.hi.tolist(),
        },
        "network": {
            "activations": list(net.activations),
            "weights": [w.tolist() for w in net.weights],
            "biases": [b.tolist() for b in net.biases],
        },
        "meta": {
            "seed": abstraction.meta.seed,
            "winner_seed": abstraction.meta.winner_seed,
            "template": abstraction.meta.template,
            "widths": list(abstraction.meta.widths),
            "iterations": abstraction.meta.iterations,
            "dataset_size": abstraction.meta.dataset_size,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def abstraction_from_json(text: str) -> Abstraction:
    doc = json.loads(text)
    net = Network(
        tuple(np.array(w) for w in doc["network"]["weights"]),
        tuple(np.array(b) for b in doc["network"]["biases"]),
        tuple(doc["network"]["activations"]),
    )
    meta = SynthesisMeta(
        seed=doc["meta"]["seed"],
        template=doc["meta"]["template"],
        widths=tuple(doc["meta"]["widths"]),
        iterations=doc["meta"]["iterations"],
        t_train=0.0,
        t_cert=0.0,
        t_total=0.0,
        dataset_size=doc["meta"]["dataset_size"],
        winner_seed=doc["meta"]["winner_seed"],
    )
    return Abstraction(
        net=net,
        eps=ErrorBound(np.array(doc["eps"])),
        domain=IntervalBox(
            np.array(doc["domain"]["lo"]), np.array(doc["domain"]["hi"])
        ),
        template=doc["template"],
        delta=doc["delta"],
        meta=meta,
    )
