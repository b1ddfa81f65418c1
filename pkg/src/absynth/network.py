"""Feed-forward networks used as abstraction templates.

A network is k hidden layers with relu/step/sigmoid/tanh activations and a
linear output layer, mapping R^n -> R^n.  Besides plain evaluation it
supports sound interval evaluation, activation-pattern extraction for
relu/step nets, and the per-pattern affine closed form that the hybridizer
turns into modes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import intervals as iv

ACTIVATIONS = ("relu", "step", "sigmoid", "tanh")

# templates: piecewise-constant nets end in a step layer, piecewise-affine
# nets are all-relu, sigmoidal nets all-sigmoid
TEMPLATES = ("pwc", "pwa", "sig")


class WeightsFormatError(ValueError):
    """Malformed or dimensionally inconsistent weights file."""


def _act(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "step":
        return np.where(x > 0.0, 1.0, 0.0)
    if kind == "sigmoid":
        return iv._sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def _act_interval(kind: str, lo: np.ndarray, hi: np.ndarray):
    if kind == "relu":
        return iv.irelu(lo, hi)
    if kind == "step":
        return iv.istep(lo, hi)
    if kind == "sigmoid":
        return iv.isigmoid(lo, hi)
    if kind == "tanh":
        return iv.itanh(lo, hi)
    raise ValueError(f"unknown activation {kind!r}")


def _act_prime_interval(kind: str, lo: np.ndarray, hi: np.ndarray):
    if kind == "relu":
        out_lo = np.where(lo > 0.0, 1.0, 0.0)
        out_hi = np.where(hi > 0.0, 1.0, 0.0)
        return out_lo, out_hi
    if kind == "sigmoid":
        return iv.isigmoid_prime(lo, hi)
    if kind == "tanh":
        return iv.itanh_prime(lo, hi)
    raise ValueError(f"activation {kind!r} has no usable derivative")


@dataclass(frozen=True)
class Network:
    """Immutable feed-forward net: weights W_1..W_{k+1}, biases b_1..b_{k+1},
    one activation per hidden layer; the output layer is linear."""

    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        acts = tuple(self.activations)
        if len(ws) != len(bs) or len(ws) != len(acts) + 1:
            raise ValueError("need k+1 weight/bias pairs for k hidden activations")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        prev = ws[0].shape[1]
        for w, b in zip(ws, bs):
            if w.ndim != 2 or w.shape[1] != prev or b.shape[0] != w.shape[0]:
                raise ValueError(
                    f"layer shape mismatch: W{w.shape} after width {prev}, b{b.shape}"
                )
            prev = w.shape[0]
        if ws[-1].shape[0] != ws[0].shape[1]:
            raise ValueError("output dimension must equal input dimension")
        for arr in ws + bs:
            arr.flags.writeable = False
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_widths(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def n_hidden_neurons(self) -> int:
        return sum(self.hidden_widths)

    @property
    def template(self) -> Optional[str]:
        """Template kind, or None if the activations match no template."""
        acts = self.activations
        if not acts:
            return None
        if all(a == "sigmoid" for a in acts):
            return "sig"
        if all(a == "relu" for a in acts):
            return "pwa"
        if all(a == "relu" for a in acts[:-1]) and acts[-1] == "step":
            return "pwc"
        return None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        y = x[None, :] if single else x
        if y.shape[-1] != self.dim:
            raise ValueError(f"input dimension {y.shape[-1]} != {self.dim}")
        for w, b, a in zip(self.weights[:-1], self.biases[:-1], self.activations):
            y = _act(a, y @ w.T + b)
        y = y @ self.weights[-1].T + self.biases[-1]
        return y[0] if single else y

    def forward_interval(self, lo: np.ndarray, hi: np.ndarray):
        """Sound enclosure of {N(x) : x in box}; batched over leading axes."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if lo.shape[-1] != self.dim:
            raise ValueError(f"input dimension {lo.shape[-1]} != {self.dim}")
        for w, b, a in zip(self.weights[:-1], self.biases[:-1], self.activations):
            lo, hi = iv.imatvec(w, lo, hi)
            lo, hi = iv._outward(lo + b, hi + b)
            lo, hi = _act_interval(a, lo, hi)
        lo, hi = iv.imatvec(self.weights[-1], lo, hi)
        return iv._outward(lo + self.biases[-1], hi + self.biases[-1])

    def jacobian_interval(self, lo: np.ndarray, hi: np.ndarray):
        """Enclosure of the Jacobian over a box, by forward-mode interval
        differentiation through the layers (sigmoid/tanh/relu only)."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        jlo = np.eye(self.dim)
        jhi = np.eye(self.dim)
        for w, b, a in zip(self.weights[:-1], self.biases[:-1], self.activations):
            jlo, jhi = iv.imatmat(*iv._outward(w, w, 0), jlo, jhi)
            lo, hi = iv.imatvec(w, lo, hi)
            lo, hi = iv._outward(lo + b, hi + b)
            dlo, dhi = _act_prime_interval(a, lo, hi)
            p1, p2 = dlo[:, None] * jlo, dlo[:, None] * jhi
            p3, p4 = dhi[:, None] * jlo, dhi[:, None] * jhi
            jlo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
            jhi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
            jlo, jhi = iv._outward(jlo, jhi)
            lo, hi = _act_interval(a, lo, hi)
        w = self.weights[-1]
        return iv.imatmat(w, w, jlo, jhi)

    def preactivations(self, x: np.ndarray) -> np.ndarray:
        """Concatenated hidden pre-activation values at x (batched)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        y = x[None, :] if single else x
        pres = []
        for w, b, a in zip(self.weights[:-1], self.biases[:-1], self.activations):
            pre = y @ w.T + b
            pres.append(pre)
            y = _act(a, pre)
        out = np.concatenate(pres, axis=-1)
        return out[0] if single else out

    def pattern_at(self, x: np.ndarray) -> np.ndarray:
        """Boolean on/off pattern of all hidden neurons at x.

        Pre-activation exactly 0 counts as off, matching the 'otherwise'
        branches of the relu/step definitions."""
        if self.template not in ("pwa", "pwc"):
            raise ValueError("activation patterns exist only for relu/step nets")
        return self.preactivations(x) > 0.0


@dataclass(frozen=True)
class AffinePiece:
    """Closed form N(x) = A x + c on the region where a fixed activation
    pattern holds; the region is the conjunction of per-neuron halfspaces
    normal . x <= offset (strict for 'on' neurons)."""

    A: np.ndarray
    c: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    strict: np.ndarray

    def contains(self, x: np.ndarray, atol: float = 0.0) -> bool:
        return bool(np.all(self.normals @ np.asarray(x) <= self.offsets + atol))


def affine_piece(net: Network, pattern: np.ndarray) -> AffinePiece:
    """Affine closed form of a relu/step net under a fixed on/off pattern."""
    if net.template not in ("pwa", "pwc"):
        raise ValueError("affine pieces exist only for relu/step nets")
    pattern = np.asarray(pattern, dtype=bool).reshape(-1)
    if pattern.shape[0] != net.n_hidden_neurons:
        raise ValueError("pattern length != number of hidden neurons")
    n = net.dim
    m = np.eye(n)
    v = np.zeros(n)
    normals, offsets, strict = [], [], []
    pos = 0
    for w, b, a in zip(net.weights[:-1], net.biases[:-1], net.activations):
        h = w.shape[0]
        bits = pattern[pos : pos + h]
        pos += h
        pre_m = w @ m
        pre_v = w @ v + b
        # neuron j on  <=> pre_j(x) > 0  <=> -pre_m[j] . x < pre_v[j]
        # neuron j off <=> pre_j(x) <= 0 <=>  pre_m[j] . x <= -pre_v[j]
        normals.append(np.where(bits[:, None], -pre_m, pre_m))
        offsets.append(np.where(bits, pre_v, -pre_v))
        strict.append(bits.copy())
        if a == "relu":
            m = np.where(bits[:, None], pre_m, 0.0)
            v = np.where(bits, pre_v, 0.0)
        else:  # step: output is the constant pattern, no x-dependence left
            m = np.zeros((h, n))
            v = bits.astype(np.float64)
    A = net.weights[-1] @ m
    c = net.weights[-1] @ v + net.biases[-1]
    return AffinePiece(
        A=A,
        c=c,
        normals=np.concatenate(normals, axis=0),
        offsets=np.concatenate(offsets, axis=0),
        strict=np.concatenate(strict, axis=0),
    )


def _init_hidden(n: int, widths: Sequence[int], rng: np.random.Generator, scale: float):
    layers = []
    prev = n
    for h in widths:
        w = rng.normal(0.0, scale / np.sqrt(prev), size=(h, prev))
        b = rng.uniform(-0.5, 0.5, size=h)
        layers.append((w, b))
        prev = h
    return layers


def make_template(
    kind: str, n: int, widths: Sequence[int], rng: np.random.Generator
) -> Network:
    """Randomly initialized template net of the given kind."""
    if kind not in TEMPLATES:
        raise ValueError(f"unknown template {kind!r}; expected one of {TEMPLATES}")
    widths = tuple(int(w) for w in widths)
    if not widths or any(w < 1 for w in widths):
        raise ValueError("need at least one hidden layer of positive width")
    scale = 2.0 if kind != "sig" else 3.0
    layers = _init_hidden(n, widths, rng, scale)
    out_w = rng.normal(0.0, 1.0 / np.sqrt(widths[-1]), size=(n, widths[-1]))
    out_b = np.zeros(n)
    if kind == "pwa":
        acts = ("relu",) * len(widths)
    elif kind == "sig":
        acts = ("sigmoid",) * len(widths)
    else:
        acts = ("relu",) * (len(widths) - 1) + ("step",)
    ws = tuple(w for w, _ in layers) + (out_w,)
    bs = tuple(b for _, b in layers) + (out_b,)
    return Network(ws, bs, acts)


def flatten_params(net: Network) -> np.ndarray:
    return np.concatenate([w.ravel() for w in net.weights] + [b for b in net.biases])


def unflatten_params(net: Network, theta: np.ndarray) -> Network:
    """Rebuild a net of the same shape from a flat parameter vector."""
    ws, bs = [], []
    k = 0
    for w in net.weights:
        ws.append(theta[k : k + w.size].reshape(w.shape))
        k += w.size
    for b in net.biases:
        bs.append(theta[k : k + b.size])
        k += b.size
    if k != theta.size:
        raise ValueError("parameter vector length mismatch")
    return Network(tuple(ws), tuple(bs), net.activations)


def save_weights(net: Network, path) -> None:
    """Plain-text, self-describing, diff-able weights file."""
    buf = io.StringIO()
    dims = [net.dim, *net.hidden_widths, net.weights[-1].shape[0]]
    buf.write("absynth-weights v1\n")
    buf.write("dims " + " ".join(str(d) for d in dims) + "\n")
    buf.write("activations " + " ".join(net.activations) + "\n")
    for i, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        buf.write(f"W{i}\n")
        for row in w:
            buf.write(" ".join(repr(float(x)) for x in row) + "\n")
        buf.write(f"b{i}\n")
        buf.write(" ".join(repr(float(x)) for x in b) + "\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def load_weights(path) -> Network:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("absynth-weights"):
        raise WeightsFormatError(f"{path}: not a weights file")
    if not lines[1].startswith("dims "):
        raise WeightsFormatError(f"{path}: missing dims header")
    dims = [int(t) for t in lines[1].split()[1:]]
    if len(dims) < 2:
        raise WeightsFormatError(f"{path}: need at least input and output dims")
    if not lines[2].startswith("activations"):
        raise WeightsFormatError(f"{path}: missing activations header")
    acts = tuple(lines[2].split()[1:])
    if len(acts) != len(dims) - 2:
        raise WeightsFormatError(f"{path}: {len(acts)} activations for {len(dims) - 2} hidden layers")
    idx = 3
    ws, bs = [], []
    for i in range(1, len(dims)):
        rows_expected, cols_expected = dims[i], dims[i - 1]
        if idx >= len(lines) or lines[idx] != f"W{i}":
            raise WeightsFormatError(f"{path}: expected marker W{i}")
        idx += 1
        rows = []
        for _ in range(rows_expected):
            vals = [float(t) for t in lines[idx].split()]
            if len(vals) != cols_expected:
                raise WeightsFormatError(
                    f"{path}: W{i} row has {len(vals)} entries, expected {cols_expected}"
                )
            rows.append(vals)
            idx += 1
        if idx >= len(lines) or lines[idx] != f"b{i}":
            raise WeightsFormatError(f"{path}: expected marker b{i}")
        idx += 1
        bias = [float(t) for t in lines[idx].split()]
        if len(bias) != rows_expected:
            raise WeightsFormatError(f"{path}: b{i} has {len(bias)} entries, expected {rows_expected}")
        idx += 1
        ws.append(np.array(rows))
        bs.append(np.array(bias))
    try:
        return Network(tuple(ws), tuple(bs), acts)
    except ValueError as e:
        raise WeightsFormatError(f"{path}: {e}") from e
