"""Small trainable feature encoders with hand-written gradients, plus Adam.

The MLP kind has one ReLU hidden layer; ``linear`` and ``identity`` are its degenerate cases.
Parameters live in an ``EncoderParams`` holding a name -> array dict so that
gradients and optimizer moments share its layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ClusterModel, ContractError, Prior, as_batch

KINDS = ("identity", "linear", "mlp")
PARAM_ORDER = {"identity": (), "linear": ("W", "b"), "mlp": ("W1", "b1", "W2", "b2")}


@dataclass
class EncoderParams:
    kind: str
    din: int
    nz: int
    hidden: int = 0
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "identity" and self.nz != self.din:
            raise ContractError("identity encoder needs nz == din")
        expected = self.shapes()
        for name, shape in expected.items():
            arr = self.arrays.get(name)
            if arr is None or arr.shape != shape:
                raise ContractError(f"parameter {name} must have shape {shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"parameter {name} has non-finite entries")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "linear":
            return {"W": (self.nz, self.din), "b": (self.nz,)}
        if self.kind == "mlp":
            h = self.hidden
            return {"W1": (h, self.din), "b1": (h,), "W2": (self.nz, h), "b2": (self.nz,)}
        return {}

    @classmethod
    def init(cls, kind: str, din: int, nz: int, hidden: int = 64, rng=None) -> "EncoderParams":
        """Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(rng)
        arrays = {}
        if kind == "linear":
            bound = 1.0 / np.sqrt(din)
            arrays["W"] = rng.uniform(-bound, bound, (nz, din))
            arrays["b"] = rng.uniform(-bound, bound, nz)
        elif kind == "mlp":
            b1, b2 = 1.0 / np.sqrt(din), 1.0 / np.sqrt(hidden)
            arrays["W1"] = rng.uniform(-b1, b1, (hidden, din))
            arrays["b1"] = rng.uniform(-b1, b1, hidden)
            arrays["W2"] = rng.uniform(-b2, b2, (nz, hidden))
            arrays["b2"] = rng.uniform(-b2, b2, nz)
        elif kind == "identity":
            nz = din
        return cls(kind, din, nz, hidden if kind == "mlp" else 0, arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.kind, self.din, self.nz, self.hidden, {k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> tuple[str, ...]:
        return PARAM_ORDER[self.kind]


@dataclass
class ForwardCache:
    x: np.ndarray
    params: EncoderParams
    pre: np.ndarray | None = None
    hidden: np.ndarray | None = None
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = dict(self.params.arrays)

    def is_stale(self) -> bool:
        current = self.params.arrays
        return any(current.get(name) is not arr for name, arr in self.arrays.items())


def forward(x, params: EncoderParams) -> tuple[np.ndarray, ForwardCache]:
    x = as_batch(x, params.din)
    a = params.arrays
    if params.kind == "identity":
        return x, ForwardCache(x, params)
    if params.kind == "linear":
        return x @ a["W"].T + a["b"], ForwardCache(x, params)
    pre = x @ a["W1"].T + a["b1"]
    h = np.maximum(pre, 0.0)
    return h @ a["W2"].T + a["b2"], ForwardCache(x, params, pre, h)


def backward(cache: ForwardCache, dz) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of sum_i <dz_i, z_i> with respect to every parameter and the input."""
    if cache.is_stale():
        raise ContractError("encoder parameters changed since this forward pass")
    params = cache.params
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != (cache.x.shape[0], params.nz):
        raise ContractError(f"dz has shape {dz.shape}, expected {(cache.x.shape[0], params.nz)}")
    a = params.arrays
    if params.kind == "identity":
        return {}, dz.copy()
    if params.kind == "linear":
        return {"W": dz.T @ cache.x, "b": dz.sum(axis=0)}, dz @ a["W"]
    dh = dz @ a["W2"]
    dpre = dh * (cache.pre > 0)
    grads = {
        "W1": dpre.T @ cache.x,
        "b1": dpre.sum(axis=0),
        "W2": dz.T @ cache.hidden,
        "b2": dz.sum(axis=0),
    }
    return grads, dpre @ a["W1"]


def cost_backward(z, model: ClusterModel, dcost) -> tuple[np.ndarray, np.ndarray]:
    """Chain d(loss)/d(costs) through the quadratic cost term.

    Returns ``(dz, dcentroids)``. The normalization constant does not depend
    on ``z`` or the centroids and contributes nothing.
    """
    z = np.asarray(z, dtype=np.float64)
    dcost = np.asarray(dcost, dtype=np.float64)
    diff = z[:, None, :] - model.centroids[None, :, :]
    if model.isotropic:
        g = diff * (dcost[:, :, None] / model.sigma)
    else:
        g = np.einsum("nk,kuv,nkv->nku", dcost, model.inv_covs, diff)
    return g.sum(axis=1), -g.sum(axis=0)


def loss_grad(z, labels, model: ClusterModel) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the mean assigned quadratic cost (1/N) sum_i c(z_i, mu_{k_i})."""
    z = as_batch(z, model.d)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= model.k):
        raise ContractError("labels must be a length-N vector of valid cluster indices")
    dcost = np.zeros((n, model.k))
    dcost[np.arange(n), labels] = 1.0 / n
    return cost_backward(z, model, dcost)


def assigned_quadratic_loss(z, labels, model: ClusterModel) -> float:
    z = np.asarray(z, dtype=np.float64)
    diff = z - model.centroids[labels]
    if model.isotropic:
        return float(np.einsum("nd,nd->n", diff, diff).mean() / (2.0 * model.sigma))
    return float(0.5 * np.einsum("nu,nuv,nv->n", diff, model.inv_covs[labels], diff).mean())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; ``state`` is advanced in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**state.t)
        vhat = v / (1 - b2**state.t)
        out[name] = theta - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


# Checkpoint: one ASCII header line of key=value tokens, then little-endian float64 payload.
MAGIC = "combassign-checkpoint"


def save_checkpoint(path, params: EncoderParams, model: ClusterModel) -> None:
    cov = "isotropic" if model.isotropic else "full"
    header = (
        f"{MAGIC} v=1 kind={params.kind} din={params.din} hidden={params.hidden} "
        f"nz={params.nz} k={model.k} cov={cov} sigma={model.sigma!r}\n"
    )
    parts = [params.arrays[name].ravel() for name in params.names()]
    parts += [model.centroids.ravel(), model.prior.probs]
    if not model.isotropic:
        parts += [model.inv_covs.ravel(), model.half_log_dets]
    payload = np.concatenate(parts) if parts else np.zeros(0)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[EncoderParams, ClusterModel]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        payload = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    if not header or header[0] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint file")
    meta = dict(tok.split("=", 1) for tok in header[1:])
    kind = meta["kind"]
    din, hidden, nz, k = (int(meta[key]) for key in ("din", "hidden", "nz", "k"))
    shell = EncoderParams.init(kind, din, nz, hidden or 1, rng=0)
    arrays, pos = {}, 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > payload.size:
            raise ContractError(f"{path} payload is truncated")
        chunk = payload[pos : pos + size].reshape(shape)
        pos += size
        return chunk.copy()

    for name, shape in shell.shapes().items():
        arrays[name] = take(shape)
    params = EncoderParams(kind, din, nz, hidden if kind == "mlp" else 0, arrays)
    centroids = take((k, nz))
    prior = Prior(take((k,)))
    if meta["cov"] == "full":
        inv = take((k, nz, nz))
        hld = take((k,))
        model = ClusterModel(centroids, prior, None, inv, hld)
    else:
        model = ClusterModel(centroids, prior, float(meta["sigma"]))
    if pos != payload.size:
        raise ContractError(f"{path} has {payload.size - pos} trailing values")
    return params, model
