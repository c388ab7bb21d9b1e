"""Feed-forward networks, Adam, and a generic mini-batch training loop.

Models keep all parameters in one flat float64 vector (layer matrices are
views carved out by offset), which keeps the optimizer and checkpoint
formats trivial.  Forward evaluation has two paths: a plain numpy path for
rollouts and sampling, and a taped path (`tape_forward`) used by
`loss_grad` to get reverse-mode gradients.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _sigmoid
from .exceptions import DimMismatchError, NonFiniteLossError

_CHECKPOINT_VERSION = 1


def _relu_np(x):
    return np.maximum(x, 0.0)


def _silu_np(x):
    return x * _sigmoid(x)


_ACTIVATIONS_NP = {"relu": _relu_np, "silu": _silu_np}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    ``hidden`` may be empty, giving a single affine layer.  ``residual``
    adds an input skip connection to the output when in_dim == out_dim
    (ignored otherwise).
    """

    in_dim: int
    out_dim: int
    hidden: tuple = (2,)
    activation: str = "relu"
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer dims must be >= 1")
        if self.activation not in _ACTIVATIONS_NP:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self):
        return (self.in_dim,) + self.hidden + (self.out_dim,)

    @property
    def n_params(self):
        dims = self.dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    def layer_slices(self):
        """Yield (weight_slice, bias_slice, d_in, d_out) into the flat vector."""
        dims = self.dims
        ofs = 0
        for i in range(len(dims) - 1):
            d_in, d_out = dims[i], dims[i + 1]
            w = slice(ofs, ofs + d_in * d_out)
            b = slice(w.stop, w.stop + d_out)
            ofs = b.stop
            yield w, b, d_in, d_out

    def to_dict(self):
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            in_dim=d["in_dim"],
            out_dim=d["out_dim"],
            hidden=tuple(d["hidden"]),
            activation=d["activation"],
            residual=d["residual"],
        )


@dataclass
class MlpModel:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got {self.params.shape}"
            )
        if not np.all(np.isfinite(self.params)):
            raise ValueError("parameters contain non-finite values")

    def to_dict(self):
        return {
            "version": _CHECKPOINT_VERSION,
            "spec": self.spec.to_dict(),
            "params": [float(p) for p in self.params],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        return cls(spec=MlpSpec.from_dict(d["spec"]), params=np.array(d["params"]))


def init_mlp(spec: MlpSpec, seed) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for w, _, d_in, d_out in spec.layer_slices():
        bound = np.sqrt(6.0 / (d_in + d_out))
        params[w] = rng.uniform(-bound, bound, size=d_in * d_out)
    return MlpModel(spec=spec, params=params)


def _promote(x, in_dim, name="input"):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise DimMismatchError(f"{name} must have {in_dim} columns, got shape {x.shape}")
    return x, squeeze


def forward(model: MlpModel, x):
    """Plain numpy forward pass; accepts (in_dim,) or (batch, in_dim)."""
    spec = model.spec
    x, squeeze = _promote(x, spec.in_dim)
    act = _ACTIVATIONS_NP[spec.activation]
    h = x
    layers = list(spec.layer_slices())
    for i, (w, b, d_in, d_out) in enumerate(layers):
        h = h @ model.params[w].reshape(d_in, d_out) + model.params[b]
        if i < len(layers) - 1:
            h = act(h)
    if spec.residual and spec.in_dim == spec.out_dim:
        h = h + x
    return h[0] if squeeze else h


def tape_forward(model: MlpModel, x):
    """Taped forward pass; returns (output Tensor, list of parameter Tensors)."""
    spec = model.spec
    x, _ = _promote(x, spec.in_dim)
    layers = list(spec.layer_slices())
    ptensors = []
    h = Tensor(x)
    for i, (w, b, d_in, d_out) in enumerate(layers):
        wt = Tensor(model.params[w].reshape(d_in, d_out).copy(), requires_grad=True)
        bt = Tensor(model.params[b].copy(), requires_grad=True)
        ptensors.extend((wt, bt))
        h = h @ wt + bt
        if i < len(layers) - 1:
            h = getattr(h, spec.activation)()
    if spec.residual and spec.in_dim == spec.out_dim:
        h = h + x
    return h, ptensors


def loss_grad(model: MlpModel, x, loss_fn):
    """Evaluate loss_fn on the taped network output at batch x.

    loss_fn maps the output Tensor to a scalar Tensor.  Returns the loss
    value and the gradient with respect to the flat parameter vector.
    """
    out, ptensors = tape_forward(model, x)
    loss = loss_fn(out)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss evaluated to {value}")
    loss.backward()
    grad = np.empty_like(model.params)
    ofs = 0
    for p in ptensors:
        n = p.data.size
        grad[ofs : ofs + n] = (
            np.zeros(n) if p.grad is None else p.grad.reshape(-1)
        )
        ofs += n
    return value, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def adam_step(state: AdamState, model: MlpModel, grad):
    """Standard Adam update with bias correction; mutates model and state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise DimMismatchError("gradient size does not match parameter vector")
    if state.m is None:
        state.m = np.zeros_like(model.params)
        state.v = np.zeros_like(model.params)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    model.params -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return model, state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def train(model: MlpModel, dataset, make_batch, cfg: TrainConfig):
    """Generic mini-batch Adam loop.

    make_batch(dataset, idx, rng) -> (input batch, loss_fn) assembles the
    network input and a loss closure over the selected samples; stochastic
    objectives draw their noise from `rng`, so runs are reproducible given
    cfg.seed.  Returns (model, per-epoch mean loss history); a non-finite
    loss aborts with the history attached to the exception.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    history = []
    # divergence is detected on the loss value, so overflow warnings en route
    # to the NonFiniteLossError are just noise
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            idx = rng.permutation(n) if cfg.shuffle else np.arange(n)
            batch_losses = []
            for start in range(0, n, cfg.batch_size):
                batch_idx = idx[start : start + cfg.batch_size]
                x, loss_fn = make_batch(dataset, batch_idx, rng)
                try:
                    value, grad = loss_grad(model, x, loss_fn)
                except NonFiniteLossError as err:
                    raise NonFiniteLossError(str(err), history=history) from None
                adam_step(state, model, grad)
                batch_losses.append(value)
            history.append(float(np.mean(batch_losses)))
    return model, history
