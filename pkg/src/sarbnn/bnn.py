"""Mean-field Gaussian Bayesian CNNs trained with Bayes-by-backprop."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np

from . import tensor as tc
from .tensor import Tensor

logger = logging.getLogger(__name__)

REFERENCE_INPUT = 88


# ---------------------------------------------------------------------------
# Architecture descriptors


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int

    def render(self) -> str:
        return f"C({self.out_channels},{self.kernel})"


@dataclass(frozen=True)
class ReLU:
    def render(self) -> str:
        return "ReLU"


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int

    def render(self) -> str:
        return f"MP({self.window},{self.stride})"


@dataclass(frozen=True)
class FC:
    units: int

    def render(self) -> str:
        return f"FC({self.units})"


Layer = Union[Conv, ReLU, MaxPool, FC]

PRESETS = {
    "AConvNet": "C(16,5) - ReLU - MP(2,2) - C(32,5) - ReLU - MP(2,2) - C(64,5) - ReLU - MP(2,2) "
                "- C(128,6) - ReLU - MP(2,2) - C(10,3)",
    "AlexNet": "C(64,11) - ReLU - MP(2,2) - C(192,5) - ReLU - MP(2,2) - C(384,3) - ReLU "
               "- C(256,3) - ReLU - C(256,3) - ReLU - MP(2,2) - FC(10)",
    "LConvNet": "C(32,5) - ReLU - MP(2,2) - C(64,5) - ReLU - MP(2,2) - C(128,5) - ReLU - MP(2,2) "
                "- C(256,6) - ReLU - MP(2,2) - C(256,5) - ReLU - FC(1024) - ReLU - FC(1024) - ReLU - FC(10)",
}

_TOKEN = re.compile(r"^(?:C\((\d+),(\d+)\)|MP\((\d+),(\d+)\)|FC\((\d+)\)|(ReLU))$")


class ArchitectureError(ValueError):
    """An architecture does not fit its configured input size."""

    def __init__(self, index: int, layer: Layer | None, reason: str):
        self.index = index
        self.layer = layer
        where = f"layer {index} ({layer.render()})" if layer is not None else f"layer {index}"
        super().__init__(f"{where}: {reason}")


def parse_layers(text: str) -> tuple[Layer, ...]:
    layers: list[Layer] = []
    for i, raw in enumerate(text.split("-")):
        tok = raw.strip().replace(" ", "")
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"cannot parse layer {i}: {raw.strip()!r}")
        if m.group(1):
            layers.append(Conv(int(m.group(1)), int(m.group(2))))
        elif m.group(3):
            layers.append(MaxPool(int(m.group(3)), int(m.group(4))))
        elif m.group(5):
            layers.append(FC(int(m.group(5))))
        else:
            layers.append(ReLU())
    return tuple(layers)


def render_layers(layers: Sequence[Layer]) -> str:
    return " - ".join(layer.render() for layer in layers)


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[Layer, ...]
    input_size: tuple[int, int, int] = (1, REFERENCE_INPUT, REFERENCE_INPUT)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    @classmethod
    def parse(cls, text: str, input_size=(1, REFERENCE_INPUT, REFERENCE_INPUT), num_classes: int = 10):
        return cls(parse_layers(text), tuple(input_size), num_classes)

    def render(self) -> str:
        return render_layers(self.layers)

    def to_descriptor(self) -> str:
        c, h, w = self.input_size
        return f"input={c}x{h}x{w}; classes={self.num_classes}; layers={self.render()}"

    @classmethod
    def from_descriptor(cls, text: str) -> ArchitectureSpec:
        fields = dict(part.strip().split("=", 1) for part in text.split(";"))
        try:
            size = tuple(int(v) for v in fields["input"].split("x"))
            return cls.parse(fields["layers"], size, int(fields["classes"]))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed architecture descriptor {text!r}") from exc

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes for a single input; raises on misfit."""
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ArchitectureError(0, None, f"invalid input size {self.input_size}")
        if self.num_classes < 1:
            raise ArchitectureError(0, None, "num_classes must be positive")
        shape: tuple[int, ...] = self.input_size
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ArchitectureError(i, layer, "convolution after a fully-connected layer")
                c, h, w = shape
                if layer.kernel > min(h, w):
                    raise ArchitectureError(i, layer, f"kernel {layer.kernel} exceeds feature map {h}x{w}")
                shape = (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ArchitectureError(i, layer, "pooling after a fully-connected layer")
                c, h, w = shape
                if layer.window > min(h, w):
                    raise ArchitectureError(i, layer, f"window {layer.window} exceeds feature map {h}x{w} "
                                            "(zero-size output)")
                shape = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
            elif isinstance(layer, FC):
                shape = (layer.units,)
            shapes.append(shape)
        final = shapes[-1] if shapes else self.input_size
        if int(np.prod(final)) != self.num_classes or (len(final) == 3 and final[1:] != (1, 1)):
            raise ArchitectureError(len(self.layers) - 1, self.layers[-1] if self.layers else None,
                                    f"final output {final} is not {self.num_classes} logits")
        return shapes

    def validate(self) -> ArchitectureSpec:
        self.output_shapes()
        return self


def fit_layers(layers: Sequence[Layer], input_size: tuple[int, int, int],
               reference: int = REFERENCE_INPUT) -> tuple[Layer, ...]:
    """Adapt reference-size kernels to a smaller input.

    Kernels are scaled by ``min(H, W) / reference`` (never enlarged), then any
    kernel still larger than its incoming feature map is cut down to the map.
    Pooling that would produce an empty map is dropped.
    """
    _, h, w = input_size
    scale = min(1.0, min(h, w) / reference)
    out: list[Layer] = []
    extent = min(h, w)
    flat = False
    for layer in layers:
        if isinstance(layer, Conv) and not flat:
            k = max(1, int(round(layer.kernel * scale)))
            k = min(k, extent)
            out.append(Conv(layer.out_channels, k))
            extent = extent - k + 1
        elif isinstance(layer, MaxPool) and not flat:
            if layer.window > extent:
                continue
            out.append(layer)
            extent = (extent - layer.window) // layer.stride + 1
        else:
            if isinstance(layer, FC):
                flat = True
            out.append(layer)
    return tuple(out)


def preset(name: str, input_size=(1, REFERENCE_INPUT, REFERENCE_INPUT), num_classes: int = 10,
           fit: bool = True) -> ArchitectureSpec:
    """Named architecture.  With ``fit`` kernels are adapted to ``input_size``."""
    key = {k.lower(): k for k in PRESETS}.get(name.lower())
    if key is None:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    layers = parse_layers(PRESETS[key])
    if num_classes != 10:
        last = layers[-1]
        layers = layers[:-1] + ((Conv(num_classes, last.kernel) if isinstance(last, Conv)
                                 else FC(num_classes)),)
    if fit:
        layers = fit_layers(layers, tuple(input_size))
    return ArchitectureSpec(layers, tuple(input_size), num_classes).validate()


# ---------------------------------------------------------------------------
# Posterior and model


@dataclass(frozen=True)
class PriorSpec:
    mean: float = 0.0
    stddev: float = 0.1
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"only Gaussian priors are supported, got {self.kind!r}")
        if not self.stddev > 0:
            raise ValueError("prior stddev must be positive")


def softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, v).astype(np.result_type(v, np.float32), copy=False)


@dataclass
class GaussianPosterior:
    """Variational factor N(mu, softplus(rho)^2) for one weight array."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu {self.mu.shape} and rho {self.rho.shape} differ in shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def size(self) -> int:
        return self.mu.size


@dataclass
class BayesianModel:
    arch: ArchitectureSpec
    prior: PriorSpec
    # (weight, bias) posterior pairs, one per Conv/FC layer in declaration order
    params: list[tuple[GaussianPosterior, GaussianPosterior]]

    def posteriors(self) -> Iterator[GaussianPosterior]:
        for w, b in self.params:
            yield w
            yield b

    @property
    def num_weights(self) -> int:
        return sum(p.size for p in self.posteriors())

    def mean_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(w.mu, b.mu) for w, b in self.params]

    def copy(self) -> BayesianModel:
        return BayesianModel(self.arch, self.prior, [
            (GaussianPosterior(w.mu.copy(), w.rho.copy()), GaussianPosterior(b.mu.copy(), b.rho.copy()))
            for w, b in self.params])


def param_shapes(arch: ArchitectureSpec) -> list[tuple[tuple[int, ...], tuple[int, ...], int]]:
    """(weight shape, bias shape, fan_in) for each parametrized layer."""
    shapes = arch.output_shapes()
    out = []
    prev: tuple[int, ...] = arch.input_size
    for layer, shape in zip(arch.layers, shapes):
        if isinstance(layer, Conv):
            cin = prev[0]
            out.append(((layer.out_channels, cin, layer.kernel, layer.kernel), (layer.out_channels,),
                        cin * layer.kernel ** 2))
        elif isinstance(layer, FC):
            fan_in = int(np.prod(prev))
            out.append(((fan_in, layer.units), (layer.units,), fan_in))
        prev = shape
    return out


def build_model(arch: ArchitectureSpec, prior: PriorSpec | None = None, seed: int = 0,
                rho_init: float = -6.0) -> BayesianModel:
    """Initialise posteriors: He-normal means, constant ``rho_init``."""
    arch.validate()
    prior = prior or PriorSpec()
    rng = np.random.default_rng(seed)
    params = []
    for wshape, bshape, fan_in in param_shapes(arch):
        mu_w = (rng.standard_normal(wshape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        mu_b = np.zeros(bshape, dtype=np.float32)
        params.append((GaussianPosterior(mu_w, np.full(wshape, rho_init, dtype=np.float32)),
                       GaussianPosterior(mu_b, np.full(bshape, rho_init, dtype=np.float32))))
    return BayesianModel(arch, prior, params)


WeightSample = list  # list[tuple[np.ndarray, np.ndarray]]


def sample_weights(model: BayesianModel, seed: int, noise: bool = True) -> WeightSample:
    """Draw w = mu + softplus(rho) * eps from the seeded stream.

    ``noise=False`` forces eps = 0 and returns the posterior means.
    """
    if not noise:
        return [(w.mu, b.mu) for w, b in model.params]
    rng = np.random.default_rng(seed)
    out = []
    for w, b in model.params:
        ew = rng.standard_normal(w.shape, dtype=np.float32)
        eb = rng.standard_normal(b.shape, dtype=np.float32)
        out.append((w.mu + w.sigma * ew, b.mu + b.sigma * eb))
    return out


def forward(arch: ArchitectureSpec, x, weights: Sequence[tuple]) -> Tensor:
    """Logits (N, num_classes) for a batch x (N, C, H, W)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim == 3:
        h = Tensor(h.data[None], h.requires_grad)
    if h.shape[1:] != arch.input_size:
        raise tc.ShapeError("forward", f"input (N, {', '.join(map(str, arch.input_size))})", str(h.shape))
    it = iter(weights)
    for layer in arch.layers:
        if isinstance(layer, Conv):
            w, b = next(it)
            h = tc.conv2d(h, w, b)
        elif isinstance(layer, ReLU):
            h = tc.relu(h)
        elif isinstance(layer, MaxPool):
            h = tc.maxpool2d(h, layer.window, layer.stride)
        elif isinstance(layer, FC):
            if h.data.ndim != 2:
                h = tc.flatten(h)
            w, b = next(it)
            h = tc.linear(h, w, b)
    if h.data.ndim != 2:
        h = tc.flatten(h)
    return h


def predict_logits(model: BayesianModel, x: np.ndarray, weights: WeightSample,
                   batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    chunks = [forward(model.arch, x[i:i + batch_size], weights).data
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# Variational objective


def kl_terms(post: GaussianPosterior, prior: PriorSpec) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(q || p) for one posterior and its gradients w.r.t. mu and rho."""
    mu = post.mu.astype(np.float64)
    rho = post.rho.astype(np.float64)
    sq = np.logaddexp(0, rho)
    sp = prior.stddev
    diff = mu - prior.mean
    kl = np.sum(np.log(sp / sq) + (sq ** 2 + diff ** 2) / (2 * sp ** 2) - 0.5)
    dsig = -1.0 / sq + sq / sp ** 2
    dmu = diff / sp ** 2
    drho = dsig / (1.0 + np.exp(-rho))
    return float(kl), dmu, drho


def kl_to_prior(model: BayesianModel) -> float:
    """Closed-form KL between the diagonal posterior and the prior, in nats."""
    return float(sum(kl_terms(p, model.prior)[0] for p in model.posteriors()))


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.0005
    # "batches": 1/(batches per epoch); "anneal": ramps 0 -> 1/(batches) over the
    # first epoch; a number is used as a constant weight.
    kl_weight_schedule: Union[str, float] = "batches"
    mc_samples_per_step: int = 1
    rng_seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    grad_clip: float | None = None
    # "constant" or "cosine" (per-step decay to zero over the run)
    lr_schedule: str = "cosine"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "mc_samples_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.kl_weight_schedule, str):
            if self.kl_weight_schedule not in ("batches", "anneal"):
                try:
                    self.kl_weight_schedule = float(self.kl_weight_schedule)
                except ValueError:
                    raise ValueError(f"unknown kl_weight_schedule {self.kl_weight_schedule!r}") from None
        if not isinstance(self.kl_weight_schedule, str) and self.kl_weight_schedule < 0:
            raise ValueError("constant kl weight must be non-negative")

    def kl_weight(self, step_in_epoch: int, epoch: int, batches_per_epoch: int) -> float:
        if not isinstance(self.kl_weight_schedule, str):
            return float(self.kl_weight_schedule)
        base = 1.0 / batches_per_epoch
        if self.kl_weight_schedule == "anneal" and epoch == 0:
            return base * (step_in_epoch + 1) / batches_per_epoch
        return base


@dataclass
class LossComponents:
    nll: float
    kl: float
    total: float


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, component: str, value: float):
        self.epoch, self.batch, self.component, self.value = epoch, batch, component, value
        super().__init__(f"non-finite {component} ({value}) at epoch {epoch}, batch {batch}")


def loss_and_grads(model: BayesianModel, x: np.ndarray, y: np.ndarray, kl_weight: float,
                   eps: Sequence[Sequence[tuple[np.ndarray, np.ndarray]]]):
    """Negative ELBO of a batch and its gradients for every mu and rho.

    ``eps`` holds one list of (weight, bias) noise draws per MC sample.  The
    NLL is summed over the batch and averaged over MC samples.
    """
    with tc.GradTape() as tape:
        mus, rhos = [], []
        for post in model.posteriors():
            mus.append(tape.watch(Tensor(post.mu)))
            rhos.append(tape.watch(Tensor(post.rho)))
        nll = None
        for draw in eps:
            flat_eps = [e for pair in draw for e in pair]
            ws = [tc.add(m, tc.mul(tc.softplus(r), Tensor(e))) for m, r, e in zip(mus, rhos, flat_eps)]
            logits = forward(model.arch, x, list(zip(ws[0::2], ws[1::2])))
            term = tc.nll_loss(tc.log_softmax(logits), y, reduction="sum")
            nll = term if nll is None else tc.add(nll, term)
        nll = tc.mul(nll, Tensor(np.asarray([1.0 / len(eps)], dtype=np.float32)))
    grads = tape.backward(output=nll)
    nll_val = float(nll.data[0])
    kl_val = 0.0
    g_mu, g_rho = [], []
    for post, m, r in zip(model.posteriors(), mus, rhos):
        k, dmu, drho = kl_terms(post, model.prior)
        kl_val += k
        g_mu.append((grads[m] + kl_weight * dmu).astype(np.float32))
        g_rho.append((grads[r] + kl_weight * drho).astype(np.float32))
    total = nll_val + kl_weight * kl_val
    return LossComponents(nll_val, kl_val, total), g_mu, g_rho


def draw_eps(model: BayesianModel, rng: np.random.Generator, count: int):
    return [[(rng.standard_normal(w.shape, dtype=np.float32), rng.standard_normal(b.shape, dtype=np.float32))
             for w, b in model.params] for _ in range(count)]


class Optimizer:
    """SGD with momentum, or Adam, over a flat list of arrays updated in place."""

    def __init__(self, arrays: list[np.ndarray], config: TrainingConfig):
        self.arrays = arrays
        self.kind = config.optimizer
        self.lr = config.learning_rate
        self.momentum = config.momentum
        self.clip = config.grad_clip
        self.state = [np.zeros_like(a) for a in arrays]
        self.state2 = [np.zeros_like(a) for a in arrays] if self.kind == "adam" else None
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if self.clip is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        if self.kind == "sgd":
            for a, v, g in zip(self.arrays, self.state, grads):
                v *= self.momentum
                v += g
                a -= self.lr * v
        else:
            b1, b2 = 0.9, 0.999
            c1 = 1 - b1 ** self.t
            c2 = 1 - b2 ** self.t
            for a, m, v, g in zip(self.arrays, self.state, self.state2, grads):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                a -= (self.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)).astype(a.dtype)


class Trainer:
    """Stateful training loop; ``step`` is one minibatch update."""

    def __init__(self, model: BayesianModel, config: TrainingConfig):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)
        arrays = []
        for post in model.posteriors():
            arrays.extend([post.mu, post.rho])
        self.optimizer = Optimizer(arrays, config)

    def step(self, x: np.ndarray, y: np.ndarray, kl_weight: float, epoch: int = 0,
             batch: int = 0) -> LossComponents:
        if len(x) == 0:
            raise ValueError("empty batch")
        y = np.asarray(y)
        if y.min() < 0 or y.max() >= self.model.arch.num_classes:
            raise ValueError(f"labels must lie in [0, {self.model.arch.num_classes})")
        eps = draw_eps(self.model, self.rng, self.config.mc_samples_per_step)
        try:
            comps, g_mu, g_rho = loss_and_grads(self.model, x, y, kl_weight, eps)
        except tc.NonFiniteError as exc:
            raise TrainingDiverged(epoch, batch, "forward", float("nan")) from exc
        for name in ("nll", "kl", "total"):
            value = getattr(comps, name)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, batch, name, value)
        grads = []
        for gm, gr in zip(g_mu, g_rho):
            grads.extend([gm, gr])
        self.optimizer.step(grads)
        return comps

    def fit(self, x: np.ndarray, y: np.ndarray,
            on_epoch: Callable[[int, dict], None] | None = None) -> list[dict]:
        cfg = self.config
        n = len(x)
        batches = max(1, math.ceil(n / cfg.batch_size))
        history = []
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(n)
            nll_sum = 0.0
            total_sum = 0.0
            comps = None
            for bi in range(batches):
                idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                kw = cfg.kl_weight(bi, epoch, batches)
                if cfg.lr_schedule == "cosine":
                    progress = (epoch * batches + bi) / (cfg.epochs * batches)
                    self.optimizer.lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
                comps = self.step(x[idx], y[idx], kw, epoch, bi)
                nll_sum += comps.nll
                total_sum += comps.total
            row = {"epoch": epoch + 1, "nll": nll_sum / n, "kl": comps.kl, "total": total_sum / n}
            if on_epoch is not None:
                on_epoch(epoch, row)
            logger.info("epoch %d nll=%.4f kl=%.1f", epoch + 1, row["nll"], row["kl"])
            history.append(row)
        return history


def train_step(model: BayesianModel, batch: tuple[np.ndarray, np.ndarray], config: TrainingConfig,
               kl_weight: float | None = None, trainer: Trainer | None = None) -> LossComponents:
    """One optimisation step on ``batch``; builds a throwaway trainer if none is given."""
    trainer = trainer or Trainer(model, config)
    if kl_weight is None:
        kl_weight = config.kl_weight(0, 1, 1)
    return trainer.step(batch[0], batch[1], kl_weight)
