"""
Energy models for usp-ebm

Parameterized energy functions E_theta(x) with exact analytic gradients with
respect to both the input x and the parameters theta. The density of a model
is q_theta(x) = exp(-E_theta(x)) / Z(theta); tempering by rho is always
applied by the caller, never stored in the model.
"""

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
from loguru import logger

ArrayLike = Union[float, Sequence[float], np.ndarray]

# segment name -> (offset, shape)
Layout = Dict[str, Tuple[int, Tuple[int, ...]]]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Flat real parameter vector with a named segment layout.

    Optimizers only ever see the flat `values`; models use the layout to
    view their weights. Two vectors are compatible when their layouts match.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError(
                f"ParamVector values must be 1-D, got shape {values.shape}"
            )
        total = sum(int(np.prod(shape)) for _, shape in self.layout.values())
        if total != values.size:
            raise ValueError(
                f"ParamVector layout covers {total} entries "
                f"but values has {values.size}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_segments(cls, segments: Dict[str, np.ndarray]) -> "ParamVector":
        """Pack named arrays into one flat vector, in insertion order"""
        layout: Layout = {}
        chunks = []
        offset = 0
        for name, array in segments.items():
            array = np.asarray(array, dtype=np.float64)
            layout[name] = (offset, tuple(array.shape))
            chunks.append(array.ravel())
            offset += array.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values=values, layout=layout)

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        size = int(np.prod(shape))
        return self.values[offset : offset + size].reshape(shape)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def require_layout(self, other: "ParamVector", what: str = "parameters"):
        if not self.same_layout(other):
            raise ValueError(
                f"Layout mismatch for {what}: "
                f"{sorted(self.layout)} vs {sorted(other.layout)}"
            )

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(
            values=np.array(values, dtype=np.float64), layout=self.layout
        )

    def zeros_like(self) -> "ParamVector":
        return self.with_values(np.zeros_like(self.values))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.require_layout(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.require_layout(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def layout_json(self) -> Dict[str, Any]:
        return {
            name: [offset, list(shape)] for name, (offset, shape) in self.layout.items()
        }


class EnergyModel(ABC):
    """
    Base class for energy families.

    Subclasses implement batched `_energy`, `_grad_x` and
    `_weighted_grad_theta` on validated (m, d) float64 arrays. Instances are
    immutable; `with_params` returns a new model.
    """

    family: str = "abstract"

    def __init__(self, params: ParamVector, input_dim: int):
        if input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {input_dim}")
        if not params.is_finite():
            raise ValueError(f"{self.family} parameters contain non-finite entries")
        self._params = params
        self._input_dim = int(input_dim)

    @property
    def params(self) -> ParamVector:
        return self._params

    @property
    def input_dim(self) -> int:
        return self._input_dim

    # Batched API

    def as_batch(self, x: ArrayLike) -> np.ndarray:
        """Coerce x to an (m, d) float64 array, rejecting dimension mismatches"""
        array = np.asarray(x, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            if self._input_dim == 1 and array.size != 1:
                array = array.reshape(-1, 1)
            else:
                array = array.reshape(1, -1)
        if array.ndim != 2 or array.shape[1] != self._input_dim:
            raise ValueError(
                f"Dimension mismatch: {self.family} expects inputs of dim "
                f"{self._input_dim}, got array of shape {np.shape(x)}"
            )
        return array

    def energy(self, x: ArrayLike) -> np.ndarray:
        """Energies of a batch, shape (m,)"""
        return self._energy(self.as_batch(x))

    def grad_x(self, x: ArrayLike) -> np.ndarray:
        """Input gradients of a batch, shape (m, d)"""
        return self._grad_x(self.as_batch(x))

    def weighted_grad_theta(self, x: ArrayLike, coeffs: ArrayLike) -> ParamVector:
        """Sum_i coeffs[i] * grad_theta E(x_i) as a ParamVector"""
        batch = self.as_batch(x)
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
        if coeffs.size != batch.shape[0]:
            raise ValueError(
                f"Got {coeffs.size} coefficients for a batch of {batch.shape[0]} points"
            )
        return self._params.with_values(self._weighted_grad_theta(batch, coeffs))

    @abstractmethod
    def _energy(self, batch: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def _grad_x(self, batch: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def _weighted_grad_theta(self, batch: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def hyperparams(self) -> Dict[str, Any]:
        """JSON-serializable constructor arguments other than the parameters"""

    @abstractmethod
    def with_params(self, params: ParamVector) -> "EnergyModel":
        pass

    @classmethod
    @abstractmethod
    def from_checkpoint(
        cls, hyperparams: Dict[str, Any], values: np.ndarray
    ) -> "EnergyModel":
        pass

    def to_checkpoint(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "hyperparams": self.hyperparams(),
            "params": [float(v) for v in self._params.values],
        }

    def __repr__(self) -> str:
        name = type(self).__name__
        return f"{name}(dim={self._input_dim}, n_params={len(self._params)})"


class QuadraticEnergy(EnergyModel):
    """E(x) = ||x - center||^2 / (2 s^2); the center is the parameter vector"""

    family = "quadratic"

    def __init__(self, center: ArrayLike, scale: float = 1.0):
        center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        if not scale > 0:
            raise ValueError(f"QuadraticEnergy scale must be > 0, got {scale}")
        self.scale = float(scale)
        super().__init__(ParamVector.from_segments({"center": center}), center.size)

    @property
    def center(self) -> np.ndarray:
        return self._params.segment("center")

    def _energy(self, batch: np.ndarray) -> np.ndarray:
        diff = batch - self.center
        return np.sum(diff * diff, axis=1) / (2.0 * self.scale**2)

    def _grad_x(self, batch: np.ndarray) -> np.ndarray:
        return (batch - self.center) / self.scale**2

    def _weighted_grad_theta(self, batch: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        return -(coeffs @ (batch - self.center)) / self.scale**2

    def hyperparams(self) -> Dict[str, Any]:
        return {"dim": self._input_dim, "scale": self.scale}

    def with_params(self, params: ParamVector) -> "QuadraticEnergy":
        self._params.require_layout(params)
        return QuadraticEnergy(params.segment("center"), self.scale)

    @classmethod
    def from_checkpoint(cls, hyperparams: Dict[str, Any], values: np.ndarray):
        return cls(np.asarray(values, dtype=np.float64), hyperparams["scale"])


class GridEnergy(EnergyModel):
    """
    Piecewise-linear energy on a uniform 1-D knot grid.

    Each knot value is a parameter, so the energy is linear in theta. Outside
    [lo, hi] the boundary value is held constant. At a knot the input
    gradient uses the segment to its right (the last knot uses the left one).
    """

    family = "grid"

    def __init__(self, lo: float, hi: float, values: ArrayLike):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size < 2:
            raise ValueError(f"GridEnergy needs >= 2 knots, got {values.size}")
        if not hi > lo:
            raise ValueError(
                f"GridEnergy domain must satisfy lo < hi, got [{lo}, {hi}]"
            )
        self.lo = float(lo)
        self.hi = float(hi)
        self.spacing = (self.hi - self.lo) / (values.size - 1)
        super().__init__(ParamVector.from_segments({"values": values}), 1)

    @classmethod
    def from_function(cls, lo: float, hi: float, n_knots: int, fn) -> "GridEnergy":
        knots = np.linspace(lo, hi, n_knots)
        return cls(lo, hi, fn(knots))

    @property
    def values(self) -> np.ndarray:
        return self._params.segment("values")

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.values.size)

    def _locate(self, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = batch[:, 0]
        inside = (x >= self.lo) & (x <= self.hi)
        t = (np.clip(x, self.lo, self.hi) - self.lo) / self.spacing
        snapped = np.rint(t)
        t = np.where(np.abs(t - snapped) < 1e-9, snapped, t)
        k = np.clip(np.floor(t).astype(np.int64), 0, self.values.size - 2)
        return k, t - k, inside

    def _energy(self, batch: np.ndarray) -> np.ndarray:
        k, frac, _ = self._locate(batch)
        v = self.values
        return (1.0 - frac) * v[k] + frac * v[k + 1]

    def _grad_x(self, batch: np.ndarray) -> np.ndarray:
        k, _, inside = self._locate(batch)
        v = self.values
        slope = (v[k + 1] - v[k]) / self.spacing
        return np.where(inside, slope, 0.0)[:, None]

    def _weighted_grad_theta(self, batch: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        k, frac, _ = self._locate(batch)
        grad = np.zeros(self.values.size)
        np.add.at(grad, k, coeffs * (1.0 - frac))
        np.add.at(grad, k + 1, coeffs * frac)
        return grad

    def hyperparams(self) -> Dict[str, Any]:
        return {"lo": self.lo, "hi": self.hi, "n_knots": int(self.values.size)}

    def with_params(self, params: ParamVector) -> "GridEnergy":
        self._params.require_layout(params)
        return GridEnergy(self.lo, self.hi, params.segment("values"))

    @classmethod
    def from_checkpoint(cls, hyperparams: Dict[str, Any], values: np.ndarray):
        return cls(hyperparams["lo"], hyperparams["hi"], values)


class MlpEnergy(EnergyModel):
    """
    Leaky-ReLU multi-layer perceptron energy.

    Two heads are supported: `scalar` (the network output is the energy) and
    `reconstruction` (the energy is ||x - f(x)||^2 with f mapping back to
    the input dimension). Gradients are computed by an explicit backward
    pass over the stored pre-activations.
    """

    family = "mlp"
    HEADS = ("scalar", "reconstruction")

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int],
        params: ParamVector,
        slope: float = 0.2,
        head: str = "scalar",
    ):
        if head not in self.HEADS:
            raise ValueError(f"Unknown MLP head '{head}', expected one of {self.HEADS}")
        if not 0.0 < slope < 1.0:
            raise ValueError(f"Leaky slope must lie in (0, 1), got {slope}")
        if any(int(w) < 1 for w in hidden):
            raise ValueError(f"Hidden widths must be positive, got {list(hidden)}")
        self.hidden = tuple(int(w) for w in hidden)
        self.slope = float(slope)
        self.head = head
        self.output_dim = 1 if head == "scalar" else int(input_dim)
        self.widths = (int(input_dim),) + self.hidden + (self.output_dim,)
        expected = self.layout_for(self.widths)
        if params.layout != expected:
            raise ValueError("MLP parameter layout does not match the layer widths")
        super().__init__(params, input_dim)
        self._weights = [params.segment(f"W{l}") for l in range(self.n_layers)]
        self._biases = [params.segment(f"b{l}") for l in range(self.n_layers)]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @staticmethod
    def layout_for(widths: Sequence[int]) -> Layout:
        layout: Layout = {}
        offset = 0
        for l in range(len(widths) - 1):
            fan_in, fan_out = widths[l], widths[l + 1]
            layout[f"W{l}"] = (offset, (fan_out, fan_in))
            offset += fan_in * fan_out
            layout[f"b{l}"] = (offset, (fan_out,))
            offset += fan_out
        return layout

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        hidden: Sequence[int],
        rng: np.random.Generator,
        slope: float = 0.2,
        head: str = "scalar",
    ) -> "MlpEnergy":
        """Uniform init W ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)); zero biases"""
        output_dim = 1 if head == "scalar" else int(input_dim)
        widths = (int(input_dim),) + tuple(int(w) for w in hidden) + (output_dim,)
        segments: Dict[str, np.ndarray] = {}
        for l in range(len(widths) - 1):
            fan_in, fan_out = widths[l], widths[l + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            segments[f"W{l}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            segments[f"b{l}"] = np.zeros(fan_out)
        params = ParamVector.from_segments(segments)
        logger.debug(f"Initialized MLP energy widths={widths} n_params={len(params)}")
        return cls(input_dim, hidden, params, slope=slope, head=head)

    def _forward(self, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        pre: List[np.ndarray] = []
        acts: List[np.ndarray] = [batch]
        a = batch
        for l in range(self.n_layers):
            z = a @ self._weights[l].T + self._biases[l]
            if l < self.n_layers - 1:
                pre.append(z)
                # zero pre-activation takes the positive branch
                a = np.where(z >= 0.0, z, self.slope * z)
            else:
                a = z
            acts.append(a)
        return pre, acts

    def _backward(
        self,
        pre: List[np.ndarray],
        acts: List[np.ndarray],
        upstream: np.ndarray,
        with_params: bool,
    ) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        g = upstream
        grads_w: List[np.ndarray] = [np.empty(0)] * self.n_layers
        grads_b: List[np.ndarray] = [np.empty(0)] * self.n_layers
        for l in reversed(range(self.n_layers)):
            if with_params:
                grads_w[l] = g.T @ acts[l]
                grads_b[l] = g.sum(axis=0)
            g = g @ self._weights[l]
            if l > 0:
                g = g * np.where(pre[l - 1] >= 0.0, 1.0, self.slope)
        return g, grads_w, grads_b

    def _energy(self, batch: np.ndarray) -> np.ndarray:
        _, acts = self._forward(batch)
        out = acts[-1]
        if self.head == "scalar":
            return out[:, 0].copy()
        residual = batch - out
        return np.sum(residual * residual, axis=1)

    def _upstream(self, batch: np.ndarray, out: np.ndarray) -> Tuple[
        np.ndarray, np.ndarray
    ]:
        """dE/d(output) per row, plus the direct dE/dx term of the head"""
        if self.head == "scalar":
            return np.ones((batch.shape[0], 1)), np.zeros_like(batch)
        residual = batch - out
        return -2.0 * residual, 2.0 * residual

    def _grad_x(self, batch: np.ndarray) -> np.ndarray:
        pre, acts = self._forward(batch)
        upstream, direct = self._upstream(batch, acts[-1])
        g_in, _, _ = self._backward(pre, acts, upstream, with_params=False)
        return g_in + direct

    def _weighted_grad_theta(self, batch: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        pre, acts = self._forward(batch)
        upstream, _ = self._upstream(batch, acts[-1])
        _, grads_w, grads_b = self._backward(
            pre, acts, upstream * coeffs[:, None], with_params=True
        )
        flat = []
        for gw, gb in zip(grads_w, grads_b):
            flat.append(gw.ravel())
            flat.append(gb)
        return np.concatenate(flat)

    def hyperparams(self) -> Dict[str, Any]:
        return {
            "input_dim": self._input_dim,
            "hidden": list(self.hidden),
            "slope": self.slope,
            "head": self.head,
        }

    def with_params(self, params: ParamVector) -> "MlpEnergy":
        self._params.require_layout(params)
        return MlpEnergy(self._input_dim, self.hidden, params, self.slope, self.head)

    @classmethod
    def from_checkpoint(cls, hyperparams: Dict[str, Any], values: np.ndarray):
        input_dim = int(hyperparams["input_dim"])
        head = hyperparams.get("head", "scalar")
        output_dim = 1 if head == "scalar" else input_dim
        widths = (input_dim,) + tuple(hyperparams["hidden"]) + (output_dim,)
        params = ParamVector(values=np.asarray(values), layout=cls.layout_for(widths))
        return cls(input_dim, hyperparams["hidden"], params, hyperparams["slope"], head)


FAMILIES: Dict[str, Type[EnergyModel]] = {
    QuadraticEnergy.family: QuadraticEnergy,
    GridEnergy.family: GridEnergy,
    MlpEnergy.family: MlpEnergy,
}


def _single_point(model: EnergyModel, x: ArrayLike) -> np.ndarray:
    batch = model.as_batch(x)
    if batch.shape[0] != 1:
        raise ValueError(f"Expected a single point, got a batch of {batch.shape[0]}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("Input point contains non-finite coordinates")
    return batch


def energy(model: EnergyModel, x: ArrayLike) -> float:
    """E_theta(x) at a single point"""
    return float(model.energy(_single_point(model, x))[0])


def grad_x(model: EnergyModel, x: ArrayLike) -> np.ndarray:
    """grad_x E_theta(x) at a single point, shape (d,)"""
    return model.grad_x(_single_point(model, x))[0]


def grad_theta(model: EnergyModel, x: ArrayLike) -> ParamVector:
    """grad_theta E_theta(x) at a single point, in the model's parameter layout"""
    return model.weighted_grad_theta(_single_point(model, x), np.ones(1))


def load_checkpoint(data: Dict[str, Any]) -> EnergyModel:
    family = data.get("family")
    if family not in FAMILIES:
        raise ValueError(f"Unknown energy family '{family}' in checkpoint")
    return FAMILIES[family].from_checkpoint(
        data["hyperparams"], np.asarray(data["params"], dtype=np.float64)
    )


def save_checkpoint(model: EnergyModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(model.to_checkpoint(), f, indent=2)
    logger.debug(f"Saved {model.family} checkpoint to {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> EnergyModel:
    with open(path, "r") as f:
        return load_checkpoint(json.load(f))
