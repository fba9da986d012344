"""Desk-scale regression lab that produces real error trajectories.

A small tanh network is trained with plain mini-batch SGD on a synthetic
sum-of-sinusoids task whose noise level is piecewise constant over a grid of
input cells.  Because the per-cell noise scale is known, downstream UQ can be
checked against ground truth.  Inputs for the out-of-domain split are drawn
from a box shifted along the first axis, disjoint from the training box.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ltau.trajlog import DescriptorSet, ErrorTrajectoryLog

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 32


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ToyTaskSpec:
    input_dim: int = 2
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 5000
    n_ood: int = 1000
    cells_per_axis: int = 4
    sigma_min: float = 0.003
    sigma_max: float = 1.0
    ood_shift: float = 2.5
    n_terms: int = 4
    freq_low: float = 0.25
    freq_high: float = 0.75
    bump_amplitude: float = 0.0  # high-frequency term on the all-positive quadrant
    bump_frequency: float = 8.0  # in units of pi
    outlier_fraction: float = 0.0  # share of labels hit by a +-outlier_scale offset
    outlier_scale: float = 2.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ToyTaskSpec":
        return cls(**data)


@dataclass(eq=False)
class Split:
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray  # noise scale of the cell each point falls in
    clean: np.ndarray  # noiseless target
    outlier: np.ndarray | None = None  # labels carrying the heavy-tailed offset


@dataclass(eq=False)
class ToyTask:
    spec: ToyTaskSpec
    train: Split
    val: Split
    test: Split
    ood: Split
    id_cell_sigma: np.ndarray
    ood_cell_sigma: np.ndarray

    @property
    def id_low(self) -> float:
        return -1.0

    @property
    def id_high(self) -> float:
        return 1.0


def _target_params(spec: ToyTaskSpec, rng: np.random.Generator):
    freqs = rng.uniform(spec.freq_low, spec.freq_high, size=(spec.n_terms, spec.input_dim)) * np.pi
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_terms)
    amps = rng.uniform(0.5, 1.0, size=spec.n_terms)
    return freqs, phases, amps


def _target(x, freqs, phases, amps, bump_amplitude=0.0, bump_frequency=0.0):
    y = np.sin(x @ freqs.T + phases) @ amps
    if bump_amplitude:
        inside = np.all((x >= 0.0) & (x <= 1.0), axis=1)
        y = y + inside * bump_amplitude * np.prod(np.sin(np.pi * bump_frequency * x), axis=1)
    return y


def _cell_index(x: np.ndarray, low: float, width: float, per_axis: int) -> np.ndarray:
    cells = np.clip(np.floor((x - low) / width * per_axis).astype(np.int64), 0, per_axis - 1)
    flat = np.zeros(len(x), dtype=np.int64)
    for axis in range(x.shape[1]):
        flat = flat * per_axis + cells[:, axis]
    return flat


def generate_task(spec: ToyTaskSpec = ToyTaskSpec()) -> ToyTask:
    """Draw train/val/test/OOD splits. Same spec and seed give bit-identical arrays."""
    if spec.input_dim < 1 or spec.cells_per_axis < 1:
        raise ValueError("input_dim and cells_per_axis must be positive")
    rng = np.random.default_rng(spec.seed)
    freqs, phases, amps = _target_params(spec, rng)

    n_cells = spec.cells_per_axis**spec.input_dim
    levels = np.geomspace(spec.sigma_min, spec.sigma_max, n_cells)
    id_sigma = rng.permutation(levels)
    ood_sigma = rng.permutation(levels)

    def draw(n: int, shifted: bool) -> Split:
        x = rng.uniform(-1.0, 1.0, size=(n, spec.input_dim))
        if shifted:
            x[:, 0] += spec.ood_shift
            cells = _cell_index(x - np.eye(spec.input_dim)[0] * spec.ood_shift, -1.0, 2.0,
                                spec.cells_per_axis)
            sigma = ood_sigma[cells]
        else:
            cells = _cell_index(x, -1.0, 2.0, spec.cells_per_axis)
            sigma = id_sigma[cells]
        clean = _target(x, freqs, phases, amps, spec.bump_amplitude, spec.bump_frequency)
        y = clean + sigma * rng.standard_normal(n)
        outlier = np.zeros(n, dtype=bool)
        if spec.outlier_fraction > 0:
            # extra draws only when enabled, so default streams are unchanged
            outlier = rng.random(n) < spec.outlier_fraction
            y = y + outlier * spec.outlier_scale * rng.choice([-1.0, 1.0], size=n)
        return Split(x=x, y=y, sigma=sigma, clean=clean, outlier=outlier)

    train = draw(spec.n_train, False)
    val = draw(spec.n_val, False)
    test = draw(spec.n_test, False)
    ood = draw(spec.n_ood, True)
    return ToyTask(spec, train, val, test, ood, id_sigma, ood_sigma)


class ToyModel:
    """Fully connected network with tanh hidden layers and a linear scalar readout.

    ``activation="identity"`` gives a linear model, used for gradient checks.
    """

    def __init__(self, input_dim: int, hidden: tuple[int, ...] = (32, 32),
                 activation: str = "tanh", seed: int = 0):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        rng = np.random.default_rng(seed)
        sizes = (input_dim, *hidden, 1)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else z

    def forward(self, x: np.ndarray, keep: bool = False):
        h = x
        acts = [x]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = self._act(h @ w + b)
            acts.append(h)
        out = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return (out, acts) if keep else out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def descriptors(self, x: np.ndarray) -> np.ndarray:
        """Post-activation values of the last hidden layer."""
        return self.forward(x, keep=True)[1][-1]

    def loss(self, x, y, sample_weights=None) -> float:
        w = np.ones(len(x)) if sample_weights is None else sample_weights
        r = self.forward(x) - y
        return float(np.mean(w * r * r))

    def gradients(self, x, y, sample_weights=None) -> list[np.ndarray]:
        """Gradients of the weighted mean squared error, ordered like ``params``."""
        w = np.ones(len(x)) if sample_weights is None else sample_weights
        out, acts = self.forward(x, keep=True)
        delta = (2.0 / len(x)) * (w * (out - y))[:, None]
        grads = []
        for layer in range(len(self.weights) - 1, -1, -1):
            gw = acts[layer].T @ delta
            gb = delta.sum(axis=0)
            grads = [gw, gb] + grads
            if layer > 0:
                delta = delta @ self.weights[layer].T
                if self.activation == "tanh":
                    delta = delta * (1.0 - acts[layer] ** 2)
        return grads

    def save(self, path) -> None:
        # JSON floats round-trip exactly and the file carries no timestamps
        doc = {
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "ToyModel":
        doc = json.loads(Path(path).read_text())
        model = cls.__new__(cls)
        model.activation = doc["activation"]
        model.weights = [np.array(w, dtype=np.float64) for w in doc["weights"]]
        model.biases = [np.array(b, dtype=np.float64) for b in doc["biases"]]
        return model


@dataclass(eq=False)
class TrainResult:
    model: ToyModel
    trajectory: ErrorTrajectoryLog
    descriptors: DescriptorSet
    train_mae: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)


def train(model: ToyModel, task: ToyTask, epochs: int = 200, lr: float = 0.01,
          batch_size: int = 32, sample_weights: np.ndarray | None = None,
          seed: int = 0) -> TrainResult:
    """Mini-batch SGD on weighted MSE, logging |prediction - target| per sample each epoch.

    Weights are rescaled to mean 1 before use. Batch order comes from ``seed``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x, y = task.train.x, task.train.y
    n = len(x)
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("sample_weights must be N finite non-negative values")
        w = w / w.mean()
    rng = np.random.default_rng(seed)
    errors = np.empty((epochs, n), dtype=np.float32)
    train_mae, val_mae = [], []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            grads = model.gradients(x[idx], y[idx], w[idx])
            for p, g in zip(model.params, grads):
                p -= lr * g
        err = np.abs(model.predict(x) - y)
        if not np.all(np.isfinite(err)):
            raise TrainingDivergedError(epoch + 1)
        errors[epoch] = err
        train_mae.append(float(err.mean()))
        val_mae.append(float(np.abs(model.predict(task.val.x) - task.val.y).mean()))
        logger.debug("epoch %d train_mae %.5f val_mae %.5f", epoch + 1, train_mae[-1], val_mae[-1])
    desc = DescriptorSet(model.descriptors(x).astype(np.float32))
    return TrainResult(model, ErrorTrajectoryLog(errors), desc, train_mae, val_mae)


def finite_difference_gradcheck(model: ToyModel, x: np.ndarray, y: np.ndarray,
                                sample_weights: np.ndarray | None = None,
                                eps: float = 1e-2, floor: float = 1e-8) -> float:
    """Largest relative deviation between analytic and central-difference gradients.

    Uses the fourth-order five-point stencil; with the plain two-point rule the
    O(eps^2) truncation error swamps near-zero gradient components.
    """
    analytic = model.gradients(x, y, sample_weights)
    worst = 0.0
    for p, g in zip(model.params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            vals = []
            for step in (2.0, 1.0, -1.0, -2.0):
                flat[j] = keep + step * eps
                vals.append(model.loss(x, y, sample_weights))
            flat[j] = keep
            numeric = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * eps)
            scale = max(abs(numeric), abs(gflat[j]), floor)
            worst = max(worst, abs(numeric - gflat[j]) / scale)
    return worst


def save_split(directory: Path, name: str, model: ToyModel, split: Split) -> None:
    """Write inputs, descriptors and true errors of one split next to each other."""
    from ltau.trajlog import write_array, write_descriptor_set

    write_array(directory / f"{name}.x", split.x.astype(np.float32), kind="inputs")
    write_descriptor_set(directory / f"{name}.desc", DescriptorSet(
        model.descriptors(split.x).astype(np.float32)))
    err = np.abs(model.predict(split.x) - split.y).astype(np.float32)
    write_array(directory / f"{name}.true", err, kind="true_errors")
    write_array(directory / f"{name}.sigma", split.sigma.astype(np.float32), kind="noise_scale")


def write_run(directory, task: ToyTask, result: TrainResult, config: dict) -> None:
    from ltau.trajlog import write_descriptor_set, write_trajectory_log

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_trajectory_log(directory / "train.errs", result.trajectory)
    write_descriptor_set(directory / "train.desc", result.descriptors)
    result.model.save(directory / "model.json")
    save_split(directory, "test", result.model, task.test)
    save_split(directory, "ood", result.model, task.ood)
    save_split(directory, "val", result.model, task.val)
    summary = dict(config)
    summary["final_train_mae"] = result.train_mae[-1]
    summary["final_val_mae"] = result.val_mae[-1]
    (directory / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# settings for the loss-reweighting comparison: an 8-D task where 5% of labels
# carry a large offset.  In 8-D the network can memorize individual points, so
# upweighting the hard (outlier) samples trades validation error for training error.
REWEIGHT_TASK = ToyTaskSpec(input_dim=8, n_train=500, n_val=500, n_test=10, n_ood=10,
                            cells_per_axis=1, sigma_min=0.01, sigma_max=0.01,
                            outlier_fraction=0.05, outlier_scale=2.0)
REWEIGHT_TRAINING = {"epochs": 1000, "lr": 0.02, "batch_size": 16}


def compare_weightings(seeds, spec: ToyTaskSpec = REWEIGHT_TASK,
                       training: dict | None = None) -> dict:
    """Final train/validation MAE per weighting scheme and seed.

    Difficulty scores come from a uniform-weight run on the same split; each
    weighted run then restarts from the same initialization.
    """
    from dataclasses import replace

    from ltau import reweight

    training = dict(REWEIGHT_TRAINING if training is None else training)
    kinds = (reweight.UNIFORM, reweight.UPWEIGHT_HARD, reweight.UPWEIGHT_EASY)
    out = {k: {"train_mae": [], "val_mae": []} for k in kinds}
    for seed in seeds:
        task = generate_task(replace(spec, seed=seed))
        base = train(ToyModel(spec.input_dim, seed=seed), task, seed=seed, **training)
        scores = reweight.difficulty(base.trajectory)
        for kind in kinds:
            if kind == reweight.UNIFORM:
                res = base
            else:
                w = reweight.weights(scores, reweight.WeightScheme(kind))
                res = train(ToyModel(spec.input_dim, seed=seed), task, seed=seed,
                            sample_weights=w, **training)
            out[kind]["train_mae"].append(res.train_mae[-1])
            out[kind]["val_mae"].append(res.val_mae[-1])
    for rec in out.values():
        tr, va = np.array(rec["train_mae"]), np.array(rec["val_mae"])
        rec["mean_train_mae"] = float(tr.mean())
        rec["mean_gap"] = float((va - tr).mean())
    return out
