"""Small image classifiers: a one-hidden-layer MLP and a relu LeNet-5.

Images are NHWC float64 in [0, 1].  ``model_outputs`` returns both logits
and softmax so consistency regularizers can target either.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffcore import GraphShapeError, ParamSet, Tape, Tensor, evaluate_graph, softmax

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "lenet"
    input_shape: tuple[int, int, int] = (28, 28, 1)
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be three positive ints, got {self.input_shape}")


@dataclass
class Model:
    spec: ModelSpec
    graph: tuple[tuple, ...]
    params: ParamSet

    def forward(self, x, tape: Tape | None = None) -> tuple[Tensor, Tape]:
        """Logits for a batch, recorded on ``tape`` (a fresh one if omitted)."""
        check_input(self.spec, x.data if isinstance(x, Tensor) else x)
        return evaluate_graph(self.graph, self.params.params, x, tape)


def _glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def build_model(spec: ModelSpec) -> Model:
    h, w, c = spec.input_shape
    k = spec.num_classes
    rng = np.random.default_rng(spec.seed)
    params: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        params[f"{name}.w"] = _glorot(rng, (n_in, n_out), n_in, n_out)
        params[f"{name}.b"] = np.zeros(n_out)

    def conv(name, cin, cout, ksize=5):
        params[f"{name}.w"] = _glorot(rng, (ksize, ksize, cin, cout), ksize * ksize * cin, ksize * ksize * cout)
        params[f"{name}.b"] = np.zeros(cout)

    if spec.arch == "mlp":
        dense("fc1", h * w * c, 128)
        dense("fc2", 128, k)
        graph = (("flatten",), ("affine", "fc1"), ("relu",), ("affine", "fc2"))
    elif spec.arch == "lenet":
        h1, w1 = (h - 4) // 2, (w - 4) // 2
        h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
        if h2 < 1 or w2 < 1 or (h - 4) % 2 or (h1 - 4) % 2 or (w - 4) % 2 or (w1 - 4) % 2:
            raise ValueError(f"lenet cannot take input {spec.input_shape}")
        conv("conv1", c, 6)
        conv("conv2", 6, 16)
        dense("fc1", 16 * h2 * w2, 120)
        dense("fc2", 120, 84)
        dense("fc3", 84, k)
        graph = (
            ("conv", "conv1"), ("relu",), ("maxpool2",),
            ("conv", "conv2"), ("relu",), ("maxpool2",),
            ("flatten",),
            ("affine", "fc1"), ("relu",),
            ("affine", "fc2"), ("relu",),
            ("affine", "fc3"),
        )
    else:
        raise ValueError(f"unknown architecture {spec.arch!r}; expected 'mlp' or 'lenet'")
    return Model(spec, graph, ParamSet(params))


def check_input(spec: ModelSpec, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise GraphShapeError("input", f"expected [n, {', '.join(map(str, spec.input_shape))}], got {list(x.shape)}")


def model_outputs(model: Model, batch: np.ndarray, chunk: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only logits and softmax, evaluated in chunks to bound memory."""
    check_input(model.spec, batch)
    logits, probs = [], []
    for start in range(0, len(batch), chunk):
        tape = Tape(grad_enabled=False)
        z, _ = evaluate_graph(model.graph, model.params.params, batch[start:start + chunk], tape)
        logits.append(z.data)
        probs.append(softmax(z).data)
    if not logits:
        k = model.spec.num_classes
        return np.zeros((0, k)), np.zeros((0, k))
    return np.concatenate(logits), np.concatenate(probs)


def predict_labels(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=-1)


# -------------------------------------------------------------- checkpoints
#
# A checkpoint is an uncompressed ``.npz`` archive:
#   "__meta__"        0-d unicode array holding JSON
#                     {"format": "robustaug-checkpoint", "version": 1,
#                      "spec": {...ModelSpec...}, "params": {name: shape}}
#   "param/<name>"    float64 parameter tensor
#   "momentum/<name>" float64 momentum buffer


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "robustaug-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "params": {k: list(v.shape) for k, v in model.params.params.items()},
        "extra": extra or {},
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for k, v in model.params.params.items():
        arrays[f"param/{k}"] = v
        arrays[f"momentum/{k}"] = model.params.momentum[k]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> Model:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != "robustaug-checkpoint":
            raise ValueError(f"{path}: not a robustaug checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
        model = build_model(ModelSpec(**meta["spec"]))
        for name in model.params.params:
            stored = archive[f"param/{name}"]
            if list(stored.shape) != meta["params"][name]:
                raise ValueError(f"{path}: shape mismatch for {name}")
            model.params.params[name] = stored.astype(np.float64)
            model.params.momentum[name] = archive[f"momentum/{name}"].astype(np.float64)
    return model
