"""Encoders, classifier heads, fusion head and cross-modal translators."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dims: Tuple[int, ...] = (16, 16)
    num_classes: int = 7
    feature_dims: Tuple[int, ...] = (32, 32)
    encoder_hidden: int = 64
    translator_hidden: int = 64
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        if len(self.input_dims) != len(self.feature_dims) or len(self.input_dims) < 2:
            raise ValueError("need matching input/feature dims for at least two modalities")
        if min(self.input_dims + self.feature_dims) <= 0 or self.encoder_hidden <= 0 or self.translator_hidden <= 0:
            raise ValueError("all dims must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def num_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def fused_dim(self) -> int:
        return sum(self.feature_dims)


def _shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    out: Dict[str, Tuple[int, ...]] = {}
    M, C, h, th = cfg.num_modalities, cfg.num_classes, cfg.encoder_hidden, cfg.translator_hidden
    for m in range(M):
        out[f"enc{m}.w1"] = (cfg.input_dims[m], h)
        out[f"enc{m}.b1"] = (h,)
        out[f"enc{m}.w2"] = (h, cfg.feature_dims[m])
        out[f"enc{m}.b2"] = (cfg.feature_dims[m],)
    for m in range(M):
        out[f"head{m}.w"] = (cfg.feature_dims[m], C)
        out[f"head{m}.b"] = (C,)
    out["fused.w"] = (cfg.fused_dim, C)
    out["fused.b"] = (C,)
    for src in range(M):
        for dst in range(M):
            if src == dst:
                continue
            pre = f"trans{src}to{dst}"
            out[f"{pre}.w1"] = (cfg.feature_dims[src], th)
            out[f"{pre}.b1"] = (th,)
            out[f"{pre}.w2"] = (th, cfg.feature_dims[dst])
            out[f"{pre}.b2"] = (cfg.feature_dims[dst],)
    return out


@dataclass
class Model:
    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def translator_parameter_count(self, src: int, dst: int) -> int:
        pre = f"trans{src}to{dst}."
        return int(sum(t.data.size for k, t in self.params.items() if k.startswith(pre)))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("state dict keys do not match model parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise dc.ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data[...] = v


def init_model(config: ModelConfig) -> Model:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([config.init_seed, 0x4D4F44454C]))
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in _shapes(config).items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return Model(config, params)


def _mlp(model: Model, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    h = dc.relu(dc.add(dc.matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]))
    return dc.add(dc.matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"])


def _as_input(model: Model, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=model.config.dtype)
    return Tensor(arr.reshape(1, -1) if arr.ndim == 1 else arr)


def encode(model: Model, m: int, x) -> Tensor:
    """Feature of modality ``m``: affine, ReLU, affine."""
    xt = _as_input(model, x)
    expected = model.config.input_dims[m]
    if xt.shape[-1] != expected:
        raise dc.ShapeError(f"encode: modality {m} expects input dim {expected}, got {xt.shape[-1]}")
    return _mlp(model, f"enc{m}", xt)


@dataclass
class HeadOutputs:
    """Softmax outputs of every head for one view of a batch."""

    unimodal: List[Tensor]
    fused: Tensor
    features: List[Tensor]

    @property
    def heads(self) -> List[Tensor]:
        return [*self.unimodal, self.fused]


def predict_heads(model: Model, features: Sequence[Optional[Tensor]]) -> HeadOutputs:
    M = model.config.num_modalities
    if len(features) != M or any(f is None for f in features):
        raise ValueError("predict_heads: a feature is required for every modality; impute missing ones first")
    p = model.params
    uni = []
    for m, z in enumerate(features):
        logits = dc.add(dc.matmul(z, p[f"head{m}.w"]), p[f"head{m}.b"])
        uni.append(dc.softmax_last_axis(logits))
    fused_in = dc.concat_last_axis(list(features))
    fused = dc.softmax_last_axis(dc.add(dc.matmul(fused_in, p["fused.w"]), p["fused.b"]))
    return HeadOutputs(uni, fused, list(features))


def forward(model: Model, inputs: Sequence) -> HeadOutputs:
    return predict_heads(model, [encode(model, m, x) for m, x in enumerate(inputs)])


def translate(model: Model, src: int, dst: int, feature: Tensor) -> Tensor:
    if src == dst:
        raise ValueError("translate: source and target modality must differ")
    return _mlp(model, f"trans{src}to{dst}", feature)


def translate_into(model: Model, dst: int, features: Mapping[int, Tensor]) -> Tensor:
    """Mean of translations into ``dst`` from every other given modality."""
    srcs = [m for m in sorted(features) if m != dst]
    if not srcs:
        raise ValueError("translate_into: no source modality available")
    out = dc.sum_all(translate(model, s, dst, features[s]) for s in srcs)
    return out if len(srcs) == 1 else dc.scale(out, 1.0 / len(srcs))


def impute_missing(model: Model, available: Mapping[int, Tensor], missing: int, mode: str = "translate") -> Tensor:
    if not available:
        raise ValueError("impute_missing: no available modalities")
    if missing in available:
        raise ValueError(f"impute_missing: modality {missing} is not missing")
    if mode == "zero":
        n = next(iter(available.values())).shape[0]
        return Tensor(np.zeros((n, model.config.feature_dims[missing]), dtype=model.config.dtype))
    if mode == "translate":
        return translate_into(model, missing, available)
    raise ValueError(f"unknown imputation mode {mode!r}")


# --------------------------------------------------------------- checkpoint


def save_checkpoint(directory: Union[str, Path], model: Model, bank=None) -> None:
    """``params.bin`` (little-endian float64 blobs) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    arrays = [(k, t.data) for k, t in sorted(model.params.items())]
    if bank is not None:
        for m, (proto, flags) in enumerate(zip(bank.protos, bank.initialized)):
            arrays.append((f"bank{m}.proto", proto))
            arrays.append((f"bank{m}.initialized", flags.astype(np.float64)))
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    (directory / "params.bin").write_bytes(b"".join(blobs))
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "tensors": entries,
    }
    if bank is not None:
        manifest["bank"] = {"alpha": bank.alpha, "num_classes": bank.num_classes, "num_domains": bank.num_domains}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(directory: Union[str, Path]):
    from .prototypes import PrototypeBank

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = (directory / "params.bin").read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    model = init_model(ModelConfig(**manifest["config"]))
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("bank")})
    bank = None
    if "bank" in manifest:
        b = manifest["bank"]
        bank = PrototypeBank(model.config.feature_dims, b["num_classes"], b["num_domains"], b["alpha"])
        for m in range(len(bank.protos)):
            bank.protos[m][...] = arrays[f"bank{m}.proto"]
            bank.initialized[m][...] = arrays[f"bank{m}.initialized"] > 0.5
    return model, bank
