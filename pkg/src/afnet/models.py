"""EcgNet, TabNet and their additive fusion, plus class activation mapping."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .nn import Mode, Tensor

ECG_FILTERS = 64
ECG_KERNEL = 8
ECG_DILATIONS = (1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8, 1)
ECG_POOL_AFTER = (4, 8, 12)
ECG_DROPOUT = 0.05
TAB_UNITS = (256, 128, 64)
TAB_DROPOUT = 0.5
TRUNK_DIM = 64
N_CLASSES = 2


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | bn | relu | dropout | maxpool | gap | dense
    name: str = ""
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    dilation: int = 1
    rate: float = 0.0


@dataclass(frozen=True)
class ModelSpec:
    name: str
    ecg_trunk: tuple[LayerSpec, ...] | None = None
    tab_trunk: tuple[LayerSpec, ...] | None = None
    head: LayerSpec = LayerSpec("dense", "head", TRUNK_DIM, N_CLASSES)

    @property
    def fusion(self) -> bool:
        return self.ecg_trunk is not None and self.tab_trunk is not None

    @property
    def n_leads(self) -> int:
        return self.ecg_trunk[0].in_dim if self.ecg_trunk else 0

    @property
    def n_features(self) -> int:
        return self.tab_trunk[0].in_dim if self.tab_trunk else 0

    @property
    def kind(self) -> str:
        return {"ecgnet": "ecg", "tabnet": "tab", "fullmodel": "full"}[self.name]

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]

    def summary(self, input_length: int = 5000) -> str:
        """Plain-text layer table: layer, output shape, parameter count."""
        rows = [("layer", "output shape", "params")]
        total = 0
        for trunk_name, trunk, shape in (
            ("ecg", self.ecg_trunk, (input_length, self.n_leads)),
            ("tab", self.tab_trunk, (self.n_features,)),
        ):
            if trunk is None:
                continue
            rows.append((f"{trunk_name}.input", _shape_str(shape), "0"))
            for layer in trunk:
                shape = _out_shape(layer, shape)
                n = _param_count(layer)
                total += n
                rows.append((f"{trunk_name}.{layer.name or layer.kind}", _shape_str(shape), str(n)))
        if self.fusion:
            rows.append(("fusion.add", _shape_str((TRUNK_DIM,)), "0"))
        n = _param_count(self.head)
        total += n
        rows.append(("head.dense", _shape_str((self.head.out_dim,)), str(n)))
        rows.append(("head.softmax", _shape_str((self.head.out_dim,)), "0"))
        rows.append(("total", "", str(total)))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join(
            f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:>{widths[2]}}" for r in rows
        ) + "\n"


def _shape_str(shape) -> str:
    return "(" + ", ".join(str(s) for s in shape) + ")"


def _out_shape(layer: LayerSpec, shape):
    if layer.kind == "conv":
        return (shape[0], layer.out_dim)
    if layer.kind == "maxpool":
        return (shape[0] // 2, shape[1])
    if layer.kind == "gap":
        return (shape[1],)
    if layer.kind == "dense":
        return (layer.out_dim,)
    return shape


def _param_count(layer: LayerSpec) -> int:
    if layer.kind == "conv":
        return layer.out_dim * layer.in_dim * layer.kernel + layer.out_dim
    if layer.kind == "dense":
        return layer.out_dim * layer.in_dim + layer.out_dim
    if layer.kind == "bn":
        return 2 * layer.in_dim
    return 0


def build_ecgnet(n_leads: int = 12) -> ModelSpec:
    if not 1 <= n_leads <= 12:
        raise ArchitectureError(f"n_leads must be in 1..12, got {n_leads}")
    layers: list[LayerSpec] = []
    channels = n_leads
    for i, d in enumerate(ECG_DILATIONS, start=1):
        layers += [
            LayerSpec("conv", f"conv{i:02d}", channels, ECG_FILTERS, ECG_KERNEL, d),
            LayerSpec("bn", f"bn{i:02d}", ECG_FILTERS),
            LayerSpec("relu", f"relu{i:02d}"),
            LayerSpec("dropout", f"drop{i:02d}", rate=ECG_DROPOUT),
        ]
        if i in ECG_POOL_AFTER:
            layers.append(LayerSpec("maxpool", f"pool{i:02d}"))
        channels = ECG_FILTERS
    layers.append(LayerSpec("gap", "gap"))
    return ModelSpec("ecgnet", ecg_trunk=tuple(layers))


def build_tabnet(n_features: int = 17) -> ModelSpec:
    if n_features < 1:
        raise ArchitectureError("n_features must be >= 1")
    layers: list[LayerSpec] = []
    width = n_features
    for i, units in enumerate(TAB_UNITS, start=1):
        layers += [
            LayerSpec("dense", f"dense{i}", width, units),
            LayerSpec("bn", f"bn{i}", units),
            LayerSpec("relu", f"relu{i}"),
            LayerSpec("dropout", f"drop{i}", rate=TAB_DROPOUT),
        ]
        width = units
    return ModelSpec("tabnet", tab_trunk=tuple(layers))


def _trunk_dim(trunk: tuple[LayerSpec, ...]) -> int:
    dims = [l.out_dim for l in trunk if l.kind in ("conv", "dense")]
    return dims[-1]


def build_fullmodel(ecg: ModelSpec, tab: ModelSpec) -> ModelSpec:
    if ecg.ecg_trunk is None or tab.tab_trunk is None:
        raise ArchitectureError("fusion needs an ECG trunk and a tabular trunk")
    a, b = _trunk_dim(ecg.ecg_trunk), _trunk_dim(tab.tab_trunk)
    if a != b:
        raise ArchitectureError(f"trunk output dimensions differ: {a} vs {b}")
    return ModelSpec("fullmodel", ecg_trunk=ecg.ecg_trunk, tab_trunk=tab.tab_trunk,
                     head=replace(ecg.head, in_dim=a))


def build_model(kind: str, n_leads: int = 12, n_features: int = 17) -> ModelSpec:
    if kind == "ecg":
        return build_ecgnet(n_leads)
    if kind == "tab":
        return build_tabnet(n_features)
    if kind == "full":
        return build_fullmodel(build_ecgnet(n_leads), build_tabnet(n_features))
    raise ArchitectureError(f"unknown model kind {kind!r}; expected ecg, tab or full")


# ---------------------------------------------------------------------------
# Instantiated network


@dataclass
class Forward:
    logits: Tensor
    features: Tensor
    pre_gap: np.ndarray | None = None


class Network:
    """Parameters plus forward pass for a ModelSpec."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.store = nn.ParameterStore()
        rng = np.random.default_rng(seed)
        for prefix, trunk in (("ecg", spec.ecg_trunk), ("tab", spec.tab_trunk)):
            for layer in trunk or ():
                self._init_layer(f"{prefix}.{layer.name}", layer, rng, dtype)
        self._init_layer("head", spec.head, rng, dtype)

    def _init_layer(self, name: str, layer: LayerSpec, rng, dtype):
        s = self.store
        if layer.kind == "conv":
            fan_in = layer.in_dim * layer.kernel
            s.add(f"{name}.w", nn.he_uniform(rng, (layer.out_dim, layer.in_dim, layer.kernel), fan_in, dtype))
            s.add(f"{name}.b", np.zeros(layer.out_dim, dtype=dtype))
        elif layer.kind == "dense":
            s.add(f"{name}.w", nn.he_uniform(rng, (layer.out_dim, layer.in_dim), layer.in_dim, dtype))
            s.add(f"{name}.b", np.zeros(layer.out_dim, dtype=dtype))
        elif layer.kind == "bn":
            s.add(f"{name}.gamma", np.ones(layer.in_dim, dtype=dtype))
            s.add(f"{name}.beta", np.zeros(layer.in_dim, dtype=dtype))
            s.add_bn(name, layer.in_dim, dtype)

    def _run_trunk(self, prefix: str, trunk, x: Tensor, mode: Mode, rng):
        p = self.store.params
        pre_gap = None
        for layer in trunk:
            name = f"{prefix}.{layer.name}"
            if layer.kind == "conv":
                x = nn.conv1d(x, p[f"{name}.w"], p[f"{name}.b"], layer.dilation)
            elif layer.kind == "dense":
                x = nn.dense(x, p[f"{name}.w"], p[f"{name}.b"])
            elif layer.kind == "bn":
                x = nn.batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.store.bn[name], mode)
            elif layer.kind == "relu":
                x = nn.relu(x)
            elif layer.kind == "dropout":
                x = nn.dropout(x, layer.rate, mode, rng)
            elif layer.kind == "maxpool":
                x = nn.maxpool1d(x, 2)
            elif layer.kind == "gap":
                pre_gap = x.data
                x = nn.global_avg_pool(x)
            else:
                raise ArchitectureError(f"unknown layer kind {layer.kind!r}")
        return x, pre_gap

    def forward(self, ecg: np.ndarray | None = None, tab: np.ndarray | None = None,
                mode: Mode = Mode.INFERENCE, rng: np.random.Generator | None = None) -> Forward:
        """ecg: ``[B, T, n_leads]``; tab: ``[B, n_features]`` (normalized)."""
        spec = self.spec
        feats = []
        pre_gap = None
        dtype = next(iter(self.store.params.values())).data.dtype
        if spec.ecg_trunk is not None:
            if ecg is None:
                raise ValueError(f"{spec.name} needs ECG input")
            f, pre_gap = self._run_trunk("ecg", spec.ecg_trunk, Tensor(np.asarray(ecg, dtype=dtype)), mode, rng)
            feats.append(f)
        if spec.tab_trunk is not None:
            if tab is None:
                raise ValueError(f"{spec.name} needs tabular input")
            f, _ = self._run_trunk("tab", spec.tab_trunk, Tensor(np.asarray(tab, dtype=dtype)), mode, rng)
            feats.append(f)
        fused = feats[0] if len(feats) == 1 else nn.add(feats[0], feats[1])
        p = self.store.params
        logits = nn.dense(fused, p["head.w"], p["head.b"])
        return Forward(logits, fused, pre_gap)

    def predict_proba(self, ecg=None, tab=None, batch_size: int = 64) -> np.ndarray:
        """Inference-mode probability of class AF1 for each row."""
        n = len(ecg) if ecg is not None else len(tab)
        out = np.empty(n)
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            fw = self.forward(None if ecg is None else ecg[sl], None if tab is None else tab[sl])
            out[sl] = nn.softmax(fw.logits.data.astype(np.float64))[:, 1]
        return out


@dataclass(frozen=True)
class Cam:
    values: np.ndarray
    samples_per_step: int


def cam(net: Network, samples: np.ndarray, target_class: int) -> Cam:
    """Class activation map of an EcgNet for one preprocessed ``[T, n_leads]`` record.

    ``values[t] = sum_k head_w[target_class, k] * pre_gap[t, k]``; each step
    covers ``samples_per_step`` input samples.
    """
    if net.spec.ecg_trunk is None or net.spec.tab_trunk is not None:
        raise ArchitectureError("CAM needs an ECG-only network with a preserved pre-GAP map")
    if target_class not in (0, 1):
        raise ValueError("target_class must be 0 or 1")
    x = np.asarray(samples)[None]
    fw = net.forward(x, mode=Mode.INFERENCE)
    if fw.pre_gap is None:
        raise ArchitectureError("network has no pre-GAP feature map")
    w = net.store["head.w"].data[target_class].astype(np.float64)
    values = fw.pre_gap[0].astype(np.float64) @ w
    pools = sum(1 for l in net.spec.ecg_trunk if l.kind == "maxpool")
    return Cam(values, 2 ** pools)
