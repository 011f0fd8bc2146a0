"""Training loop: Adam, step-halving LR, early stopping on validation accuracy."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import DataError, Lead, NormStats
from .models import ModelSpec, Network, build_model
from .nn import Mode
from .optim import AdamState, NumericalError, adam_step, lr_at_epoch
from .pipeline import Dataset, parse_shifted_id

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    half_period: int = 15
    patience: int = 15
    min_delta: float = 0.005
    max_epochs: int = 100
    batch_size: int = 32
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 0.5:
            raise ValueError(f"val_fraction must lie in (0, 0.5), got {self.val_fraction}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch-norm")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = "max_epochs"

    def column(self, name: str) -> list[float]:
        return [getattr(e, name) for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_accuracy,val_accuracy,lr"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.train_accuracy!r},{e.val_accuracy!r},{e.lr!r}")
        return "\n".join(lines) + "\n"


_DELTA_SLACK = 1e-9


@dataclass(frozen=True)
class EarlyStop:
    stop: bool
    best_epoch: int


def early_stop_check(val_accuracies, patience: int = 15, min_delta: float = 0.005) -> EarlyStop:
    """An epoch improves iff it beats the last improving epoch by more than ``min_delta``.

    Stops once ``patience`` consecutive epochs fail to improve.
    """
    if len(val_accuracies) == 0:
        raise ValueError("need at least one validation accuracy")
    best_epoch = 0
    best = val_accuracies[0]
    waited = 0
    for i, acc in enumerate(val_accuracies[1:], start=1):
        # accuracies are count ratios; a gain equal to min_delta up to rounding is not an improvement
        if acc - best > min_delta + _DELTA_SLACK:
            best, best_epoch, waited = acc, i, 0
        else:
            waited += 1
    return EarlyStop(waited >= patience, best_epoch)


def stratified_validation_split(data: Dataset, fraction: float, rng: np.random.Generator):
    """Hold out ``fraction`` of each class, keeping a record and its shifted copies together."""
    groups: dict[str, list[int]] = {}
    for i, rid in enumerate(data.ids):
        groups.setdefault(parse_shifted_id(rid)[0], []).append(i)
    keys = sorted(groups)
    val_idx: list[int] = []
    for label in (0, 1):
        cls_keys = [k for k in keys if data.labels[groups[k][0]] == label]
        n_val = max(1, int(round(fraction * len(cls_keys))))
        if n_val >= len(cls_keys):
            raise DataError(f"class {label} has too few records ({len(cls_keys)}) for a validation split")
        for j in rng.permutation(len(cls_keys))[:n_val]:
            val_idx.extend(groups[cls_keys[j]])
    val_set = set(val_idx)
    train_idx = [i for i in range(len(data)) if i not in val_set]
    return np.array(train_idx, dtype=np.int64), np.array(sorted(val_idx), dtype=np.int64)


def _inputs(spec: ModelSpec, data: Dataset, idx=None):
    ecg = data.ecg if spec.ecg_trunk is not None else None
    tab = data.tab if spec.tab_trunk is not None else None
    if spec.ecg_trunk is not None and ecg is None:
        raise DataError(f"{spec.name} needs waveforms")
    if spec.tab_trunk is not None and tab is None:
        raise DataError(f"{spec.name} needs tabular features")
    if idx is not None:
        ecg = None if ecg is None else ecg[idx]
        tab = None if tab is None else tab[idx]
    return ecg, tab


def predict(net: Network, data: Dataset, batch_size: int = 64) -> np.ndarray:
    ecg, tab = _inputs(net.spec, data)
    return net.predict_proba(ecg, tab, batch_size=batch_size)


def train(spec: ModelSpec, data: Dataset, config: TrainConfig = TrainConfig(),
          validation: Dataset | None = None) -> tuple[Network, TrainHistory]:
    """Fit ``spec`` on ``data``; returns the network (parameters in ``net.store``) and history.

    A stratified ``val_fraction`` of ``data`` is held out for early stopping
    unless ``validation`` is given. The parameters of the best validation
    epoch are restored before returning.
    """
    if len(data) == 0:
        raise DataError("empty training set")
    rng = np.random.default_rng(config.seed)
    net = Network(spec, seed=config.seed)
    history = TrainHistory()
    if config.max_epochs == 0:
        return net, history

    if validation is None:
        train_idx, val_idx = stratified_validation_split(data, config.val_fraction, rng)
        fit, val = data.subset(train_idx), data.subset(val_idx)
    else:
        fit, val = data, validation
    if len(val) == 0:
        raise DataError("empty validation split")
    fit_ecg, fit_tab = _inputs(spec, fit)
    n = len(fit)
    state = AdamState()
    store = net.store
    params = {k: t.data for k, t in store.params.items()}
    best_snapshot = None
    val_accs: list[float] = []

    for epoch in range(config.max_epochs):
        lr = lr_at_epoch(epoch, config.lr0, config.half_period)
        order = rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batch-norm needs two samples
            fw = net.forward(None if fit_ecg is None else fit_ecg[idx],
                             None if fit_tab is None else fit_tab[idx], Mode.TRAINING, rng)
            loss, probs = nn.softmax_cross_entropy(fw.logits, fit.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            store.zero_grad()
            loss.backward()
            adam_step(params, store.grads(), state, lr)
            losses.append(float(loss.data) * len(idx))
            correct += int((probs.argmax(axis=1) == fit.labels[idx]).sum())
            seen += len(idx)
        val_prob = predict(net, val)
        val_acc = float(np.mean((val_prob >= 0.5) == (val.labels == 1)))
        history.epochs.append(EpochRecord(epoch, sum(losses) / max(seen, 1), correct / max(seen, 1), val_acc, lr))
        val_accs.append(val_acc)
        decision = early_stop_check(val_accs, config.patience, config.min_delta)
        if decision.best_epoch == epoch:
            best_snapshot = store.snapshot()
        history.best_epoch = decision.best_epoch
        log.info("epoch %d lr=%.5g loss=%.4f acc=%.4f val_acc=%.4f", epoch, lr,
                 history.epochs[-1].train_loss, history.epochs[-1].train_accuracy, val_acc)
        if decision.stop:
            history.stop_reason = "early_stop"
            break

    if best_snapshot is not None:
        store.restore(best_snapshot)
    return net, history


# ---------------------------------------------------------------------------
# Checkpoints: "AFCK" | u16 version | u32 count |
#   count x {u16 name length, name, u8 rank, rank x u32 dims, f32 LE payload}

CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1
ARCH_PREFIX = "__arch__/"
NORM_PREFIX = "__norm__/"


class CheckpointError(DataError):
    pass


def write_tensors(entries: list[tuple[str, np.ndarray]], path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode()
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> list[tuple[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        out = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(blob):
                raise CheckpointError(f"{path}: truncated checkpoint in tensor {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
            out.append((name, arr))
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def arch_tag(spec: ModelSpec, leads: tuple[Lead, ...] | None = None) -> str:
    if leads is None and spec.ecg_trunk is not None:
        leads = tuple(Lead)[: spec.n_leads]
    lead_txt = ",".join(l.name for l in leads) if leads else "-"
    return f"{ARCH_PREFIX}{spec.kind}/{lead_txt}/{spec.n_features}/{spec.fingerprint()}"


def norm_sidecar(path) -> Path:
    return Path(str(path) + ".norm.csv")


def _norm_digest(stats: NormStats) -> str:
    payload = stats.mean.astype("<f8").tobytes() + stats.std.astype("<f8").tobytes()
    return hashlib.sha256(payload).hexdigest()[:16]


def save_checkpoint(net: Network, norm_stats: NormStats | None, path,
                    leads: tuple[Lead, ...] | None = None) -> None:
    """Parameters, batch-norm statistics and an architecture tag.

    NormStats go to a full-precision sidecar CSV referenced by digest.
    """
    entries = [(arch_tag(net.spec, leads), np.zeros(0, np.float32))]
    if norm_stats is not None:
        entries.append((NORM_PREFIX + _norm_digest(norm_stats), np.zeros(0, np.float32)))
        norm_stats.write(norm_sidecar(path))
    entries += sorted(net.store.arrays().items())
    write_tensors(entries, path)


@dataclass
class Checkpoint:
    net: Network
    norm_stats: NormStats | None
    leads: tuple[Lead, ...] | None


def load_checkpoint(path, spec: ModelSpec | None = None) -> Checkpoint:
    """Rebuild the network recorded in ``path``; a mismatching ``spec`` fails loudly."""
    entries = read_tensors(path)
    arch = [n for n, _ in entries if n.startswith(ARCH_PREFIX)]
    if len(arch) != 1:
        raise CheckpointError(f"{path}: missing architecture tag")
    kind, lead_txt, n_features, fp = arch[0][len(ARCH_PREFIX):].split("/")
    leads = None if lead_txt == "-" else tuple(Lead.parse(t) for t in lead_txt.split(","))
    recorded = build_model(kind, len(leads) if leads else 12, int(n_features) or 17)
    if recorded.fingerprint() != fp:
        raise CheckpointError(f"{path}: architecture tag does not match any buildable model")
    if spec is not None and spec.fingerprint() != fp:
        raise CheckpointError(
            f"{path}: architecture fingerprint mismatch (checkpoint {fp}, requested {spec.fingerprint()})"
        )
    net = Network(recorded)
    arrays = {n: a for n, a in entries if not n.startswith(("__arch__/", NORM_PREFIX))}
    net.store.restore(arrays)
    norm = None
    digests = [n[len(NORM_PREFIX):] for n, _ in entries if n.startswith(NORM_PREFIX)]
    if digests:
        side = norm_sidecar(path)
        if not side.exists():
            raise CheckpointError(f"{path}: NormStats sidecar {side} missing")
        norm = NormStats.read(side)
        if _norm_digest(norm) != digests[0]:
            raise CheckpointError(f"{path}: NormStats sidecar does not match the checkpoint digest")
    return Checkpoint(net, norm, leads)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
