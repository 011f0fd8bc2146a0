"""``afnet`` command line: synth, prepare, train, eval, ablations, filter, cam, report.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Every command writes only under its ``--out`` directory and is deterministic
for fixed seeds; reports carry git-style SHA-1 hashes of their inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import ALL_LEADS, DataError, Lead, NormStats, read_manifest, write_ecg, write_manifest
from .dsp import BAND_CATALOG, BandSpec, FilterError, apply_sos, design_butterworth_bandpass
from .evalx import (
    AblationSetup, AblationTable, ScoredSet, accuracy, auc, calibration_curve, roc_points,
    run_band_ablation, run_lead_ablation,
)
from .models import build_model, cam
from .optim import NumericalError
from .pipeline import Preprocess, build_splits, load_rows, preprocess
from .synthgen import SynthParams, synth_dataset
from .training import CheckpointError, TrainConfig, load_checkpoint, predict, save_checkpoint, train

log = logging.getLogger("afnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_NAMES = ("test_balanced", "test_unbalanced")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# RunConfig: flat key=value text


@dataclass(frozen=True)
class RunConfig:
    lr0: float = 0.01
    half_period: int = 15
    patience: int = 15
    min_delta: float = 0.005
    max_epochs: int = 100
    batch_size: int = 32
    val_fraction: float = 0.10
    seed: int = 0
    test_frac: float = 0.12
    unbal_ratio: int = 5
    split_seed: int = 0
    band: str = "none"
    leads: str = "all"
    seeds: str = "0,1,2,3,4"
    filter_order: int = 4

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def band_spec(self) -> BandSpec | None:
        return None if self.band.lower() in ("none", "") else BandSpec.parse(self.band)

    def lead_tuple(self) -> tuple[Lead, ...] | None:
        if self.leads.lower() == "all":
            return None
        return tuple(Lead.parse(t) for t in self.leads.split(","))

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def parse_config_text(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {line!r}")
        pairs.append(line)
    return apply_overrides(base, pairs)


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    changes = {}
    for pair in pairs:
        key, _, value = pair.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            changes[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None
    return replace(cfg, **changes)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig(seed=default_seed(None))
    if getattr(args, "config", None):
        cfg = parse_config_text(_read_text(args.config), cfg)
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    try:
        cfg.train_config()
        cfg.band_spec()
        cfg.lead_tuple()
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return cfg


def default_seed(explicit: int | None) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get("AFNET_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"AFNET_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# helpers


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def git_blob_sha1(path) -> str:
    """Same digest ``git hash-object`` prints for the file."""
    blob = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _kv(pairs) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _split_files(splits_dir: Path):
    for name in ("train.csv", "norm_stats.csv"):
        if not (splits_dir / name).exists():
            raise DataError(f"{splits_dir}: missing {name} (run 'afnet prepare' first)")


def _prep(cfg: RunConfig) -> Preprocess:
    return Preprocess(band=cfg.band_spec(), leads=cfg.lead_tuple(), filter_order=cfg.filter_order)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    seed = default_seed(args.seed)
    params = SynthParams(n_samples=args.n_samples)
    m = synth_dataset(args.n_af0, args.n_af1, seed, args.out, params, tab_effect=args.tab_effect)
    counts = m.class_counts()
    print(f"wrote {len(m)} records ({int(counts.get(0, 0))} AF0, {int(counts.get(1, 0))} AF1) to {args.out}")
    return EXIT_OK


def max_feasible_ratio(n_af0: int, n_af1: int, test_frac: float) -> int:
    n_test = int(test_frac * n_af1 + 1e-9)
    if n_test < 1:
        return 0
    return (n_af0 - (n_af1 - n_test)) // n_test


def cmd_prepare(args) -> int:
    seed = default_seed(args.seed)
    manifest = read_manifest(args.manifest)
    counts = manifest.class_counts()
    ratio = args.unbal_ratio
    if ratio is None:
        cap = max_feasible_ratio(counts.get(0, 0), counts.get(1, 0), args.test_frac)
        ratio = min(5, cap)
        if ratio < 1:
            raise DataError("manifest has too few AF0 records for any unbalanced test set")
        if ratio < 5:
            log.warning("unbal_ratio lowered from 5 to %d to fit %d AF0 records", ratio, counts.get(0, 0))
    splits = build_splits(manifest, args.test_frac, ratio, seed)
    out = Path(args.out) if args.out else Path(args.manifest).parent / "splits"
    splits.write(_out_dir(out))
    print(splits.report(), end="")
    return EXIT_OK


def _train_report(cfg: RunConfig, model: str, splits_dir: Path, ckpt: Path, history) -> str:
    head = [("command", "train"), ("model", model)]
    head += [(f"config.{k}", v) for k, v in asdict(cfg).items()]
    for name in ("train.csv", "norm_stats.csv"):
        head.append((f"sha1.{name}", git_blob_sha1(splits_dir / name)))
    head.append(("sha1.checkpoint", git_blob_sha1(ckpt)))
    head.append(("best_epoch", history.best_epoch))
    head.append(("stop_reason", history.stop_reason))
    return _kv(head) + "\n" + history.to_csv()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    splits_dir = Path(args.splits)
    _split_files(splits_dir)
    train_m = read_manifest(splits_dir / "train.csv")
    norm = NormStats.read(splits_dir / "norm_stats.csv")
    leads = cfg.lead_tuple()
    prep = None if args.model == "tab" else _prep(cfg)
    data = load_rows(train_m.root, train_m.rows, prep, norm)
    spec = build_model(args.model, len(leads) if leads else 12)
    net, history = train(spec, data, cfg.train_config())
    out = _out_dir(args.out)
    ckpt = out / "model.afck"
    save_checkpoint(net, norm, ckpt, leads if args.model != "tab" else None)
    (out / "run_config.txt").write_text(f"model={args.model}\n" + cfg.to_text())
    (out / "history.csv").write_text(history.to_csv())
    (out / "run_report.txt").write_text(_train_report(cfg, args.model, splits_dir, ckpt, history))
    print(f"best epoch {history.best_epoch} ({history.stop_reason}); checkpoint {ckpt}")
    return EXIT_OK


def _ckpt_config(ckpt_path: Path, args) -> RunConfig:
    side = ckpt_path.parent / "run_config.txt"
    if getattr(args, "config", None) is None and side.exists():
        text = "\n".join(l for l in side.read_text().splitlines() if not l.startswith("model="))
        cfg = parse_config_text(text)
        return apply_overrides(cfg, getattr(args, "set", None) or [])
    return resolve_config(args)


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ck = load_checkpoint(ckpt_path)
    cfg = _ckpt_config(ckpt_path, args)
    splits_dir = Path(args.splits)
    names = SPLIT_NAMES if args.split == "both" else (args.split,)
    spec = ck.net.spec
    prep = _prep(replace(cfg, leads=",".join(l.name for l in ck.leads) if ck.leads else "all")) \
        if spec.ecg_trunk is not None else None
    norm = ck.norm_stats if spec.tab_trunk is not None else None
    out = _out_dir(args.out)
    head = [("command", "eval"), ("model", spec.kind), ("sha1.checkpoint", git_blob_sha1(ckpt_path))]
    body = []
    for name in names:
        path = splits_dir / f"{name}.csv"
        m = read_manifest(path)
        data = load_rows(m.root, m.rows, prep, norm)
        scored = ScoredSet(predict(ck.net, data), data.labels)
        acc, a = accuracy(scored), auc(scored)
        print(f"{name}: ACC={acc:.4f} AUC={a:.4f} n={len(scored)}")
        head += [(f"sha1.{name}", git_blob_sha1(path)), (f"{name}.n", len(scored)),
                 (f"{name}.accuracy", repr(acc)), (f"{name}.auc", repr(a))]
        body.append(f"# calibration {name}\nlower,upper,mean_predicted,empirical,count")
        for b in calibration_curve(scored):
            body.append(f"{b.lower!r},{b.upper!r},{b.mean_predicted!r},{b.empirical!r},{b.count}")
        roc = roc_points(scored)
        (out / f"roc_{name}.csv").write_text("fpr,tpr\n" + "".join(f"{x!r},{y!r}\n" for x, y in roc))
        (out / f"scores_{name}.csv").write_text(
            "record_id,label,score\n" + "".join(f"{i},{l},{s!r}\n" for i, l, s in zip(data.ids, data.labels, scored.scores))
        )
    (out / "eval_report.txt").write_text(_kv(head) + "\n" + "\n".join(body) + "\n")
    return EXIT_OK


def _ablation_common(args):
    cfg = resolve_config(args)
    seeds = cfg.seed_list()
    if len(seeds) < 2:
        raise UsageError("ablations need at least 2 seeds")
    manifest = read_manifest(args.manifest)
    setup = AblationSetup(cfg.test_frac, 1, cfg.split_seed)  # ablations score the balanced test set only
    return cfg, seeds, manifest, setup


def _write_table(table: AblationTable, args, cfg: RunConfig, name: str) -> None:
    out = _out_dir(args.out)
    (out / f"{name}.csv").write_text(table.to_csv())
    (out / f"{name}.txt").write_text(table.render() + "\n")
    head = [("command", name), ("sha1.manifest", git_blob_sha1(args.manifest))]
    head += [(f"config.{k}", v) for k, v in asdict(cfg).items()]
    (out / f"{name}_report.txt").write_text(_kv(head))
    print(table.render())


def cmd_ablate_leads(args) -> int:
    cfg, seeds, manifest, setup = _ablation_common(args)
    leads = cfg.lead_tuple() or ALL_LEADS
    table = run_lead_ablation(manifest, cfg.train_config(), seeds, setup, leads, jobs=args.jobs)
    _write_table(table, args, cfg, "lead_ablation")
    return EXIT_OK


def cmd_ablate_bands(args) -> int:
    cfg, seeds, manifest, setup = _ablation_common(args)
    try:
        bands = (None,) + BAND_CATALOG if not args.bands else tuple(
            None if b == "none" else BandSpec.parse(b) for b in args.bands.split(",")
        )
    except ValueError:
        raise UsageError(f"--bands expects a comma list of LOW-HIGH ranges, got {args.bands!r}") from None
    table = run_band_ablation(manifest, cfg.train_config(), seeds, setup, bands, jobs=args.jobs)
    _write_table(table, args, cfg, "band_ablation")
    return EXIT_OK


def cmd_filter(args) -> int:
    try:
        band = BandSpec.parse(args.band)
    except ValueError:
        raise UsageError(f"--band expects LOW-HIGH in Hz, got {args.band!r}") from None
    manifest = read_manifest(args.manifest)
    out = _out_dir(args.out)
    (out / "waveforms").mkdir(exist_ok=True)
    rows = []
    sos_by_fs = {}
    for row in manifest.rows:
        rec = manifest.load(row)
        if rec.fs not in sos_by_fs:
            sos_by_fs[rec.fs] = design_butterworth_bandpass(band, rec.fs, args.order)
        filtered = rec.replace(samples=apply_sos(sos_by_fs[rec.fs], rec.samples).astype(np.float32))
        rel = f"waveforms/{row.record_id}.ecg"
        write_ecg(filtered, out / rel)
        rows.append(replace(row, path=rel))
    write_manifest(rows, out / "manifest.csv")
    for fs, filt in sorted(sos_by_fs.items()):
        (out / f"sos_{fs:g}Hz.csv").write_text(filt.to_csv())
    print(f"filtered {len(rows)} records with [{band.name}] Hz, order {args.order}")
    return EXIT_OK


def cmd_cam(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ck = load_checkpoint(ckpt_path)
    cfg = _ckpt_config(ckpt_path, args)
    manifest = read_manifest(args.manifest)
    prep = _prep(replace(cfg, leads=",".join(l.name for l in ck.leads) if ck.leads else "all"))
    out = _out_dir(args.out)
    rows = manifest.rows[: args.limit] if args.limit else manifest.rows
    lines = ["record_id,label,step,samples_per_step,cam"]
    for row in rows:
        rec = preprocess(manifest.load(row), prep)
        c = cam(ck.net, rec.samples, args.target_class)
        lines += [f"{row.record_id},{int(row.label)},{t},{c.samples_per_step},{v!r}" for t, v in enumerate(c.values)]
    (out / "cam.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote CAM for {len(rows)} records")
    return EXIT_OK


def cmd_report(args) -> int:
    parts = []
    for path in args.tables:
        table = AblationTable.from_csv(_read_text(path), title=Path(path).stem)
        parts.append(table.render())
        if len(table.rows) > 1 and any(r.error is None for r in table.rows):
            parts.append(f"best condition: {table.best()}\n")
    text = "\n".join(parts)
    if args.out:
        (_out_dir(args.out) / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p):
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="afnet", description="AF risk prediction from ECG waveforms and tabular features.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n-af0", type=int, required=True)
    p.add_argument("--n-af1", type=int, required=True)
    p.add_argument("--seed", type=int, help="default: $AFNET_SEED or 0")
    p.add_argument("--n-samples", type=int, default=5000)
    p.add_argument("--tab-effect", type=float, default=1.0, help="scale of the AF1 tabular shift (0 = none)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build train / test split manifests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-frac", type=float, default=0.12)
    p.add_argument("--unbal-ratio", type=int, help="AF0 per AF1 in the unbalanced test set (default: 5, "
                                                   "lowered when the manifest has too few AF0 records)")
    p.add_argument("--out", help="default: <manifest dir>/splits")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on prepared splits")
    p.add_argument("--splits", required=True, help="directory written by 'afnet prepare'")
    p.add_argument("--model", choices=("ecg", "tab", "full"), default="ecg")
    p.add_argument("--seed", type=int)
    _config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ACC / AUC / calibration of a checkpoint on the test splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES + ("both",), default="both")
    _config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, extra in (("ablate-leads", cmd_ablate_leads, None), ("ablate-bands", cmd_ablate_bands, "bands")):
        p = sub.add_parser(name, help=f"{name.split('-')[1][:-1]} ablation table over seeds")
        p.add_argument("--manifest", required=True)
        p.add_argument("--jobs", type=int, default=1)
        if extra:
            p.add_argument("--bands", help="comma list such as none,5-20,35-50 (default: all)")
        _config_flags(p)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("filter", help="band-pass every record of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--band", required=True, help="e.g. 5-20")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("cam", help="dump class activation maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--target-class", type=int, choices=(0, 1), default=1)
    p.add_argument("--limit", type=int, default=0)
    _config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("report", help="render ablation tables")
    p.add_argument("tables", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"afnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"afnet: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FilterError, CheckpointError, OSError) as exc:
        print(f"afnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
