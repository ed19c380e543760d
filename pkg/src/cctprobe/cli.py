"""Command-line entry point: ``cctprobe {train,predict,probe,committee,latency}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
The dataset root defaults to ``$CCTPROBE_DATA``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .architecture import ArchitectureSpec, layer_latency, load_spec, parameter_count
from .clusters import (block_statistics, clip, extract_clusters, label_coverage,
                       write_stats_csv)
from .committee import (PredictionSet, committee_report, load_predictions, save_predictions)
from .data import (AugmentConfig, Dataset, downscale, limit_per_label, load_cifar,
                   normalize_dataset, select_labels)
from .errors import CCTProbeError, ConfigurationError
from .model import build_model, model_hash, predict_logits, set_strict
from .probe import (ProbePoint, attach_probe_head, head_field_matrix, hp_from_snp,
                    node_field_matrix, probe_accuracy, train_probe_head)
from .trainer import (OPTIMIZER_PRESETS, OptimizerConfig, Schedule, Trainer, load_checkpoint,
                      save_checkpoint, write_history_csv)

log = logging.getLogger("cctprobe")

DATA_ENV = "CCTPROBE_DATA"


class UsageError(ConfigurationError):
    pass


@dataclass
class RunConfig:
    arch: str
    arch_text: str
    optimizer: dict
    data: dict
    seed: int = 0
    probe: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        return cls(**json.loads(Path(path).read_text()))

    @property
    def spec(self) -> ArchitectureSpec:
        return ArchitectureSpec.from_text(self.arch_text)


def parse_labels(text: str | None) -> list[int] | None:
    """``0..9`` (inclusive) or ``3,5,7``."""
    if not text:
        return None
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse {text!r}", "--labels") from None


def parse_blocks(text: str, num_blocks: int) -> list[int]:
    if text == "all":
        return list(range(1, num_blocks + 1))
    return parse_labels(text) or []


def load_split(data: dict, split: str, spec: ArchitectureSpec) -> Dataset:
    ds = load_cifar(data["path"], data["variant"], split)
    if data.get("labels") is not None:
        ds = select_labels(ds, data["labels"])
    per_label = data.get("per_label") if split == "train" else data.get("val_per_label")
    if per_label:
        ds = limit_per_label(ds, per_label)
    ds = downscale(ds, spec.input_size)
    if ds.num_labels != spec.num_labels:
        raise UsageError(f"dataset has {ds.num_labels} labels but the architecture expects "
                         f"{spec.num_labels}; select a subset with --labels", "--labels")
    return normalize_dataset(ds)


def _data_options(args) -> dict:
    path = args.data or os.environ.get(DATA_ENV)
    if not path:
        raise UsageError(f"no dataset path given (use --data or set ${DATA_ENV})", "--data")
    if not Path(path).exists():
        raise UsageError(f"dataset path {path} does not exist", "--data")
    return {"path": str(path), "variant": args.variant, "labels": parse_labels(args.labels),
            "per_label": args.per_label, "val_per_label": args.val_per_label}


def _optimizer(args) -> OptimizerConfig:
    cfg = OPTIMIZER_PRESETS[args.preset]
    changes = {"seed": args.seed, "strict": args.strict}
    for key in ("lr", "weight_decay", "batch_size", "epochs"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    if args.schedule:
        changes["schedule"] = Schedule.parse(args.schedule)
    if args.augment is not None:
        changes["augment"] = AugmentConfig() if args.augment else None
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    spec = load_spec(args.arch)
    data = _data_options(args)
    opt = _optimizer(args)
    run = RunConfig(args.arch, spec.to_text(), opt.to_dict(), data, args.seed)
    if args.strict:
        set_strict(True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = load_split(data, "train", spec)
    val_ds = load_split(data, "validation", spec)
    (out / "config.json").write_text(run.to_json())
    model = build_model(spec, args.seed)
    trainer = Trainer(model, opt, train_ds.images, train_ds.labels, train_ds.num_labels,
                      validation=(val_ds.images, val_ds.labels))
    for _ in range(opt.epochs):
        rec = trainer.run_epoch()
        log.info("epoch %d lr %.3g loss %.4f val_acc %.4f", rec["epoch"], rec["lr"], rec["loss"],
                 rec["val_acc"])
    ckpt = trainer.checkpoint()
    ckpt.meta["config_hash"] = run.config_hash()
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    write_history_csv(trainer.history, out / "history.csv")
    train_acc = float((predict_logits(model, train_ds.images).argmax(1) == train_ds.labels).float().mean())
    summary = {"config_hash": run.config_hash(), "train_acc": train_acc,
               "val_acc": trainer.history[-1]["val_acc"], "epochs": opt.epochs,
               "layers": layer_latency(spec), "parameters": parameter_count(spec)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_run(run_dir: Path, force: bool):
    run = RunConfig.load(run_dir / "config.json")
    ckpt = load_checkpoint(run_dir / "checkpoint.ckpt")
    if ckpt.meta.get("config_hash") != run.config_hash() and not force:
        raise CCTProbeError(f"{run_dir}: checkpoint was not produced by this config "
                            "(pass --force to override)")
    if ckpt.spec != run.spec and not force:
        raise CCTProbeError(f"{run_dir}: checkpoint architecture differs from config")
    return run, ckpt


def cmd_predict(args) -> int:
    run_dir = Path(args.run)
    run, ckpt = _load_run(run_dir, args.force)
    model = ckpt.build_model()
    ds = load_split(run.data, args.split, ckpt.spec)
    fields = predict_logits(model, ds.images).double().numpy()
    member = args.member_id or run_dir.name
    ps = PredictionSet(member, fields, ds.fingerprint())
    save_predictions(ps, args.out, ds.labels.numpy())
    print(f"wrote {len(ps)} x {fields.shape[1]} fields to {args.out}")
    return 0


def _jaccard(a: set, b: set) -> float:
    return 1.0 if not a and not b else len(a & b) / len(a | b)


def cmd_probe(args) -> int:
    run_dir = Path(args.run)
    run, ckpt = _load_run(run_dir, args.force)
    spec = ckpt.spec
    if args.strict:
        set_strict(True)
    blocks = parse_blocks(args.blocks, spec.num_blocks)
    for m in blocks:
        if not 1 <= m <= spec.num_blocks:
            raise UsageError(f"block {m} outside 1..{spec.num_blocks}", "--blocks")
    data = dict(run.data)
    if args.data:
        data["path"] = args.data
    train_ds = load_split(data, "train", spec)
    val_ds = load_split(data, "validation", spec)
    model = ckpt.build_model()
    before = model_hash(model)
    out = Path(args.out or run_dir / "probe")
    out.mkdir(parents=True, exist_ok=True)
    head_cfg = OPTIMIZER_PRESETS["probe-head"].replace(seed=args.seed, strict=args.strict)
    if args.head_epochs is not None:
        head_cfg = head_cfg.replace(epochs=args.head_epochs)
    if args.head_lr is not None:
        head_cfg = head_cfg.replace(lr=args.head_lr)
    thetas = args.theta
    rows: dict[float, list] = {t: [] for t in thetas}
    provenance = {"config_hash": run.config_hash(), "model_hash": before, "tap": args.tap,
                  "silence_before_sp": args.silence_before_sp, "head_config": head_cfg.to_dict()}
    hp_report = []
    for m in sorted(blocks, reverse=True):
        probe = ProbePoint(m, args.tap)
        extractor, head = attach_probe_head(model, probe, seed=args.seed, bias=not args.no_bias)
        train_feats = extractor.extract(train_ds.images)
        train_probe_head(extractor, head, train_ds, head_cfg, features=train_feats)
        val_feats = extractor.extract(val_ds.images)
        acc = probe_accuracy(extractor, head, val_ds, features=val_feats)
        bdir = out / f"block{m}"
        bdir.mkdir(exist_ok=True)
        shps = []
        for h in range(extractor.heads):
            fm = head_field_matrix(extractor, head, h, val_ds, args.silence_before_sp, val_feats)
            fm.save(bdir / f"shp_head{h}.csv")
            fm.save_heatmap(bdir / f"shp_head{h}.png")
            shps.append(fm)
        for theta in thetas:
            reports = []
            for h, fm in enumerate(shps):
                rep = extract_clusters(clip(fm, theta))
                (bdir / f"clusters_head{h}_theta{theta}.json").write_text(rep.to_json())
                reports.append(rep)
            row = block_statistics(reports, spec.num_labels, acc, m)
            rows[theta].append(row)
            coverage = label_coverage(reports, spec.num_labels)
            (bdir / f"coverage_theta{theta}.json").write_text(json.dumps(coverage.tolist()))
        if args.snp:
            size = spec.dim // extractor.heads
            for h in range(extractor.heads):
                snps = [node_field_matrix(extractor, head, k, val_ds, args.silence_before_sp,
                                          val_feats)
                        for k in range(h * size, (h + 1) * size)]
                hp = hp_from_snp(snps)
                hp.save(bdir / f"hp_head{h}.csv")
                hp.save_heatmap(bdir / f"hp_head{h}.png")
                for theta in thetas:
                    a = {i for c in extract_clusters(clip(shps[h], theta)).clusters for i in c}
                    b = {i for c in extract_clusters(clip(hp, theta)).clusters for i in c}
                    hp_report.append({"block": m, "head": h, "theta": theta,
                                      "jaccard": _jaccard(a, b)})
        log.info("block %d: attn acc %.4f", m, acc)
    for theta in thetas:
        write_stats_csv(rows[theta], out / f"stats_theta{theta}.csv")
    if hp_report:
        (out / "hp_vs_shp.json").write_text(json.dumps(hp_report, indent=1))
    after = model_hash(model)
    if after != before:
        raise CCTProbeError("probing modified the frozen model")
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    for theta in thetas:
        for r in rows[theta]:
            print(f"theta={theta} block={r.block} attn_acc={r.attn_acc:.4f} N_c={r.n_c:.2f} "
                  f"C_s={r.c_s:.3f} n={r.n:.2f} N_label={r.n_label:.3f} SNR={r.snr:.3g}")
    return 0


def cmd_committee(args) -> int:
    members, truths = [], []
    for path in args.dumps:
        ps, truth = load_predictions(path)
        members.append(ps)
        truths.append(truth)
    if args.truth:
        truth = np.loadtxt(args.truth, dtype=np.int64, ndmin=1)
    else:
        truth = truths[0]
        if any(len(t) != len(truth) or not np.array_equal(t, truth) for t in truths[1:]):
            raise CCTProbeError("dumps disagree on the ground-truth labels (or their lengths)")
        if (truth < 0).any():
            raise UsageError("dumps carry no ground truth; pass --truth", "--truth")
    report = committee_report(members, truth, force=args.force)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_latency(args) -> int:
    spec = load_spec(args.arch)
    print(json.dumps({"arch": args.arch, "layers": layer_latency(spec),
                      "parameters": parameter_count(spec)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cctprobe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--data", help=f"CIFAR binary directory (default ${DATA_ENV})")
        sp.add_argument("--variant", choices=["cifar100", "cifar10"], default="cifar100")
        sp.add_argument("--labels", help="label subset, e.g. 0..9 or 1,4,7")
        sp.add_argument("--per-label", type=int, help="keep the first N training images per label")
        sp.add_argument("--val-per-label", type=int,
                        help="keep the first N validation images per label")

    t = sub.add_parser("train", help="train a CCT and write checkpoint + history CSV")
    t.add_argument("--arch", required=True, help="preset name or key = value spec file")
    data_flags(t)
    t.add_argument("--preset", choices=sorted(OPTIMIZER_PRESETS), default="main")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--schedule", help="cosine | constant | linear:Q,DT")
    t.add_argument("--augment", dest="augment", action="store_true", default=None)
    t.add_argument("--no-augment", dest="augment", action="store_false")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--strict", action="store_true", help="bit-reproducible execution")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="dump raw output fields for committee analysis")
    pr.add_argument("--run", required=True)
    pr.add_argument("--split", default="validation", choices=["train", "validation"])
    pr.add_argument("--member-id")
    pr.add_argument("--out", required=True, help=".csv or .npz")
    pr.add_argument("--force", action="store_true")
    pr.set_defaults(func=cmd_predict)

    q = sub.add_parser("probe", help="SHP/SNP matrices, cluster reports and block statistics")
    q.add_argument("--run", required=True)
    q.add_argument("--data", help="override the dataset path recorded in the run")
    q.add_argument("--blocks", default="all", help="e.g. all, 1..7 or 7")
    q.add_argument("--tap", choices=["post_attention", "post_block"], default="post_attention")
    q.add_argument("--theta", type=float, nargs="+", default=[0.3, 0.6])
    q.add_argument("--head-epochs", type=int)
    q.add_argument("--head-lr", type=float)
    q.add_argument("--snp", action="store_true", help="also build SNP matrices and HP-from-SNP")
    q.add_argument("--silence-before-sp", action="store_true")
    q.add_argument("--no-bias", action="store_true", help="bias-free probe FC layer")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--strict", action="store_true")
    q.add_argument("--out")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_probe)

    c = sub.add_parser("committee", help="soft-committee report over prediction dumps")
    c.add_argument("dumps", nargs="+")
    c.add_argument("--truth", help="text file with one label per line")
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_committee)

    lat = sub.add_parser("latency", help="layer count and parameter count")
    lat.add_argument("arch")
    lat.set_defaults(func=cmd_latency)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"cctprobe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CCTProbeError, OSError) as exc:
        print(f"cctprobe {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
