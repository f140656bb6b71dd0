"""Command line driver: synth -> split -> dynimg -> train -> eval -> report.

Every run that produces artifacts drops a ``run_record.json`` next to them
with the command line, the effective config hash, the seed, and content
hashes of inputs and outputs, so any artifact can be regenerated from its
record. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .configio import format_config, load_config
from .diffcore import GraphError, grad_check, save_checkpoint
from .datasyn import (ContainerError, SynthConfig, load_video, preprocess,
                      synth_dataset)
from .dynimg import (FrameSequence, RankPoolConfig, dynamic_image_at,
                     prefix_mean, rank_pool_fit, rank_pool_oracle, to_display)
from .metrics import (ScoredSet, aggregate, evaluate_scored_set,
                      read_score_file, report_lines, write_score_file)
from .netgraph import (BackboneSpec, FusionVariant, backbone_from_config,
                       build_psmm, build_sdnet)
from .protocols import (ManifestError, build_split, parse_manifest,
                        validate_split, write_manifest)
from .trainer import (AugmentConfig, ClipSampler, NumericError, TrainConfig,
                      evaluate_entries, load_model_params, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunRecord:
    command: list[str]
    seed: int | None
    config_hash: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started_utc: str = ""
    elapsed_s: float = 0.0
    version: str = __version__


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: dict) -> str:
    text = format_config(dict(sorted(cfg.items())))
    return hashlib.sha256(text.encode()).hexdigest()


def _finish_record(record: RunRecord, out_dir: Path, outputs: list[Path],
                   t0: float) -> None:
    record.outputs = {str(p): _sha256(p) for p in outputs if p.is_file()}
    record.elapsed_s = round(time.time() - t0, 3)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_record.json", "w") as f:
        json.dump(asdict(record), f, indent=2)


def _start_record(argv, seed, cfg, inputs: list[Path]) -> tuple[RunRecord, float]:
    record = RunRecord(list(argv), seed, _config_hash(cfg),
                       {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
                       started_utc=datetime.now(timezone.utc).isoformat())
    return record, time.time()


def _effective_config(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    for key in ("variant", "modalities", "branches", "seed", "epochs", "lr",
                "batch_size", "input_size", "stem_channels", "level_channels",
                "window", "samples_per_video"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(val)
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    epochs = int(cfg.get("epochs", 25))
    decay = tuple(int(x) for x in cfg.get("decay_epochs", "15,20").split(",") if x)
    decay = tuple(d for d in decay if d < epochs)   # boundaries past the run are inert
    return TrainConfig(
        epochs=epochs,
        lr=float(cfg.get("lr", 1e-3)),
        decay_epochs=decay,
        batch_size=int(cfg.get("batch_size", 64)),
        window=int(cfg.get("window", 7)),
        seed=int(cfg.get("seed", 0)),
        deterministic=cfg.get("deterministic", "true").lower() != "false",
        samples_per_video=int(cfg.get("samples_per_video", 1)),
    )


def _augment_config(cfg: dict) -> AugmentConfig | None:
    if cfg.get("augment", "off").lower() in ("off", "false", "0", "no"):
        return None
    rot = [float(x) for x in cfg.get("rotation", "-180,180").split(",")]
    crop = [float(x) for x in cfg.get("crop_scale", "0.8,1.0").split(",")]
    return AugmentConfig(rotation_range=(rot[0], rot[1]),
                         flip_prob=float(cfg.get("flip_prob", 0.5)),
                         crop_scale=(crop[0], crop[1]),
                         brightness=float(cfg.get("brightness", 0.1)),
                         contrast=float(cfg.get("contrast", 0.1)))


def _build_model(cfg: dict):
    spec, variant, modalities, branches = backbone_from_config(cfg)
    seed = int(cfg.get("seed", 0))
    if variant == FusionVariant.SDNET_ONLY:
        return build_sdnet(spec, modalities[0], branches, seed), spec
    return build_psmm(spec, variant, modalities, branches, seed), spec


def _save_png(path: Path, img8: np.ndarray) -> None:
    from PIL import Image
    arr = img8
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    mode = "L" if arr.ndim == 2 else "RGB"
    if arr.ndim == 3 and arr.shape[2] not in (1, 3):
        arr = arr[:, :, 0]
        mode = "L"
    Image.fromarray(arr, mode=mode).save(path)


# -- subcommands ---------------------------------------------------------------


def _cmd_synth(args, argv) -> int:
    cfg = load_config(args.config) if args.config else {}
    syn = SynthConfig(
        subjects_per_ethnicity=int(args.subjects or cfg.get("subjects_per_ethnicity", 10)),
        clip_len=int(args.clip_len or cfg.get("clip_len", 16)),
        frame_size=int(args.frame_size or cfg.get("frame_size", 16)),
        seed=int(args.seed if args.seed is not None else cfg.get("seed", 0)),
        window=int(cfg.get("window", 7)),
    )
    record, t0 = _start_record(argv, syn.seed, cfg, [])
    out = Path(args.out)
    manifest_path, entries = synth_dataset(syn, out)
    print(f"wrote {len(entries)} clips under {out} (manifest {manifest_path})")
    _finish_record(record, out, [manifest_path], t0)
    return EXIT_OK


def _cmd_split(args, argv) -> int:
    entries = parse_manifest(args.manifest)
    split = build_split(entries, args.protocol, include_3d=not args.no_3d)
    report = validate_split(split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record, t0 = _start_record(argv, None, {"protocol": args.protocol}, [Path(args.manifest)])
    written = []
    for name, subset in (("train", split.train), ("valid", split.valid),
                         ("test", split.test)):
        path = out / f"{name}.csv"
        write_manifest(path, subset)
        written.append(path)
    for key, val in report.counts.items():
        print(f"{key} = {val}")
    if report.violations:
        for v in report.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_DATA
    print(f"split {args.protocol}: ok")
    _finish_record(record, out, written, t0)
    return EXIT_OK


def _load_frames_dir(directory: Path) -> FrameSequence:
    from PIL import Image
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not paths:
        raise ContainerError(f"no image frames under {directory}")
    frames = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64)
        frames.append(arr)
    return FrameSequence(np.stack(frames), "color", 0, peak=255.0)


def _cmd_dynimg(args, argv) -> int:
    src = Path(args.video) if args.video else Path(args.frames)
    record, t0 = _start_record(argv, None, {"window": str(args.window)}, [src] if src.is_file() else [])
    seq = load_video(src) if args.video else _load_frames_dir(src)
    size = args.size or seq.frames.shape[1]
    prepared = np.stack([preprocess(f, size, seq.peak) for f in seq.frames])
    clip = FrameSequence(prepared, seq.modality)
    cfg = RankPoolConfig(window=args.window)
    indices = range(len(clip)) if args.all else [args.index if args.index is not None
                                                 else len(clip) - 1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in indices:
        d = dynamic_image_at(clip, i, cfg)
        png = out / f"dyn_{i:04d}.png"
        raw = out / f"dyn_{i:04d}.ckpt"
        _save_png(png, to_display(d))
        save_checkpoint(raw, {"dynamic_image": d.data})
        written += [png, raw]
        print(f"frame {i}: objective {d.objective:.6g}, "
              f"{'converged' if d.converged else 'iteration budget hit'}")
    _finish_record(record, out, written, t0)
    return EXIT_OK


def _cmd_train(args, argv) -> int:
    cfg = _effective_config(args)
    entries = parse_manifest(args.manifest)
    split = build_split(entries, args.protocol, include_3d=not args.no_3d)
    model, spec = _build_model(cfg)
    tcfg = _train_config(cfg)
    record, t0 = _start_record(argv, tcfg.seed, cfg, [Path(args.manifest)])
    sampler = ClipSampler(split.train, args.root, model.modalities,
                          spec.input_size, tcfg, _augment_config(cfg))
    valid_sampler = None
    if args.valid:
        valid_sampler = ClipSampler(split.valid, args.root, model.modalities,
                                    spec.input_size, tcfg)
    out = Path(args.out)
    result = train(model, sampler, tcfg, out_dir=out, valid_sampler=valid_sampler,
                   log_file=out / "train_log.jsonl" if out else None)
    final = out / "final.ckpt"
    save_checkpoint(final, result.params)
    with open(out / "net_config.cfg", "w") as f:
        f.write(format_config(cfg))
    print(f"trained {tcfg.epochs} epochs, final loss "
          f"{result.log[-1].get('loss', float('nan')):.4g}, checkpoint {final}")
    _finish_record(record, out, result.checkpoints + [final, out / "train_log.jsonl"], t0)
    return EXIT_OK


def _cmd_eval(args, argv) -> int:
    cfg = _effective_config(args)
    entries = parse_manifest(args.manifest)
    split = build_split(entries, args.protocol, include_3d=not args.no_3d)
    subset = {"train": split.train, "valid": split.valid, "test": split.test}[args.subset]
    model, spec = _build_model(cfg)
    load_model_params(model, args.checkpoint)
    tcfg = _train_config(cfg)
    record, t0 = _start_record(argv, tcfg.seed, cfg,
                               [Path(args.manifest), Path(args.checkpoint)])
    rows = evaluate_entries(model, subset, args.root, spec.input_size, tcfg,
                            args.protocol)
    scored = ScoredSet(np.array([r[1] for r in rows]),
                       np.array([r[2] for r in rows]),
                       [r[3] for r in rows], args.protocol, [r[0] for r in rows])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_score_file(out, scored)
    rep = evaluate_scored_set(scored, threshold=args.threshold)
    print(f"{args.protocol} {args.subset}: apcer {rep.apcer:.4f} "
          f"bpcer {rep.bpcer:.4f} acer {rep.acer:.4f}")
    _finish_record(record, out.parent, [out], t0)
    return EXIT_OK


def _cmd_report(args, argv) -> int:
    reports = []
    for path in args.scores:
        scored = read_score_file(path)
        reports.append(evaluate_scored_set(scored, threshold=args.threshold,
                                           fpr_targets=tuple(args.fpr)))
    summary = aggregate(reports) if len(reports) > 1 else None
    for line in report_lines(reports, summary):
        print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as f:
            for rep in reports:
                for key, val in rep.as_mapping().items():
                    f.write(f"{rep.subprotocol}.{key} = {val:.6g}\n")
            if summary:
                for key, (mean, std) in summary.items():
                    f.write(f"avg.{key} = {mean:.6g}\navg.{key}.std = {std:.6g}\n")
    return EXIT_OK


def _cmd_selftest(args, argv) -> int:
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:     # deliberate: report every failure
            failures.append(name)
            print(f"FAIL {name}: {exc}")

    def ranking_oracle():
        rng = np.random.default_rng(0)
        for _ in range(10):
            k = int(rng.choice([3, 5, 7]))
            frames = rng.normal(size=(k, 1, 1, int(rng.choice([1, 2]))))
            v = prefix_mean(FrameSequence(frames))
            fit = rank_pool_fit(v, RankPoolConfig(window=k))
            ora = rank_pool_oracle(v)
            assert np.abs(fit.data - ora.data).max() <= 1e-3
        v = prefix_mean(FrameSequence(np.array([0.0, 1.0, 2.0])))
        got = rank_pool_fit(v, RankPoolConfig(window=3)).data.ravel()[0]
        assert abs(got - 2.0 / 3.0) <= 1e-3

    def gradients():
        spec = BackboneSpec(input_size=8, stem_channels=2, level_channels=(2, 2, 2, 2))
        model = build_sdnet(spec, "color", seed=1)
        rng = np.random.default_rng(1)
        for k in model.graph.params:
            if "/head/" in k:
                model.graph.params[k] = 0.3 * rng.normal(size=model.graph.params[k].shape)
        feed = {model.input_nodes[("color", "static")]: rng.uniform(size=(8, 8, 3)),
                model.input_nodes[("color", "dynamic")]: rng.uniform(size=(8, 8, 3)),
                model.label_node: np.asarray(1.0)}
        assert grad_check(model.graph, feed, model.total_loss_node, 1e-5) <= 1e-4

    def metric_oracles():
        rng = np.random.default_rng(2)
        scores = rng.uniform(size=300)
        bona = rng.uniform(size=300) < 0.5
        s = ScoredSet(scores, bona)
        from .metrics import roc
        curve = roc(s)
        pos, neg = scores[bona], scores[~bona]
        wins = (pos[:, None] > neg[None, :]).sum()
        ties = (pos[:, None] == neg[None, :]).sum()
        brute = (wins + 0.5 * ties) / (len(pos) * len(neg))
        assert abs(curve.auc() - brute) <= 1e-9

    def protocol_counts():
        from .datasyn import canonical_manifest
        man = canonical_manifest()
        rep = validate_split(build_split(man, "1_1"))
        assert rep.ok and rep.counts["train_real"] == 600
        rep = validate_split(build_split(man, "2_1"))
        assert rep.counts["train_real"] + rep.counts["train_fake"] == 5400
        rep = validate_split(build_split(man, "4_3"))
        assert rep.counts["train_real"] + rep.counts["train_fake"] == 1200

    check("ranking-oracle", ranking_oracle)
    check("gradient-check", gradients)
    check("metric-oracles", metric_oracles)
    check("protocol-counts", protocol_counts)
    if failures:
        print(f"selftest failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_NUMERIC
    print("selftest ok")
    return EXIT_OK


AXES = {
    "variant": [("variant", v) for v in ("nhf", "psmm-wobf", "psmm")],
    "modalities": [("modalities", m) for m in ("r", "r,d", "r,d,i")],
    "branches": [("branches", b) for b in ("s", "d", "sd")],
}


def _cmd_ablation(args, argv) -> int:
    base = _effective_config(args)
    record, t0 = _start_record(argv, int(base.get("seed", 0)), base,
                               [Path(args.manifest)])
    axes = args.axes.split(",") if args.axes else ["variant"]
    for ax in axes:
        if ax not in AXES:
            raise UsageError(f"unknown ablation axis '{ax}' (choose from {sorted(AXES)})")
    cells = [[]]
    for ax in axes:
        cells = [prev + [choice] for prev in cells for choice in AXES[ax]]

    entries = parse_manifest(args.manifest)
    split = build_split(entries, args.protocol, include_3d=not args.no_3d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cells:
        cfg = dict(base)
        cfg.update(cell)
        tag = "+".join(v for _, v in cell)
        try:
            model, spec = _build_model(cfg)
            tcfg = _train_config(cfg)
            sampler = ClipSampler(split.train, args.root, model.modalities,
                                  spec.input_size, tcfg, _augment_config(cfg))
            train(model, sampler, tcfg, out_dir=out / tag)
            result_rows = evaluate_entries(model, split.test, args.root,
                                           spec.input_size, tcfg, args.protocol)
            scored = ScoredSet(np.array([r[1] for r in result_rows]),
                               np.array([r[2] for r in result_rows]),
                               [r[3] for r in result_rows], args.protocol)
            rep = evaluate_scored_set(scored)
            rows.append((tag, f"{100 * rep.apcer:.2f}", f"{100 * rep.bpcer:.2f}",
                         f"{100 * rep.acer:.2f}"))
        except Exception as exc:      # record the failure, keep the matrix going
            rows.append((tag, "error", "error", str(exc)[:60]))
    header = f"{'run':>24} {'APCER%':>8} {'BPCER%':>8} {'ACER%':>8}"
    lines = [header, "-" * len(header)]
    lines += [f"{r[0]:>24} {r[1]:>8} {r[2]:>8} {r[3]:>8}" for r in rows]
    table = "\n".join(lines)
    print(table)
    (out / "ablation.txt").write_text(table + "\n")
    _finish_record(record, out, [out / "ablation.txt"], t0)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _make_parser() -> _Parser:
    p = _Parser(prog="padkit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic clip corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--subjects", type=int)
    s.add_argument("--clip-len", type=int, dest="clip_len")
    s.add_argument("--frame-size", type=int, dest="frame_size")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("split", help="materialize one benchmark sub-protocol")
    s.add_argument("--protocol", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-3d", action="store_true")

    s = sub.add_parser("dynimg", help="rank-pool dynamic images from a clip")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--video")
    src.add_argument("--frames")
    s.add_argument("--out", required=True)
    s.add_argument("--index", type=int)
    s.add_argument("--all", action="store_true")
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--size", type=int)

    s = sub.add_parser("train", help="train a fusion model on one sub-protocol")
    s.add_argument("--manifest", required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--variant", choices=[v.value for v in FusionVariant])
    s.add_argument("--modalities")
    s.add_argument("--branches", choices=["s", "d", "sd"])
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--valid", action="store_true",
                   help="score the validation subset each epoch")
    s.add_argument("--no-3d", action="store_true")

    s = sub.add_parser("eval", help="score a trained checkpoint on a subset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subset", choices=["train", "valid", "test"], default="test")
    s.add_argument("--config")
    s.add_argument("--variant", choices=[v.value for v in FusionVariant])
    s.add_argument("--modalities")
    s.add_argument("--branches", choices=["s", "d", "sd"])
    s.add_argument("--seed", type=int)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--no-3d", action="store_true")

    s = sub.add_parser("report", help="aggregate score files into metric tables")
    s.add_argument("--scores", nargs="+", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--fpr", type=float, nargs="*", default=[1e-2])
    s.add_argument("--out")

    sub.add_parser("selftest", help="run the built-in oracle and gradient checks")

    s = sub.add_parser("ablation", help="train/eval a grid of configurations")
    s.add_argument("--manifest", required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--axes", help="comma subset of variant,modalities,branches")
    s.add_argument("--variant", choices=[v.value for v in FusionVariant])
    s.add_argument("--modalities")
    s.add_argument("--branches", choices=["s", "d", "sd"])
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--no-3d", action="store_true")
    return p


_HANDLERS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "dynimg": _cmd_dynimg,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
    "ablation": _cmd_ablation,
}


def dispatch(argv) -> int:
    argv = list(argv)
    try:
        args = _make_parser().parse_args(argv)
        return _HANDLERS[args.cmd](args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, GraphError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, ContainerError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
