"""Command-line interface: ``ugd generate | train | fit-prior | score | metrics | benchmark``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from pathlib import Path

from . import __version__

log = logging.getLogger("ugd")

PIPELINE_KEYS = {"m", "s", "radius", "radius_mode", "k_nn", "d", "h", "n_blocks"}
TRAIN_KEYS = {"lr", "lr_decay", "decay_every", "batch_size", "epochs", "gradnorm_alpha",
              "gradnorm_lr", "weight_floor", "train_patches", "tasks"}
PRIOR_KEYS = {"K", "tol", "max_iter", "restarts", "ridge", "covariance_type"}
OTHER_KEYS = {"mode", "weighting", "levels", "mixes", "metrics", "n_clouds", "n_points", "seed"}

# CPU-scale training schedule; the default TrainConfig keeps the full-scale
# settings (lr 1e-5, 100 epochs).
DESK_TRAIN = {"lr": 1e-3, "epochs": 40}


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: UsageError: {self.prog}: {message}", file=sys.stderr)
        sys.exit(2)


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise CLIError("config file must hold a flat JSON object")
    unknown = set(cfg) - PIPELINE_KEYS - TRAIN_KEYS - PRIOR_KEYS - OTHER_KEYS
    if unknown:
        raise CLIError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _pick(cfg: dict, keys) -> dict:
    return {k: v for k, v in cfg.items() if k in keys}


def _write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _emit(records, out=None) -> None:
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    if out:
        _write_jsonl(out, records)


def _clouds(data_dir, split):
    from .dataset import load_dataset

    manifest, clouds = load_dataset(data_dir)
    ids = manifest.train if split == "train" else manifest.test
    return ids, [clouds[i] for i in ids]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg) -> int:
    from .dataset import build_dataset
    from .distortion import build_distortion_set, write_sidecar
    from .io import save_point_cloud

    out = Path(args.out or "dataset")
    n_clouds = args.n_clouds or cfg.get("n_clouds", 20)
    n_points = args.n_points or cfg.get("n_points", 8192)
    manifest, clouds = build_dataset(n_clouds, n_points, args.seed, out, meshes=args.mesh or ())
    if args.distorted:
        ids = manifest.test
        samples = build_distortion_set([clouds[i] for i in ids], args.seed)
        ddir = out / "distorted"
        ddir.mkdir(exist_ok=True)
        for smp in samples:
            stem = f"{ids[smp.parent]}_{smp.spec.kind}_L{smp.spec.level_index}"
            save_point_cloud(smp.cloud, ddir / f"{stem}.xyz")
            write_sidecar(smp.spec, ddir / f"{stem}.json")
    _emit([{"command": "generate", "out": str(out), "clouds": len(manifest.entries),
            "train": len(manifest.train), "test": len(manifest.test)}])
    return 0


def cmd_train(args, cfg) -> int:
    import torch

    from .checkpoint import ModelCheckpoint
    from .plotting import training_curves
    from .pointcloud import PipelineConfig
    from .training import TrainConfig, train

    pipeline = PipelineConfig(**_pick(cfg, PIPELINE_KEYS), seed=args.seed)
    tkw = dict(DESK_TRAIN) if args.desk else {}
    tkw.update(_pick(cfg, TRAIN_KEYS))
    if args.epochs is not None:
        tkw["epochs"] = args.epochs
    if args.lr is not None:
        tkw["lr"] = args.lr
    if args.tasks:
        tkw["tasks"] = tuple(args.tasks.split(","))
    tcfg = TrainConfig(**tkw, seed=args.seed)
    _, clean = _clouds(args.data, "train")
    out = Path(args.out or "model.ugd")
    log_path = out.with_suffix(".log.jsonl")
    rows = []

    def progress(row):
        rows.append(row)
        _write_jsonl(log_path, rows)
        log.info("epoch %d losses %s weights %s", row["epoch"], row["loss"], row["task_weights"])

    torch.manual_seed(args.seed)
    res = train(clean, pipeline, tcfg, progress=progress)
    ckpt = ModelCheckpoint(pipeline, tcfg, res.net, None, res.log, args.seed)
    ckpt.save(out)
    fig = training_curves(res.log, out.with_suffix(".curves.svg"))
    _emit([{"command": "train", "checkpoint": str(out), "log": str(log_path), "figure": str(fig),
            "final_loss": res.log[-1]["loss"]}])
    return 0


def cmd_fit_prior(args, cfg) -> int:
    from .checkpoint import ModelCheckpoint
    from .prior import clean_features, fit_gmm

    ckpt = ModelCheckpoint.load(args.checkpoint)
    _, clean = _clouds(args.data, "train")
    pk = _pick(cfg, PRIOR_KEYS)
    if args.K is not None:
        pk["K"] = args.K
    feats = clean_features(clean, ckpt.net, ckpt.pipeline, seed=args.seed)
    prior = fit_gmm(feats, seed=args.seed, **pk)
    out = Path(args.out or args.checkpoint)
    ckpt.with_prior(prior).save(out)
    _emit([{"command": "fit-prior", "checkpoint": str(out), "K": prior.K, "d": prior.d,
            "samples": int(feats.shape[0]), "log_likelihood": prior.log_likelihood_trace[-1],
            "converged": prior.converged}])
    return 0


def cmd_score(args, cfg) -> int:
    from .checkpoint import ModelCheckpoint
    from .io import load_point_cloud
    from .prior import ugd_details

    ckpt = ModelCheckpoint.load(args.checkpoint)
    if ckpt.prior is None:
        raise CLIError("checkpoint has no prior; run fit-prior first")
    mode = args.mode or cfg.get("mode", "log-density")
    weighting = args.weighting or cfg.get("weighting", "learned")
    records = []
    for path in args.inputs:
        cloud = load_point_cloud(path)
        res = ugd_details(cloud, ckpt.net, ckpt.prior, ckpt.pipeline, mode=mode, seed=args.seed,
                          weighting=weighting)
        records.append({"file": str(path), "ugd": res.score, "mode": mode, "weighting": weighting,
                        "patches": int(len(res.weights)), "seed": args.seed, "higher_is_better": True})
    _emit(records, args.out)
    return 0


def cmd_metrics(args, cfg) -> int:
    from .io import load_point_cloud
    from .metrics import chamfer, pl2pl, po2pl, po2po
    from .pointcloud import estimate_normals

    k_nn = cfg.get("k_nn", 16)
    ev = load_point_cloud(args.eval)
    ref = load_point_cloud(args.ref)
    ref_n = ref if ref.has_normals else estimate_normals(ref, k_nn)
    ev_n = ev if ev.has_normals else estimate_normals(ev, k_nn)
    rec = {
        "eval": str(args.eval),
        "ref": str(args.ref),
        "po2po": po2po(ev, ref).to_record(),
        "po2pl": po2pl(ev, ref_n).to_record(),
        "pl2pl": pl2pl(ev_n, ref_n).to_record(),
        "chamfer": chamfer(ev, ref),
    }
    _emit([rec], args.out)
    return 0


def _parse_mix(text: str):
    vals = tuple(float(x) for x in text.split(","))
    if len(vals) != 4:
        raise CLIError(f"mix profile needs 4 comma-separated weights, got {text!r}")
    return vals


def cmd_benchmark(args, cfg) -> int:
    from .benchmark import DEFAULT_METRICS, DEFAULT_MIXES, run_benchmark
    from .checkpoint import ModelCheckpoint
    from .plotting import accuracy_bars

    ckpt = ModelCheckpoint.load(args.checkpoint)
    if ckpt.prior is None:
        raise CLIError("checkpoint has no prior; run fit-prior first")
    ids, clean = _clouds(args.data, "test")
    mixes = [_parse_mix(m) for m in args.mix] if args.mix else cfg.get("mixes", DEFAULT_MIXES)
    metrics = args.metrics.split(",") if args.metrics else cfg.get("metrics", DEFAULT_METRICS)
    levels = args.levels or cfg.get("levels", "training")
    report = run_benchmark(clean, ckpt.net, ckpt.prior, ckpt.pipeline, levels=levels, mixes=mixes,
                           seed=args.seed, metrics=metrics, ids=ids)
    out = Path(args.out or "benchmark")
    out.mkdir(parents=True, exist_ok=True)
    text = report.format_table()
    (out / "table.txt").write_text(text + "\n")
    report.write_jsonl(out / "trials.jsonl")
    _write_jsonl(out / "summary.jsonl", [{"metric": m, **acc} for m, acc in report.table().items()])
    accuracy_bars(report.table(), out / "accuracy.svg")
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of configuration keys")
    common.add_argument("--seed", type=int, help="master seed (default: config 'seed' or 0)")
    common.add_argument("--out", help="output path")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ugd", description=__doc__)
    p.add_argument("--version", action="version", version=f"ugd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="build the procedural clean corpus")
    g.add_argument("--n-clouds", type=int)
    g.add_argument("--n-points", type=int)
    g.add_argument("--mesh", action="append", help="OBJ mesh to sample (repeatable)")
    g.add_argument("--distorted", action="store_true",
                   help="also write the 25 labelled distortions of every test cloud")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="self-supervised multi-task training")
    t.add_argument("--data", required=True, help="dataset directory from `generate`")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--tasks", help="comma-separated subset of rank,classify,distribution")
    t.add_argument("--desk", action="store_true", help="CPU-scale schedule (lr 1e-3, 40 epochs)")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-prior", parents=[common], help="fit the clean-patch GMM prior")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--K", type=int)
    f.set_defaults(func=cmd_fit_prior)

    s = sub.add_parser("score", parents=[common], help="UGD of one or more clouds")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("inputs", nargs="+")
    s.add_argument("--mode", choices=["log-density", "density"])
    s.add_argument("--weighting", choices=["learned", "uniform"])
    s.set_defaults(func=cmd_score)

    m = sub.add_parser("metrics", parents=[common], help="full-reference metrics of a cloud pair")
    m.add_argument("--eval", required=True)
    m.add_argument("--ref", required=True)
    m.set_defaults(func=cmd_metrics)

    b = sub.add_parser("benchmark", parents=[common], help="pairwise ranking-accuracy benchmark")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--levels", choices=["training", "even-steps"])
    b.add_argument("--mix", action="append", help="MN weights in GN,EN,IN,UN order (repeatable)")
    b.add_argument("--metrics", help="comma-separated metric names")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads:
            import torch

            torch.set_num_threads(args.threads)
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        return args.func(args, cfg)
    except Exception as exc:  # one-line machine-parsable failure
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
