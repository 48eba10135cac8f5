"""
Command-line entry point: ``deforest-cd <subcommand> [options]``.

Every option can also be given in a JSON document passed with ``--config``;
keys are the option names with dashes replaced by underscores, either at the
top level or inside an object named after the subcommand. Flags given on the
command line win over the file.

Exit status is 0 on success, 1 on a validation error and 2 on an I/O or
format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset, ensemble, fcn, metrics, postprocess, preprocess, synth
from .errors import ConfigurationError, FormatError, IngestionError
from .raster import BinaryMask, RasterStack, read_mask, read_polygons, read_raster, write_mask, write_polygons, write_raster

__all__ = ["main", "build_parser"]

# subcommand -> option dest -> default used when neither flag nor config sets it
_DEFAULTS: dict[str, dict[str, object]] = {}
_GLOBAL = {"seed": 0, "threads": 1, "json": False}


class _UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        raise _UsageError(f"{self.prog}: {message}")


def _opt(p, cmd, *flags, default=None, **kw):
    action = p.add_argument(*flags, default=None, **kw)
    _DEFAULTS.setdefault(cmd, {})[action.dest] = default


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deforest-cd", description="Bitemporal deforestation change detection.")

    def common(p, default=None):
        # accepted before or after the subcommand; SUPPRESS keeps a subparser from erasing the outer value
        p.add_argument("--config", default=default, help="JSON file with option values (flags win)")
        p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=default, help="worker threads; never changes outputs")
        p.add_argument("--json", action="store_true", default=default, help="report as JSON on stdout")

    common(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic scene pair, truth polygons and producer maps")
    common(p, argparse.SUPPRESS)
    _opt(p, "synth", "--out", help="output directory")
    _opt(p, "synth", "--size", type=int, default=1024)
    _opt(p, "synth", "--blobs", type=int, default=30)
    _opt(p, "synth", "--prior-blobs", type=int, default=4)
    _opt(p, "synth", "--magenta-rate", type=float, default=0.0)
    _opt(p, "synth", "--edge-nodata", type=int, default=0)
    _opt(p, "synth", "--years", type=int, nargs=2, default=[2018, 2019])
    _opt(p, "synth", "--tile", type=int, default=256, help="side of the per-sample map tiles")
    _opt(p, "synth", "--test-rows", type=int, default=1, help="bottom tile rows held out for testing")

    p = sub.add_parser("build-dataset", help="cut scenes into CDP1 training samples")
    common(p, argparse.SUPPRESS)
    _opt(p, "build-dataset", "--scene", nargs=5, action="append", metavar=("ID", "T1", "T2", "Y1", "Y2"))
    _opt(p, "build-dataset", "--t1", help="t1 raster (single-scene shorthand)")
    _opt(p, "build-dataset", "--t2", help="t2 raster (single-scene shorthand)")
    _opt(p, "build-dataset", "--scene-id", default="scene")
    _opt(p, "build-dataset", "--years", type=int, nargs=2)
    _opt(p, "build-dataset", "--polygons", help="polygon layer (GeoJSON FeatureCollection)")
    _opt(p, "build-dataset", "--out", help="output directory")
    _opt(p, "build-dataset", "--window", type=int, default=256)
    _opt(p, "build-dataset", "--stride", type=int, default=200)
    _opt(p, "build-dataset", "--max-null-frac", type=float, default=0.05)
    _opt(p, "build-dataset", "--equalize", choices=("off", "pre", "post"), default="off")
    _opt(p, "build-dataset", "--magenta", help="magenta replacement description (JSON)")
    _opt(p, "build-dataset", "--red-band", type=int, default=dataset.RED)
    _opt(p, "build-dataset", "--nir-band", type=int, default=dataset.NIR)
    _opt(p, "build-dataset", "--test-scenes", nargs="*", default=[])

    p = sub.add_parser("train-ensemble", help="train the BasicFCN combiner on producer maps")
    common(p, argparse.SUPPRESS)
    _opt(p, "train-ensemble", "--manifest", help="producer manifest (JSON)")
    _opt(p, "train-ensemble", "--out", help="weight file to write")
    _opt(p, "train-ensemble", "--window", type=int, default=32)
    _opt(p, "train-ensemble", "--stride", type=int)
    _opt(p, "train-ensemble", "--epochs", type=int, default=50)
    _opt(p, "train-ensemble", "--batch-size", type=int, default=32)
    _opt(p, "train-ensemble", "--lr", type=float, default=1e-4)
    _opt(p, "train-ensemble", "--weight-decay", type=float, default=1e-4)
    _opt(p, "train-ensemble", "--val-fraction", type=float, default=0.2)
    _opt(p, "train-ensemble", "--alpha", type=float, default=0.25)
    _opt(p, "train-ensemble", "--gamma", type=float, default=2.0)
    _opt(p, "train-ensemble", "--augment", action="store_true", default=False)
    _opt(p, "train-ensemble", "--log", help="training log (JSON); default next to the weights")

    p = sub.add_parser("vote", help="combine producer maps into binary change masks")
    common(p, argparse.SUPPRESS)
    _opt(p, "vote", "--manifest", help="producer manifest (JSON)")
    _opt(p, "vote", "--mode", choices=("simple", "weighted", "fcn"), default="simple")
    _opt(p, "vote", "--weights", help="combiner weights (fcn mode)")
    _opt(p, "vote", "--threshold", type=float, help="override the combiner threshold (fcn mode)")
    _opt(p, "vote", "--min-area", type=int, default=0, help="keep regions of at least this many pixels (0: off)")
    _opt(p, "vote", "--out", help="output directory")

    p = sub.add_parser("evaluate", help="metric table for predictions against reference masks")
    common(p, argparse.SUPPRESS)
    _opt(p, "evaluate", "--manifest", help="producer manifest; producers are scored at their thresholds")
    _opt(p, "evaluate", "--truth", help="reference mask (when no manifest is given)")
    _opt(p, "evaluate", "--pred", action="append", metavar="NAME=PATH", help="mask file, or directory of <id>.json")
    _opt(p, "evaluate", "--out", help="also write the JSON report here")

    p = sub.add_parser("postprocess", help="binarize and drop small 4-connected regions")
    common(p, argparse.SUPPRESS)
    _opt(p, "postprocess", "--input", action="append", help="mask or probability raster (repeatable)")
    _opt(p, "postprocess", "--out", help="output directory")
    _opt(p, "postprocess", "--min-area", type=int, default=51, help="smallest region kept, in pixels")
    _opt(p, "postprocess", "--threshold", type=float, help="binarization threshold for probability maps")
    _opt(p, "postprocess", "--pgm", action="store_true", default=False, help="also write PGM images")
    return parser


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults < config file < flags."""
    cfg = {}
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        commands = set(_DEFAULTS)
        cfg = {k: v for k, v in doc.items() if k not in commands}
        section = doc.get(args.command, {})
        if not isinstance(section, dict):
            raise ConfigurationError(f"{path}: section {args.command!r} must be an object")
        cfg.update(section)
        known = set(_DEFAULTS[args.command]) | set(_GLOBAL)
        # options of other subcommands may live at the top level of a shared file
        every = set().union(*map(set, _DEFAULTS.values())) | set(_GLOBAL)
        unknown = sorted((set(cfg) - every) | (set(section) - known))
        if unknown:
            raise ConfigurationError(f"{path}: unknown option(s) {unknown}")
    defaults = {**_GLOBAL, **_DEFAULTS[args.command]}
    for key, default in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, cfg.get(key, default))
    if args.threads < 1:
        raise ConfigurationError("--threads must be at least 1")
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigurationError(f"{args.command}: missing required option(s) {flags}")


def _pmap(fn, items, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _emit(args, report: dict, text: str) -> None:
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands


def _tile_ids(n: int, tile: int) -> list[tuple[str, int, int]]:
    return [(f"r{r:04d}_c{c:04d}", r, c) for r in range(0, n - tile + 1, tile) for c in range(0, n - tile + 1, tile)]


def cmd_synth(args) -> int:
    _require(args, "out")
    cfg = synth.SynthConfig(
        size=args.size,
        n_blobs=args.blobs,
        n_prior_blobs=args.prior_blobs,
        magenta_rate=args.magenta_rate,
        edge_nodata=args.edge_nodata,
        year_pair=tuple(args.years),
        seed=args.seed,
    )
    if args.tile < 1 or args.tile > cfg.size:
        raise ConfigurationError(f"tile {args.tile} does not fit a {cfg.size}-pixel scene")
    out = Path(args.out)
    scene = synth.gen_scene(cfg)
    write_raster(scene.t1, out / "t1.json")
    write_raster(scene.t2, out / "t2.json")
    write_polygons(scene.truth, out / "truth.geojson")
    write_mask(scene.mask, out / "truth_mask.json")

    models = synth.DEFAULT_PRODUCERS
    maps = _pmap(
        lambda k: synth.gen_producer_maps(scene.mask.data, models[k], preprocess.sample_rng(args.seed, index=k, stream=20)),
        range(len(models)),
        args.threads,
    )

    tiles = _tile_ids(cfg.size, args.tile)
    n_rows = len({r for _, r, _ in tiles})
    test_start = (n_rows - args.test_rows) * args.tile
    splits = {"train": [t for t in tiles if t[1] < test_start], "test": [t for t in tiles if t[1] >= test_start]}
    if not splits["train"]:
        raise ConfigurationError("no training tiles left; lower --test-rows or --tile")

    t = scene.mask.transform
    jobs = []
    for sid, r, c in tiles:
        sl = (slice(r, r + args.tile), slice(c, c + args.tile))
        jobs.append((BinaryMask(scene.mask.data[sl], t.shifted(r, c)), out / "truth" / f"{sid}.json"))
        for model, m in zip(models, maps):
            jobs.append((RasterStack(m[None, sl[0], sl[1]], t.shifted(r, c), ["prob"]), out / "maps" / model.name / f"{sid}.json"))
    _pmap(lambda job: write_raster(*job), jobs, args.threads)

    # producer thresholds are tuned on the training tiles only
    train_rows = slice(0, test_start)
    thresholds = [fcn.select_threshold(m[None, train_rows], scene.mask.data[None, train_rows]) for m in maps]
    for split, items in splits.items():
        doc = {
            "producers": [
                {
                    "name": model.name,
                    "threshold": tau,
                    "maps": {sid: f"maps/{model.name}/{sid}.json" for sid, _, _ in items},
                }
                for model, tau in zip(models, thresholds)
            ],
            "truth": {sid: f"truth/{sid}.json" for sid, _, _ in items},
        }
        (out / f"producers_{split}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    if scene.magenta_bbox is not None and scene.texture_bbox is not None:
        rep = preprocess.MagentaReplacement(
            preprocess.fit_magenta(scene.t2, scene.magenta_bbox),
            preprocess.texture_from_bbox(scene.t2, scene.texture_bbox),
        )
        rep.save(out / "magenta.json")

    report = {
        "size": cfg.size,
        "seed": cfg.seed,
        "years": list(cfg.year_pair),
        "polygons": len(scene.truth),
        "change_pixels": int(scene.mask.data.sum()),
        "magenta_pixels": int(scene.magenta_mask.sum()),
        "magenta_bbox": list(scene.magenta_bbox) if scene.magenta_bbox else None,
        "texture_bbox": list(scene.texture_bbox) if scene.texture_bbox else None,
        "tiles": {k: len(v) for k, v in splits.items()},
        "producers": {m.name: tau for m, tau in zip(models, thresholds)},
    }
    (out / "synth.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    text = "\n".join(
        [
            f"scene {cfg.size}x{cfg.size}, {len(scene.truth)} polygons, {report['change_pixels']} change pixels",
            f"tiles: {report['tiles']['train']} train, {report['tiles']['test']} test",
            *(f"producer {name}: threshold {tau:.2f}" for name, tau in report["producers"].items()),
            f"written to {out}",
        ]
    )
    _emit(args, report, text)
    return 0


def cmd_build_dataset(args) -> int:
    _require(args, "polygons", "out")
    scene_args = [list(s) for s in (args.scene or [])]
    if args.t1 or args.t2:
        _require(args, "t1", "t2", "years")
        scene_args.append([args.scene_id, args.t1, args.t2, *args.years])
    if not scene_args:
        raise ConfigurationError("build-dataset: give --scene or --t1/--t2/--years")
    scenes = []
    for sid, t1, t2, y1, y2 in scene_args:
        try:
            years = (int(y1), int(y2))
        except ValueError as exc:
            raise ConfigurationError(f"scene {sid!r}: years must be integers") from exc
        scenes.append(dataset.SceneInput(str(sid), read_raster(t1), read_raster(t2), years))
    layer = read_polygons(args.polygons)
    magenta = preprocess.MagentaReplacement.load(args.magenta) if args.magenta else None
    cfg = dataset.BuildConfig(
        window=args.window,
        stride=args.stride,
        max_null_frac=args.max_null_frac,
        test_scenes=tuple(args.test_scenes),
        red_band=args.red_band,
        nir_band=args.nir_band,
        equalize=args.equalize,
        magenta=magenta,
        threads=args.threads,
    )
    manifest = dataset.build_dataset(scenes, layer, args.out, cfg)
    report = {
        "counts": manifest["counts"],
        "scenes": [{k: e[k] for k in ("scene_id", "year_pair", "split", "count")} for e in manifest["scenes"]],
    }
    lines = [f"{e['scene_id']} {e['year_pair'][0]}-{e['year_pair'][1]} ({e['split']}): {e['count']} samples" for e in report["scenes"]]
    lines.append(f"total: {manifest['counts']['train']} train, {manifest['counts']['test']} test")
    _emit(args, report, "\n".join(lines))
    return 0


def _load_all(man: ensemble.ProducerManifest, threads: int, truth: bool = True):
    ids = man.sample_ids
    maps = _pmap(man.load_maps, ids, threads)
    masks = _pmap(man.load_truth, ids, threads) if truth else None
    return ids, maps, masks


def cmd_train_ensemble(args) -> int:
    _require(args, "manifest", "out")
    man = ensemble.load_manifest(args.manifest)
    ids, maps, masks = _load_all(man, args.threads)
    pairs = []
    for m, t in zip(maps, masks):
        if m.shape[1:] != t.shape:
            raise ConfigurationError(f"maps {m.shape[1:]} and truth {t.shape} differ in shape")
        p, _ = ensemble.tile_pairs(m, t, args.window, args.stride or args.window)
        pairs.extend(p)
    if len(pairs) < 2:
        raise ConfigurationError("too few training windows; lower --window")
    out = Path(args.out)
    log = Path(args.log) if args.log else out.with_suffix(".log.json")
    tcfg = fcn.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        val_fraction=args.val_fraction,
        seed=args.seed,
        lr=args.lr,
        weight_decay=args.weight_decay,
        augment=preprocess.AugmentConfig(seed=args.seed) if args.augment else None,
        log_path=str(log),
    )
    res = ensemble.fcn_ensemble_train(pairs, tcfg, fcn.FocalConfig(args.alpha, args.gamma))
    meta = {
        "threshold": res.threshold,
        "best_epoch": res.best_epoch,
        "selected_by": res.selected_by,
        "producers": man.names,
        "windows": len(pairs),
        "seed": args.seed,
    }
    fcn.save_weights(res.weights, out, meta)
    best = res.history[res.best_epoch]
    report = {**meta, "val_f1": best["val_f1"], "val_loss": best["val_loss"], "weights": str(out)}
    text = (
        f"trained on {len(pairs)} windows from {len(ids)} samples; best epoch {res.best_epoch} "
        f"(by {res.selected_by}), threshold {res.threshold:.2f}\nweights written to {out}"
    )
    _emit(args, report, text)
    return 0


def cmd_vote(args) -> int:
    _require(args, "manifest", "out")
    man = ensemble.load_manifest(args.manifest)
    min_keep = args.min_area if args.min_area and args.min_area > 0 else None
    if args.mode == "fcn":
        _require(args, "weights")
        w, meta = fcn.load_weights(args.weights)
        tau = args.threshold if args.threshold is not None else meta.get("threshold")
        if tau is None:
            raise ConfigurationError(f"{args.weights}: no stored threshold; pass --threshold")
        if w.n_in != len(man.names):
            raise ConfigurationError(f"combiner expects {w.n_in} producers, manifest lists {len(man.names)}")
    out = Path(args.out)

    def run(sid):
        pms = man.map_set(sid)
        if args.mode == "simple":
            pred = ensemble.simple_vote(pms, min_keep)
        else:
            if args.mode == "weighted":
                pred = ensemble.weighted_vote(pms)
            else:
                pred = postprocess.binarize(ensemble.predict_map(w, pms.maps), tau)
            if min_keep is not None:
                pred = postprocess.remove_small(pred, min_keep)
        ref = read_raster(man.root / man.maps[0][sid])
        write_mask(BinaryMask(pred, ref.transform), out / f"{sid}.json")
        return sid, int(pred.sum())

    results = _pmap(run, man.sample_ids, args.threads)
    report = {"mode": args.mode, "min_area": min_keep or 0, "samples": dict(results)}
    text = "\n".join([f"{sid}: {n} change pixels" for sid, n in results] + [f"masks written to {out}"])
    _emit(args, report, text)
    return 0


def _parse_pred(arg: str) -> tuple[str, Path]:
    if "=" not in arg:
        raise ConfigurationError(f"--pred expects NAME=PATH, got {arg!r}")
    name, path = arg.split("=", 1)
    return name, Path(path)


def cmd_evaluate(args) -> int:
    preds = [_parse_pred(s) for s in (args.pred or [])]
    rows, counts = {}, {}
    if args.manifest:
        man = ensemble.load_manifest(args.manifest)
        ids = man.sample_ids
        truths = dict(zip(ids, _pmap(man.load_truth, ids, args.threads)))

        def score_producer(k):
            total = metrics.ConfusionCounts()
            for sid in ids:
                m = man.load_maps(sid)[k]
                total = total + metrics.accumulate(postprocess.binarize(m, man.thresholds[k]), truths[sid])
            return total

        for k, c in enumerate(_pmap(score_producer, range(len(man.names)), args.threads)):
            rows[man.names[k]] = (man.thresholds[k], metrics.metric_suite(c))
            counts[man.names[k]] = c
        for name, path in preds:
            if not path.is_dir():
                raise FormatError(f"{path}: expected a directory of <sample id>.json masks")
            c = sum(
                _pmap(lambda sid: metrics.accumulate(read_mask(path / f"{sid}.json").data, truths[sid]), ids, args.threads),
                metrics.ConfusionCounts(),
            )
            rows[name], counts[name] = (None, metrics.metric_suite(c)), c
    else:
        _require(args, "truth", "pred")
        truth = read_mask(args.truth).data
        for name, path in preds:
            c = metrics.accumulate(read_mask(path).data, truth)
            rows[name], counts[name] = (None, metrics.metric_suite(c)), c
    if not rows:
        raise ConfigurationError("evaluate: nothing to score; give --manifest and/or --pred")
    doc = metrics.report_json(rows, counts)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(doc + "\n")
    if args.json:
        print(doc)
    else:
        print(metrics.format_table(rows))
    return 0


def cmd_postprocess(args) -> int:
    _require(args, "input", "out")
    if args.min_area < 1:
        raise ConfigurationError("--min-area must be at least 1")
    out = Path(args.out)
    stems = [Path(p).stem for p in args.input]
    if len(set(stems)) != len(stems):
        raise ConfigurationError("input files must have distinct names")

    def run(path):
        stack = read_raster(path)
        if stack.bands != 1:
            raise FormatError(f"{path}: expected a single-band raster")
        data = stack.data[0]
        binary = np.isin(data, (0, 1)).all()
        if args.threshold is not None:
            mask = postprocess.binarize(data, args.threshold)
        elif binary:
            mask = data.astype(np.uint8)
        else:
            raise ConfigurationError(f"{path}: not a 0/1 mask; pass --threshold to binarize it")
        kept = postprocess.remove_small(mask, args.min_area)
        stem = Path(path).stem
        write_mask(BinaryMask(kept, stack.transform), out / f"{stem}.json")
        if args.pgm:
            postprocess.write_pgm(kept, out / f"{stem}.pgm")
        return stem, int(mask.sum()), int(kept.sum())

    results = _pmap(run, list(args.input), args.threads)
    report = {"min_area": args.min_area, "files": {s: {"before": a, "after": b} for s, a, b in results}}
    text = "\n".join(f"{s}: {a} -> {b} change pixels" for s, a, b in results)
    _emit(args, report, text)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "build-dataset": cmd_build_dataset,
    "train-ensemble": cmd_train_ensemble,
    "vote": cmd_vote,
    "evaluate": cmd_evaluate,
    "postprocess": cmd_postprocess,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args = _resolve(args)
        return _COMMANDS[args.command](args)
    except (FormatError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
