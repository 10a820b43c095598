"""Command-line entry point: one subcommand per pipeline stage.

Every stage reads and writes ``.cldf`` artifacts under ``--run-dir``::

    config.json          resolved configuration
    data/                synthetic images, ground truth, CAMs, gradient maps
    features/            aggregated per-pixel features (HWC)
    seeds/               seed label maps (u8: 0 unused, 1 foreground, 2 background)
    maps/cam, maps/mg    normalized saliency maps used for the seeds
    decoder/             checkpoint (one file per weight matrix + manifest.json)
    masks/               predicted masks (.cldf and .pgm)
    report.json, per_sample.csv, ablation.csv
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import infer_mask
from .decoder import TrainingError, load_checkpoint, save_checkpoint, train_decoder
from .diffusion import FileFeatureProvider, ToyFeatureProvider
from .fusion import SeedSelection, cap_background_per_batch
from .metrics import evaluate, format_report, write_report
from .pipeline import PipelineConfig, features_for, image_seed, seeds_for
from .saliency import LogisticClassifier, load_cam, mean_gradient_map, minmax_normalize, MEAN_GRADIENT
from .synth import gen_dataset, write_dataset
from .tensorio import TensorFormatError, load_array, read_tensor, save_array

log = logging.getLogger("cldf")

ABLATION_DIMS = (2, 4, 8, 16, 32)
ABLATION_DEPTHS = (2, 3, 4, 5, 6)


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- helpers -----------------------------------------------------------------

def resolve_config(args) -> PipelineConfig:
    run_dir = Path(args.run_dir)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CLIError("missing-input", f"config file {path} not found")
        cfg = _parse_config(json.loads(path.read_text()))
    elif (run_dir / "config.json").is_file():
        cfg = _parse_config(json.loads((run_dir / "config.json").read_text()))
    else:
        cfg = PipelineConfig.desk_scale()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _parse_config(d: dict) -> PipelineConfig:
    try:
        return PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CLIError("config-invalid", str(exc)) from exc


def _index(run_dir: Path) -> list:
    path = run_dir / "data" / "index.json"
    if not path.is_file():
        raise CLIError("missing-input", f"{path} not found; run `cldf synth` first or provide a dataset index")
    return json.loads(path.read_text())["samples"]


def _require(path: Path) -> Path:
    if not path.exists():
        raise CLIError("missing-input", f"{path} not found")
    return path


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    h, w = mask.shape
    body = np.where(mask > 0, 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def _save_config(run_dir: Path, cfg: PipelineConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# -- stages ------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, run_dir: Path) -> None:
    samples = gen_dataset(cfg.synth, seed=cfg.seed)
    write_dataset(run_dir / "data", samples, cfg.to_dict())
    _save_config(run_dir, cfg)
    log.info("wrote %d scenes to %s", len(samples), run_dir / "data")


def stage_features(cfg: PipelineConfig, run_dir: Path, provider: str = "toy", feature_dir=None, threads: int = 1) -> None:
    entries = _index(run_dir)
    out = run_dir / "features"
    out.mkdir(parents=True, exist_ok=True)
    if provider == "files" and feature_dir is None:
        raise CLIError("missing-input", "--provider files needs --feature-dir")

    def work(item):
        i, e = item
        image = load_array(_require(run_dir / "data" / e["image"]))
        if provider == "files":
            prov = FileFeatureProvider(feature_dir, i)
        else:
            prov = ToyFeatureProvider(cfg.features.toy)
        feats = features_for(image, cfg, i, prov)
        save_array(out / f"{e['name']}.cldf", feats.data, "HWC", {"timesteps": list(feats.timesteps_used), "provider": provider})

    _pmap(work, enumerate(entries), threads)


def stage_seeds(cfg: PipelineConfig, run_dir: Path, gradient_source: str = "synth", classifier=None, threads: int = 1) -> None:
    entries = _index(run_dir)
    for sub in ("seeds", "maps/cam", "maps/mg"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    def work(item):
        i, e = item
        image = load_array(_require(run_dir / "data" / e["image"]))
        cam = load_cam(_require(run_dir / "data" / e["cam"]), image.shape)
        if gradient_source == "logistic":
            mg = mean_gradient_map(image, classifier, cfg.features.schedule(), seed=image_seed(cfg.seed, i, 5))
        else:
            mg = minmax_normalize(load_array(_require(run_dir / "data" / e["grad"])), MEAN_GRADIENT)
        sel = seeds_for(cam, mg, cfg, i)
        save_array(run_dir / "maps" / "cam" / f"{e['name']}.cldf", cam.data, "HW")
        save_array(run_dir / "maps" / "mg" / f"{e['name']}.cldf", mg.data, "HW")
        return sel

    selections = _pmap(work, enumerate(entries), threads)
    if cfg.background_per_batch:
        selections = cap_background_per_batch(selections, cfg.train.background_cap, image_seed(cfg.seed, 0, 4))
    for e, sel in zip(entries, selections):
        meta = {"foreground": int(len(sel.foreground)), "background": int(len(sel.background)), "skip": sel.skip}
        save_array(run_dir / "seeds" / f"{e['name']}.cldf", sel.to_label_map(), "HW", meta)


def _load_training_set(run_dir: Path, entries: list):
    data = []
    for e in entries:
        feats = read_tensor(_require(run_dir / "features" / f"{e['name']}.cldf")).data
        sel = SeedSelection.from_label_map(load_array(_require(run_dir / "seeds" / f"{e['name']}.cldf")))
        data.append((feats, sel))
    return data


def stage_train(cfg: PipelineConfig, run_dir: Path) -> dict:
    entries = _index(run_dir)
    data = _load_training_set(run_dir, entries)
    train_cfg = replace(cfg.train, seed=image_seed(cfg.seed, 0, 6) % (2**32))
    result = train_decoder(data, train_cfg)
    save_checkpoint(result.net, run_dir / "decoder", cfg.to_dict())
    trace = {"epoch_losses": result.epoch_losses, "batch_losses": result.batch_losses}
    (run_dir / "train_log.json").write_text(json.dumps(trace, indent=2) + "\n")
    return trace


def stage_infer(cfg: PipelineConfig, run_dir: Path, threads: int = 1) -> None:
    entries = _index(run_dir)
    net = load_checkpoint(_require(run_dir / "decoder"))
    out = run_dir / "masks"
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.kmeans

    def work(item):
        i, e = item
        feats = read_tensor(_require(run_dir / "features" / f"{e['name']}.cldf")).data
        sel = SeedSelection.from_label_map(load_array(_require(run_dir / "seeds" / f"{e['name']}.cldf")))
        return infer_mask(net.decode(feats), sel, image_seed(cfg.seed, i, 3), k.restarts, k.max_iter, k.tol)

    masks = _pmap(work, enumerate(entries), threads)
    for e, mask in zip(entries, masks):
        save_array(out / f"{e['name']}.cldf", mask.astype(np.uint8), "HW")
        write_pgm(out / f"{e['name']}.pgm", mask)


def _load_mask(path: Path) -> np.ndarray:
    if path.suffix == ".pgm":
        return read_pgm(path) > 0
    return load_array(path) > 0


def stage_eval(cfg: PipelineConfig | None, pred_dir: Path, gt_dir: Path, out_json: Path, out_csv: Path | None) -> dict:
    preds = sorted(_require(pred_dir).glob("*.cldf"))
    if not preds:
        raise CLIError("missing-input", f"no .cldf masks in {pred_dir}")
    pairs, names = [], []
    for p in preds:
        pairs.append((_load_mask(p), _load_mask(_require(gt_dir / p.name))))
        names.append(p.stem)
    report = evaluate(pairs, names)
    report["config"] = cfg.to_dict() if cfg is not None else {}
    write_report(report, out_json, out_csv)
    return report


def stage_ablate(cfg: PipelineConfig, run_dir: Path, dims=ABLATION_DIMS, depths=ABLATION_DEPTHS, threads: int = 1) -> list:
    """Retrain and re-infer for each decoder shape; writes ablation.csv."""
    entries = _index(run_dir)
    data = _load_training_set(run_dir, entries)
    gts = [load_array(_require(run_dir / "data" / e["gt"])) for e in entries]
    settings = [("output_dim", d, 4) for d in dims] + [("depth", 16, L) for L in depths]
    rows = []
    cache = {}
    for sweep, dim, depth in settings:
        key = (dim, depth)
        if key not in cache:
            hidden = (16,) * (depth - 1) + (dim,)
            train_cfg = replace(cfg.train, hidden=hidden, seed=image_seed(cfg.seed, 0, 6) % (2**32))
            net = train_decoder(data, train_cfg).net
            k = cfg.kmeans

            def work(i, net=net):
                feats, sel = data[i]
                return infer_mask(net.decode(feats), sel, image_seed(cfg.seed, i, 3), k.restarts, k.max_iter, k.tol)

            masks = _pmap(work, range(len(data)), threads)
            cache[key] = evaluate(list(zip(masks, gts)))
        rep = cache[key]
        rows.append({
            "sweep": sweep,
            "output_dim": dim,
            "depth": depth,
            "dice_mean": rep["dice_mean"],
            "dice_std": rep["dice_std"],
            "iou_mean": rep["iou_mean"],
            "iou_std": rep["iou_std"],
        })
        log.info("ablation %s dim=%d depth=%d dice=%.4f", sweep, dim, depth, rep["dice_mean"])
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldf", description="Contrastive pixel-decoder segmentation from CAM and gradient seeds")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults: desk-scale synthetic settings)")
    common.add_argument("--seed", type=int, help="seed for every random draw; overrides the config")
    common.add_argument("--run-dir", default="run", help="directory holding all stage artifacts")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-image work")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("features", parents=[common], help="compute or import aggregated features")
    p.add_argument("--provider", choices=["toy", "files"], default="toy")
    p.add_argument("--feature-dir", help="directory of exported NHWC t####.cldf files (--provider files)")
    p = sub.add_parser("seeds", parents=[common], help="saliency maps and seed selection")
    p.add_argument("--gradient-source", choices=["synth", "logistic"], default="synth")
    p.add_argument("--classifier-weights", help="HWC .cldf weights for --gradient-source logistic")
    p.add_argument("--classifier-bias", type=float, default=0.0)
    sub.add_parser("train", parents=[common], help="train the pixel decoder")
    sub.add_parser("infer", parents=[common], help="decode embeddings and cluster them into masks")
    p = sub.add_parser("eval", parents=[common], help="Dice / IoU report")
    p.add_argument("--pred-dir", help="defaults to RUN/masks")
    p.add_argument("--gt-dir", help="defaults to RUN/data/gt")
    p.add_argument("--out", help="report path (default RUN/report.json)")
    p = sub.add_parser("run", parents=[common], help="synth, features, seeds, train, infer and eval in one go")
    p.add_argument("--provider", choices=["toy", "files"], default="toy")
    p.add_argument("--feature-dir")
    p.add_argument("--skip-synth", action="store_true", help="reuse an existing RUN/data")
    p = sub.add_parser("ablate", parents=[common], help="decoder output-dim and depth sweep")
    p.add_argument("--dims", type=int, nargs="+", default=list(ABLATION_DIMS))
    p.add_argument("--depths", type=int, nargs="+", default=list(ABLATION_DEPTHS))
    return parser


def _classifier(args):
    if args.gradient_source != "logistic":
        return None
    if not args.classifier_weights:
        raise CLIError("missing-input", "--gradient-source logistic needs --classifier-weights")
    return LogisticClassifier(load_array(_require(Path(args.classifier_weights))), args.classifier_bias)


def _eval_from_args(cfg, args, run_dir):
    pred = Path(args.pred_dir) if getattr(args, "pred_dir", None) else run_dir / "masks"
    gt = Path(args.gt_dir) if getattr(args, "gt_dir", None) else run_dir / "data" / "gt"
    out = Path(args.out) if getattr(args, "out", None) else run_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = stage_eval(cfg, pred, gt, out, out.with_name("per_sample.csv"))
    print(format_report(report))
    return report


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run_dir = Path(args.run_dir)
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "synth":
        stage_synth(cfg, run_dir)
    elif cmd == "features":
        stage_features(cfg, run_dir, args.provider, args.feature_dir, args.threads)
    elif cmd == "seeds":
        stage_seeds(cfg, run_dir, args.gradient_source, _classifier(args), args.threads)
    elif cmd == "train":
        trace = stage_train(cfg, run_dir)
        print(f"final epoch loss {trace['epoch_losses'][-1]:.5f}")
    elif cmd == "infer":
        stage_infer(cfg, run_dir, args.threads)
    elif cmd == "eval":
        _eval_from_args(cfg, args, run_dir)
    elif cmd == "run":
        if not args.skip_synth:
            stage_synth(cfg, run_dir)
        else:
            _save_config(run_dir, cfg)
        stage_features(cfg, run_dir, args.provider, args.feature_dir, args.threads)
        stage_seeds(cfg, run_dir, threads=args.threads)
        stage_train(cfg, run_dir)
        stage_infer(cfg, run_dir, args.threads)
        _eval_from_args(cfg, args, run_dir)
    elif cmd == "ablate":
        rows = stage_ablate(cfg, run_dir, tuple(args.dims), tuple(args.depths), args.threads)
        for r in rows:
            print(f"{r['sweep']:<10} dim={r['output_dim']:<3} depth={r['depth']}  dice={r['dice_mean']:.4f}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CLIError as exc:
        err = {"error": exc.kind, "message": str(exc)}
    except TrainingError as exc:
        err = {"error": "training-failed", "message": str(exc)}
    except TensorFormatError as exc:
        err = {"error": "bad-artifact", "message": str(exc)}
    except (FileNotFoundError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(err) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
