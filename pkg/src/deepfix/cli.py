"""Command-line entry point: ``deepfix {synth,train,predict,evaluate,ablate,gradcheck}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .fileio import (DatasetManifest, FormatError, crop_box, generate_synthetic_dataset,
                     load_image, load_split, save_map, write_netpbm)
from .netdef import (VARIANTS, ArchiveError, ConfigError, WeightArchive, build_network,
                     get_config, init_weights, load_weights, save_weights)
from .ops import DimensionError
from .train import NumericalError, compute_mean_map, optimizer_for, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
DATA_ERRORS = (FormatError, ArchiveError, ConfigError, DimensionError, OSError)

log = logging.getLogger("deepfix")


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return h, w


def _weights(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _manifest(path):
    return DatasetManifest.read(path)


def cmd_synth(args):
    m = generate_synthetic_dataset(args.out, args.count, args.size, args.strength, args.seed,
                                   args.val, args.test)
    print(f"wrote {len(m.records)} samples and {Path(args.out) / 'manifest.tsv'}")


def cmd_train(args):
    manifest = _manifest(args.manifest)
    data = load_split(manifest, "train")
    val = load_split(manifest, "val") if manifest.split("val") else None
    config = get_config(args.config, args.variant)
    net = build_network(config)
    init_weights(net, args.seed)
    if args.weights:
        load_weights(net, WeightArchive.load(args.weights))
    run, state = train(net, data, optimizer_for(config), iters=args.iters, batch=args.batch,
                       seed=args.seed, val_data=val, eval_every=args.eval_every)
    if config.variant == "explicit-cb":
        net.mean_map = compute_mean_map(data.maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(net).save(out / "weights.dfx")
    (out / "train_log.tsv").write_text(run.to_lines())
    final = run.val_losses[-1][1] if run.val_losses else run.train_losses[-1][1]
    print(f"{run.iteration} iterations, {state.n_decays} lr decays, final loss {final:.6g}; "
          f"wrote {out / 'weights.dfx'}")


def _network_for(args):
    archive = WeightArchive.load(args.weights)
    name = archive.meta.get("config")
    if name is None:
        raise ArchiveError(f"{args.weights}: metadata does not name a config")
    if args.config and args.config != name:
        raise ArchiveError(f"{args.weights} holds a {name!r} network, not {args.config!r}")
    variant = args.variant or archive.meta.get("variant", "lbc")
    net = build_network(get_config(name, variant))
    load_weights(net, archive)
    return net


def predict_image(net, path, cb_weight=1.0):
    """Saliency map at the original size of the image file.

    The network sees the centre crop to multiples of 8; the upsampled map is
    then edge-extended over the cropped margins.
    """
    full = load_image(path, crop=False)
    h, w = full.shape[1:]
    top, left, ch, cw = crop_box(h, w)
    pred = net.predict(full[None, :, top:top + ch, left:left + cw], cb_weight)[0]
    return np.pad(pred, ((top, h - ch - top), (left, w - cw - left)), mode="edge")


def cmd_predict(args):
    net = _network_for(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        pred = predict_image(net, path, args.cb_weight)
        stem = Path(path).stem
        save_map(out / f"{stem}.pgm", pred)
        write_netpbm(out / f"{stem}_heatmap.pgm", np.round(pred * 255), 255)
        print(f"{path} -> {out / (stem + '.pgm')} ({pred.shape[1]}x{pred.shape[0]})")


def cmd_evaluate(args):
    from .metrics import evaluate_dataset, format_report

    manifest = _manifest(args.manifest)
    if not manifest.split(args.split):
        raise FormatError(f"{args.manifest}: no {args.split!r} records to evaluate")
    data = load_split(manifest, args.split)
    if not data.fixations or data.maps.size == 0:
        raise FormatError(f"{args.split} records need both ground-truth maps and fixations")
    net = _network_for(args)
    preds = np.concatenate([net.predict(data.images[k:k + 8], args.cb_weight)
                            for k in range(0, len(data), 8)])
    rows = evaluate_dataset(preds, data.maps, data.fixations, emd_grid=args.emd_grid,
                            auc_splits=args.auc_splits, seed=args.seed)
    note = (f"{net.config.variant} on {args.split}; EMD in cell widths of a grid capped at "
            f"{args.emd_grid}x{args.emd_grid}; AUC-Borji and sAUC over {args.auc_splits} splits, "
            f"seed {args.seed}")
    report = format_report(rows, data.ids, note)
    Path(args.out).write_text(report)
    print(report.splitlines()[-1])


def cmd_ablate(args):
    from .ablation import run_ablation

    manifest = _manifest(args.manifest)
    for split in ("train", "val"):
        if not manifest.split(split):
            raise FormatError(f"{args.manifest}: ablation needs a {split!r} split")
    data, val = load_split(manifest, "train"), load_split(manifest, "val")
    if not val.fixations:
        raise FormatError("validation records need fixation files")
    seeds = tuple(args.seed + k for k in range(args.seeds))
    result = run_ablation(data, val, seeds, get_config(args.config), iters=args.iters,
                          batch=args.batch, eval_every=args.eval_every, emd_grid=args.emd_grid,
                          auc_splits=args.auc_splits, cb_weights=args.cb_weight)
    table = result.table(f"EMD in cell widths of a grid capped at {args.emd_grid}x{args.emd_grid}; "
                         f"loss is the euclidean loss of the final maps")
    Path(args.out).write_text(table)
    print(table, end="")


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="deepfix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic centre-biased dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=500, help="training samples")
    s.add_argument("--val", type=int, default=100)
    s.add_argument("--test", type=int, default=0)
    s.add_argument("--size", type=_size, default=(48, 64), help="WIDTHxHEIGHT (default 64x48)")
    s.add_argument("--strength", type=float, default=0.7, help="centre-bias mixing weight")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def model_flags(q, weights_required):
        q.add_argument("--config", default=None if weights_required else "desk",
                       choices=["desk", "full"])
        q.add_argument("--variant", choices=VARIANTS, default=None if weights_required else "lbc")
        q.add_argument("--weights", required=weights_required)

    t = sub.add_parser("train", help="train a network on the manifest's train split")
    model_flags(t, False)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="directory for weights.dfx and train_log.tsv")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--eval-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", help="saliency maps at the original image size")
    model_flags(q, True)
    q.add_argument("images", nargs="+", help="PPM/PGM images")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--cb-weight", type=float, default=1.0, help="mean-map weight (explicit-cb)")
    q.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="metric report on a manifest split")
    model_flags(e, True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", required=True, help="report path")
    e.add_argument("--emd-grid", type=int, default=32)
    e.add_argument("--auc-splits", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--cb-weight", type=float, default=1.0)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare DF-No-LBC, DF-Explicit-CB and DF-LBC")
    a.add_argument("--config", default="desk", choices=["desk", "full"])
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True, help="report path")
    a.add_argument("--seed", type=int, default=0, help="first seed")
    a.add_argument("--seeds", type=int, default=3, help="number of seeds")
    a.add_argument("--iters", type=int, default=2000)
    a.add_argument("--batch", type=int, default=4)
    a.add_argument("--eval-every", type=int, default=250)
    a.add_argument("--emd-grid", type=int, default=16)
    a.add_argument("--auc-splits", type=int, default=100)
    a.add_argument("--cb-weight", type=_weights, default=(0.5, 1.0, 2.0),
                   help="mean-map weights to sweep, comma separated")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except NumericalError as exc:
        print(f"deepfix: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DATA_ERRORS as exc:
        print(f"deepfix: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
