"""``hddnet`` command line: train, extract, match, eval, ablate, synth."""

import argparse
import csv
import os
import sys

import numpy as np

from . import evaluation as EV
from . import formats as F
from . import training as TR
from .config import Config, load_config


def _config(path, overrides=()):
    cfg = load_config(path) if path else Config()
    flat = {}
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    return cfg.with_flat(flat) if flat else cfg


def cmd_train(args):
    corpus = TR.load_corpus(args.data)
    if len(corpus) < 10:
        raise SystemExit(f"corpus {args.data} has {len(corpus)} images; at least 10 are needed")

    def log(step, phase, value):
        if not args.quiet:
            print(f"step {step:6d}  {phase:10s}  {value:.6g}", flush=True)

    if args.resume:
        TR.resume(args.resume, corpus, args.out, log=log)
    else:
        TR.train(_config(args.config, args.set), corpus, args.out, log=log)
    print(os.path.join(args.out, "final.hddw"))


def cmd_extract(args):
    model, _ = F.load_checkpoint(args.ckpt)
    fs = EV.extract(F.read_image(args.image), model, args.top)
    fs.meta["image"] = os.path.basename(args.image)
    F.save_features(args.out, fs)
    note = " (fewer maxima than requested)" if fs.meta["truncated"] else ""
    print(f"{len(fs)} features -> {args.out}{note}")


def cmd_match(args):
    fa, fb = F.load_features(args.a), F.load_features(args.b)
    res = EV.match(fa, fb)
    h = F.read_homography(args.h)
    ok = res.correct(h, args.threshold)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index_a", "index_b", "distance", "xa", "ya", "xb", "yb", "correct"])
        for k in range(len(res)):
            w.writerow([int(res.index_a[k]), int(res.index_b[k]), f"{res.distance[k]:.9g}",
                        *(f"{v:.6g}" for v in (*res.xy_a[k], *res.xy_b[k])), int(ok[k])])
    print(f"matches {len(res)}  correct {int(ok.sum())}  mma {EV.mma(res, h, args.threshold):.4f}")


def read_pair_list(path):
    """Lines ``image_a image_b homography_file``; relative paths resolve against the list's folder."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise SystemExit(f"{path}:{lineno}: expected 'image_a image_b homography'")
            out.append(tuple(p if os.path.isabs(p) else os.path.join(base, p) for p in parts))
    return out


def cmd_eval(args):
    model, _ = F.load_checkpoint(args.ckpt)
    rows = []
    for a, b, hfile in read_pair_list(args.pairs):
        s = EV.evaluate_pair(model, F.read_image(a), F.read_image(b), F.read_homography(hfile),
                             args.top, args.mma_px, args.rep_px)
        rows.append([os.path.basename(a), os.path.basename(b), f"{s.mma:.6f}", f"{s.repeatability:.6f}",
                     s.n_a, s.n_matches])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_a", "image_b", "mma", "repeatability", "features_a", "matches"])
        w.writerows(rows)
        if rows:
            w.writerow(["mean", "", f"{np.mean([float(r[2]) for r in rows]):.6f}",
                        f"{np.mean([float(r[3]) for r in rows]):.6f}", "", ""])
    print(f"{len(rows)} pairs -> {args.out}")


def cmd_ablate(args):
    with open(args.matrix) as fh:
        variants = EV.parse_matrix(fh.read())
    corpus = TR.load_corpus(args.data)
    eval_corpus = TR.load_corpus(args.eval_data) if args.eval_data else None
    rows = EV.ablation_run(variants, corpus, args.out, eval_corpus)
    for r in rows:
        print(r["variant"], r.get("mma_viewpoint", ""), r["status"])


def cmd_synth(args):
    images = TR.make_corpus(args.seed, args.count, args.size)
    TR.write_corpus(args.out, images)
    if args.pairs:
        cfg = Config().with_flat({"eval.pairs": str(args.pairs), "eval.seed": str(args.seed),
                                  "train.crop": str(args.crop)})
        pdir = os.path.join(args.out, "pairs")
        os.makedirs(pdir, exist_ok=True)
        lines = []
        for i, p in enumerate(EV.heldout_pairs(cfg, images)):
            names = (f"a_{i:03d}.pgm", f"b_{i:03d}.pgm", f"h_{i:03d}.txt")
            F.write_image(os.path.join(pdir, names[0]), p.image_a)
            F.write_image(os.path.join(pdir, names[1]), p.image_b)
            F.write_homography(os.path.join(pdir, names[2]), p.h_ab)
            lines.append(" ".join(names))
        with open(os.path.join(pdir, "pairs.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"{args.count} images -> {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="hddnet", description="Hybrid local-feature detector/descriptor toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a folder of PGM/PPM images")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="detect and describe one image")
    e.add_argument("--image", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--top", type=int, default=100)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    m = sub.add_parser("match", help="mutual-NN match two feature files")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--h", required=True, help="text file with the 9 entries of H (A -> B)")
    m.add_argument("--out", required=True)
    m.add_argument("--threshold", type=float, default=5.0)
    m.set_defaults(func=cmd_match)

    v = sub.add_parser("eval", help="MMA and repeatability over a pair list")
    v.add_argument("--pairs", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--top", type=int, default=100)
    v.add_argument("--out", required=True)
    v.add_argument("--mma-px", type=float, default=5.0)
    v.add_argument("--rep-px", type=float, default=3.0)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate a matrix of config variants")
    a.add_argument("--matrix", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic training corpus (and optional eval pairs)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=12)
    s.add_argument("--size", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs", type=int, default=0)
    s.add_argument("--crop", type=int, default=96)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (F.FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"hddnet {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
