"""Command-line surface: training, conversion, evaluation, utilities.

Every command writes a run-record JSON (seed, argument hash, library
versions) next to its outputs, and failures exit nonzero after printing
a machine-readable error record to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, blocks, gradcheck, metrics, pseudo, trainer
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .imageio import Manifest, ManifestEntry, RawSidecar, load_rgb, save_rgb
from .model import Model, ModelConfig
from .selector import select_all


def _max_workers():
    env = os.environ.get("SRISP_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _args_hash(args):
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(doc, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_run_record(args, out_dir, extra=None):
    record = {
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config_hash": _args_hash(args),
        "versions": {
            "srisp": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    if extra:
        record.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"run_{args.command}.json")
    with open(path, "w") as f:
        json.dump(record, f, indent=2, default=str)
    return path


def _load_model(ckpt_path):
    if ckpt_path is None:
        return Model.build(ModelConfig(), identity=True)
    model, _ = trainer.load_model_checkpoint(ckpt_path)
    return model


def _convert_image(model, x_rgb, y_ref):
    sel = select_all(model, x_rgb, y_ref)
    out = blocks.pipeline_reverse(Tensor(np.asarray(x_rgb, dtype=np.float32)), sel.params)
    return np.clip(out.data, 0.0, 1.0)


def cmd_train(args):
    raw_manifest = Manifest.load(args.raw_manifest)
    raws = [e.load_raw_image() for e in raw_manifest.entries if e.raw_path]
    rgbs = None
    if args.rgb_manifest:
        rgb_manifest = Manifest.load(args.rgb_manifest)
        rgbs = [load_rgb(e.rgb_path) for e in rgb_manifest.entries if e.rgb_path]
    cfg = trainer.TrainConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs,
        batch_size=args.batch_size,
        pp_rand_per_batch=args.pp_rand,
        pp_mt_per_batch=args.batch_size - args.pp_rand,
        learning_rate=args.lr,
        input_size=args.input_size,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    os.makedirs(args.out, exist_ok=True)
    write_run_record(args, args.out)
    result = trainer.train(cfg, raws, rgbs, out_dir=args.out,
                           steps_per_epoch=args.steps_per_epoch)
    print(f"final loss {result.losses[-1]:.6f} -> {result.checkpoint_path}")


def cmd_convert(args):
    model = _load_model(args.ckpt)
    x = load_rgb(args.input)
    sidecar = RawSidecar.load(args.reference_meta)
    from .imageio import load_raw, save_raw

    y_ref = load_raw(args.reference, sidecar)
    out = _convert_image(model, x, y_ref)
    save_raw(out, sidecar, args.out)
    sidecar.save(os.path.splitext(args.out)[0] + ".json")
    write_run_record(args, os.path.dirname(os.path.abspath(args.out)))
    print(f"wrote {args.out}")


def cmd_gen_pseudo(args):
    manifest = Manifest.load(args.raw_manifest)
    os.makedirs(args.out, exist_ok=True)
    cfg = pseudo.RandIspConfig()
    entries = [e for e in manifest.entries if e.raw_path]
    if not entries:
        raise ValueError("manifest has no RAW entries")

    def render(item):
        i, entry = item
        y = entry.load_raw_image()
        rng = np.random.default_rng((args.seed, i))
        x = pseudo.isp_rand(y, cfg, rng)
        rgb_path = os.path.join(args.out, f"pp_rand_{i:05d}.png")
        save_rgb(x, rgb_path)
        return ManifestEntry(rgb_path=rgb_path, raw_path=entry.raw_path,
                             meta_path=entry.meta_path, camera_id=entry.camera_id)

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        out_entries = list(pool.map(render, enumerate(entries)))
    Manifest.save(os.path.join(args.out, "manifest.json"), out_entries)
    write_run_record(args, args.out)
    print(f"rendered {len(out_entries)} pairs to {args.out}")


def cmd_eval_paired(args):
    manifest = Manifest.load(args.manifest)
    # without a checkpoint the manifest's RGB images are scored as the
    # predictions themselves; with one, they are converted first
    model = _load_model(args.ckpt) if args.ckpt else None
    report = metrics.EvalReport()
    for entry in manifest.entries:
        raw = entry.load_raw_image()
        rgb = load_rgb(entry.rgb_path) if entry.rgb_path else raw
        if rgb.shape != raw.shape:
            raise ValueError(f"{entry.rgb_path}: RGB/RAW size mismatch")
        ref_raw, *raw_units = metrics.split_protocol(raw)
        _, *rgb_units = metrics.split_protocol(rgb)
        for j, (gt, x) in enumerate(zip(raw_units, rgb_units)):
            pred = _convert_image(model, x, ref_raw) if model is not None else x
            report.add(
                f"{os.path.basename(entry.raw_path)}#{j}",
                psnr=metrics.psnr(gt, pred),
                angular_error=metrics.angular_error(gt, pred),
            )
    os.makedirs(args.out, exist_ok=True)
    report.save_json(os.path.join(args.out, "eval_paired.json"))
    report.save_csv(os.path.join(args.out, "eval_paired.csv"))
    write_run_record(args, args.out, extra={"summary": report.summary()})
    s = report.summary()
    print(f"PSNR {s['psnr']:.2f} dB  AE {s['angular_error']:.3f} deg")


def _pooled_histograms(manifest):
    total = None
    n = 0
    for entry in manifest.entries:
        raw = entry.load_raw_image()
        lab = metrics.raw_to_lab(raw, entry.sidecar().ccm)
        h = metrics.HistogramSet.from_lab(lab)
        total = h.counts if total is None else total + h.counts
        n += h.n_pixels
    return metrics.HistogramSet(counts=total, n_pixels=n)


def cmd_eval_hi(args):
    ref = _pooled_histograms(Manifest.load(args.ref_manifest))
    gen = _pooled_histograms(Manifest.load(args.gen_manifest))
    hi = metrics.histogram_intersection(ref, gen)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval_hi.json"), "w") as f:
        json.dump({"histogram_intersection": hi}, f, indent=2)
    write_run_record(args, args.out, extra={"histogram_intersection": hi})
    print(f"HI {hi:.4f}")


def cmd_gradcheck(args):
    from . import autodiff as ad

    rng = np.random.default_rng(args.seed)
    failures = []

    def run(name, fn, params):
        report = gradcheck.check_gradients(fn, params, rng=rng,
                                           max_coords=args.max_coords)
        status = "ok" if report.ok else "FAIL"
        print(f"{name:24s} {status}  max rel err {report.max_rel_err:.3e}")
        if not report.ok:
            failures.append(name)

    p = Tensor(rng.uniform(0.2, 0.8, size=(4, 4, 3)), requires_grad=True)
    run("gain", lambda: ad.mean_(blocks.gg_apply(p, Tensor(np.float32(1.5), requires_grad=False), "rev")), [p])
    g = Tensor(np.array([1.3, 1.0, 1.6]), requires_grad=True)
    run("white-balance", lambda: ad.mean_(blocks.wb_apply(p, g, "rev")), [p, g])
    m = Tensor(np.eye(3) + 0.1 * rng.standard_normal((3, 3)), requires_grad=True)
    run("color-matrix", lambda: ad.mean_(blocks.cc_apply(p, m, "rev")), [p, m])
    gam = Tensor(np.float32(2.2), requires_grad=True)
    run("gamma", lambda: ad.mean_(blocks.gc_apply(p, gam, "rev")), [p, gam])
    k = Tensor(0.1 * rng.standard_normal((3, 3, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    run("conv2d", lambda: ad.mean_(ad.conv2d(p, k, b)), [p, k, b])
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    run("softmax-mix", lambda: ad.mean_(ad.dict_mix(
        Tensor(rng.standard_normal((5, 3)), requires_grad=False), ad.softmax(w))), [w])

    if failures:
        raise FloatingPointError(f"gradient checks failed: {', '.join(failures)}")
    print("all gradient checks passed")


def cmd_inspect(args):
    tensors, meta = load_checkpoint(args.ckpt)
    doc = {
        "meta": meta,
        "tensors": {k: list(v.shape) for k, v in sorted(tensors.items())},
        "total_parameters": int(sum(v.size for v in tensors.values())),
    }
    print(json.dumps(doc, indent=2))


def cmd_init_identity(args):
    model = Model.build(ModelConfig(), seed=args.seed, identity=True)
    save_checkpoint(args.out, model.state_arrays(),
                    meta={"kind": "model", "model_config": model.config.to_dict()})
    print(f"wrote {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="srisp")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from unpaired RAW/RGB")
    p.add_argument("--raw-manifest", required=True)
    p.add_argument("--rgb-manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=800)
    p.add_argument("--warmup-epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--pp-rand", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one RGB image to RAW")
    p.add_argument("--ckpt")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--reference-meta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("gen-pseudo", help="materialize randomized-ISP pairs")
    p.add_argument("--raw-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("eval-paired", help="split-protocol PSNR / angular error")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_paired)

    p = sub.add_parser("eval-hi", help="Lab histogram intersection of two sets")
    p.add_argument("--ref-manifest", required=True)
    p.add_argument("--gen-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_hi)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=24)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint directory")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("init-identity", help="write an identity-pipeline checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_identity)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # keep failures machine-readable
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
