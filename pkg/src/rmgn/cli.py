"""``rmgn`` command line: gen-data, train, infer, eval.

Every command prints one JSON line on success. Exit codes: 0 success,
2 usage or config error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np
import torch

from . import atelier, evaluation, training
from .tensors import load_image, save_image, save_mask, to_uint8

log = logging.getLogger("rmgn")


class UsageError(Exception):
    pass


def _env_seed(value):
    env = os.environ.get("RMGN_SEED")
    if env is None or env == "":
        return value
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RMGN_SEED must be an integer, got {env!r}") from None


def _summary(**fields):
    print(json.dumps(fields, sort_keys=True))


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _manifest_path(path) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.yaml")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return path


# --------------------------------------------------------------------------

def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    seed = _env_seed(args.seed)
    manifest = atelier.generate_dataset(args.n, seed, tuple(args.size), args.pool)
    os.makedirs(args.out, exist_ok=True)
    cache = os.path.join(args.out, "cache")
    os.makedirs(cache, exist_ok=True)
    size = tuple(args.size)
    written = 0

    def put(key_obj, write):
        nonlocal written
        key = hashlib.sha256(json.dumps(key_obj, sort_keys=True).encode()).hexdigest()[:24]
        path = os.path.join(cache, f"{key}.png")
        if not os.path.exists(path):
            write(path)
            written += 1
        return os.path.basename(path)

    index = []
    for entry in manifest.entries:
        render = atelier.render_person(entry.person, size)
        pkey = atelier._plain(asdict(entry.person))
        item = {
            "person": put(["person", pkey, size], lambda p: save_image(render.image, p)),
            "cloth_mask": put(["mask", pkey, size], lambda p: save_mask(render.cloth_region, p)),
            "clothes": [],
        }
        for spec in (entry.person.cloth,) + tuple(entry.clothes):
            ckey = atelier._plain(asdict(spec))
            item["clothes"].append(
                put(["cloth", ckey, size],
                    lambda p, s=spec: save_image(atelier.render_cloth(s, size), p)))
        index.append(item)
    path = os.path.join(args.out, "manifest.yaml")
    atelier.save_manifest(manifest, path)
    with open(os.path.join(args.out, "renders.json"), "w") as fh:
        json.dump(index, fh, indent=1)
    _summary(command="gen-data", manifest=path, entries=len(manifest.entries), seed=seed,
             renders_written=written, sha256=_sha256(path))


def _write_run_samples(state, manifest, out_dir, count=4):
    samples = evaluation.eval_samples(manifest, per_person=1)
    k = min(count, len(samples.persons))
    outs, masks, _ = training.infer_batch(samples.persons[:k], samples.cloths[:k], state)
    os.makedirs(os.path.join(out_dir, "outputs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for i in range(k):
        save_image(outs[i].clamp(-1, 1), os.path.join(out_dir, "outputs", f"sample_{i:02d}.png"))
        for level, m in enumerate(masks, start=1):
            save_mask(m[i], os.path.join(out_dir, "masks", f"sample_{i:02d}_mask_L{level}.png"))


def cmd_train(args):
    config = training.load_config(args.config)
    seed = _env_seed(config.seed)
    if seed != config.seed:
        config = config.replace(seed=seed)
    manifest = atelier.load_manifest(_manifest_path(args.data))
    state = training.train(config, manifest, args.out, resume=args.resume)
    _write_run_samples(state, manifest, args.out)
    metrics = os.path.join(args.out, "metrics.csv")
    _summary(command="train", out=args.out, steps=state.step,
             checkpoint=state.last_checkpoint, metrics_sha256=_sha256(metrics))


def _load_state(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if os.path.isdir(path):
        found = training.latest_checkpoint(path)
        if not found:
            raise FileNotFoundError(f"no checkpoints under {path}")
        path = found
    return training.load_checkpoint(path), path


def cmd_infer(args):
    state, ckpt = _load_state(args.ckpt)
    person = load_image(args.person)
    cloth = load_image(args.cloth)
    expected = tuple(state.config.resolution)
    for name, im in (("person", person), ("cloth", cloth)):
        if tuple(im.shape[1:]) != expected:
            raise ValueError(f"{name} image is {im.height}x{im.width} but the checkpoint "
                             f"expects {expected[0]}x{expected[1]}")
        if im.channels != 3:
            raise ValueError(f"{name} image must be RGB")
    out, masks = training.infer(person, cloth, state)
    os.makedirs(args.out, exist_ok=True)
    tryon = os.path.join(args.out, "tryon.png")
    save_image(out, tryon)
    written = [tryon]
    if args.dump_masks:
        for level, m in enumerate(masks, start=1):
            p = os.path.join(args.out, f"mask_L{level}.png")
            save_mask(m, p)
            written.append(p)
    _summary(command="infer", checkpoint=ckpt, outputs=written, sha256=_sha256(tryon))


def _png_dir(path):
    files = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if len(files) < 2:
        raise ValueError(f"{path}: need at least two PNG images")
    return [load_image(os.path.join(path, f)) for f in files]


def _eval_manifest(args, train_manifest):
    if args.eval_data:
        return atelier.load_manifest(_manifest_path(args.eval_data))
    return atelier.generate_dataset(len(train_manifest.entries), train_manifest.seed + 1000,
                                    tuple(train_manifest.size), len(train_manifest.entries[0].clothes))


def save_panel(persons, cloths, outputs, masks, path):
    """Rows of person | cloth | output | finest mask."""
    from PIL import Image
    rows = []
    for i in range(len(persons)):
        tiles = [to_uint8(persons[i]), to_uint8(cloths[i]), to_uint8(outputs[i].clamp(-1, 1))]
        if masks is not None:
            tiles.append(to_uint8(masks[i].expand(3, -1, -1) * 2 - 1))
        rows.append(np.concatenate(tiles, axis=1))
    Image.fromarray(np.concatenate(rows, axis=0)).save(path, format="PNG")


def cmd_eval(args):
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if args.mode == "fid" and args.images_a:
        if not args.images_b:
            raise UsageError("--images-a needs --images-b")
        emb = training.embedder_for(training.TrainConfig(steps=0))
        fid = evaluation.desk_fid(torch.stack([im.data for im in _png_dir(args.images_a)]),
                                  torch.stack([im.data for im in _png_dir(args.images_b)]), emb)
        evaluation.write_table([{"mode": "fid", "desk_fid": fid}], args.out)
        _summary(command="eval", mode="fid", desk_fid=fid, out=args.out)
        return
    if not args.ckpt:
        raise UsageError(f"--mode {args.mode} needs --ckpt")
    if not args.data:
        raise UsageError(f"--mode {args.mode} needs --data")
    state, ckpt = _load_state(args.ckpt)
    manifest = atelier.load_manifest(_manifest_path(args.data))

    if args.mode in ("fid", "mask-score"):
        samples = evaluation.eval_samples(manifest)
        outs, finest = evaluation.run_inference(state, samples)
        if args.mode == "fid":
            value = evaluation.desk_fid(outs, samples.oracles, training.embedder_for(state.config))
            row = {"mode": "fid", "desk_fid": value,
                   "pixel_l1": float((outs - samples.oracles).abs().mean())}
        else:
            if finest is None:
                raise ValueError("this model has no regional masks")
            row = {"mode": "mask-score",
                   "mask_score": evaluation.mask_region_score(finest, samples.cloth_masks)}
        evaluation.write_table([row], args.out)
        if args.panels:
            k = min(8, len(outs))
            save_panel(samples.persons[:k], samples.cloths[:k], outs[:k],
                       None if finest is None else finest[:k], args.panels)
        _summary(command="eval", checkpoint=ckpt, out=args.out, **row)
        return

    base = state.config
    if args.steps is not None:
        base = base.replace(steps=args.steps)
    seeds = tuple(args.seeds)
    eval_manifest = _eval_manifest(args, manifest)
    cache = evaluation.RunCache(args.cache)
    if args.mode == "ablation":
        rows = evaluation.run_ablation(base, manifest, eval_manifest, seeds, cache)
        summary = evaluation.summarize(rows, "variant")
    else:
        rows = evaluation.run_fakeset_sweep(base, manifest, eval_manifest, args.n_values, seeds, cache)
        summary = evaluation.summarize(rows, "n_fake")
    evaluation.write_table(rows, args.out)
    root, ext = os.path.splitext(args.out)
    evaluation.write_table(summary, f"{root}_summary{ext or '.csv'}")
    _summary(command="eval", mode=args.mode, out=args.out, rows=len(rows),
             medians={str(r[next(iter(r))]): r["pixel_l1_median"] for r in summary})


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmgn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset manifest and renders")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, nargs=2, default=list(atelier.DEFAULT_SIZE),
                   metavar=("H", "W"))
    g.add_argument("--pool", type=int, default=4, help="alternative clothes per person")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train warp module and generator")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="manifest file or gen-data directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="try a cloth on a person")
    i.add_argument("--person", required=True)
    i.add_argument("--cloth", required=True)
    i.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--dump-masks", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metrics and experiments")
    e.add_argument("--mode", required=True, choices=["fid", "ablation", "sweep", "mask-score"])
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--out", required=True, help="CSV path")
    e.add_argument("--eval-data", help="held-out manifest for ablation/sweep")
    e.add_argument("--images-a", help="fid between two PNG directories")
    e.add_argument("--images-b")
    e.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    e.add_argument("--steps", type=int, help="override training steps for ablation/sweep")
    e.add_argument("--n-values", type=int, nargs="+", default=[1, 2, 3])
    e.add_argument("--cache", help="directory memoising finished experiment runs")
    e.add_argument("--panels", help="write a person|cloth|output|mask PNG panel here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, training.ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rmgn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        log.debug("failure", exc_info=True)
        print(f"rmgn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
