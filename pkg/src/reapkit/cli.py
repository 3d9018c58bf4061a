"""Command-line entry point.

Subcommands: annotate, verify, render, attack, eval, realism, review, and
train (produces the toy-model checkpoint the attack/eval commands load).
Progress goes to stderr; machine-readable output goes to files under
``--out``.  The dataset root comes from ``--dataset`` or the
``REAPKIT_DATASET`` environment variable; a key=value config file can
pre-set any flag, with explicit flags winning.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import (attack, dataset, metrics, model as model_mod, realism, render,
               signs)
from .errors import ReapkitError

_RELIGHT_CHOICES = ("none", "percentile", "polynomial", "colortransfer")
_GEO_CHOICES = ("perspective", "affine", "translate-scale")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_config_file(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    values = {}
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reapkit",
        description="Render, attack, and evaluate adversarial patches on "
                    "annotated sign datasets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_dataset=True):
        if needs_dataset:
            p.add_argument("--dataset",
                           default=os.environ.get("REAPKIT_DATASET"),
                           help="dataset root (default: $REAPKIT_DATASET)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value config file; flags win")

    p = sub.add_parser("annotate",
                       help="generate candidate annotations from masks")
    common(p)
    p.add_argument("--hints", help="hints csv (default <dataset>/hints.csv)")

    p = sub.add_parser("verify", help="validate annotations and report "
                                      "pending review counts")
    common(p)

    p = sub.add_parser("train", help="train the toy model on dataset crops")
    common(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step", type=float, default=0.5)

    p = sub.add_parser("render", help="composite patches into every scene")
    common(p)
    p.add_argument("--patch", action="append", required=True,
                   help="patch PNG (with .json sidecar); repeatable")
    p.add_argument("--relight", choices=_RELIGHT_CHOICES, default="percentile")
    p.add_argument("--geo", choices=_GEO_CHOICES, default="perspective")

    p = sub.add_parser("attack", help="optimize a per-class patch")
    common(p)
    p.add_argument("--class", dest="class_name", required=True,
                   choices=signs.CLASS_NAMES)
    p.add_argument("--model", required=True, help="toy model checkpoint")
    p.add_argument("--attack", dest="algorithm", choices=("rp2", "dpatch"),
                   default="dpatch")
    p.add_argument("--opt", choices=("pgd", "adam"), default="pgd")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--patch-size", choices=tuple(signs.PATCH_SIZES),
                   default="small")
    p.add_argument("--mode", choices=("per-class", "per-instance"),
                   default="per-class")
    p.add_argument("--eot-rot", type=float, default=15.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--lambda-lowfreq", type=float, default=1e-5)
    p.add_argument("--train-images", type=int, default=5)
    p.add_argument("--relight", choices=_RELIGHT_CHOICES, default="percentile",
                   help="relighting used while optimizing (ablation axis)")
    p.add_argument("--geo", choices=_GEO_CHOICES, default="perspective",
                   help="geometric model used while optimizing")

    p = sub.add_parser("eval", help="score clean and patched detection")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--patch", action="append", default=[],
                   help="patch PNG; repeatable, class from sidecar")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--relight", choices=_RELIGHT_CHOICES, default="percentile")
    p.add_argument("--geo", choices=_GEO_CHOICES, default="perspective")

    p = sub.add_parser("realism", help="transform-method realism comparison")
    common(p, needs_dataset=False)
    p.add_argument("--samples", help="sample directory (default: generate "
                                     "synthetic samples)")
    p.add_argument("--n", type=int, default=20,
                   help="synthetic sample count when generating")
    p.add_argument("--sweep", action="store_true",
                   help="run the full method/hyperparameter grid")

    p = sub.add_parser("review", help="serve the annotation review UI")
    common(p)
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    return parser


def _apply_config_file(args: argparse.Namespace, argv) -> None:
    if not getattr(args, "config", None):
        return
    values = _read_config_file(args.config)
    given = {a.split("=")[0].lstrip("-").replace("-", "_")
             for a in argv if a.startswith("--")}
    for key, val in values.items():
        if key in given or not hasattr(args, key):
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            val = val.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            val = int(val)
        elif isinstance(current, float):
            val = float(val)
        setattr(args, key, val)


def _require_dataset(args) -> str:
    root = getattr(args, "dataset", None)
    if not root:
        raise ValueError("no dataset root: pass --dataset or set "
                         "REAPKIT_DATASET")
    if not os.path.isdir(root):
        raise ValueError(f"dataset root {root!r} is not a directory")
    return root


def _write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _input_digest(root) -> str:
    import hashlib
    h = hashlib.sha256()
    ann = dataset.dataset_paths(root)[2]
    if os.path.isfile(ann):
        with open(ann, "rb") as f:
            h.update(f.read())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Subcommand implementations.

def _cmd_annotate(args) -> int:
    root = _require_dataset(args)
    images_dir, masks_dir, ann_path = dataset.dataset_paths(root)
    hints_path = args.hints or os.path.join(root, "hints.csv")
    by_image = {}
    if os.path.isfile(hints_path):
        with open(hints_path, newline="") as f:
            reader = csv.DictReader(f)
            for rec in reader:
                by_image.setdefault(rec["image_id"], []).append(
                    (rec["sign_id"], rec["class"], rec["mask_file"]))
    elif os.path.isfile(ann_path):
        # No hints file: re-annotate from the class/mask hints already in
        # the annotation table (keypoints and relighting are recomputed).
        for r in dataset.load_annotations(ann_path):
            by_image.setdefault(r.image_id, []).append(
                (r.sign_id, r.class_name, r.mask_file))
    else:
        raise ValueError(f"hints file {hints_path} not found and no "
                         "existing annotations to re-annotate")
    rows, diagnostics = [], []
    for image_id in sorted(by_image):
        image = dataset.load_image(os.path.join(images_dir,
                                                f"{image_id}.png"))
        masks = []
        for sign_id, hint, mask_file in by_image[image_id]:
            mask = dataset.load_mask(os.path.join(masks_dir, mask_file))
            masks.append((sign_id, mask, hint, mask_file))
        new_rows, diag = dataset.annotate_auto(image_id, image, masks)
        rows.extend(new_rows)
        diagnostics.extend(diag)
    dataset.save_annotations(rows, ann_path)
    flagged = sum(1 for r in rows if not r.verified)
    _log(f"annotated {len(rows)} signs ({flagged} flagged for review, "
         f"{len(diagnostics)} skipped)")
    for d in diagnostics:
        _log(f"  skipped: {d}")
    return 0


def _cmd_verify(args) -> int:
    root = _require_dataset(args)
    rows = dataset.load_annotations(dataset.dataset_paths(root)[2])
    pending = [r for r in rows if not r.verified]
    _log(f"{len(rows)} annotations, {len(pending)} pending review")
    for r in pending:
        _log(f"  pending: {r.sign_id} ({r.class_name}) {r.note}")
    return 0


def _cmd_train(args) -> int:
    root = _require_dataset(args)
    scenes, _ = dataset.load_scenes(root)
    rng = np.random.default_rng(args.seed)
    crops = []
    for scene in scenes:
        for obj in scene.objects:
            crop = render.extract_crop(scene.image, obj.transform)
            crops.append((crop, signs.class_index(obj.class_name)))
    n_bg = max(2, len(crops) // 10)
    for _ in range(n_bg):
        crops.append((attack._random_background(rng, model_mod.CROP_SIZE),
                      signs.class_index(signs.BACKGROUND_CLASS)))
    victim = model_mod.train_toy(crops, epochs=args.epochs, seed=args.seed,
                                 step=args.step)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "toy-model.bin")
    model_mod.save_model(victim, path)
    acc = model_mod.accuracy(victim, crops)
    _log(f"trained on {len(crops)} crops, accuracy {acc:.3f} -> {path}")
    return 0


def _load_patches(paths) -> dict:
    patches = {}
    for path in paths:
        spec = attack.load_patch(path)
        with open(str(path) + ".json") as f:
            meta = json.load(f)
        patches[meta["class"]] = spec
    return patches


def _cmd_render(args) -> int:
    root = _require_dataset(args)
    scenes, _ = dataset.load_scenes(root)
    scenes = attack.ablate_scenes(
        scenes, "none" if args.relight == "none" else "", args.geo)
    patches = _load_patches(args.patch)
    os.makedirs(args.out, exist_ok=True)
    for scene in scenes:
        out = render.render_all(scene, patches)
        dataset.save_image(out, os.path.join(args.out,
                                             f"{scene.scene_id}.png"))
    _log(f"rendered {len(scenes)} scenes -> {args.out}")
    return 0


def _cmd_attack(args) -> int:
    root = _require_dataset(args)
    scenes, _ = dataset.load_scenes(root)
    victim = model_mod.load_model(args.model)
    cfg = attack.AttackConfig(
        algorithm=args.algorithm, optimizer=args.opt, step_size=args.step,
        iterations=args.iters, lambda_lowfreq=args.lambda_lowfreq,
        mode=args.mode, train_images=args.train_images,
        patch_size=args.patch_size, seed=args.seed)
    eot = attack.EotConfig(rotation_max_deg=args.eot_rot,
                           jitter_strength=args.jitter,
                           noise_strength=args.noise)
    train_scenes = [s for s in scenes
                    if any(o.class_name == args.class_name
                           for o in s.objects)][:cfg.train_images]
    train_scenes = attack.ablate_scenes(
        train_scenes, "none" if args.relight == "none" else "", args.geo)
    os.makedirs(args.out, exist_ok=True)
    if cfg.mode == "per-class":
        patch, trace = attack.generate_patch(train_scenes, args.class_name,
                                             cfg, eot, victim)
        path = os.path.join(args.out, f"patch-{args.class_name}.png")
        attack.save_patch(patch, path, args.class_name, cfg)
        _write_json({"loss_trace": trace, "config_digest": cfg.digest(),
                     "input_digest": _input_digest(root)},
                    os.path.join(args.out, f"patch-{args.class_name}-trace.json"))
        _log(f"patch saved to {path} (final loss {trace[-1]:.4f})"
             if trace else f"patch saved to {path}")
    else:
        patches = attack.generate_instance_patches(
            train_scenes, args.class_name, cfg, eot, victim)
        for object_id, patch in sorted(patches.items()):
            path = os.path.join(args.out, f"patch-{object_id}.png")
            attack.save_patch(patch, path, args.class_name, cfg)
        _log(f"{len(patches)} per-instance patches -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    root = _require_dataset(args)
    scenes, _ = dataset.load_scenes(root)
    scenes = attack.ablate_scenes(
        scenes, "none" if args.relight == "none" else "", args.geo)
    victim = model_mod.load_model(args.model)
    patches = _load_patches(args.patch)
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            chunks = pool.map(
                lambda s: attack.evaluate_scenes([s], patches, victim,
                                                 args.threshold), scenes)
        records = [r for chunk in chunks for r in chunk]
    else:
        records = attack.evaluate_scenes(scenes, patches, victim,
                                         args.threshold)
    by_class = {}
    for r in records:
        by_class.setdefault(r.class_name, []).append(r)
    report = metrics.evaluation_report(by_class)
    if not patches:
        for entry in report["per_class"].values():
            entry.pop("asr", None)
        report.get("aggregate", {}).pop("asr", None)
    report["config"] = {"threshold": args.threshold, "seed": args.seed,
                        "relight": args.relight, "geo": args.geo,
                        "patches": sorted(args.patch)}
    report["input_digest"] = _input_digest(root)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "eval-report.json")
    _write_json(report, path)
    _log(f"evaluated {len(records)} signs -> {path}")
    return 0


def _cmd_realism(args) -> int:
    if args.samples:
        samples = realism.list_samples(args.samples)
    else:
        rng = np.random.default_rng(args.seed)
        # Perspective estimation needs 4 keypoints, so triangle classes
        # (3 keypoints) are excluded from the method comparison.
        classes = [c for c in signs.CLASS_NAMES
                   if signs.SIGN_CLASSES[c].n_keypoints == 4]
        samples = []
        for i in range(args.n):
            s, _ = realism.make_synthetic_sample(classes[i % len(classes)],
                                                 rng)
            samples.append(realism.annotate_keypoint_noise(s, rng))
    if args.sweep:
        report = realism.sweep(samples, trim_grid=realism.TRIM_GRID,
                               percentile_grid=realism.PERCENTILE_GRID)
    else:
        report = realism.sweep(samples, percentile_grid=(0.2,),
                               degree_grid=(1,))
    os.makedirs(args.out, exist_ok=True)
    _write_json(report, os.path.join(args.out, "realism-report.json"))
    _log(realism.format_table(report))
    return 0


def _cmd_review(args) -> int:
    from . import review
    root = _require_dataset(args)
    server = review.make_server(root, host=args.host, port=args.port)
    _log(f"review server on http://{args.host}:{server.server_address[1]}/ "
         f"(ctrl-c to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


_COMMANDS = {
    "annotate": _cmd_annotate,
    "verify": _cmd_verify,
    "train": _cmd_train,
    "render": _cmd_render,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "realism": _cmd_realism,
    "review": _cmd_review,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        _apply_config_file(args, argv)
        return _COMMANDS[args.command](args)
    except (ValueError, ReapkitError) as exc:
        _log(f"error: {exc}")
        return 1
    except OSError as exc:
        _log(f"runtime failure: {exc}")
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
