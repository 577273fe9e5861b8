"""
camspoof command line: synth, train, attack, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
JSON object on stderr. Every command accepts ``--config FILE`` holding
``key=value`` lines; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, evaluation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ModelConfig, build_model, evaluate, predict
from .patches import (
    SPLITS, group_by_image, majority_vote, patches_from_manifest, split_by_image, stack,
)
from .seeding import sub_seed
from .synth import DatasetManifest, build_dataset, make_profiles
from .training import train

PATH_KEYS = {"config", "manifest", "model", "out"}
REQUIRED = {
    "synth": ("out",),
    "train": ("manifest", "out"),
    "attack": ("model", "manifest", "mode", "out"),
    "eval": ("model", "manifest"),
}


class UsageError(Exception):
    pass


def _emit_error(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message), "exit_code": code}), file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.exit(_emit_error("usage", message, 2))


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser():
    p = _Parser(prog="camspoof", description="Camera-model detector training and adversarial attacks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value file; explicit flags override it")
        sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        return sp

    s = command("synth", "render a synthetic camera-model dataset")
    s.add_argument("--models", type=_positive_int, default=4)
    s.add_argument("--images", type=int, default=30, help="images per model (>= 3)")
    s.add_argument("--out", help="output directory (required)")
    s.add_argument("--width", type=int, default=192)
    s.add_argument("--height", type=int, default=192)
    s.add_argument("--prnu-strength", type=float, default=0.02)

    t = command("train", "train the patch classifier")
    t.add_argument("--manifest", help="dataset manifest (required)")
    t.add_argument("--patches-per-image", type=_positive_int, default=16)
    t.add_argument("--epochs", type=_positive_int, default=10)
    t.add_argument("--batch-size", type=_positive_int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--num-blocks", type=_positive_int, default=2)
    t.add_argument("--layers-per-block", type=_positive_int, default=3)
    t.add_argument("--growth-rate", type=_positive_int, default=12)
    t.add_argument("--initial-channels", type=_positive_int, default=16)
    t.add_argument("--out", help="checkpoint path (required)")

    a = command("attack", "attack correctly classified test patches")
    a.add_argument("--model", help="checkpoint (required)")
    a.add_argument("--manifest", help="dataset manifest (required)")
    a.add_argument("--mode", choices=("fgsm", "jsma"), help="attack kind (required)")
    a.add_argument("--epsilon", type=float, help="FGSM step (default 0.005)")
    a.add_argument("--target", type=int, help="JSMA target class (default: every class)")
    a.add_argument("--theta", type=float, help="JSMA per-pixel offset (default 1.0)")
    a.add_argument("--gamma", type=float, help="JSMA feature budget fraction (default 0.10)")
    a.add_argument("--limit", type=_positive_int, help="attack only the first N eligible patches")
    a.add_argument("--requantize", action="store_true", help="also re-measure after an 8-bit round trip")
    a.add_argument("--out", help="output directory (required)")

    e = command("eval", "clean accuracies, majority vote and optional sweeps")
    e.add_argument("--model", help="checkpoint (required)")
    e.add_argument("--manifest", help="dataset manifest (required)")
    e.add_argument("--sweep", action="store_true", help="write epsilon and target sweep tables")
    e.add_argument("--limit", type=_positive_int, help="sweep only the first N eligible patches")
    e.add_argument("--out", default=".", help="directory for sweep tables")
    return p, sub


def _read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = sub.choices[args.command]
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, value in _read_config(args.config).items():
            if key not in actions or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if isinstance(actions[key], argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
        for key in defaults:
            choices = actions[key].choices
            if choices and getattr(args, key) not in choices:
                raise UsageError(f"config value {key}={getattr(args, key)} not in {sorted(choices)}")
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")
    return args


def provenance(args):
    """Flag record without paths, so outputs do not depend on where they are written."""
    items = sorted((k, v) for k, v in vars(args).items() if k not in PATH_KEYS and k != "command" and v is not None)
    return f"camspoof {args.command} " + " ".join(f"{k}={v}" for k, v in items)


def _load_manifest(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"manifest not found: {path}")
    return DatasetManifest.load(p)


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, with_metadata=True)


def _split_sets(manifest, seed, k, labels):
    split = split_by_image(manifest, seed=sub_seed(seed, "split"))
    records = patches_from_manifest(manifest, k, sub_seed(seed, "patching"), labels)
    return {s: [r for r in records if split[r.image_id] == s] for s in SPLITS}


def _threads():
    raw = os.environ.get("CAMSPOOF_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"CAMSPOOF_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.images < 3:
        raise UsageError(f"--images {args.images}: need at least 3 images per model for a train/val/test split")
    if args.width < 32 or args.height < 32 or args.width % 2 or args.height % 2:
        raise UsageError("--width and --height must be even and at least 32")
    profiles = make_profiles(args.models, sub_seed(args.seed, "dataset"), args.prnu_strength)
    manifest = build_dataset(profiles, args.images, args.out, sub_seed(args.seed, "dataset"), args.width, args.height)
    print(json.dumps({"images": len(manifest.entries), "models": manifest.model_ids, "manifest": "manifest.jsonl"}))
    return 0


def cmd_train(args):
    manifest = _load_manifest(args.manifest)
    classes = manifest.model_ids
    if len(classes) < 2:
        raise UsageError("the manifest must hold at least two camera models")
    labels = {m: i for i, m in enumerate(classes)}
    sets = _split_sets(manifest, args.seed, args.patches_per_image, labels)
    arrays = {s: stack(v) for s, v in sets.items()}
    config = ModelConfig(
        num_classes=len(classes), num_blocks=args.num_blocks, layers_per_block=args.layers_per_block,
        growth_rate=args.growth_rate, initial_channels=args.initial_channels, seed=sub_seed(args.seed, "init"),
    )

    def report(row):
        print(json.dumps(row, sort_keys=True), flush=True)

    best, history = train(
        build_model(config), arrays["train"], arrays["val"], epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, seed=sub_seed(args.seed, "train"), on_epoch=report,
    )
    best_epoch = min(history, key=lambda r: r["val_loss"])["epoch"]
    metadata = {
        "seed": args.seed,
        "patches_per_image": args.patches_per_image,
        "classes": classes,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "best_epoch": best_epoch,
        "history": history,
    }
    save_checkpoint(best, args.out, metadata)
    return 0


def _eligible_test_patches(model, meta, manifest, limit=None):
    classes = meta.get("classes") or manifest.model_ids
    labels = {m: i for i, m in enumerate(classes)}
    unknown = set(manifest.model_ids) - set(labels)
    if unknown:
        raise UsageError(f"manifest models {sorted(unknown)} are not in the checkpoint's classes")
    seed = meta.get("seed", 0)
    k = meta.get("patches_per_image", 16)
    test = _split_sets(manifest, seed, k, labels)["test"]
    x, y = stack(test)
    keep, xc, yc = evaluation.filter_correct(model, x, y)
    records = [test[i] for i in keep]
    if limit is not None:
        records, xc, yc = records[:limit], xc[:limit], yc[:limit]
    return records, xc, yc, classes


def _write_outcomes(path, outcomes, records):
    with open(path, "w") as f:
        for o, r in zip(outcomes, records):
            f.write(json.dumps(o.log_row(r.image_id, r.patch_index, r.true_label), sort_keys=True) + "\n")


def _requantized_row(model, outcomes, true_labels):
    adv = np.stack([attacks.requantize_u8(o.adversarial) for o in outcomes])
    after, conf = predict(model, adv)
    if outcomes[0].kind == "jsma":
        flips = after == outcomes[0].target
    else:
        flips = after != np.asarray(true_labels)
    return {"requantized_error_rate_pct": round(100 * float(flips.mean()), 1),
            "requantized_confidence_pct": round(100 * float(conf.mean()), 1)}


def cmd_attack(args):
    if args.mode == "fgsm":
        bad = [f for f in ("target", "theta", "gamma") if getattr(args, f) is not None]
        if bad:
            raise UsageError(f"--{bad[0]} is a JSMA flag and cannot be combined with --mode fgsm")
        eps = 0.005 if args.epsilon is None else args.epsilon
        if not 0 < eps <= 0.1:
            raise UsageError("--epsilon must lie in (0, 0.1]")
    else:
        if args.epsilon is not None:
            raise UsageError("--epsilon is an FGSM flag and cannot be combined with --mode jsma")
        theta = 1.0 if args.theta is None else args.theta
        gamma = 0.10 if args.gamma is None else args.gamma
        if theta <= 0:
            raise UsageError("--theta must be positive")
        if not 0 < gamma <= 1:
            raise UsageError("--gamma must lie in (0, 1]")
    model, meta = _load_model(args.model)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, x, y, classes = _eligible_test_patches(model, meta, manifest, args.limit)
    prov = provenance(args)
    summary = {"mode": args.mode, "population": len(records)}

    if args.mode == "fgsm":
        stem = f"fgsm_eps{eps:g}_seed{args.seed}"
        outcomes = attacks.fgsm_attack_set(model, x, eps)
        _write_outcomes(out / f"{stem}.jsonl", outcomes, records)
        table = evaluation.SweepTable("epsilon")
        table.add(eps, evaluation.compute_report(outcomes, y.tolist()))
        attacks.export_triptych(model, x[0], outcomes[0].label_before, eps, out / f"{stem}_triptych.png")
        rows = [(outcomes, y.tolist())]
    else:
        if args.target is not None and not 0 <= args.target < model.config.num_classes:
            raise UsageError(f"--target {args.target} outside [0, {model.config.num_classes})")
        targets = range(model.config.num_classes) if args.target is None else [args.target]
        stem = f"jsma_target{'all' if args.target is None else args.target}_theta{theta:g}_gamma{gamma:g}_seed{args.seed}"
        collected = []
        log_rows = []

        def on_row(t, sel, outcomes):
            collected.append((outcomes, y[sel].tolist()))
            log_rows.extend(zip(outcomes, [records[i] for i in sel]))

        table = evaluation.target_sweep(model, x, y, theta, gamma, targets, on_row)
        _write_outcomes(out / f"{stem}.jsonl", [o for o, _ in log_rows], [r for _, r in log_rows])
        mismatches = attacks.verify_targets(model, [o for o, _ in log_rows])
        summary["verify_mismatches"] = mismatches
        rows = collected
    evaluation.export_report(table, out / f"{stem}.csv", "csv", prov)
    evaluation.export_report(table, out / f"{stem}.json", "json", prov)
    summary["rows"] = [dict(zip(evaluation.COLUMNS, r)) for r in evaluation.table_rows(table)]
    if args.requantize:
        summary["requantized"] = [_requantized_row(model, o, t) for o, t in rows]
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args):
    model, meta = _load_model(args.model)
    manifest = _load_manifest(args.manifest)
    classes = meta.get("classes") or manifest.model_ids
    labels = {m: i for i, m in enumerate(classes)}
    sets = _split_sets(manifest, meta.get("seed", 0), meta.get("patches_per_image", 16), labels)
    result = {}
    for name in SPLITS:
        x, y = stack(sets[name])
        _, acc = evaluate(model, x, y)
        result[f"{name}_accuracy"] = round(acc, 6)
        pred, _ = predict(model, x)
        groups = group_by_image(sets[name])
        pos = 0
        hits = 0
        for iid, recs in groups.items():
            winner, _ = majority_vote(pred[pos:pos + len(recs)])
            hits += winner == recs[0].true_label
            pos += len(recs)
        result[f"{name}_image_accuracy"] = round(hits / len(groups), 6)
    if args.sweep:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _, xc, yc, _ = _eligible_test_patches(model, meta, manifest, args.limit)
        prov = provenance(args)
        eps_table = evaluation.epsilon_sweep(model, xc, yc)
        evaluation.export_report(eps_table, out / f"sweep_fgsm_eps0.001-0.01_seed{args.seed}.csv", "csv", prov)
        tgt_table = evaluation.target_sweep(model, xc, yc)
        evaluation.export_report(tgt_table, out / f"sweep_jsma_targets_seed{args.seed}.csv", "csv", prov)
        result["epsilon_rows"] = len(eps_table.rows)
        result["target_rows"] = len(tgt_table.rows)
    print(json.dumps(result, sort_keys=True))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        try:
            args = parse_args(argv)
        except SystemExit as exc:
            return exc.code
        with _threads():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        return _emit_error("usage", exc, 2)
    except (CheckpointError, evaluation.EmptyPopulationError, ValueError, OSError) as exc:
        return _emit_error(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
