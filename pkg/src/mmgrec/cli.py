"""Command-line entry point: synth | prep | train | eval | recommend.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ingest
from .config import TrainConfig
from .errors import ConfigError, MMGRecError, ShapeError
from .evaluation import evaluate
from .graph import build_graph
from .model import ScoringMode, item_embeddings, user_vectors
from .train import fit, load_checkpoint, save_checkpoint

log = logging.getLogger("mmgrec")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(MMGRecError):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _add_shared(p, out_required=False):
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out", type=Path, required=out_required)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--config", type=Path, help="key=value file; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_data(p, features=True):
    p.add_argument("--interactions", type=Path, required=True)
    if features:
        p.add_argument("--img-features", type=Path, required=True)
        p.add_argument("--txt-features", type=Path, required=True)
        p.add_argument("--item-map", type=Path,
                       help="item token per feature row (default: items.txt beside the feature file)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmgrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a clustered synthetic corpus")
    _add_shared(p, out_required=True)
    p.add_argument("--users", type=_positive_int, default=50)
    p.add_argument("--items", type=_positive_int, default=100)
    p.add_argument("--per-user", type=_positive_int, default=8)
    p.add_argument("--d-img", type=_positive_int, default=64)
    p.add_argument("--d-txt", type=_positive_int, default=32)
    p.add_argument("--clusters", type=_positive_int, default=5)
    p.add_argument("--feature-noise", type=_nonneg_float, default=0.5)
    p.add_argument("--noise-modality", choices=["image", "text"])

    p = sub.add_parser("prep", help="preprocess interactions and write the encoded split")
    _add_shared(p, out_required=True)
    _add_data(p, features=False)
    p.add_argument("--k-core", type=_positive_int, default=5)
    p.add_argument("--validation", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("train", help="train and keep the best validation checkpoint")
    _add_shared(p, out_required=True)
    _add_data(p)
    defaults = TrainConfig()
    p.add_argument("--d", type=_positive_int, default=defaults.d)
    p.add_argument("--gcn-layers", type=_nonneg_int, default=defaults.gcn_layers)
    p.add_argument("--lr", type=_nonneg_float, default=defaults.lr)
    p.add_argument("--batch-size", type=_positive_int, default=defaults.batch_size)
    p.add_argument("--neg-ratio", type=_positive_int, default=defaults.neg_ratio)
    p.add_argument("--max-epochs", type=_positive_int, default=defaults.max_epochs)
    p.add_argument("--patience", type=_positive_int, default=defaults.patience)
    p.add_argument("--eval-ks", type=_positive_int, nargs="+", default=list(defaults.eval_ks))
    p.add_argument("--eval-negatives", type=_positive_int, default=defaults.eval_negatives)
    p.add_argument("--hidden", type=_positive_int, default=defaults.hidden)
    p.add_argument("--scoring", choices=[m.value for m in ScoringMode], default=defaults.scoring.value)
    p.add_argument("--k-core", type=_positive_int, default=defaults.k_core)
    p.add_argument("--fixed-gate", type=float, default=None, help="replace the learned gate by a constant")
    p.add_argument("--early-stopping", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out test items")
    _add_shared(p)
    _add_data(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--holdout", choices=["test", "validation"], default="test")
    p.set_defaults(seed=None)

    p = sub.add_parser("recommend", help="top-K unseen items for one user")
    _add_shared(p)
    _add_data(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=_positive_int, default=defaults.eval_ks[-1])
    p.set_defaults(seed=None)
    return parser


def _read_config_file(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    # Re-parse with file values as defaults so explicit flags still win.
    file_values = _read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in file_values.items():
        if key not in actions:
            raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        action = actions[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs == "+":
            value = [action.type(v) for v in raw.replace(",", " ").split()]
        else:
            value = action.type(raw) if action.type else raw
        sub.set_defaults(**{key: value})
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# shared pipeline pieces


def _load_split(path, seed, k_core, with_validation=True):
    raw = ingest.load_interactions(path)
    return ingest.preprocess(raw, seed, k_core, with_validation)


def _load_features(path: Path, maps: ingest.IdMaps, item_map: Path | None) -> np.ndarray:
    fm = ingest.load_feature_matrix(path, normalize=True)
    map_path = item_map or path.parent / "items.txt"
    if map_path.exists():
        fm = ingest.align_features(fm, ingest.load_item_map(map_path), maps)
    elif fm.n_items != maps.n_items:
        raise ShapeError(f"{path}: {fm.n_items} rows but {maps.n_items} items and no item map")
    return fm.rows


def _write_text(path: Path, text: str, created: list):
    path.write_text(text, encoding="utf-8")
    created.append(path)


def _checkpoint_context(args):
    ckpt = load_checkpoint(args.checkpoint)
    try:
        config = TrainConfig.from_dict(json.loads(ckpt.config))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{args.checkpoint}: unreadable config echo ({exc})") from None
    split, maps = _load_split(args.interactions, config.seed, config.k_core)
    x_img = _load_features(args.img_features, maps, args.item_map)
    x_txt = _load_features(args.txt_features, maps, args.item_map)
    dims = ckpt.params.dims
    data_dims = {"n_users": maps.n_users, "n_items": maps.n_items,
                 "d_img": x_img.shape[1], "d_txt": x_txt.shape[1]}
    for key, value in data_dims.items():
        if dims[key] != value:
            raise ShapeError(f"checkpoint {key}={dims[key]} but data {key}={value}")
    return ckpt, config, split, maps, x_img, x_txt


# --------------------------------------------------------------------------
# subcommands


def run_synth(args):
    if args.per_user > args.items:
        raise UsageError(f"--per-user {args.per_user} exceeds --items {args.items}")
    raw, img, txt = ingest.synth_generate(
        args.users, args.items, args.per_user, args.d_img, args.d_txt, args.seed,
        n_clusters=args.clusters, feature_noise=args.feature_noise, noise_modality=args.noise_modality,
    )
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ingest.save_interactions(out / "interactions.tsv", raw)
    ingest.save_feature_matrix(out / "image.mmf", img.rows)
    ingest.save_feature_matrix(out / "text.mmf", txt.rows)
    ingest.save_item_map(out / "items.txt", [ingest.item_token(r) for r in range(args.items)])
    manifest = {
        "generator": "clustered", "users": args.users, "items": args.items, "per_user": args.per_user,
        "d_img": args.d_img, "d_txt": args.d_txt, "clusters": args.clusters,
        "feature_noise": args.feature_noise, "noise_modality": args.noise_modality, "seed": args.seed,
        "files": ["interactions.tsv", "image.mmf", "text.mmf", "items.txt"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"written": str(out), "interactions": len(raw)}))


def run_prep(args):
    split, maps = _load_split(args.interactions, args.seed, args.k_core, args.validation)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    created = []
    _write_text(out / "user_map.txt", "".join(t + "\n" for t in maps.user_tokens), created)
    _write_text(out / "item_map.txt", "".join(t + "\n" for t in maps.item_tokens), created)
    rows = zip(split.train_users.tolist(), split.train_items.tolist(), split.train_times.tolist())
    _write_text(out / "train.tsv", "".join(f"{u}\t{i}\t{t}\n" for u, i, t in rows), created)
    _write_text(out / "validation.tsv",
                "".join(f"{u}\t{i}\n" for u, i in zip(split.valid_users.tolist(), split.valid_items.tolist())),
                created)
    rows = zip(split.test_users.tolist(), split.test_items.tolist(), split.test_times.tolist())
    _write_text(out / "test.tsv", "".join(f"{u}\t{i}\t{t}\n" for u, i, t in rows), created)
    summary = {"users": maps.n_users, "items": maps.n_items, "train": split.n_train,
               "validation": int(split.valid_users.size), "test": int(split.test_users.size),
               "k_core": args.k_core, "seed": args.seed}
    _write_text(out / "prep.json", json.dumps(summary, sort_keys=True) + "\n", created)
    print(json.dumps(summary, sort_keys=True))


def run_train(args):
    config = TrainConfig(
        d=args.d, gcn_layers=args.gcn_layers, lr=args.lr, batch_size=args.batch_size,
        neg_ratio=args.neg_ratio, max_epochs=args.max_epochs, patience=args.patience,
        eval_ks=tuple(args.eval_ks), seed=args.seed, scoring=args.scoring, hidden=args.hidden,
        eval_negatives=args.eval_negatives, k_core=args.k_core, fixed_gate=args.fixed_gate,
        early_stopping=args.early_stopping,
    )
    split, maps = _load_split(args.interactions, config.seed, config.k_core)
    x_img = _load_features(args.img_features, maps, args.item_map)
    x_txt = _load_features(args.txt_features, maps, args.item_map)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    created = []
    try:
        log_path = out / "train_log.jsonl"
        created.append(log_path)
        with open(log_path, "w", encoding="utf-8") as log_fh:
            def on_epoch(record):
                line = json.dumps(record)
                print(line, flush=True)
                log_fh.write(line + "\n")
                log_fh.flush()

            best, _ = fit(split, x_img, x_txt, config, on_epoch=on_epoch)
        ckpt_path = out / "checkpoint.mmck"
        created.append(ckpt_path)
        save_checkpoint(ckpt_path, best)
        # Report on the stored (32-bit) weights so it matches what eval will see.
        stored = load_checkpoint(ckpt_path)
        report = evaluate(stored.params, split, x_img, x_txt, config, holdout="validation")
        _write_text(out / "valid_report.json", report.to_json() + "\n", created)
        _write_text(out / "user_map.txt", "".join(t + "\n" for t in maps.user_tokens), created)
        _write_text(out / "item_map.txt", "".join(t + "\n" for t in maps.item_tokens), created)
    except BaseException:
        for path in created:
            path.unlink(missing_ok=True)
        raise
    print(json.dumps({"checkpoint": str(ckpt_path), "best_epoch": best.epoch,
                      "best_valid_recall@10": best.best_valid_recall}))


def run_eval(args):
    ckpt, config, split, _, x_img, x_txt = _checkpoint_context(args)
    # Without --seed, candidates are drawn with the training seed.
    report = evaluate(ckpt.params, split, x_img, x_txt, config, holdout=args.holdout, seed=args.seed)
    text = report.to_json()
    print(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"eval_{args.holdout}.json").write_text(text + "\n", encoding="utf-8")
    return report


def run_recommend(args):
    ckpt, config, split, maps, x_img, x_txt = _checkpoint_context(args)
    if args.user not in maps.user_index:
        raise UsageError(f"unknown user {args.user!r}")
    u = maps.user_index[args.user]
    graph = build_graph(split.train_users, split.train_items, split.n_users, split.n_items)
    z = item_embeddings(ckpt.params, x_img, x_txt, config.fixed_gate)
    p = user_vectors(ckpt.params, graph, config.scoring, config.gcn_layers)[u]
    items = np.setdiff1d(np.arange(split.n_items), list(split.train_pos[u]))
    scores = z[items] @ p
    order = np.lexsort((items, -scores))[: args.k]
    rows = [{"item": maps.item_tokens[int(items[j])], "score": float(scores[j])} for j in order]
    for row in rows:
        print(json.dumps(row))
    return rows


COMMANDS = {"synth": run_synth, "prep": run_prep, "train": run_train, "eval": run_eval,
            "recommend": run_recommend}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, OSError, ValueError) as exc:
        print(f"mmgrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"mmgrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MMGRecError, OSError) as exc:
        print(f"mmgrec: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
