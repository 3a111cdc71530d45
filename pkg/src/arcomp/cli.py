"""Command-line driver: ``arcomp <command> [options]``.

Commands
    prepare      pack an image tree (or a toy spec) into the binary layout
    train        verification or fullcontext training into a checkpoint dir
    eval         verification accuracy, one-shot ARC or pixel baselines
    probe        per-glimpse-count probe classifiers on a frozen model
    visualize    attention-window frames for one comparison

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures (unreadable data, divergence, I/O).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .data import (MANIFEST, Dataset, fixed_pairs, load_dataset, load_image_tree, make_split, make_toy_dataset,
                   save_packed)
from .errors import ArcError, ConfigError
from .model import ArcModel, compare, read_config
from .oneshot import (FullContextArc, FullContextHead, NaiveArc, RandomClassifier, cosine_classify,
                      evaluate_oneshot, knn_classify, oracle_classify, score_records, write_report)
from .training import (ProbeSet, TrainConfig, load_checkpoint, save_checkpoint, train_full_context,
                       train_probe_classifiers, train_verification)

log = logging.getLogger("arcomp")

EVAL_MODES = ("verification", "oneshot-naive", "oneshot-fullcontext", "baseline-knn", "baseline-cosine",
              "oracle", "random")
SPLITS = ("3020", "301010", "across", "custom")
TOY_KEYS = {"classes": int, "samples": int, "S": int, "seed": int, "jitter": float}


class UsageError(ConfigError):
    pass


class Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- data ---------------------------------------------------------------------------------


def parse_toy(spec: str | None) -> dict:
    """``classes=20,samples=20,S=16,seed=0`` -> keyword arguments."""
    out = {"classes": 20, "samples": 20, "S": 16, "seed": 0}
    for item in filter(None, (spec or "").split(",")):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in TOY_KEYS:
            raise UsageError(f"bad --toy item {item!r}; expected key=value with key in {sorted(TOY_KEYS)}")
        try:
            out[key] = TOY_KEYS[key](value)
        except ValueError as err:
            raise UsageError(f"bad --toy value for {key}: {value!r}") from err
    return out


def toy_from_spec(spec: str | None) -> Dataset:
    kw = parse_toy(spec)
    extra = {"jitter": kw["jitter"]} if "jitter" in kw else {}
    return make_toy_dataset(kw["classes"], kw["samples"], kw["S"], kw["seed"], **extra)


def open_dataset(args) -> Dataset:
    if args.toy is not None and args.data is not None:
        raise UsageError("give either --data or --toy, not both")
    if args.toy is not None:
        return toy_from_spec(args.toy)
    if args.data is None:
        raise UsageError("no dataset: pass --data PATH or --toy SPEC")
    root = Path(args.data)
    if (root / MANIFEST).is_file():
        return load_dataset(root, "packed-binary")
    return load_image_tree(root, args.S or 32)


def splits_for(ds: Dataset, scheme: str | None, seed: int) -> dict[str, np.ndarray]:
    """train / validation / test item indices.

    Schemes without a validation part carve one out of the training
    characters (a tenth of them)."""
    scheme = scheme or ("custom" if not any(ds.origin) else "301010")
    if scheme == "301010":
        return make_split(ds, "301010", seed=seed)
    if scheme == "custom":
        drawers = len(np.unique(ds.drawer))
        if drawers >= 6:
            # held-out drawers of the same characters; two or more per part so
            # positive pairs and drawer-disjoint episodes exist everywhere
            held = max(2, round(0.15 * drawers))
            parts = {"train": drawers - 2 * held, "validation": held, "test": held}
            return make_split(ds, "custom", seed=seed, level="drawer", parts=parts)
        return make_split(ds, "custom", seed=seed, level="character",
                          parts={"train": 0.7, "validation": 0.15, "test": 0.15})
    base = make_split(ds, scheme, seed=seed)
    train_key, test_key = ("background", "evaluation") if scheme == "3020" else ("train", "test")
    pool = ds.subset(base[train_key])
    inner = make_split(pool, "custom", seed=seed, level="character", parts={"train": 0.9, "validation": 0.1})
    return {"train": base[train_key][inner["train"]], "validation": base[train_key][inner["validation"]],
            "test": base[test_key]}


def part(ds: Dataset, args, name: str) -> Dataset:
    return ds.subset(splits_for(ds, args.split, args.split_seed)[name])


# -- models -------------------------------------------------------------------------------


def build_model(args, ds: Dataset) -> ArcModel:
    S = args.S or ds.side
    if S != ds.side:
        raise ConfigError(f"--S {S} does not match the dataset image side {ds.side}")
    return ArcModel(S=S, N=args.N, glimpses=args.glimpses, hidden=args.hidden, seed=args.seed)


def load_model(path, ds: Dataset | None = None):
    if path is None:
        raise UsageError("--ckpt is required for this command")
    model, head, cfg = load_checkpoint(path)
    if ds is not None and model.S != ds.side:
        raise ConfigError(f"checkpoint expects {model.S}x{model.S} images, dataset has {ds.side}x{ds.side}")
    return model, head, cfg


def train_config(args) -> TrainConfig:
    return TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed,
                       eval_interval=args.eval_interval, patience=args.patience, val_pairs=args.val_pairs,
                       augment=not args.no_augment, way=args.way, mode=args.mode,
                       episode_batch=args.episode_batch, val_episodes=args.val_episodes,
                       freeze_arc=args.freeze)


# -- commands -----------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.out is None:
        raise UsageError("prepare needs --out")
    if args.toy is not None:
        ds = open_dataset(args)
    else:
        if args.data is None:
            raise UsageError("prepare needs --data ROOT or --toy SPEC")
        ds = load_image_tree(args.data, args.S or 32)
    save_packed(ds, args.out)
    s = ds.summary()
    print(f"packed alphabets={s['alphabets']} characters={s['characters']} drawings={s['drawings']} "
          f"side={ds.side} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train needs --out CHECKPOINT_DIR")
    ds = open_dataset(args)
    cfg = train_config(args)
    train, validation = part(ds, args, "train"), part(ds, args, "validation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"kind": args.kind, "split": args.split or "", "seed": args.seed, "steps": args.steps}
    if args.kind == "verification":
        model = build_model(args, ds)
        result = train_verification(model, train, validation, cfg, out / "metrics.log")
        save_checkpoint(out, model, extra=extra)
    else:
        if args.init is not None:
            model, _, _ = load_model(args.init, ds)
        else:
            model = build_model(args, ds)
        head = FullContextHead(model.hidden, args.context_hidden, seed=args.seed)
        result = train_full_context(model, head, train, validation, cfg, out / "metrics.log")
        save_checkpoint(out, model, head, extra=extra)
    if result.history:
        plotting.plot_training_curve(result.history, out / "curve.png")
        print(f"best_step={result.best_step} best_val={result.best_val!r} stopped_early={result.stopped_early}")
    else:
        print("no training steps run; wrote untrained checkpoint")
    print(f"checkpoint -> {out}")
    return 0


def _verification_records(model: ArcModel, ds: Dataset, count: int, seed: int):
    xa, xb, y = fixed_pairs(ds, count, seed)
    preds = []
    for start in range(0, count, 256):
        sim, _ = compare(model, xa[start:start + 256], xb[start:start + 256])
        preds.append(np.asarray(sim) > 0.5)
    pred = np.concatenate(preds).astype(int)
    truth = (y > 0.5).astype(int)
    return [(i, int(p), int(t), int(p == t)) for i, (p, t) in enumerate(zip(pred, truth))]


def cmd_eval(args) -> int:
    if args.out is None:
        raise UsageError("eval needs --out REPORT_DIR")
    ds = open_dataset(args)
    test = part(ds, args, args.part)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label, chance = "episode_idx", 1.0 / args.way
    if args.eval_mode == "verification":
        model, _, _ = load_model(args.ckpt, ds)
        result = score_records(_verification_records(model, test, args.episodes, args.seed))
        label, chance = "pair_idx", 0.5
    else:
        if args.eval_mode == "oneshot-naive":
            classifier = NaiveArc(load_model(args.ckpt, ds)[0])
        elif args.eval_mode == "oneshot-fullcontext":
            model, head, _ = load_model(args.ckpt, ds)
            if head is None:
                raise ConfigError(f"{args.ckpt} has no full-context head; train one with 'train fullcontext'")
            classifier = FullContextArc(model, head)
        else:
            classifier = {"baseline-knn": knn_classify, "baseline-cosine": cosine_classify,
                          "oracle": oracle_classify, "random": RandomClassifier(args.seed)}[args.eval_mode]
        result = evaluate_oneshot(classifier, test, args.episodes, seed=args.seed, way=args.way,
                                  mode=args.mode, workers=args.workers)
    write_report(result, out / "report.txt", out / "summary.txt", label=label)
    plotting.plot_running_accuracy([r[3] for r in result.records], out / "accuracy.png", chance=chance)
    print(f"{args.eval_mode}: accuracy={result.accuracy!r} ci95=[{result.ci_low!r}, {result.ci_high!r}] "
          f"n={result.count}")
    return 0


def cmd_probe(args) -> int:
    ds = open_dataset(args)
    model, _, _ = load_model(args.ckpt, ds)
    probes = train_probe_classifiers(model, part(ds, args, "train"), part(ds, args, "test"),
                                     train_pairs=args.train_pairs, test_pairs=args.episodes, seed=args.seed,
                                     shuffle_labels=args.shuffle_labels)
    out = Path(args.out) if args.out is not None else Path(args.ckpt)
    out.mkdir(parents=True, exist_ok=True)
    probes.save(out / "probes.arct")
    lines = ["glimpses\taccuracy"] + [f"{k}\t{a!r}" for k, a in enumerate(probes.accuracies.tolist(), 1)]
    (out / "probe_accuracy.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plotting.plot_probe_accuracy(probes.accuracies, out / "probe_accuracy.png")
    for line in lines[1:]:
        print(line)
    return 0


def read_image(path, S: int) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".arct":
        from .ndcore import load_tensor
        img = load_tensor(path)
        if img.shape != (S, S):
            raise ConfigError(f"{path} holds shape {img.shape}, model wants ({S}, {S})")
        return img
    from .data import _to_unit_image
    return _to_unit_image(path, S)


def step_probe_scores(probes: ProbeSet | None, hidden: list[np.ndarray]) -> list[float] | None:
    """Probe k reads h_{2k}, i.e. the state after step index 2k-1; other steps get nan."""
    if probes is None:
        return None
    scores = []
    for t, h in enumerate(hidden):
        k = (t + 1) // 2
        if t % 2 == 1 and k <= len(probes.coef):
            z = float(((h - probes.mean[k - 1]) / probes.scale[k - 1] * probes.coef[k - 1]).sum()
                      + probes.intercept[k - 1])
            scores.append(1.0 / (1.0 + np.exp(-z)))
        else:
            scores.append(float("nan"))
    return scores


def cmd_visualize(args) -> int:
    if args.out is None:
        raise UsageError("visualize needs --out FRAME_DIR")
    model, _, _ = load_model(args.ckpt)
    if args.image_a is not None and args.image_b is not None:
        xa, xb = read_image(args.image_a, model.S), read_image(args.image_b, model.S)
    elif args.data is not None or args.toy is not None:
        ds = open_dataset(args)
        if ds.side != model.S:
            raise ConfigError(f"checkpoint expects {model.S}x{model.S} images, dataset has {ds.side}x{ds.side}")
        i, j = args.items
        xa, xb = ds.images[i], ds.images[j]
    else:
        raise UsageError("visualize needs --image-a/--image-b or a dataset with --items")
    sim, _, trace = compare(model, xa, xb, with_trace=True)
    probe_path = Path(args.probes) if args.probes else Path(args.ckpt) / "probes.arct"
    probes = ProbeSet.load(probe_path) if probe_path.is_file() else None
    windows = np.array([w[0] for w in trace.windows])
    hidden = [h[0] for h in trace.hidden]
    images = [xa if t % 2 == 0 else xb for t in range(len(windows))]
    scores = step_probe_scores(probes, hidden)
    out = Path(args.out)
    frames = plotting.write_frames(images, windows, model.N, out, scores)
    plotting.plot_trace_grid(images, windows, model.N, out / "trace.png", scores)
    print(f"similarity={sim!r} frames={len(frames)} -> {out}")
    return 0


# -- parser -------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--data", help="image tree or packed dataset directory")
    p.add_argument("--toy", nargs="?", const="", help="built-in toy glyphs, e.g. classes=20,samples=20,S=16,seed=0")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=SPLITS, help="split scheme (default: custom for toy data, 301010 otherwise)")
    p.add_argument("--split-seed", type=int, default=0, help="seed for randomised splits")
    p.add_argument("--S", type=int, help="image side (default: dataset side, 32 for image trees)")
    p.add_argument("--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--N", type=int, default=4, help="glimpse side")
    p.add_argument("--glimpses", type=int, default=8, help="glimpses per image")
    p.add_argument("--hidden", type=int, default=512)


def _episode_flags(p: argparse.ArgumentParser, episodes: int) -> None:
    p.add_argument("--way", type=int, default=20)
    p.add_argument("--mode", choices=("within", "across"), default="within")
    p.add_argument("--episodes", type=int, default=episodes)


def build_parser() -> Parser:
    parser = Parser(prog="arcomp", description="Attentive recurrent comparators on numpy.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("prepare", help="pack a dataset")
    _common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("kind", choices=("verification", "fullcontext"))
    _common(p)
    _model_flags(p)
    _episode_flags(p, 200)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--eval-interval", type=int, default=250)
    p.add_argument("--patience", type=int, default=0)
    p.add_argument("--val-pairs", type=int, default=1000)
    p.add_argument("--val-episodes", type=int, default=200)
    p.add_argument("--episode-batch", type=int, default=4)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--init", help="verification checkpoint to start full-context training from")
    p.add_argument("--freeze", action="store_true", help="keep the comparator fixed in full-context training")
    p.add_argument("--context-hidden", type=int, default=64)
    p.set_defaults(func=cmd_train, way=5)

    p = sub.add_parser("eval", help="evaluate a model or baseline")
    p.add_argument("eval_mode", choices=EVAL_MODES)
    _common(p)
    _episode_flags(p, 1000)
    p.add_argument("--ckpt")
    p.add_argument("--part", choices=("train", "validation", "test"), default="test")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="fit per-glimpse probe classifiers")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-pairs", type=int, default=4000)
    p.add_argument("--episodes", type=int, default=2000, help="test pairs")
    p.add_argument("--shuffle-labels", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("visualize", help="attention frames for one comparison")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    p.add_argument("--items", type=int, nargs=2, default=(0, 1), metavar=("I", "J"))
    p.add_argument("--probes", help="probe file (default: <ckpt>/probes.arct when present)")
    p.set_defaults(func=cmd_visualize)
    return parser


_TRUE = {"1", "true", "yes", "on"}


def apply_config(parser: Parser, argv: list[str]) -> None:
    """Feed a ``--config`` file in as subcommand defaults so flags still win."""
    if "--config" not in argv:
        return
    pos = argv.index("--config")
    if pos + 1 >= len(argv):
        parser.error("--config needs a path")
    path = Path(argv[pos + 1])
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = read_config(path)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subparsers.choices:
        return
    target = subparsers.choices[command]
    known = {a.dest: a for a in target._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"{path}: unknown key {key!r}")
        action = known[dest]
        try:
            defaults[dest] = _convert(action, value)
        except ValueError as err:
            raise ConfigError(f"{path}: bad value for {key!r}: {value!r}") from err
    target.set_defaults(**defaults)


def _convert(action: argparse.Action, value: str):
    if isinstance(action, argparse._StoreTrueAction):
        return value.strip().lower() in _TRUE
    convert = action.type or str
    if action.nargs not in (None, "?"):
        return [convert(v) for v in value.split()]
    if action.choices is not None and convert(value) not in action.choices:
        raise ValueError(value)
    return convert(value)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        apply_config(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as stop:
            return int(stop.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except ConfigError as err:
        print(f"arcomp: configuration error: {err}", file=sys.stderr)
        return 1
    except (ArcError, OSError) as err:
        print(f"arcomp: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
