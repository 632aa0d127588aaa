"""Command-line entry point: ``shortcut-poison <verb> [flags]``.

Every verb accepts ``--config FILE`` (UTF-8 ``key = value`` lines, ``#``
comments; keys are flag names with or without dashes) and ``--threads N``.
Flags given on the command line override the file. Usage errors exit with
status 2, failures inside a command with status 1.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

__all__ = ["build_parser", "parse", "execute", "main", "parse_fraction", "read_config"]


class UsageError(Exception):
    pass


def parse_fraction(text: str) -> float:
    """``"6/255"`` or ``"0.0235"`` -> float; must be positive."""
    try:
        value = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _int_at_least(low):
    def conv(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
        if value < low:
            raise argparse.ArgumentTypeError(f"must be >= {low}, got {value}")
        return value
    conv.__name__ = f"int>={low}"
    return conv


def _unit_interval(text):
    try:
        value = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _shape(text):
    values = _int_list(text)
    if len(values) != 3 or min(values) < 1:
        raise argparse.ArgumentTypeError(f"shape must be c,h,w with positive entries, got {text!r}")
    return tuple(values)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

pos_int = _int_at_least(1)
nonneg_int = _int_at_least(0)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; command-line flags take precedence")
    p.add_argument("--threads", type=pos_int, default=1, help="worker threads (1 = deterministic path)")


def _data_flags(p, seed_default=3):
    p.add_argument("--data", default="shapes", help="'shapes' or a CIFAR-10 binary directory")
    p.add_argument("--n-train", type=pos_int, default=500, help="training images per class")
    p.add_argument("--n-test", type=pos_int, default=200, help="test images per class")
    p.add_argument("--seed", type=int, default=seed_default)


def _train_flags(p):
    p.add_argument("--epochs", type=nonneg_int, default=30)
    p.add_argument("--lr", type=parse_fraction, default=0.02)
    p.add_argument("--crop-pad", type=nonneg_int, default=4)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--cutout", type=nonneg_int, default=0)
    p.add_argument("--mixup", type=float, default=0.0)


def _poison_flags(p, allow_none):
    choices = ("none", "full", "classes", "fraction") if allow_none else ("full", "classes", "fraction")
    p.add_argument("--poison", "--mode", dest="poison", choices=choices, default="none" if allow_none else "full")
    p.add_argument("--perts", type=Path, help="perturbation file; synthesized from --seed when omitted")
    p.add_argument("--classes", type=_int_list, default=[0, 1, 2], help="classes to poison (mode 'classes')")
    p.add_argument("--fraction", type=_unit_interval, default=0.5, help="poisoned share (mode 'fraction')")
    p.add_argument("--no-padding", action="store_true", help="synthesize without patch expansion")
    p.add_argument("--p", type=pos_int, default=8)
    p.add_argument("--eps", type=parse_fraction, default=6 / 255)
    p.add_argument("--quantize", action="store_true", help="round poisoned images to 8-bit levels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortcut-poison", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", metavar="verb")
    sub.required = True

    p = sub.add_parser("generate", help="synthesize a perturbation set")
    p.add_argument("--k", type=_int_at_least(2), default=10)
    p.add_argument("--n", type=pos_int, default=500, help="samples per class")
    p.add_argument("--w", type=pos_int, default=32)
    p.add_argument("--h", type=pos_int, default=32)
    p.add_argument("--c", type=pos_int, default=3)
    p.add_argument("--p", type=pos_int, default=8)
    p.add_argument("--eps", type=parse_fraction, default=6 / 255)
    p.add_argument("--side-scale", type=parse_fraction, default=6.0)
    p.add_argument("--no-padding", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("perts.sprt"))
    p.add_argument("--ppm-dir", type=Path, help="also write the first sample of every class as PPM")
    _common(p)

    p = sub.add_parser("poison", help="poison a training set and save it")
    _data_flags(p)
    _poison_flags(p, allow_none=False)
    p.add_argument("--out", type=Path, default=Path("poisoned"), help="output directory")
    p.add_argument("--ppm-count", type=nonneg_int, default=4, help="poisoned samples exported as PPM")
    _common(p)

    p = sub.add_parser("probe", help="linear / two-layer separability report")
    p.add_argument("--perts", type=Path, help="perturbation file")
    p.add_argument("--raw", type=Path, help="external raw float32 tensor (instead of --perts)")
    p.add_argument("--labels", type=Path, help="uint16 labels for --raw")
    p.add_argument("--shape", type=_shape, default=(3, 32, 32), help="c,h,w of --raw samples")
    p.add_argument("--steps", type=pos_int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("probe_report.csv"))
    _common(p)

    p = sub.add_parser("train", help="train the small CNN on clean or poisoned data")
    _data_flags(p)
    _poison_flags(p, allow_none=True)
    _train_flags(p)
    p.add_argument("--out", type=Path, default=Path("train_run.csv"))
    _common(p)

    p = sub.add_parser("embed", help="t-SNE of a perturbation set")
    p.add_argument("--perts", type=Path, required=False, help="perturbation file")
    p.add_argument("--classes", type=_int_list, default=[0, 1, 2], help="classes to keep")
    p.add_argument("--per-class", type=pos_int, default=500, help="samples kept per class")
    p.add_argument("--perplexity", type=parse_fraction, default=30.0)
    p.add_argument("--iters", type=pos_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("embedding.csv"))
    _common(p)

    p = sub.add_parser("bench", help="time perturbation synthesis")
    p.add_argument("--n-list", type=_int_list, default=[10000, 40000, 50000])
    p.add_argument("--p-list", type=_int_list, default=[4, 8])
    p.add_argument("--shape", type=_shape, default=(3, 32, 32))
    p.add_argument("--repeats", type=pos_int, default=3)
    p.add_argument("--out", type=Path, default=Path("bench.csv"))
    _common(p)

    p = sub.add_parser("ablate", help="padded vs no-padding perturbations under crop+flip")
    _data_flags(p)
    p.add_argument("--epochs", type=nonneg_int, default=30)
    p.add_argument("--lr", type=parse_fraction, default=0.02)
    p.add_argument("--out-dir", type=Path, default=Path("ablation"))
    _common(p)
    return parser


def read_config(path) -> dict[str, str]:
    """Parse a ``key = value`` file; later keys win."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _subparser(parser, verb) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if verb in action.choices:
            return action.choices[verb]
    raise KeyError(verb)


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for '{sub.prog}'")
        if isinstance(action, argparse._StoreTrueAction):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} expects true/false, got {raw!r}")
            defaults[key] = low in _TRUE
        else:
            defaults[key] = raw  # strings are converted by argparse like command-line values
    sub.set_defaults(**defaults)


def parse(argv) -> argparse.Namespace:
    """Parse ``argv``; exits with status 2 on any usage error."""
    argv = list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.verb)
        try:
            _apply_config(sub, read_config(args.config))
        except UsageError as exc:
            sub.error(str(exc))
        args = parser.parse_args(argv)
    _check(parser, args)
    return args


def _check(parser, args) -> None:
    sub = _subparser(parser, args.verb)
    if args.verb == "probe":
        if (args.perts is None) == (args.raw is None):
            sub.error("give exactly one of --perts or --raw")
        if args.raw is not None and args.labels is None:
            sub.error("--raw needs --labels")
    if args.verb == "embed" and args.perts is None:
        sub.error("--perts is required")
    if getattr(args, "mixup", 0.0) < 0:
        sub.error("--mixup must be >= 0")


# execution ---------------------------------------------------------------


def _set_threads(n: int) -> None:
    from threadpoolctl import threadpool_limits
    import torch

    threadpool_limits(n)
    torch.set_num_threads(n)


def _load_perts(path):
    from .dataio import load_perts

    return load_perts(path)


def _plan(args):
    from .poison import PoisonPlan

    if args.poison == "none":
        return None
    return PoisonPlan(args.poison, frozenset(args.classes), args.fraction, args.seed, args.quantize)


def _data_and_perts(args):
    from .experiments import load_data, perturbations_for

    train_set, test_set = load_data(args.data, args.seed, args.n_train, args.n_test)
    perts = None
    if args.poison != "none":
        if args.perts is not None:
            perts = _load_perts(args.perts)
        else:
            perts = perturbations_for(train_set, args.seed, p=args.p, eps=args.eps,
                                      padding=not args.no_padding)
    return train_set, test_set, perts


def _cmd_generate(args):
    from .dataio import export_ppm, save_perts
    from .shortgen import SynthConfig, synthesize

    cfg = SynthConfig(k=args.k, counts=args.n, w=args.w, h=args.h, c=args.c, p=args.p,
                      eps_prime=args.eps, side_scale=args.side_scale, seed=args.seed,
                      padding_enabled=not args.no_padding)
    perts = synthesize(cfg)
    save_perts(perts, args.out)
    if args.ppm_dir is not None:
        args.ppm_dir.mkdir(parents=True, exist_ok=True)
        if args.c != 3:
            raise ValueError("--ppm-dir needs c = 3")
        for cls in range(args.k):
            first = int(np.flatnonzero(perts.labels == cls)[0])
            # shift from [-a, a] to [0, 1] so the pattern is visible
            img = perts.data[first].astype(np.float64)
            span = max(float(np.abs(img).max()), 1e-12)
            export_ppm(0.5 + 0.5 * img / span, args.ppm_dir / f"class{cls}.ppm")
    return f"generate: wrote {len(perts)} perturbations of shape {perts.shape} to {args.out}"


def _cmd_poison(args):
    from .dataio import export_ppm, save_image_set
    from .poison import apply_plan

    train_set, _, perts = _data_and_perts(args)
    poisoned, index = apply_plan(train_set, perts, _plan(args))
    save_image_set(poisoned, args.out)
    if poisoned.shape[0] == 3:
        for i in index[: args.ppm_count]:
            export_ppm(poisoned.images[i], args.out / f"sample{int(i)}.ppm")
    return f"poison: {index.size} of {len(poisoned)} images poisoned ({args.poison}); saved to {args.out}"


def _cmd_probe(args):
    from .dataio import import_external_perturbations, write_csv
    from .numcore import Prng
    from .probe import ProbeReport, fit_linear, fit_two_layer, prepare_features, shuffled_label_control

    if args.perts is not None:
        perts = _load_perts(args.perts)
    else:
        perts = import_external_perturbations(args.raw, args.shape, args.labels)
    x = prepare_features(perts)
    k = int(perts.labels.max()) + 1
    linear = fit_linear(x, perts.labels, k, max_steps=args.steps, seed=args.seed)
    control = shuffled_label_control(x, perts.labels, k, Prng(args.seed).substream("control"), args.steps)
    linear.control_accuracy = control.train_accuracy
    two = fit_two_layer(x, perts.labels, k, max_steps=args.steps, seed=args.seed)
    write_csv(args.out, ProbeReport.HEADER, [linear.row(), two.row()])
    return (f"probe: linear {linear.train_accuracy:.2f}%  two_layer {two.train_accuracy:.2f}%  "
            f"shuffled-label control {control.train_accuracy:.2f}%  -> {args.out}")


def _augment(args):
    from .victim import AugmentOptions

    return AugmentOptions(args.crop_pad, not args.no_flip, args.cutout, args.mixup)


def _cmd_train(args):
    from .experiments import run_regime

    train_set, test_set, perts = _data_and_perts(args)
    res = run_regime(train_set, test_set, args.seed, _plan(args), perts, args.epochs, _augment(args), lr=args.lr)
    res["run"].to_csv(args.out)
    extra = ""
    if "poisoned_class_acc" in res:
        extra = f" (poisoned classes {res['poisoned_class_acc']:.2f}%, clean classes {res['clean_class_acc']:.2f}%)"
    return f"train: {args.poison} -> clean-test accuracy {res['final']:.2f}%{extra}; wrote {args.out}"


def _cmd_embed(args):
    from .embed import silhouette, tsne_embed
    from .numcore import Prng

    perts = _load_perts(args.perts)
    keep = []
    for cls in args.classes:
        idx = np.flatnonzero(perts.labels == cls)
        if idx.size == 0:
            raise ValueError(f"class {cls} not present in {args.perts}")
        keep.append(idx[: args.per_class])
    keep = np.sort(np.concatenate(keep))
    x = perts.data[keep].reshape(keep.size, -1).astype(np.float64)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    emb = tsne_embed(x, args.perplexity, args.iters, Prng(args.seed), labels=perts.labels[keep])
    emb.to_csv(args.out)
    return f"embed: {len(emb.points)} points, silhouette {silhouette(emb.points, emb.labels):.3f}; wrote {args.out}"


def _cmd_bench(args):
    from .dataio import write_csv
    from .experiments import bench_generation

    rows = bench_generation(args.n_list, args.p_list, args.shape, args.repeats)
    write_csv(args.out, ["n", "p", "d", "seconds"], [(n, p, d, f"{s:.6f}") for n, p, d, s in rows])
    worst = max(rows, key=lambda r: r[3])
    return f"bench: {len(rows)} configurations, slowest n={worst[0]} p={worst[1]} {worst[3]:.3f}s; wrote {args.out}"


def _cmd_ablate(args):
    from .experiments import ablation, load_data

    train_set, test_set = load_data(args.data, args.seed, args.n_train, args.n_test)
    runs = ablation(train_set, test_set, args.seed, args.epochs, args.lr)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, res in runs.items():
        res["run"].to_csv(args.out_dir / f"{name}.csv")
    return (f"ablate: padded {runs['padded']['final']:.2f}%  no_padding {runs['no_padding']['final']:.2f}%"
            f"; wrote {args.out_dir}")


_COMMANDS = {
    "generate": _cmd_generate,
    "poison": _cmd_poison,
    "probe": _cmd_probe,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
}


def execute(args) -> int:
    """Run a parsed command; prints a one-line summary. Returns the exit status."""
    try:
        _set_threads(args.threads)
        summary = _COMMANDS[args.verb](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"shortcut-poison {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


def main(argv=None) -> int:
    args = parse(sys.argv[1:] if argv is None else argv)
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())
