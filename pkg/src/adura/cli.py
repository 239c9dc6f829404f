"""Command-line interface.

Every command prints its resolved configuration as ``key=value`` lines,
then its results as comma-separated blocks. Exit codes: 0 success,
1 usage, 2 I/O, 3 numerical divergence, 4 shape or configuration mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import format_config, load_config, resolve
from .data import (
    SplitSpec,
    SynthConfig,
    class_distribution,
    format_distribution,
    generate_ood,
    generate_synthetic,
    load_csv,
    split,
    write_dataset,
)
from .errors import AduraError, CheckpointError, ConfigError, LabelParseError, NumericalDivergence, ShapeError
from .metrics import build_report, class_aucs, energy_histogram, energy_score, ensemble_logits, histogram_csv, mean_auc, micro_auc
from .training import TrainConfig, fit, format_log, model_from_checkpoint, predict

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(title, mapping, out=None):
    out = sys.stdout if out is None else out
    print(f"# {title}", file=out)
    out.write(format_config(mapping))
    print(file=out)


def _comment_header(title, mapping):
    return f"# {title}\n" + "".join(f"# {k}={v}\n" for k, v in sorted(mapping.items()))


def _threads():
    raw = os.environ.get("ADURA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("ADURA_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ADURA_THREADS", f"expected a positive integer, got {raw!r}")
    return n


def _plot_dir(args):
    if getattr(args, "plot", None) is None:
        return None
    d = Path(args.plot)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _eval_split(ds, config, which):
    if which == "all":
        return ds
    spec = SplitSpec(float(config.get("train_fraction", 0.96)), int(config.get("split_seed", 0)))
    train, val = split(ds, spec)
    return val if which == "val" else train


# ------------------------------------------------------------------ commands


def cmd_synth(args):
    mapping = {"n": args.n, "classes": args.classes, "uncertain_frac": args.uncertain_frac, "seed": args.seed, "image_size": args.image_size}
    for item in args.prevalence or ():
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--prevalence expects NAME=P, got {item!r}")
        mapping[f"prevalence_{name.strip()}"] = value
    cfg = SynthConfig.from_mapping(mapping)
    echo = {"command": "synth", "ood": args.ood, "out": str(args.out), **{k: v for k, v in mapping.items()}}
    _echo("resolved config", echo)
    ds = generate_ood(cfg) if args.ood else generate_synthetic(cfg)
    out = Path(args.out)
    write_dataset(ds, out)
    (out / "synth.config").write_text(format_config(echo), encoding="utf-8")
    dist = class_distribution(ds.labels)
    print("# label distribution")
    sys.stdout.write(format_distribution(dist))
    plots = _plot_dir(args)
    if plots is not None:
        from . import plotting

        plotting.label_distribution(dist, plots / "distribution.png")
    print(f"\nwrote {len(ds)} images to {out}")
    return EXIT_OK


def cmd_train(args):
    mapping = load_config(args.config) if args.config else {}
    mapping.update(_parse_overrides(args.set))
    for key in ("strategy", "seed", "epochs"):
        if getattr(args, key) is not None:
            mapping[key] = getattr(args, key)
    net_cfg, weights, tcfg = resolve(mapping)
    ds = load_csv(args.data)
    if net_cfg.num_classes != ds.labels.n_classes:
        raise ShapeError("train", (net_cfg.num_classes,), (ds.labels.n_classes,), detail="num_classes vs data classes")
    if (net_cfg.input_size, net_cfg.input_size) != tuple(ds.image_size):
        raise ShapeError("train", (net_cfg.input_size,), tuple(ds.image_size), detail="input_size vs image size")
    echo = {"command": "train", "data": str(args.data), "out": str(args.out), **net_cfg.to_dict(), **weights.to_dict(), **tcfg.to_dict()}
    _echo("resolved config", echo)
    train, val = split(ds, SplitSpec(tcfg.train_fraction, tcfg.split_seed))
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + ".log.csv")
    print(f"# training on {len(train)} samples, validating on {len(val)}")
    print(",".join(("epoch", "lr", "loss_total", "micro_auc", "selective_acc", "unc_recall", "coverage")))

    def progress(row):
        cells = [row["epoch"], row["lr"], row["loss_total"], row["micro_auc"], row["selective_acc"], row["unc_recall"], row["coverage"]]
        print(",".join("" if c is None else (f"{c:.6g}" if isinstance(c, float) else str(c)) for c in cells), flush=True)

    result = fit(train, val, net_cfg, weights, tcfg, out_path=out, resume=args.resume, log_path=None, progress=progress)
    log_path.write_text(_comment_header("resolved config", echo) + format_log(result.log), encoding="utf-8")
    plots = _plot_dir(args)
    if plots is not None and result.log:
        from . import plotting

        plotting.training_curves(result.log, plots / f"{out.stem}.curves.png")
    print(f"\n# best micro_auc {result.best_micro_auc} at epoch {result.best_epoch}")
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def _load_model(path):
    ck = load_checkpoint(path)
    return ck, model_from_checkpoint(ck)


def _report_out(report, echo, args):
    d = report.to_dict()
    d["config"] = echo
    print("# per-class auc")
    sys.stdout.write(report.auc_table())
    print("\n# confusion (definite labels, confident predictions)")
    sys.stdout.write(report.confusion_table())
    print("\n# summary")
    for key in ("selective_accuracy", "plain_accuracy", "coverage", "uncertainty_recall", "mean_u_uncertain", "mean_u_definite"):
        v = d[key]
        print(f"{key},{'absent' if v is None else f'{v:.6g}'}")
    if args.report:
        Path(args.report).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
        print(f"\nwrote {args.report}")
    plots = _plot_dir(args)
    if plots is not None:
        from . import plotting

        plotting.confusion_grid(report.class_names, report.confusion, plots / "confusion.png")


def cmd_eval(args):
    ck, model = _load_model(args.ckpt)
    ds = _eval_split(load_csv(args.data), ck.config, args.split)
    if ck.config.get("num_classes") != ds.labels.n_classes:
        raise ShapeError("eval", (ck.config.get("num_classes"),), (ds.labels.n_classes,), detail="checkpoint vs data classes")
    echo = {"command": "eval", "ckpt": str(args.ckpt), "data": str(args.data), "tau": args.tau, "split": args.split, "count_uncertain_errors": args.count_uncertain_errors, "seed": args.seed, "threads": _threads()}
    _echo("resolved config", echo)
    pred = predict(model, ds, threads=_threads())
    report = build_report(pred.logits, pred.u, ds.labels, args.tau, args.count_uncertain_errors)
    _report_out(report, echo, args)
    return EXIT_OK


def cmd_energy(args):
    ck, model = _load_model(args.ckpt)
    ind = _eval_split(load_csv(args.in_dist), ck.config, args.split)
    ood = load_csv(args.ood)
    C = ck.config.get("num_classes")
    for name, ds in (("in-dist", ind), ("ood", ood)):
        if ds.labels.n_classes != C:
            raise ShapeError("energy", (C,), (ds.labels.n_classes,), detail=f"checkpoint vs {name} classes")
    echo = {"command": "energy", "ckpt": str(args.ckpt), "in_dist": str(args.in_dist), "ood": str(args.ood), "bins": args.bins, "split": args.split, "seed": args.seed}
    _echo("resolved config", echo)
    threads = _threads()
    e_in = energy_score(predict(model, ind, threads=threads).logits)
    e_ood = energy_score(predict(model, ood, threads=threads).logits)
    lo, hi = float(min(e_in.min(), e_ood.min())), float(max(e_in.max(), e_ood.max()))
    out = Path(args.out)
    header = _comment_header("resolved config", echo)
    paths = {}
    for name, e in (("in", e_in), ("ood", e_ood)):
        centers, counts = energy_histogram(e, args.bins, (lo, hi))
        p = out.with_name(f"{out.stem}.{name}{out.suffix or '.csv'}")
        p.write_text(header + histogram_csv(centers, counts), encoding="utf-8")
        paths[name] = p
    print("split,n,mean_energy,file")
    print(f"in-dist,{e_in.size},{e_in.mean():.6f},{paths['in']}")
    print(f"ood,{e_ood.size},{e_ood.mean():.6f},{paths['ood']}")
    print(f"\nsummary,mean_in={e_in.mean():.6f},mean_ood={e_ood.mean():.6f},ood_minus_in={e_ood.mean() - e_in.mean():.6f}")
    plots = _plot_dir(args)
    if plots is not None:
        from . import plotting

        plotting.energy_histograms({"in-dist": e_in, "ood": e_ood}, plots / "energy.png", args.bins)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import default_checks, format_results, run_checks

    _echo("resolved config", {"command": "gradcheck", "seed": args.seed, "tolerance": 1e-4, "step": 1e-5})
    results = run_checks(default_checks(), seed=args.seed)
    sys.stdout.write(format_results(results))
    failed = [r.name for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_OK if not failed else EXIT_DIVERGED


def cmd_ensemble(args):
    paths = [p for p in args.ckpts.split(",") if p]
    if len(paths) < 2:
        raise UsageError("--ckpts needs at least two comma-separated checkpoints")
    loaded = [_load_model(p) for p in paths]
    counts = {ck.config.get("num_classes") for ck, _ in loaded}
    if len(counts) != 1:
        raise ShapeError("ensemble-eval", *[(ck.config.get("num_classes"),) for ck, _ in loaded], detail="class counts differ")
    ds = _eval_split(load_csv(args.data), loaded[0][0].config, args.split)
    if counts.pop() != ds.labels.n_classes:
        raise ShapeError("ensemble-eval", (loaded[0][0].config.get("num_classes"),), (ds.labels.n_classes,), detail="checkpoint vs data classes")
    echo = {"command": "ensemble-eval", "ckpts": ",".join(paths), "data": str(args.data), "tau": args.tau, "split": args.split, "count_uncertain_errors": args.count_uncertain_errors, "seed": args.seed}
    _echo("resolved config", echo)
    threads = _threads()
    preds = [predict(m, ds, threads=threads) for _, m in loaded]
    logits = ensemble_logits([p.logits for p in preds])
    u = np.mean(np.stack([p.u for p in preds]), axis=0)
    print("# per-model auc")
    print("model,mean_auc,micro_auc")
    for path, p in zip(paths, preds):
        aucs = class_aucs(p.logits, ds.labels)
        print(f"{path},{_fmt(mean_auc(aucs))},{_fmt(micro_auc(p.logits, ds.labels))}")
    print(f"ensemble,{_fmt(mean_auc(class_aucs(logits, ds.labels)))},{_fmt(micro_auc(logits, ds.labels))}\n")
    report = build_report(logits, u, ds.labels, args.tau, args.count_uncertain_errors)
    _report_out(report, echo, args)
    return EXIT_OK


def cmd_distribution(args):
    ds = load_csv(args.data)
    _echo("resolved config", {"command": "distribution", "data": str(args.data), "seed": args.seed})
    dist = class_distribution(ds.labels)
    sys.stdout.write(format_distribution(dist))
    plots = _plot_dir(args)
    if plots is not None:
        from . import plotting

        plotting.label_distribution(dist, plots / "distribution.png")
    return EXIT_OK


def _fmt(v):
    return "absent" if v is None else f"{v:.6f}"


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="adura", description="Uncertainty-aware dual-head classifier.")
    p.add_argument("--version", action="version", version=f"adura {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default, help="random seed (default %(default)s)")
        sp.add_argument("--plot", metavar="DIR", help="also render PNG figures into DIR")

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--uncertain-frac", type=float, default=0.2)
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--prevalence", action="append", metavar="NAME=P", help="per-class prevalence override (repeatable)")
    s.add_argument("--ood", action="store_true", help="generate the out-of-distribution texture corpus instead")
    common(s, 42)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--strategy", choices=("u-mask", "u-zero", "u-one", "u-ignore"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--log", help="epoch log CSV (default <out stem>.log.csv)")
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--seed", type=int)
    t.add_argument("--plot", metavar="DIR")
    t.set_defaults(func=cmd_train)

    def eval_args(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--tau", type=float, default=0.4)
        sp.add_argument("--report", help="write the JSON report here")
        sp.add_argument("--split", choices=("val", "train", "all"), default="val", help="which part of the corpus to score (default val)")
        sp.add_argument("--count-uncertain-errors", action="store_true", help="count confident predictions on UNC entries as selective-accuracy errors")
        common(sp)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    eval_args(e)
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("energy", help="energy histograms for in-distribution vs OOD data")
    en.add_argument("--ckpt", required=True)
    en.add_argument("--in-dist", required=True)
    en.add_argument("--ood", required=True)
    en.add_argument("--out", required=True, help="CSV path; writes <stem>.in.csv and <stem>.ood.csv")
    en.add_argument("--bins", type=int, default=30)
    en.add_argument("--split", choices=("val", "train", "all"), default="val")
    common(en)
    en.set_defaults(func=cmd_energy)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    ens = sub.add_parser("ensemble-eval", help="evaluate the logit average of several checkpoints")
    ens.add_argument("--ckpts", required=True, help="comma-separated checkpoint paths")
    eval_args(ens)
    ens.set_defaults(func=cmd_ensemble)

    d = sub.add_parser("distribution", help="per-class label counts")
    d.add_argument("--data", required=True)
    common(d)
    d.set_defaults(func=cmd_distribution)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "tau", None) is not None and not 0 < args.tau <= 1:
            raise UsageError(f"--tau must lie in (0, 1], got {args.tau}")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ShapeError, ConfigError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, CheckpointError, LabelParseError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AduraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
