"""Command-line entrypoint wiring all subcommands.

``--threads N`` pins the BLAS thread pools, which must happen before numpy
is imported; that is why every heavy import lives inside the handlers.
``--threads 1`` guarantees bit-identical reruns for a fixed seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _set_thread_env(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _early_threads(argv: list[str]) -> int:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            try:
                return max(1, int(argv[i + 1]))
            except ValueError:
                return 1
        if a.startswith("--threads="):
            try:
                return max(1, int(a.split("=", 1)[1]))
            except ValueError:
                return 1
    return 1


_OVERRIDE_FLAGS = {
    # (argparse flag, config section, key, type)
    "--embed-dim": ("fpe", "embed_dim", int),
    "--frame-window": ("fpe", "frame_window", int),
    "--frame-stride": ("fpe", "frame_stride", int),
    "--avg-window": ("fpe", "avg_window", int),
    "--avg-shift": ("fpe", "avg_shift", int),
    "--token-dim": ("fpe", "token_dim", int),
    "--mlp-hidden": ("fpe", "mlp_hidden", int),
    "--depth": ("transformer", "depth", int),
    "--heads": ("transformer", "heads", int),
    "--dim-head": ("transformer", "dim_head", int),
    "--dim-mlp": ("transformer", "dim_mlp", int),
    "--epochs": ("train", "epochs", int),
    "--batch-size": ("train", "batch_size", int),
    "--lr-init": ("train", "lr_init", float),
    "--lr-max": ("train", "lr_max", float),
    "--weight-decay": ("train", "weight_decay", float),
}


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for flag, (_, key, typ) in _OVERRIDE_FLAGS.items():
        p.add_argument(flag, type=typ, default=None, dest=f"ov_{key}")
    p.add_argument("--no-balanced", action="store_true",
                   help="disable class-balanced sampling")
    p.add_argument("--config", default=None, help="JSON config file")


def _overrides_from(args: argparse.Namespace) -> dict:
    ov: dict[str, dict] = {}
    for _, (section, key, _typ) in _OVERRIDE_FLAGS.items():
        val = getattr(args, f"ov_{key}", None)
        if val is not None:
            ov.setdefault(section, {})[key] = val
    if getattr(args, "no_balanced", False):
        ov.setdefault("train", {})["balanced_sampling"] = False
    return ov


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS thread count; 1 gives bit-deterministic runs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="afpm",
        description="Calibration-free cross-dataset EEG decoding pipeline",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--task", required=True, choices=("mi", "erp"))
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--trials", type=int, default=100, help="trials per domain")
    p.add_argument("--snr", type=float, default=6.0, help="signal-to-noise in dB")
    p.add_argument("--out", required=True)
    p.add_argument("--channels", default="default", choices=("default", "train", "eval"),
                   help="channel-subset catalogue to cycle through")
    p.add_argument("--rate", type=float, default=256.0)
    p.add_argument("--trial-len", type=float, default=None,
                   help="trial length in seconds (default 3.0 MI / 1.0 ERP)")
    p.add_argument("--domain-gain", type=float, default=0.3)
    p.add_argument("--class-ratio", type=float, default=1.0 / 6.0)
    p.add_argument("--name", default=None)
    _common(p)

    p = sub.add_parser("preprocess", help="band-pass, resample, rescale a dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--band", default=None, help="LO:HI in Hz (default by task)")
    p.add_argument("--rate", type=float, default=256.0)
    p.add_argument("--unit-scale", type=float, default=None,
                   help="multiplier into 0.1 mV units (default: manifest value)")
    _common(p)

    p = sub.add_parser("align", help="channel-select, align, and map a dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", required=True, choices=("mi", "erp"))
    p.add_argument("--no-select", action="store_true",
                   help="widen the target set to the union of observed channels")
    p.add_argument("--no-ea", action="store_true", help="skip Euclidean alignment")
    p.add_argument("--no-map", action="store_true",
                   help="keep original channel order, skip template placement")
    p.add_argument("--union-from", nargs="*", default=None,
                   help="datasets whose channels define the --no-select union")
    _common(p)

    p = sub.add_parser("train", help="train a model on aligned datasets")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--task", required=True, choices=("mi", "erp"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--per-channel-patches", action="store_true",
                   help="one channel per patch (frame-encoding ablation)")
    _add_model_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="calibration-free evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("mi", "erp"), default=None,
                   help="expected task; must match the checkpoint")
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", default=None, help="directory for report.json")
    _common(p)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    p.add_argument("--train", dest="train_dirs", nargs="+", required=True)
    p.add_argument("--eval", dest="eval_dirs", nargs="+", required=True)
    p.add_argument("--task", required=True, choices=("mi", "erp"))
    p.add_argument("--variants", default="all",
                   help="'all' or comma list of FULL,NO_SELECT,NO_EA,NO_MAP,NO_FPE")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _common(p)

    p = sub.add_parser("finetune", help="subject-specific fine-tuning of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _common(p)

    return ap


# ---------------------------------------------------------------------------
# handlers


def _cmd_synth(args) -> int:
    from .config import echo_config, resolve_config
    from .synth import (SynthSpec, MI_EVAL_SUBSETS, MI_TRAIN_SUBSETS,
                        ERP_EVAL_SUBSETS, ERP_TRAIN_SUBSETS, generate_dataset)

    catalogues = {
        ("mi", "train"): MI_TRAIN_SUBSETS, ("mi", "eval"): MI_EVAL_SUBSETS,
        ("erp", "train"): ERP_TRAIN_SUBSETS, ("erp", "eval"): ERP_EVAL_SUBSETS,
        ("mi", "default"): MI_TRAIN_SUBSETS + MI_EVAL_SUBSETS,
        ("erp", "default"): ERP_TRAIN_SUBSETS + ERP_EVAL_SUBSETS,
    }
    cat = catalogues[(args.task, args.channels)]
    subsets = tuple(cat[i % len(cat)] for i in range(args.domains))
    trial_len = args.trial_len
    if trial_len is None:
        trial_len = 3.0 if args.task == "mi" else 1.0
    spec = SynthSpec(
        task=args.task, n_domains=args.domains, trials_per_domain=args.trials,
        channel_subsets=subsets, rate_hz=args.rate, trial_len_s=trial_len,
        snr_db=args.snr, domain_gain=args.domain_gain,
        class_ratio=args.class_ratio,
        name=args.name or f"synth_{args.task}",
    )
    manifest = generate_dataset(spec, args.seed, args.out)
    cfg = resolve_config(args.task, seed=args.seed, threads=args.threads)
    echo_config(cfg, args.out, "synth", _public_args(args))
    print(f"wrote {len(manifest.trials)} trials in {spec.n_domains} domains to {args.out}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    from .config import echo_config, resolve_config
    from .data_model import load_manifest
    from .preprocessing import PreprocessConfig, preprocess_dataset

    manifest = load_manifest(_data_path(args.in_dir))
    if args.band:
        lo, hi = (float(v) for v in args.band.split(":"))
    else:
        lo = 4.0 if manifest.task == "mi" else 1.0
        hi = 30.0
    unit_scale = args.unit_scale if args.unit_scale is not None else manifest.unit_scale
    pp = PreprocessConfig(band_lo_hz=lo, band_hi_hz=hi,
                          target_rate_hz=args.rate, unit_scale=unit_scale)
    out = preprocess_dataset(manifest, pp, args.out)
    cfg = resolve_config(manifest.task, overrides={"preprocess": {
        "band_lo_hz": lo, "band_hi_hz": hi,
        "target_rate_hz": args.rate, "unit_scale": unit_scale,
    }}, seed=args.seed, threads=args.threads)
    echo_config(cfg, args.out, "preprocess", _public_args(args))
    print(f"preprocessed {len(out.trials)} trials to {args.out}")
    return EXIT_OK


def _cmd_align(args) -> int:
    from .ablation import union_template
    from .alignment import align_dataset
    from .config import echo_config, resolve_config
    from .data_model import load_manifest, task_template

    manifest = load_manifest(_data_path(args.in_dir))
    spec = task_template(args.task)
    if args.no_select:
        source = [load_manifest(_data_path(p))
                  for p in (args.union_from or [args.in_dir])]
        spec = union_template(source, spec)
    out = align_dataset(manifest, args.out, spec, select=True,
                        ea=not args.no_ea, mapping=not args.no_map)
    cfg = resolve_config(args.task, seed=args.seed, threads=args.threads)
    echo_config(cfg, args.out, "align", _public_args(args))
    print(f"aligned {len(out.trials)} trials to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .config import echo_config, resolve_config
    from .data_model import load_manifest
    from .model import init_model, save_checkpoint
    from .pipeline import active_rms_scale, stack_aligned
    from .training import train
    from dataclasses import replace

    cfg = resolve_config(args.task, args.config, _overrides_from(args),
                         seed=args.seed, threads=args.threads)
    manifests = [load_manifest(_data_path(p)) for p in args.data]
    x, y, _, layout = stack_aligned(manifests)
    if layout["mapped"]:
        model_cfg = replace(
            cfg.model_config(per_channel_patches=args.per_channel_patches),
            template_channels=tuple(layout["template_channels"]),
            template_len=int(layout["template_len"]),
            input_scale=active_rms_scale(x),
        )
    else:
        model_cfg = replace(
            cfg.model_config(per_channel_patches=args.per_channel_patches),
            template_channels=tuple(f"ROW{i:02d}" for i in range(x.shape[1])),
            template_len=int(x.shape[2]),
            input_scale=active_rms_scale(x),
        )
    model = init_model(model_cfg, seed=cfg.seed)

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log")
    with open(log_path, "w", encoding="utf-8") as log_file:
        def log(msg: str):
            print(msg)
            log_file.write(msg + "\n")

        log(f"training on {x.shape[0]} trials "
            f"({x.shape[1]} channels x {x.shape[2]} samples), "
            f"{model.n_params()} parameters")
        result = train(x, y, model, cfg.train, log=log)
        if result.diverged:
            log("training diverged; kept last finite checkpoint")
    save_checkpoint(result.model, args.out,
                    opt_state=result.opt_state.as_dict(),
                    extra={"task": cfg.task, "diverged": result.diverged,
                           "n_train_trials": int(x.shape[0])})
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as f:
        f.write(result.history_csv())
    echo_config(cfg, out_dir, "train", _public_args(args))
    final = result.history[-1]["loss"] if result.history else float("nan")
    print(f"saved checkpoint to {args.out} (final loss {final:.4f})")
    return EXIT_OK if not result.diverged else EXIT_NUMERIC


def _cmd_eval(args) -> int:
    from .data_model import load_manifest
    from .errors import ConfigError
    from .evaluation import evaluate_dataset
    from .model import load_checkpoint

    model, _, _ = load_checkpoint(args.ckpt)
    if args.task and args.task != model.cfg.task:
        raise ConfigError(
            f"--task {args.task} does not match the checkpoint's task "
            f"{model.cfg.task!r}"
        )
    manifest = load_manifest(_data_path(args.data))
    report = evaluate_dataset(model, manifest, folds=args.folds,
                              repeats=args.repeats, seed=args.seed)
    doc = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    print(report.table())
    print(doc)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as f:
            f.write(doc + "\n")
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report.table() + "\n")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .ablation import (AblationPlan, VARIANTS, ablation_csv, run_ablation)
    from .config import echo_config, resolve_config

    cfg = resolve_config(args.task, args.config, _overrides_from(args),
                         seed=args.seed, threads=args.threads)
    if args.variants == "all":
        variants = VARIANTS
    else:
        variants = tuple(v.strip().upper() for v in args.variants.split(","))
    plan = AblationPlan(run_cfg=cfg, variants=variants, seed=args.seed)
    results = run_ablation(plan, [_data_path(p) for p in args.train_dirs],
                           [_data_path(p) for p in args.eval_dirs],
                           os.path.join(args.out, "work"))
    os.makedirs(args.out, exist_ok=True)
    csv = ablation_csv(results, args.task)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as f:
        f.write(csv)
    table = {
        variant: {name: rep.to_dict() for name, rep in res.reports.items()}
        for variant, res in results.items()
    }
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as f:
        json.dump(table, f, indent=1, sort_keys=True)
        f.write("\n")
    echo_config(cfg, args.out, "ablate", _public_args(args))
    print(csv, end="")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    import numpy as np

    from .config import echo_config, resolve_config
    from .data_model import load_manifest
    from .evaluation import (
        compute_metrics, positive_class_index, subject_of, task_metrics,
    )
    from .model import forward, load_checkpoint, save_checkpoint, Model
    from .pipeline import stack_aligned
    from .training import finetune
    from .evaluation import check_template_match, pad_to_model

    model, opt_state, extra = load_checkpoint(args.ckpt)
    manifest = load_manifest(_data_path(args.data))
    check_template_match(model, manifest)
    task = model.cfg.task
    cfg = resolve_config(task, args.config, _overrides_from(args),
                         seed=args.seed, threads=args.threads)
    x, y, domains, _ = stack_aligned([manifest])
    x = pad_to_model(x, model)
    positive = positive_class_index(manifest.class_names, task)

    subjects = sorted({subject_of(d) for d in domains})
    per_subject = []
    os.makedirs(args.out, exist_ok=True)
    for subject in subjects:
        idx = [i for i, d in enumerate(domains) if subject_of(d) == subject]
        xs, ys = x[idx], y[idx]
        tuned = Model(cfg=model.cfg, params={k: v.copy() for k, v in model.params.items()})
        result, tune_idx, eval_idx = finetune(tuned, xs, ys, args.fraction, cfg.train)
        before = compute_metrics(task, forward(xs[eval_idx], model), ys[eval_idx], positive)
        after = compute_metrics(task, forward(xs[eval_idx], result.model),
                                ys[eval_idx], positive)
        safe = subject.replace(":", "_").replace("/", "_")
        save_checkpoint(result.model, os.path.join(args.out, f"{safe}.ckpt"),
                        extra={"task": task, "subject": subject})
        per_subject.append({"subject": subject, "n_tune": int(tune_idx.size),
                            "n_eval": int(eval_idx.size),
                            "before": before, "after": after})
    summary = {
        "fraction": args.fraction,
        "metrics": list(task_metrics(task)),
        "subjects": per_subject,
        "mean_before": {m: float(np.mean([s["before"][m] for s in per_subject]))
                        for m in task_metrics(task)},
        "mean_after": {m: float(np.mean([s["after"][m] for s in per_subject]))
                       for m in task_metrics(task)},
    }
    doc = json.dumps(summary, indent=1, sort_keys=True)
    with open(os.path.join(args.out, "finetune.json"), "w", encoding="utf-8") as f:
        f.write(doc + "\n")
    echo_config(cfg, args.out, "finetune", _public_args(args))
    print(doc)
    return EXIT_OK


def _data_path(path: str) -> str:
    """Resolve a dataset path against $AFPM_DATA_ROOT when it is relative."""
    root = os.environ.get("AFPM_DATA_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _public_args(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "command" and v is not None}


_HANDLERS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "align": _cmd_align,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "finetune": _cmd_finetune,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(_early_threads(argv))
    args = build_parser().parse_args(argv)

    from .errors import ConfigError, DataError, NumericError

    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
