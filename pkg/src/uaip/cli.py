"""Command line entry points.

Exit codes: 0 on success, 2 for configuration problems (bad flags, bad
config files, bad values), 3 for any other anticipated failure (corrupt
data files, numeric divergence, missing metrics).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, concepts, data, evalstats, experiment, pursuit, uncertainty
from .config import ConceptTrainModel, default_config, dump_config, load_config
from .errors import ConfigError, UaipError


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")


def _add_seed_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="override: use this seed instead of the config's first")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uaip",
        description="uncertainty-aware sequential query selection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("print-default-config",
                       help="dump a fully populated default config")
    p.set_defaults(func=cmd_print_default_config)

    p = sub.add_parser("synth-gen", help="generate a synthetic concept dataset")
    _add_config_arg(p)
    _add_seed_arg(p)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--split-dir", default=None,
                   help="also write train/val/test CSVs here")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-concepts",
                       help="train the feature-to-answer model")
    _add_config_arg(p)
    _add_seed_arg(p)
    p.add_argument("--data", required=True, help="concept CSV with features")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_concepts)

    p = sub.add_parser("simulate-answers",
                       help="emit simulated answer probabilities for a dataset")
    _add_config_arg(p)
    _add_seed_arg(p)
    p.add_argument("--data", required=True, help="concept CSV")
    p.add_argument("--out", required=True, help="probability file path")
    p.set_defaults(func=cmd_simulate_answers)

    p = sub.add_parser("uncertainty",
                       help="uncertainty per (sample, query) from a probability file")
    p.add_argument("--probs", required=True, help="probability file")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--entropy-threshold", type=float, default=None,
                   help="mask column threshold in bits (default 0.95)")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("calibrate",
                       help="pick the Monte-Carlo mask threshold on labelled data")
    p.add_argument("--probs", required=True, help="probability file with passes")
    p.add_argument("--data", required=True, help="concept CSV with true answers")
    p.add_argument("--out", default=None, help="write calibration JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train-pursuit", help="train one variant and checkpoint it")
    _add_config_arg(p)
    _add_seed_arg(p)
    p.add_argument("--variant", default=None,
                   help="variant to train (default: first in config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_pursuit)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_config_arg(p)
    _add_seed_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", default=None,
                   help="variant whose masks to apply (default: checkpoint's)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-experiment", help="run all seeds and variants")
    _add_config_arg(p)
    p.add_argument("--out", default=None, help="output directory override")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("explain", help="print the query trace for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--answers", default=None,
                   help="comma-separated +1/-1 answers")
    p.add_argument("--data", default=None, help="concept CSV to pull a sample from")
    p.add_argument("--id", dest="sample_id", default=None,
                   help="sample id inside --data (default: first row)")
    p.add_argument("--mask", default=None, help="comma-separated 0/1 mask")
    p.add_argument("--stop-threshold", type=float, default=0.85)
    p.add_argument("--budget", type=int, default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("serve", help="serve interactive sessions over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--stop-threshold", type=float, default=0.85)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--query-texts", default=None,
                   help="file with one query text per line")
    p.add_argument("--session-log", default=None, help="append-only JSONL log")
    p.add_argument("--ui-dir", default=None, help="serve this static UI bundle at /")
    p.set_defaults(func=cmd_serve)

    return parser


def _load_cfg(args: argparse.Namespace):
    return load_config(args.config)


def _pick_seed(cfg, args: argparse.Namespace) -> int:
    return cfg.seeds[0] if getattr(args, "seed", None) is None else args.seed


def cmd_print_default_config(args: argparse.Namespace) -> int:
    print(dump_config(default_config()))
    return 0


def cmd_synth_gen(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    if cfg.dataset.source != "synth":
        raise ConfigError("synth-gen needs a config with dataset.source == 'synth'")
    seed = _pick_seed(cfg, args)
    spec = cfg.dataset.synth.to_joint_spec()
    ds = data.synth_generate(spec, cfg.dataset.synth.n_samples, seed)
    data.save_concept_csv(ds, args.out)
    print(f"wrote {ds.n} samples, {ds.n_queries} queries -> {args.out}")
    if args.split_dir:
        outdir = Path(args.split_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        parts = data.split(ds, cfg.dataset.split.to_spec(seed))
        for name, part in zip(("train", "val", "test"), parts):
            data.save_concept_csv(part, outdir / f"{name}.csv")
            print(f"wrote {part.n} samples -> {outdir / (name + '.csv')}")
    return 0


def cmd_train_concepts(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    seed = _pick_seed(cfg, args)
    ds = data.load_concept_csv(args.data, n_classes=cfg.dataset.n_classes)
    concept_cfg = cfg.answers.concept or ConceptTrainModel()
    model = concepts.train_concept_model(ds, concept_cfg.to_config(seed))
    checkpoint.save_checkpoint(model, args.out)
    print(f"trained on {ds.n} samples; final loss "
          f"{model.train_meta['final_train_loss']:.6f} -> {args.out}")
    return 0


def cmd_simulate_answers(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    seed = _pick_seed(cfg, args)
    sim = cfg.answers.simulator
    params = sim.to_params() if sim is not None else concepts.SimulatorParams()
    ds = data.load_concept_csv(args.data, n_classes=cfg.dataset.n_classes)
    probs, mc, log = concepts.simulate_answers(ds, params, seed)
    concepts.export_probabilities(probs, args.out, mc)
    frac = float(log.correct.mean())
    print(f"simulated {ds.n} x {ds.n_queries} answers "
          f"({frac:.3f} correct) -> {args.out}")
    return 0


def cmd_uncertainty(args: argparse.Namespace) -> int:
    probs, mc = concepts.import_probabilities(args.probs)
    mc_samples = None if mc is None else mc.samples
    uset = uncertainty.compute_uncertainty_set(probs.probs, probs.ids, mc_samples)
    threshold = uncertainty.entropy_threshold(args.entropy_threshold)
    masks = uncertainty.compute_mask(uset.entropy_bits, threshold)
    uncertainty.save_uncertainty_csv(uset, args.out, masks=masks)
    print(f"wrote uncertainties for {len(probs.ids)} samples -> {args.out} "
          f"({float(masks.mean()):.3f} masked at {threshold} bits)")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    probs, mc = concepts.import_probabilities(args.probs)
    if mc is None:
        raise ConfigError("probability file has no Monte-Carlo block to calibrate on")
    ds = data.load_concept_csv(args.data)
    index = {sid: i for i, sid in enumerate(ds.ids)}
    missing = [sid for sid in probs.ids if sid not in index]
    if missing:
        raise ConfigError(f"dataset lacks {len(missing)} probability ids "
                          f"(first: {missing[0]!r})")
    rows = np.asarray([index[sid] for sid in probs.ids])
    correct = concepts.answers_from_probs(probs.probs) == ds.answers[rows]
    _, _, total = uncertainty.mc_uncertainty_arrays(mc.samples)
    calib = uncertainty.calibrate_threshold_mc(total.ravel(), correct.ravel())
    out = {
        "threshold": calib.threshold,
        "balanced_accuracy": calib.balanced_accuracy,
        "degenerate": calib.degenerate,
        "n_pairs": int(correct.size),
    }
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_train_pursuit(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    seed = _pick_seed(cfg, args)
    variant = args.variant or cfg.variants[0]
    if variant not in cfg.variants:
        raise ConfigError(f"variant {variant!r} is not in the config's variants")
    ctx = experiment.prepare_seed(cfg, seed)
    masks, _calibration = experiment.variant_masks(variant, cfg, ctx)
    model = experiment.train_variant(variant, cfg, ctx, masks)
    checkpoint.save_checkpoint(model, args.out)
    meta = model.train_meta
    print(f"trained {variant} (seed {seed}); final loss "
          f"{meta['final_train_loss']:.6f} -> {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    seed = _pick_seed(cfg, args)
    model = checkpoint.load_checkpoint(args.checkpoint)
    if isinstance(model, concepts.ConceptModelParams):
        raise ConfigError("evaluate expects a pursuit or full-answer checkpoint")
    variant = args.variant or getattr(model, "variant", "cbm")
    if isinstance(model, pursuit.FullConceptModel):
        variant = "cbm"
    ctx = experiment.prepare_seed(cfg, seed)
    masks, calibration = experiment.variant_masks(variant, cfg, ctx)
    outcome = experiment.evaluate_trained(variant, cfg, ctx, model, masks, calibration)
    r = outcome.report
    out = {
        "method": r.method, "seed": seed, "n_samples": r.n_samples,
        "accuracy": r.accuracy, "auc": r.auc, "macro_f1": r.macro_f1,
        "mean_queries": r.mean_queries,
    }
    if outcome.groups is not None:
        out["groups"] = [{"label": g.label, "n": g.n, "accuracy": g.accuracy}
                         for g in outcome.groups]
    print(json.dumps(out, indent=1))
    return 0


def cmd_run_experiment(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    result = experiment.run_experiment(cfg, output_dir=args.out)
    print(evalstats.format_summary_text(result.summaries))
    print(f"artifacts -> {result.output_dir}")
    return 0


def _parse_int_list(text: str, what: str) -> np.ndarray:
    try:
        return np.asarray([int(tok) for tok in text.split(",")])
    except ValueError as err:
        raise ConfigError(f"cannot parse {what}: {err}") from err


def cmd_explain(args: argparse.Namespace) -> int:
    model = checkpoint.load_checkpoint(args.checkpoint)
    if not isinstance(model, pursuit.PursuitModel):
        raise ConfigError("explain needs a pursuit checkpoint")
    if (args.answers is None) == (args.data is None):
        raise ConfigError("give exactly one of --answers or --data")
    if args.answers is not None:
        answers = _parse_int_list(args.answers, "--answers")
        sample_id = "cli"
    else:
        ds = data.load_concept_csv(args.data)
        if args.sample_id is None:
            row = 0
        else:
            try:
                row = ds.ids.index(args.sample_id)
            except ValueError:
                raise ConfigError(f"no sample with id {args.sample_id!r} "
                                  f"in {args.data}") from None
        answers = ds.answers[row]
        sample_id = ds.ids[row]
    mask = None if args.mask is None else _parse_int_list(args.mask, "--mask")
    trace = pursuit.infer(model, answers, mask,
                          stop_threshold=args.stop_threshold,
                          budget=args.budget, sample_id=sample_id)
    print(json.dumps(trace.to_dict(), indent=1))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from . import service

    model = checkpoint.load_checkpoint(args.checkpoint)
    if not isinstance(model, pursuit.PursuitModel):
        raise ConfigError("serve needs a pursuit checkpoint")
    texts = None
    if args.query_texts:
        try:
            texts = service.load_query_texts(args.query_texts, model.n_queries)
        except ValueError as err:
            raise ConfigError(str(err)) from err
    app = service.create_app(model, query_texts=texts,
                             stop_threshold=args.stop_threshold,
                             budget=args.budget,
                             session_log=args.session_log,
                             ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except UaipError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())
