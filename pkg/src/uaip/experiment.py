"""End-to-end experiment runner.

One experiment = one config: a dataset, an answer source, optional answer
corruption, a set of method variants, and a list of seeds. Per seed the
runner regenerates data and splits, derives per-variant masks, trains, and
evaluates; across seeds it aggregates into a method table and optional
per-corruption-level accuracy files. Identical configs produce identical
artifacts byte for byte: every random draw is keyed off the run seed and no
output embeds a timestamp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import concepts, data, evalstats, oracle, pursuit, uncertainty
from .config import ExperimentModel, dump_config
from .errors import DataError
from .rand import stream

MASKED_VARIANTS = ("uav_entropy", "uav_mc", "uav_oracle")


@dataclass
class AnswerBundle:
    """Answers one split will actually see, plus what produced them."""

    provided: np.ndarray                      # (N, M) +1/-1
    truth: np.ndarray                         # (N, M) ground truth +1/-1
    probs: np.ndarray | None = None           # (N, M) source probabilities
    mc: np.ndarray | None = None              # (N, S, M) stochastic passes
    flip_counts: np.ndarray | None = None      # (N,) corruption bookkeeping

    @property
    def correct(self) -> np.ndarray:
        return self.provided == self.truth


@dataclass
class SeedContext:
    seed: int
    splits: dict[str, data.ConceptDataset]     # train / val / test groups
    bundles: dict[str, AnswerBundle]
    test_groups: list[tuple[str, str]]         # (group label, split key)


@dataclass
class VariantOutcome:
    report: evalstats.RunReport
    groups: list[evalstats.GroupAccuracy] | None
    mc_threshold: float | None = None


@dataclass
class ExperimentResult:
    output_dir: Path | None
    runs: dict[str, list[evalstats.RunReport]]
    summaries: list[evalstats.MethodSummary]
    group_tables: dict[str, list[list[evalstats.GroupAccuracy]]]
    mc_thresholds: list[float] = field(default_factory=list)

    def run_for(self, method: str, seed_pos: int) -> evalstats.RunReport:
        return self.runs[method][seed_pos]


def _base_dataset(cfg: ExperimentModel, seed: int) -> data.ConceptDataset:
    if cfg.dataset.source == "synth":
        spec = cfg.dataset.synth.to_joint_spec()
        return data.synth_generate(spec, cfg.dataset.synth.n_samples, seed)
    ds = data.load_concept_csv(cfg.dataset.csv_path, n_classes=cfg.dataset.n_classes)
    return ds


def _mixed_corrupt(ds: data.ConceptDataset, counts: list[int], seed: int,
                   tag: str) -> tuple[data.ConceptDataset, np.ndarray]:
    """Each sample flips a count drawn uniformly from ``counts``."""
    rng = stream(seed, "corrupt-mix", tag)
    drawn = np.asarray(counts)[rng.integers(0, len(counts), size=ds.n)]
    answers = ds.answers.copy()
    for i in range(ds.n):
        j = int(drawn[i])
        if j == 0:
            continue
        flip = rng.choice(ds.n_queries, size=j, replace=False)
        answers[i, flip] = -answers[i, flip]
    out = data.ConceptDataset(ids=list(ds.ids), answers=answers,
                              labels=ds.labels.copy(), n_classes=ds.n_classes,
                              features=None if ds.features is None else ds.features.copy())
    return out, drawn


def _import_rows(probs_set: concepts.AnswerDistributionSet,
                 mc_set: concepts.MCSampleSet | None,
                 ids: list[str]) -> tuple[np.ndarray, np.ndarray | None]:
    index = {sid: i for i, sid in enumerate(probs_set.ids)}
    missing = [sid for sid in ids if sid not in index]
    if missing:
        raise DataError(
            f"imported probabilities lack {len(missing)} dataset ids "
            f"(first missing: {missing[0]!r})")
    rows = np.asarray([index[sid] for sid in ids])
    probs = probs_set.probs[rows]
    mc = None if mc_set is None else mc_set.samples[rows]
    return probs, mc


def _make_bundles(cfg: ExperimentModel, ctx_splits: dict[str, data.ConceptDataset],
                  seed: int) -> dict[str, AnswerBundle]:
    kind = cfg.answers.kind
    bundles: dict[str, AnswerBundle] = {}
    if kind == "truth":
        for key, ds in ctx_splits.items():
            bundles[key] = AnswerBundle(provided=ds.answers.copy(), truth=ds.answers.copy())
        return bundles
    if kind == "simulator":
        params = cfg.answers.simulator.to_params()
        for key, ds in ctx_splits.items():
            probs, mc, _log = concepts.simulate_answers(ds, params, seed)
            bundles[key] = AnswerBundle(
                provided=concepts.answers_from_probs(probs.probs),
                truth=ds.answers.copy(), probs=probs.probs, mc=mc.samples)
        return bundles
    if kind == "concept_model":
        model = concepts.train_concept_model(
            ctx_splits["train"], cfg.answers.concept.to_config(seed))
        for key, ds in ctx_splits.items():
            probs = concepts.predict_distributions(model, ds)
            mc = concepts.mc_sample_distributions(
                model, ds, n_passes=cfg.answers.concept.mc_passes, seed=seed)
            bundles[key] = AnswerBundle(
                provided=concepts.answers_from_probs(probs.probs),
                truth=ds.answers.copy(), probs=probs.probs, mc=mc.samples)
        return bundles
    probs_set, mc_set = concepts.import_probabilities(cfg.answers.import_path)
    for key, ds in ctx_splits.items():
        probs, mc = _import_rows(probs_set, mc_set, ds.ids)
        bundles[key] = AnswerBundle(
            provided=concepts.answers_from_probs(probs),
            truth=ds.answers.copy(), probs=probs, mc=mc)
    return bundles


def prepare_seed(cfg: ExperimentModel, seed: int) -> SeedContext:
    base = _base_dataset(cfg, seed)
    train, val, test = data.split(base, cfg.dataset.split.to_spec(seed))
    splits: dict[str, data.ConceptDataset] = {"train": train, "val": val}
    test_groups: list[tuple[str, str]] = []
    flip_counts: dict[str, np.ndarray] = {}

    if cfg.corruption is None:
        splits["test"] = test
        test_groups.append(("all", "test"))
    else:
        if cfg.corruption.train_counts:
            corrupted, drawn = _mixed_corrupt(train, cfg.corruption.train_counts,
                                              seed, "train")
            splits["train"] = corrupted
            flip_counts["train"] = drawn
            corrupted, drawn = _mixed_corrupt(val, cfg.corruption.train_counts,
                                              seed, "val")
            splits["val"] = corrupted
            flip_counts["val"] = drawn
        for j in cfg.corruption.test_counts:
            key = f"test_j{j}"
            corrupted, log = data.corrupt_answers(test, j, seed)
            splits[key] = corrupted
            flip_counts[key] = log.counts()
            test_groups.append((str(j), key))

    bundles = _make_bundles(cfg, splits, seed)
    if cfg.corruption is not None:
        # Ground truth stays the uncorrupted answers; the pursuit only sees
        # the flipped ones.
        for key, ds in splits.items():
            source = {"train": train, "val": val}.get(key, test)
            bundles[key].truth = source.answers.copy()
            bundles[key].flip_counts = flip_counts.get(key)
    return SeedContext(seed=seed, splits=splits, bundles=bundles,
                       test_groups=test_groups)


def _mc_total(bundle: AnswerBundle) -> np.ndarray:
    if bundle.mc is None:
        raise DataError("this answer source provides no Monte-Carlo passes; "
                        "uav_mc needs the simulator, a dropout concept model, "
                        "or an import with a sample block")
    _, _, total = uncertainty.mc_uncertainty_arrays(bundle.mc)
    return total


def _calibrate_mc(cfg: ExperimentModel, ctx: SeedContext) -> uncertainty.ThresholdCalibration:
    val_bundle = ctx.bundles["val"]
    total = _mc_total(val_bundle)
    if cfg.uncertainty.calibration_score == "confidence":
        conf = np.abs(val_bundle.mc.mean(axis=1) - 0.5) + 0.5
        return uncertainty.calibrate_threshold_mc(
            conf.ravel(), val_bundle.correct.ravel(), score="confidence")
    return uncertainty.calibrate_threshold_mc(
        total.ravel(), val_bundle.correct.ravel(), score="uncertainty")


def _variant_mask(variant: str, cfg: ExperimentModel, bundle: AnswerBundle,
                  calibration: uncertainty.ThresholdCalibration | None) -> np.ndarray | None:
    if variant in ("vip", "cbm"):
        return None
    if variant == "uav_oracle":
        return oracle.oracle_mask(bundle.provided, bundle.truth)
    if variant == "uav_entropy":
        if bundle.probs is None:
            # Hard answers carry zero entropy; nothing can cross the threshold.
            return np.zeros_like(bundle.provided, dtype=np.int8)
        bits = uncertainty.entropy_uncertainty(bundle.probs)
        return uncertainty.compute_mask(
            bits, uncertainty.entropy_threshold(cfg.uncertainty.entropy_threshold))
    if cfg.uncertainty.calibration_score == "confidence":
        conf = np.abs(bundle.mc.mean(axis=1) - 0.5) + 0.5
        return (conf <= calibration.threshold).astype(np.int8)
    return uncertainty.compute_mask(_mc_total(bundle), calibration.threshold)


def _pursuit_data(ds: data.ConceptDataset, bundle: AnswerBundle,
                  mask: np.ndarray | None) -> pursuit.PursuitData:
    return pursuit.PursuitData(answers=bundle.provided, labels=ds.labels,
                               n_classes=ds.n_classes, masks=mask, ids=list(ds.ids))


def variant_masks(variant: str, cfg: ExperimentModel, ctx: SeedContext,
                  ) -> tuple[dict[str, np.ndarray | None],
                             uncertainty.ThresholdCalibration | None]:
    calibration = _calibrate_mc(cfg, ctx) if variant == "uav_mc" else None
    masks = {key: _variant_mask(variant, cfg, ctx.bundles[key], calibration)
             for key in ctx.splits}
    return masks, calibration


def train_variant(variant: str, cfg: ExperimentModel, ctx: SeedContext,
                  masks: dict[str, np.ndarray | None],
                  ) -> pursuit.PursuitModel | pursuit.FullConceptModel:
    train_cfg = cfg.train.to_config(ctx.seed)
    train_pd = _pursuit_data(ctx.splits["train"], ctx.bundles["train"], masks["train"])
    val_pd = _pursuit_data(ctx.splits["val"], ctx.bundles["val"], masks["val"])
    if variant == "cbm":
        return pursuit.train_full_concept_baseline(train_pd, val_pd, train_cfg)
    return pursuit.train_pursuit(train_pd, val_pd, train_cfg, variant=variant)


def evaluate_trained(variant: str, cfg: ExperimentModel, ctx: SeedContext,
                     model: pursuit.PursuitModel | pursuit.FullConceptModel,
                     masks: dict[str, np.ndarray | None],
                     calibration: uncertainty.ThresholdCalibration | None = None,
                     ) -> VariantOutcome:
    predicted: list[int] = []
    labels: list[int] = []
    posteriors: list[np.ndarray] = []
    query_counts: list[float] = []
    correct_flags: list[bool] = []
    error_counts: list[int] = []

    if variant == "cbm":
        for _label, key in ctx.test_groups:
            ds, bundle = ctx.splits[key], ctx.bundles[key]
            post = pursuit.full_concept_posterior(model, bundle.provided.astype(np.float64))
            pred = post.argmax(axis=1)
            predicted.extend(int(p) for p in pred)
            labels.extend(int(y) for y in ds.labels)
            posteriors.extend(post)
            query_counts.extend([float(ds.n_queries)] * ds.n)
            correct_flags.extend(bool(b) for b in (pred == ds.labels))
            error_counts.extend(_group_error_counts(bundle, ds.n))
    else:
        budget = cfg.budget
        for _label, key in ctx.test_groups:
            ds, bundle = ctx.splits[key], ctx.bundles[key]
            test_pd = _pursuit_data(ds, bundle, masks[key])
            traces, _summary = pursuit.batch_explain(
                model, test_pd, stop_threshold=cfg.stop_threshold, budget=budget)
            for i, trace in enumerate(traces):
                predicted.append(trace.predicted)
                labels.append(int(ds.labels[i]))
                posteriors.append(trace.steps[-1].posterior if trace.steps
                                  else pursuit.class_posterior(model, np.zeros(ds.n_queries)))
                query_counts.append(float(trace.n_queries_asked))
                correct_flags.append(trace.predicted == int(ds.labels[i]))
            error_counts.extend(_group_error_counts(bundle, ds.n))

    post_matrix = np.asarray(posteriors)
    try:
        auc_value = evalstats.multiclass_auc(post_matrix, labels)
    except evalstats.UndefinedMetricError:
        auc_value = None
    report = evalstats.RunReport(
        method=variant,
        accuracy=evalstats.accuracy(predicted, labels),
        auc=auc_value,
        macro_f1=evalstats.macro_f1(predicted, labels,
                                    n_classes=ctx.splits["train"].n_classes),
        mean_queries=float(np.mean(query_counts)),
        n_samples=len(labels),
    )
    groups = None
    if cfg.corruption is not None:
        bins = [(j, j) for j in sorted(set(cfg.corruption.test_counts))]
        groups = evalstats.accuracy_by_error_count(correct_flags, error_counts, bins)
    return VariantOutcome(report=report, groups=groups,
                          mc_threshold=calibration.threshold if calibration else None)


def _evaluate_variant(variant: str, cfg: ExperimentModel, ctx: SeedContext) -> VariantOutcome:
    masks, calibration = variant_masks(variant, cfg, ctx)
    model = train_variant(variant, cfg, ctx, masks)
    return evaluate_trained(variant, cfg, ctx, model, masks, calibration)


def _group_error_counts(bundle: AnswerBundle, n: int) -> list[int]:
    if bundle.flip_counts is not None:
        return [int(c) for c in bundle.flip_counts]
    return [int(c) for c in (~bundle.correct).sum(axis=1)]


def run_experiment(cfg: ExperimentModel, output_dir: str | Path | None = None) -> ExperimentResult:
    """Run every (seed, variant) cell and aggregate.

    Artifacts land in ``output_dir`` (default ``cfg.output_dir/cfg.name``):
    the resolved config, a method summary table as CSV and aligned text,
    per-variant accuracy-by-corruption files when corruption is configured,
    and a manifest listing every file. On failure a FAILED marker with the
    error text is left behind instead of partial results.
    """
    out = Path(output_dir) if output_dir is not None else Path(cfg.output_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = _run_all(cfg, out)
    except Exception as err:  # noqa: BLE001 - marker then re-raise
        (out / "FAILED").write_text(f"{type(err).__name__}: {err}\n", encoding="utf-8")
        raise
    return result


def _run_all(cfg: ExperimentModel, out: Path) -> ExperimentResult:
    runs: dict[str, list[evalstats.RunReport]] = {v: [] for v in cfg.variants}
    group_tables: dict[str, list[list[evalstats.GroupAccuracy]]] = {v: [] for v in cfg.variants}
    mc_thresholds: list[float] = []
    for seed in cfg.seeds:
        ctx = prepare_seed(cfg, seed)
        for variant in cfg.variants:
            outcome = _evaluate_variant(variant, cfg, ctx)
            runs[variant].append(outcome.report)
            if outcome.groups is not None:
                group_tables[variant].append(outcome.groups)
            if outcome.mc_threshold is not None:
                mc_thresholds.append(outcome.mc_threshold)

    reference = "vip" if "vip" in cfg.variants and len(cfg.seeds) >= 2 else None
    summaries = evalstats.aggregate_runs(runs, reference=reference)

    (out / "config.json").write_text(dump_config(cfg) + "\n", encoding="utf-8")
    evalstats.write_summary_csv(summaries, out / "table1.csv")
    (out / "table1.txt").write_text(evalstats.format_summary_text(summaries) + "\n",
                                    encoding="utf-8")
    files = ["config.json", "table1.csv", "table1.txt"]
    for variant, tables in group_tables.items():
        if not tables:
            continue
        merged = _merge_groups(tables)
        name = f"groups_{variant}.csv"
        evalstats.write_group_accuracy_csv(merged, out / name)
        files.append(name)
    manifest = {
        "name": cfg.name,
        "seeds": list(cfg.seeds),
        "variants": list(cfg.variants),
        "files": sorted(files + ["manifest.json"]),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n",
                                       encoding="utf-8")
    return ExperimentResult(output_dir=out, runs=runs, summaries=summaries,
                            group_tables=group_tables, mc_thresholds=mc_thresholds)


def _merge_groups(tables: list[list[evalstats.GroupAccuracy]]) -> list[evalstats.GroupAccuracy]:
    """Average group accuracy over seeds; group sizes add up."""
    merged = []
    for gi in range(len(tables[0])):
        label = tables[0][gi].label
        ns = [t[gi].n for t in tables]
        accs = [t[gi].accuracy for t in tables if t[gi].accuracy is not None]
        merged.append(evalstats.GroupAccuracy(
            label=label, n=int(sum(ns)),
            accuracy=float(np.mean(accs)) if accs else None))
    return merged
