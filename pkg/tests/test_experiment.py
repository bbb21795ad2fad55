"""Experiment runner: seed preparation, masks, artifacts, determinism."""

import json

import numpy as np
import pytest

from uaip import concepts, data, experiment, oracle
from uaip.config import parse_config
from uaip.errors import DataError


def fast_raw(**kw):
    raw = {
        "name": "t",
        "seeds": [0],
        "variants": ["vip"],
        "dataset": {"synth": {"n_classes": 2, "n_queries": 4, "n_samples": 80,
                              "reliability": 0.9}},
        "answers": {"kind": "simulator"},
        "train": {"epochs": 3, "lr": 1e-3, "hidden": [8]},
    }
    raw.update(kw)
    return raw


class TestPrepareSeed:
    def test_splits_partition(self):
        cfg = parse_config(fast_raw())
        ctx = experiment.prepare_seed(cfg, 0)
        sizes = {k: v.n for k, v in ctx.splits.items()}
        assert sizes["train"] + sizes["val"] + sizes["test"] == 80
        assert ctx.test_groups == [("all", "test")]

    def test_simulator_bundles_carry_probs_and_mc(self):
        cfg = parse_config(fast_raw())
        ctx = experiment.prepare_seed(cfg, 0)
        b = ctx.bundles["test"]
        assert b.probs is not None and b.mc is not None
        assert b.mc.shape[0] == ctx.splits["test"].n
        assert (b.provided == concepts.answers_from_probs(b.probs)).all()

    def test_truth_bundles_are_exact(self):
        cfg = parse_config(fast_raw(answers={"kind": "truth"}))
        ctx = experiment.prepare_seed(cfg, 0)
        for key, b in ctx.bundles.items():
            assert (b.provided == ctx.splits[key].answers).all()
            assert (b.provided == b.truth).all()
            assert b.probs is None

    def test_corruption_groups_and_truth_restored(self):
        cfg = parse_config(fast_raw(
            answers={"kind": "truth"},
            corruption={"test_counts": [0, 2]}))
        ctx = experiment.prepare_seed(cfg, 0)
        assert ctx.test_groups == [("0", "test_j0"), ("2", "test_j2")]
        b0, b2 = ctx.bundles["test_j0"], ctx.bundles["test_j2"]
        # j=0: provided == truth; j=2: exactly two flips per row vs truth.
        assert (b0.provided == b0.truth).all()
        diff = (b2.provided != b2.truth).sum(axis=1)
        assert (diff == 2).all()
        assert (b2.flip_counts == 2).all()
        # Same underlying truth either way.
        assert (b0.truth == b2.truth).all()

    def test_train_corruption_mixes_counts(self):
        cfg = parse_config(fast_raw(
            answers={"kind": "truth"},
            corruption={"test_counts": [0], "train_counts": [0, 1, 2]}))
        ctx = experiment.prepare_seed(cfg, 0)
        b = ctx.bundles["train"]
        diff = (b.provided != b.truth).sum(axis=1)
        assert set(np.unique(diff)) <= {0, 1, 2}
        assert (diff == b.flip_counts).all()

    def test_import_source_round_trip(self, tmp_path):
        # Export simulator output, re-import it: bundles must agree rowwise.
        cfg = parse_config(fast_raw())
        ctx = experiment.prepare_seed(cfg, 0)
        full = data.concat([ctx.splits["train"], ctx.splits["val"], ctx.splits["test"]])
        params = cfg.answers.simulator.to_params()
        probs, mc, _ = concepts.simulate_answers(full, params, seed=0)
        path = tmp_path / "probs.csv"
        concepts.export_probabilities(probs, path, mc)

        cfg2 = parse_config(fast_raw(
            answers={"kind": "import", "import_path": str(path)}))
        ctx2 = experiment.prepare_seed(cfg2, 0)
        b, b2 = ctx.bundles["test"], ctx2.bundles["test"]
        assert (b.probs == b2.probs).all()
        assert (b.mc == b2.mc).all()

    def test_import_missing_id_names_it(self, tmp_path):
        cfg = parse_config(fast_raw())
        ctx = experiment.prepare_seed(cfg, 0)
        short = data.subset(ctx.splits["train"], [0, 1])
        probs, mc, _ = concepts.simulate_answers(short, seed=0)
        path = tmp_path / "p.csv"
        concepts.export_probabilities(probs, path, mc)
        cfg2 = parse_config(fast_raw(
            answers={"kind": "import", "import_path": str(path)}))
        with pytest.raises(DataError, match="first missing"):
            experiment.prepare_seed(cfg2, 0)


class TestMasks:
    def test_vip_and_cbm_unmasked(self):
        cfg = parse_config(fast_raw(variants=["vip", "cbm"]))
        ctx = experiment.prepare_seed(cfg, 0)
        for variant in ("vip", "cbm"):
            masks, cal = experiment.variant_masks(variant, cfg, ctx)
            assert cal is None
            assert all(m is None for m in masks.values())

    def test_oracle_masks_equal_flips(self):
        cfg = parse_config(fast_raw(
            variants=["vip", "uav_oracle"],
            answers={"kind": "truth"},
            corruption={"test_counts": [0, 1, 3]}))
        ctx = experiment.prepare_seed(cfg, 0)
        masks, _ = experiment.variant_masks("uav_oracle", cfg, ctx)
        for key in ("test_j0", "test_j1", "test_j3"):
            b = ctx.bundles[key]
            expect = oracle.oracle_mask(b.provided, b.truth)
            np.testing.assert_array_equal(masks[key], expect)
            assert (masks[key].sum(axis=1) == b.flip_counts).all()

    def test_entropy_mask_thresholds_probs(self):
        cfg = parse_config(fast_raw(variants=["vip", "uav_entropy"],
                                    uncertainty={"entropy_threshold": 0.9}))
        ctx = experiment.prepare_seed(cfg, 0)
        masks, _ = experiment.variant_masks("uav_entropy", cfg, ctx)
        from uaip import uncertainty as unc
        b = ctx.bundles["val"]
        expect = unc.compute_mask(unc.entropy_uncertainty(b.probs), 0.9)
        np.testing.assert_array_equal(masks["val"], expect)

    def test_mc_mask_uses_calibrated_threshold(self):
        cfg = parse_config(fast_raw(variants=["vip", "uav_mc"]))
        ctx = experiment.prepare_seed(cfg, 0)
        masks, cal = experiment.variant_masks("uav_mc", cfg, ctx)
        assert cal is not None and cal.threshold > 0.0
        from uaip import uncertainty as unc
        b = ctx.bundles["test"]
        _, _, total = unc.mc_uncertainty_arrays(b.mc)
        np.testing.assert_array_equal(
            masks["test"], unc.compute_mask(total, cal.threshold))

    def test_mc_without_samples_rejected(self):
        cfg = parse_config(fast_raw(variants=["vip", "uav_mc"]))
        ctx = experiment.prepare_seed(cfg, 0)
        ctx.bundles["val"].mc = None
        with pytest.raises(DataError, match="Monte-Carlo"):
            experiment.variant_masks("uav_mc", cfg, ctx)


class TestRunExperiment:
    def test_artifacts_and_structure(self, tmp_path):
        cfg = parse_config(fast_raw(seeds=[0, 1], variants=["vip", "uav_mc"]))
        result = experiment.run_experiment(cfg, tmp_path / "out")
        out = result.output_dir
        manifest = json.loads((out / "manifest.json").read_text())
        for name in manifest["files"]:
            assert (out / name).exists()
        assert (out / "table1.csv").read_text().startswith("method,")
        assert len(result.runs["vip"]) == 2
        assert len(result.mc_thresholds) == 2
        # Reference p-value present for the non-reference method.
        by_method = {s.method: s for s in result.summaries}
        assert by_method["uav_mc"].p_value is not None
        assert by_method["vip"].p_value is None

    def test_byte_identical_reruns(self, tmp_path):
        cfg = parse_config(fast_raw(seeds=[0, 1]))
        a = experiment.run_experiment(cfg, tmp_path / "a").output_dir
        b = experiment.run_experiment(cfg, tmp_path / "b").output_dir
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_failed_marker_on_error(self, tmp_path):
        cfg = parse_config(fast_raw(
            answers={"kind": "import", "import_path": str(tmp_path / "missing.csv")}))
        with pytest.raises(Exception):
            experiment.run_experiment(cfg, tmp_path / "out")
        marker = tmp_path / "out" / "FAILED"
        assert marker.exists()
        assert "missing.csv" in marker.read_text()

    def test_group_files_written_with_corruption(self, tmp_path):
        cfg = parse_config(fast_raw(
            variants=["vip", "uav_oracle"],
            answers={"kind": "truth"},
            corruption={"test_counts": [0, 2]}))
        result = experiment.run_experiment(cfg, tmp_path / "out")
        out = result.output_dir
        for v in ("vip", "uav_oracle"):
            lines = (out / f"groups_{v}.csv").read_text().splitlines()
            assert lines[0] == "group,n,accuracy"
            assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "2"]

    def test_cbm_query_cost_is_full(self, tmp_path):
        cfg = parse_config(fast_raw(variants=["cbm"]))
        result = experiment.run_experiment(cfg, tmp_path / "out")
        assert result.runs["cbm"][0].mean_queries == 4.0

    def test_default_output_location(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = parse_config(fast_raw(name="here", output_dir="runs"))
        result = experiment.run_experiment(cfg)
        assert result.output_dir.resolve() == (tmp_path / "runs" / "here").resolve()
        assert (result.output_dir / "manifest.json").exists()
