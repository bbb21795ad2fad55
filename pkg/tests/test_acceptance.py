"""Acceptance checks for the engine's numerical, statistical, and protocol
guarantees. Each numbered test prints one verdict line (visible under -s;
pytest -v shows the same pass/fail per test). Tolerances and runtime bounds
are asserted inside the tests themselves."""

import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from uaip import (autodiff as ad, checkpoint, concepts, data, evalstats,
                  experiment, nets, oracle, pursuit, service, uncertainty)
from uaip.config import parse_config

from refimpl import (enumerate_mi, enumerate_posterior, exhaustive_wilcoxon,
                     finite_diff_grad, pair_count_auc, random_joint, rel_err)


def _verdict(num: int, ok: bool, detail: str) -> None:
    line = f"[{num:02d}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    assert ok, line


def test_01_closed_form_uncertainty_values():
    t0 = time.perf_counter()
    ok = True
    for p, want in ((0.5, 1.0), (0.0, 0.0), (0.75, 0.8112781244591328)):
        ok &= abs(uncertainty.entropy_uncertainty(p) - want) < 1e-9
    worked = [([0.5, 0.5, 0.5, 0.5], 0.25, 0.0),
              ([0.0, 1.0], 0.0, 0.25),
              ([0.2, 0.4], 0.20, 0.01)]
    for samples, au, eu in worked:
        est = uncertainty.mc_total_uncertainty(samples)
        ok &= abs(est.aleatoric - au) <= 1e-12
        ok &= abs(est.epistemic - eu) <= 1e-12
        ok &= abs(est.total - (au + eu)) <= 1e-12
        ok &= est.total == est.aleatoric + est.epistemic
    rng = np.random.default_rng(0)
    for _ in range(200):
        est = uncertainty.mc_total_uncertainty(rng.random(16))
        ok &= est.total == est.aleatoric + est.epistemic
    dt = time.perf_counter() - t0
    ok &= dt < 1.0
    _verdict(1, ok, f"entropy and MC decomposition closed forms, exact "
                    f"total = aleatoric + epistemic ({dt:.2f}s < 1s)")


def test_02_gradients_and_masked_selection():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    n_cases = 0
    worst = 0.0

    def check(build, x0, h=1e-5):
        nonlocal n_cases, worst
        loss, leaves = build(x0)
        ad.backward(loss)
        analytic = np.concatenate([lf.grad.ravel() for lf in leaves])
        numeric = finite_diff_grad(lambda f: float(build(f)[0].value[0, 0]), x0, h=h)
        worst = max(worst, rel_err(analytic, numeric))
        n_cases += 1
        assert rel_err(analytic, numeric) < 1e-4

    def gsum(t, w=None):
        r, c = t.shape
        if w is not None:
            t = ad.mul(t, ad.tensor(w))
        return ad.matmul(ad.matmul(ad.tensor(np.ones((1, r))), t),
                         ad.tensor(np.ones((c, 1))))

    for _ in range(25):
        r, mid, c = rng.integers(2, 5, size=3)
        w1 = rng.normal(size=(r, mid))
        onehot = np.zeros((r, c))
        onehot[np.arange(r), rng.integers(0, c, r)] = 1.0
        x0 = rng.normal(size=r * mid + mid * c)
        x0[np.abs(x0) < 0.1] += 0.3  # keep relu inputs away from the kink

        def build_a(flat, r=r, mid=mid, c=c, w1=w1, onehot=onehot):
            a = ad.tensor(flat[:r * mid].reshape(r, mid))
            b = ad.tensor(flat[r * mid:].reshape(mid, c))
            h = ad.relu(ad.matmul(ad.mul(a, ad.tensor(w1)), b))
            return ad.softmax_cross_entropy(h, onehot), [a, b]

        check(build_a, x0)

    for _ in range(25):
        r, mid, c = rng.integers(2, 5, size=3)
        targets = rng.integers(0, 2, size=(r, c)).astype(np.float64)
        x0 = rng.normal(size=r * mid + mid * c + c)

        def build_b(flat, r=r, mid=mid, c=c, targets=targets):
            a = ad.tensor(flat[:r * mid].reshape(r, mid))
            b = ad.tensor(flat[r * mid:r * mid + mid * c].reshape(mid, c))
            bias = ad.tensor(flat[r * mid + mid * c:].reshape(1, c))
            z = ad.add_bias(ad.scale(ad.matmul(a, b), 1.7), bias)
            return ad.sigmoid_bce(z, targets), [a, b, bias]

        check(build_b, x0)

    for _ in range(25):
        r, c = rng.integers(2, 5, size=2)
        keep = (rng.random((r, c)) < 0.7).astype(np.float64)
        onehot = np.zeros((r, c))
        onehot[np.arange(r), rng.integers(0, c, r)] = 1.0
        x0 = rng.normal(size=2 * r * c)

        def build_c(flat, r=r, c=c, keep=keep, onehot=onehot):
            a = ad.tensor(flat[:r * c].reshape(r, c))
            b = ad.tensor(flat[r * c:].reshape(r, c))
            h = ad.dropout(ad.add(a, b), keep, rate=0.3)
            return ad.softmax_cross_entropy(h, onehot), [a, b]

        check(build_c, x0)

    # Straight-through: forward is hard, but the defined gradient is the
    # temperature softmax Jacobian, so differentiate that surrogate.
    for _ in range(25):
        r, c = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        avail = rng.random((r, c)) < 0.7
        avail[~avail.any(axis=1), 0] = True
        w = rng.normal(size=(r, c))
        tau = float(rng.uniform(0.4, 2.0))
        x0 = rng.normal(size=r * c)

        x = ad.tensor(x0.reshape(r, c))
        loss = gsum(ad.st_softmax(x, tau=tau, available=avail), w)
        ad.backward(loss)
        analytic = x.grad.ravel()

        def soft_obj(flat, r=r, c=c, avail=avail, w=w, tau=tau):
            z = (flat.reshape(r, c) + ad.MASK_LOGIT * (~avail)) / tau
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            soft = e / e.sum(axis=1, keepdims=True)
            return float((soft * w).sum())

        numeric = finite_diff_grad(soft_obj, x0, h=1e-5)
        worst = max(worst, rel_err(analytic, numeric))
        n_cases += 1
        assert rel_err(analytic, numeric) < 1e-4

    draws = 100_000
    logits = rng.normal(size=(draws, 8))
    avail = rng.random((draws, 8)) < 0.6
    avail[~avail.any(axis=1), 0] = True
    out = ad.st_softmax(ad.tensor(logits), tau=0.5, mode="sample",
                        rng=np.random.default_rng(99), available=avail)
    hard = out.value
    one_hot = bool(np.isin(hard, (0.0, 1.0)).all()
                   and (hard.sum(axis=1) == 1.0).all())
    unmasked = bool((hard[~avail] == 0.0).all())

    dt = time.perf_counter() - t0
    ok = n_cases == 100 and one_hot and unmasked and dt < 30.0
    _verdict(2, ok, f"{n_cases} finite-difference cases (worst rel err "
                    f"{worst:.2e} < 1e-4), {draws} selection draws one-hot "
                    f"and never masked ({dt:.1f}s < 30s)")


def test_03_exact_oracle_agreement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    agree = 0
    worst_post = 0.0
    for case in range(50):
        k = int(rng.integers(2, 4))
        m = int(rng.integers(1, 7))
        cells = random_joint(rng, k, m)
        table = oracle.JointTable(cells)
        history = rng.choice([-1, 0, 1], size=m, p=[0.25, 0.5, 0.25])
        history[rng.integers(0, m)] = 0  # keep at least one query open
        mask = None
        avail = history == 0
        if case % 2:
            mask = (rng.random(m) < 0.3).astype(np.int8)
            mask[np.argmax(avail)] = 0
            avail = avail & (mask == 0)

        got = oracle.greedy_ip_next(table, history, mask)
        scores = np.array([enumerate_mi(cells, history, q) for q in range(m)])
        scores[~avail] = -np.inf
        assert got == int(np.argmax(scores))
        agree += 1

        post = oracle.posterior(table, history)
        expect = enumerate_posterior(cells, history)
        worst_post = max(worst_post, float(np.abs(post - expect).max()))
        assert np.abs(post - expect).max() <= 1e-12

    dt = time.perf_counter() - t0
    ok = agree == 50 and dt < 10.0
    _verdict(3, ok, f"greedy choice == enumerated argmax on {agree}/50 joints, "
                    f"posterior within {worst_post:.1e} of cell summation "
                    f"({dt:.1f}s < 10s)")


def test_04_learned_pursuit_near_bayes():
    t0 = time.perf_counter()
    spec = data.JointSpec(
        n_classes=2, n_queries=8,
        class_prior=np.array([0.5, 0.5]),
        truth_table=[[1, -1, 1, -1, 1, -1, 1, -1],
                     [1, 1, -1, -1, 1, 1, -1, -1]],
        reliability=np.linspace(0.6, 0.95, 8))
    table = oracle.build_joint(spec)
    bayes = oracle.bayes_accuracy(table)
    first_oracle = oracle.greedy_ip_next(table, np.zeros(8, dtype=np.int64))

    train = data.synth_generate(spec, 2000, seed=101)
    val = data.synth_generate(spec, 400, seed=102)
    test = data.synth_generate(spec, 500, seed=103)
    cfg = pursuit.PursuitTrainConfig(epochs=200, lr=3e-3, batch_size=64,
                                     hidden=(64, 64), seed=0)
    model = pursuit.train_pursuit(
        pursuit.PursuitData(answers=train.answers, labels=train.labels, n_classes=2),
        pursuit.PursuitData(answers=val.answers, labels=val.labels, n_classes=2),
        cfg)

    correct = 0
    first_match = 0
    for i in range(test.n):
        # Exhaustive stop so the classifier is judged on full histories,
        # matching what the Bayes ceiling sees.
        trace = pursuit.infer(model, test.answers[i], stop_threshold=1.0)
        correct += int(trace.predicted == test.labels[i])
        first_match += int(trace.steps[0].query == first_oracle)
    acc = correct / test.n
    fm = first_match / test.n

    dt = time.perf_counter() - t0
    ok = acc >= bayes - 0.03 and fm >= 0.80 and dt < 300.0
    _verdict(4, ok, f"trained accuracy {acc:.4f} vs Bayes {bayes:.4f} "
                    f"(gap {bayes - acc:+.4f} <= 0.03), first query matches "
                    f"oracle on {fm:.0%} >= 80% ({dt:.0f}s < 300s)")


def test_05_oracle_masks_recover_corrupted_groups(tmp_path):
    t0 = time.perf_counter()
    cfg = parse_config({
        "name": "acc5",
        "seeds": list(range(10)),
        "variants": ["vip", "uav_oracle"],
        "dataset": {"synth": {"n_classes": 4, "n_queries": 8,
                              "n_samples": 1200, "reliability": 1.0}},
        "answers": {"kind": "truth"},
        "corruption": {"test_counts": [0, 1, 2, 3],
                       "train_counts": [0, 1, 2, 3]},
        "train": {"epochs": 80, "lr": 3e-3, "hidden": [64, 64]},
    })
    result = experiment.run_experiment(cfg, tmp_path / "acc5")

    def group_means(variant):
        tables = result.group_tables[variant]
        return [float(np.mean([t[g].accuracy for t in tables]))
                for g in range(4)]

    vip = group_means("vip")
    uav = group_means("uav_oracle")
    ok = True
    for j in range(4):
        ok &= uav[j] >= vip[j] - 1e-12
        if j >= 2:
            ok &= uav[j] - vip[j] >= 0.05
    dt = time.perf_counter() - t0
    ok &= dt < 900.0
    gaps = ", ".join(f"j={j}: {u - v:+.3f}" for j, (u, v) in
                     enumerate(zip(uav, vip)))
    _verdict(5, ok, f"masked pursuit >= plain on every corruption group and "
                    f"by >= 0.05 for j >= 2 over 10 seeds ({gaps}) "
                    f"({dt:.0f}s < 900s)")


def test_06_masking_shortens_explanations(tmp_path):
    cfg = parse_config({
        "name": "acc6",
        "seeds": list(range(10)),
        "variants": ["vip", "uav_mc"],
        "dataset": {"synth": {"n_classes": 4, "n_queries": 8,
                              "n_samples": 1200, "reliability": 1.0}},
        "answers": {"kind": "simulator",
                    "simulator": {"base_accuracy": 0.85, "ambiguity_rate": 0.3}},
        "train": {"epochs": 80, "lr": 3e-3, "hidden": [64, 64]},
    })
    result = experiment.run_experiment(cfg, tmp_path / "acc6")
    by_method = {s.method: s for s in result.summaries}
    q_vip = by_method["vip"].queries_mean
    q_uav = by_method["uav_mc"].queries_mean
    a_vip = by_method["vip"].accuracy_mean
    a_uav = by_method["uav_mc"].accuracy_mean
    ratio = q_uav / q_vip
    ok = ratio <= 0.9 and a_uav >= a_vip - 1e-12
    _verdict(6, ok, f"mean queries {q_uav:.2f} vs {q_vip:.2f} "
                    f"(ratio {ratio:.2f} <= 0.9) at accuracy "
                    f"{a_uav:.3f} >= {a_vip:.3f}, 10 seeds")


def test_07_uncertainty_detects_wrong_answers():
    cfg = parse_config({"dataset": {"synth": {
        "n_classes": 4, "n_queries": 8, "n_samples": 1000,
        "reliability": 1.0}}})
    ds = data.synth_generate(cfg.dataset.synth.to_joint_spec(), 1000, seed=0)
    params = concepts.SimulatorParams(base_accuracy=0.85, ambiguity_rate=0.3)
    probs, mc, log = concepts.simulate_answers(ds, params, seed=0)
    _, _, total = uncertainty.mc_uncertainty_arrays(mc.samples)
    auc_mc = evalstats.correctness_detection_auc(total.ravel(), log.correct.ravel())
    ent = uncertainty.entropy_uncertainty(probs.probs)
    auc_ent = evalstats.correctness_detection_auc(ent.ravel(), log.correct.ravel())
    ok = auc_mc > 0.70 and auc_mc >= auc_ent
    _verdict(7, ok, f"Monte-Carlo wrongness AUC {auc_mc:.4f} > 0.70 and "
                    f">= entropy AUC {auc_ent:.4f}")


def test_08_rank_statistics_match_enumeration():
    rng = np.random.default_rng(21)
    ok = True
    for case in range(100):
        n = case % 10 + 1
        a = rng.normal(size=n)
        b = a + rng.normal(size=n)
        if case % 3 == 0:
            b = a + np.round((b - a) * 5) / 5  # induce tied |differences|
        if not np.any(a != b):
            b[0] += 1.0
        ok &= evalstats.wilcoxon_signed_rank(a, b) == exhaustive_wilcoxon(a, b)

    for case in range(100):
        n = int(rng.integers(4, 40))
        scores = rng.normal(size=n)
        if case % 2:
            scores = np.round(scores, 1)  # force score ties
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        ok &= evalstats.auc(scores, labels) == pair_count_auc(scores, labels)
    _verdict(8, ok, "signed-rank p == exhaustive enumeration (100 vectors, "
                    "n <= 10); AUC == pair counting (100 tied score sets)")


def test_09_protocol_invariants(tmp_path):
    spec = data.JointSpec(
        n_classes=3, n_queries=4,
        class_prior=np.full(3, 1 / 3),
        truth_table=[[1, 1, -1, -1], [-1, 1, 1, -1], [1, -1, 1, 1]],
        reliability=np.full(4, 0.9))
    ds = data.synth_generate(spec, 120, seed=0)
    cfg = pursuit.PursuitTrainConfig(epochs=5, lr=3e-3, batch_size=16,
                                     hidden=(16,), seed=0)
    plain = pursuit.train_pursuit(
        pursuit.PursuitData(answers=ds.answers, labels=ds.labels, n_classes=3),
        config=cfg)
    zeros = pursuit.train_pursuit(
        pursuit.PursuitData(answers=ds.answers, labels=ds.labels, n_classes=3,
                            masks=np.zeros_like(ds.answers)),
        config=cfg, variant="uav_oracle")
    identical = plain.train_meta["train_curve"] == zeros.train_meta["train_curve"]
    for la, lb in zip(plain.querier + plain.classifier,
                      zeros.querier + zeros.classifier):
        identical &= bool(np.array_equal(la.weight.value, lb.weight.value))
        identical &= bool(np.array_equal(la.bias.value, lb.bias.value))

    boundary = uncertainty.compute_mask(
        np.array([0.94, 0.95, 0.96]), 0.95).tolist() == [0, 1, 1]
    default_te = uncertainty.entropy_threshold() == 0.95
    sched = nets.TemperatureSchedule(1.0, 0.2)
    tau_exact = sched.value_at(0, 200) == 1.0 and sched.value_at(199, 200) == 0.2

    p1 = tmp_path / "m1.json"
    p2 = tmp_path / "m2.json"
    checkpoint.save_checkpoint(plain, p1)
    loaded = checkpoint.load_checkpoint(p1)
    ckpt_ok = True
    for la, lb in zip(plain.querier + plain.classifier,
                      loaded.querier + loaded.classifier):
        ckpt_ok &= bool(np.array_equal(la.weight.value, lb.weight.value))
        ckpt_ok &= bool(np.array_equal(la.bias.value, lb.bias.value))
    checkpoint.save_checkpoint(loaded, p2)
    ckpt_ok &= p1.read_bytes() == p2.read_bytes()

    exp_cfg = parse_config({
        "name": "acc9",
        "seeds": list(range(10)),
        "variants": ["vip", "uav_mc"],
        "dataset": {"synth": {"n_classes": 2, "n_queries": 4,
                              "n_samples": 120, "reliability": 0.9}},
        "answers": {"kind": "simulator"},
        "train": {"epochs": 2, "lr": 1e-3, "hidden": [8]},
    })
    ra = experiment.run_experiment(exp_cfg, tmp_path / "ra")
    rb = experiment.run_experiment(exp_cfg, tmp_path / "rb")
    det = all((ra.output_dir / n).read_bytes() == (rb.output_dir / n).read_bytes()
              for n in ("config.json", "table1.csv", "table1.txt", "manifest.json"))
    for v in ("vip", "uav_mc"):
        for i in range(10):
            det &= ra.run_for(v, i) == rb.run_for(v, i)

    ok = identical and boundary and default_te and tau_exact and ckpt_ok and det
    _verdict(9, ok, "zero-mask training bit-identical to unmasked; u == T "
                    "masks; default entropy threshold 0.95; temperature "
                    "endpoints exact; checkpoints byte-stable; 10-seed "
                    "experiment deterministic per seed")


def test_10_session_replay_equivalence():
    spec = data.JointSpec(
        n_classes=3, n_queries=5,
        class_prior=np.full(3, 1 / 3),
        truth_table=np.array([[1, 1, -1, -1, 1],
                              [-1, 1, 1, -1, -1],
                              [1, -1, 1, 1, -1]]),
        reliability=np.full(5, 0.9))
    ds = data.synth_generate(spec, 200, seed=0)
    model = pursuit.train_pursuit(
        pursuit.PursuitData(answers=ds.answers, labels=ds.labels, n_classes=3),
        config=pursuit.PursuitTrainConfig(epochs=20, lr=3e-3, batch_size=16,
                                          hidden=(32,), seed=0))
    client = TestClient(service.create_app(model, stop_threshold=0.9))
    rng = np.random.default_rng(2024)
    sessions = 0
    for _ in range(50):
        log = {}
        skipped = set()
        s = client.post("/sessions", json={}).json()
        sid = s["session_id"]
        while s["status"] == "active":
            q = s["next_query"]["index"]
            assert q not in skipped and q not in log
            choice = str(rng.choice(["yes", "no", "unsure"], p=[0.4, 0.4, 0.2]))
            if choice == "unsure":
                skipped.add(q)
            else:
                log[q] = choice
            s = client.post(f"/sessions/{sid}/answer",
                            json={"query_index": q, "answer": choice}).json()

        def provider(q, log=log):
            return service.ANSWER_VALUES.get(log.get(q), pursuit.UNSURE)

        trace = pursuit.infer(model, provider, stop_threshold=0.9)
        answered = [st for st in s["steps"] if st["answer"] != "unsure"]
        assert [st["query"] for st in answered] == [t.query for t in trace.steps]
        for st, t in zip(answered, trace.steps):
            assert st["posterior"] == [float(p) for p in t.posterior]
        final = (trace.steps[-1].posterior if trace.steps
                 else pursuit.class_posterior(model, np.zeros(model.n_queries)))
        assert s["posterior"] == [float(p) for p in final]
        assert sorted(s["skipped"]) == trace.masked
        assert sorted(skipped) == trace.masked
        assert s["termination"] == trace.termination
        assert s["predicted"] == trace.predicted
        sessions += 1
    _verdict(10, sessions == 50,
             f"{sessions}/50 scripted sessions replay offline bit-identically; "
             f"skipped queries never reappear")
