"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

The end-to-end criteria run the full default pipeline for seeds 0, 1 and 2
(about 10 minutes per seed on one core).  Set ``CMRT_E2E_DIR`` to keep the
runs in a fixed directory and reuse complete ones on later invocations.
"""
import dataclasses
import json
import math
import os
import shutil
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import sacrebleu

from cmrt import analysis as an
from cmrt import diffcore as dc
from cmrt.cli import Run, main
from cmrt.config import load_config
from cmrt.corpus import WordAlignment
from cmrt.diffcore import Graph, Tensor
from cmrt.model import ToyModel
from cmrt.morpheus import VictimScorer, attack_candidates, batch_greedy_attack
from cmrt.objectives import (
    SPEECH, TEXT, ReplayDraws, TrainConfig, build_adversarial_mixup, build_mixup, cmrt_fn_loss, cmrt_tr_loss,
    contrastive_loss, contrastive_loss_matrix, kl_divergence, make_batch, mixup_choices, pool_word_reps,
)
from conftest import tiny_config

mpmath.mp.dps = 50

SEEDS = (0, 1, 2)
STEP, TOL = 1e-5, 1e-4
INSTANCES = 20
E2E_BUDGET_S = 15 * 60


# ---------------------------------------------------------------------------
# criterion 1: gradients


def _random_alignments(rng, n_words):
    als, s, t = [], 0, 0
    for i in range(n_words):
        ls, lt = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        als.append(WordAlignment(i, (s, s + ls), (t, t + lt)))
        s, t = s + ls, t + lt
    return als, s, t


def _adversarial_batch(utts, vocab, lex, rng):
    adv_x, adv_idx = [], []
    for u in utts:
        x, idx = list(u.x), []
        for i, w in enumerate(u.x):
            cands = attack_candidates(w, lex)
            if cands and rng.random() < 0.5:
                x[i] = cands[int(rng.integers(len(cands)))]
                idx.append(i)
        adv_x.append(x)
        adv_idx.append(idx)
    return make_batch(utts, vocab, adv_x=adv_x, adv_indices=adv_idx)


def _check(graph, loss, rng, leaves=None, n_leaves=8, coords=2):
    leaves = list(graph.leaves() if leaves is None else leaves)
    if len(leaves) > n_leaves:
        leaves = [leaves[k] for k in sorted(rng.choice(len(leaves), n_leaves, replace=False))]
    rep = dc.grad_check(graph, leaves, STEP, TOL, loss=loss, max_coords=coords, seed=int(rng.integers(2**31)))
    return max(rep.errors.values()), rep.passed


def test_criterion_1_gradient_suite(criterion, small_corpus, vocab):
    from cmrt.lexicon import toy_lexicon
    lex = toy_lexicon()
    t0 = time.time()
    worst: dict[str, float] = {}
    ok: dict[str, bool] = {}

    def note(name, err, passed):
        worst[name] = max(worst.get(name, 0.0), err)
        ok[name] = ok.get(name, True) and passed

    for k in range(INSTANCES):
        rng = np.random.default_rng(1000 + k)
        # contrastive loss on pooled word pairs
        n_words = int(rng.integers(2, 5))
        als, ns, nt = _random_alignments(rng, n_words)
        a = Tensor(rng.standard_normal((ns, 4)), True, "a")
        e = Tensor(rng.standard_normal((nt, 4)), True, "e")
        with Graph() as g:
            loss = contrastive_loss(pool_word_reps(a, e, als), 0.2)
        note("contrastive", *_check(g, loss, rng, coords=None))
        # symmetric and asymmetric KL on token distributions
        for mode in ("sym", "asym"):
            p = Tensor(rng.standard_normal((3, 6)), True, "p")
            q = Tensor(rng.standard_normal((3, 6)), True, "q")
            with Graph() as g:
                loss = kl_divergence(dc.log_softmax(p), dc.log_softmax(q), mode, np.array([1.0, 1.0, 0.0]))
            note(f"kl_{mode}", *_check(g, loss, rng, coords=None))
        # model losses: TR components and total, FN components and total
        model = ToyModel.init(tiny_config(len(vocab), d=4, heads=1, ffn=4), seed=k)
        pick = rng.choice(len(small_corpus.train), 2, replace=False)
        utts = [small_corpus.train[int(i)] for i in pick]
        draws = rng.random(64)
        with Graph() as g:
            out = cmrt_tr_loss(make_batch(utts, vocab), model, TrainConfig(), ReplayDraws(draws))
        for name, part in [*out.parts.items(), ("total", out.total)]:
            note(f"tr.{name}", *_check(g, part, rng))
        model.set_frozen(model.speech_params())
        with Graph() as g:
            out = cmrt_fn_loss(_adversarial_batch(utts, vocab, lex, rng), model, TrainConfig(lambda_kl=5.0),
                               ReplayDraws(draws))
        for name, part in [*out.parts.items(), ("total", out.total)]:
            note(f"fn.{name}", *_check(g, part, rng))
    elapsed = time.time() - t0
    checks = {f"{name} max rel err {worst[name]:.1e}": ok[name] for name in worst}
    checks[f"runtime {elapsed:.0f}s < 120s"] = elapsed < 120
    criterion(1, checks, f"{len(worst)} losses x {INSTANCES} instances, worst rel err "
                         f"{max(worst.values()):.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2: loss identities


def test_criterion_2_loss_identities(criterion, rng):
    checks = {}
    f = Tensor(rng.standard_normal((1, 5)))
    checks["contrastive batch-of-1 = 0"] = contrastive_loss_matrix(f, Tensor(f.values.copy()), 0.2).item() == 0.0

    lp = dc.log_softmax(Tensor(rng.standard_normal((4, 7))))
    lq = dc.log_softmax(Tensor(rng.standard_normal((4, 7))))
    checks["KL(P,P)=0 sym"] = abs(kl_divergence(lp, lp, "sym").item()) <= 1e-12
    checks["KL(P,P)=0 asym"] = abs(kl_divergence(lp, lp, "asym").item()) <= 1e-12
    checks["sym KL symmetric"] = abs(kl_divergence(lp, lq, "sym").item() - kl_divergence(lq, lp, "sym").item()) <= 1e-12

    # log(1 + e^-5): two orthogonal unit pairs with tau = 0.2
    got = contrastive_loss_matrix(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.2).item()
    want = mpmath.log(1 + mpmath.e ** -5)
    checks["log(1+e^-5)"] = abs(got - float(want)) <= 1e-9

    p, q = np.log([[0.7, 0.3]]), np.log([[0.5, 0.5]])
    mp_p, mp_q = [mpmath.mpf(7) / 10, mpmath.mpf(3) / 10], [mpmath.mpf(1) / 2] * 2
    pq = sum(a * mpmath.log(a / b) for a, b in zip(mp_p, mp_q))
    qp = sum(b * mpmath.log(b / a) for a, b in zip(mp_p, mp_q))
    checks["KL(0.7/0.3 || uniform)"] = abs(kl_divergence(Tensor(p), Tensor(q), "asym").item() - float(pq)) <= 1e-9
    checks["sym KL 0.7/0.3 vs uniform"] = abs(kl_divergence(Tensor(p), Tensor(q), "sym").item() - float(pq + qp)) <= 1e-9
    checks["frozen constants 0.08228/0.16946"] = (round(float(pq), 5), round(float(pq + qp), 5)) == (0.08228, 0.16946)
    criterion(2, checks, f"log(1+e^-5)={got:.12f}, KL={float(pq):.5f}/{float(pq + qp):.5f}")


def test_criterion_2_totals_equal_component_sums(criterion, small_corpus, vocab):
    from cmrt.lexicon import toy_lexicon
    checks = {}
    worst = 0.0
    for k in range(5):
        rng = np.random.default_rng(k)
        model = ToyModel.init(tiny_config(len(vocab)), seed=k)
        utts = small_corpus.train[3 * k:3 * k + 3]
        cfg = TrainConfig(lambda_ctr=float(rng.uniform(0.5, 2)), lambda_kl=float(rng.uniform(1, 8)))
        b = cmrt_tr_loss(make_batch(utts, vocab), model, cfg, rng).breakdown()
        want = b["st"] + b["mt"] + cfg.lambda_ctr * b["ctr"] + b["mix"] + cfg.lambda_kl / 2 * (b["kl_s"] + b["kl_x"])
        worst = max(worst, abs(b["total"] - want))
        b = cmrt_fn_loss(_adversarial_batch(utts, vocab, toy_lexicon(), rng), model, cfg, rng).breakdown()
        want = b["st"] + b["mt"] + b["mix"] + cfg.lambda_kl / 2 * (b["kl_s"] + b["kl_x"])
        worst = max(worst, abs(b["total"] - want))
    checks["TR/FN totals = component sums"] = worst <= 1e-12
    criterion(2, checks, f"max |total - sum| = {worst:.1e}")


# ---------------------------------------------------------------------------
# criterion 3: mixup


def test_criterion_3_mixup_contracts(criterion):
    rng = np.random.default_rng(0)
    checks = {}
    als, ns, nt = _random_alignments(rng, 6)
    a, e = Tensor(rng.standard_normal((ns, 4))), Tensor(rng.standard_normal((nt, 4)))
    checks["p*=1 all speech"] = np.array_equal(build_mixup(a, e, als, 1.0, rng).m.values, a.values)
    checks["p*=0 all text"] = np.array_equal(build_mixup(a, e, als, 0.0, rng).m.values, e.values)
    same = True
    for k in range(50):
        draws = np.random.default_rng(k).random(6)
        plain = build_mixup(a, e, als, 0.8, ReplayDraws(draws))
        adv = build_adversarial_mixup(a, e, e, {}, als, [], 0.8, ReplayDraws(draws))
        same &= plain.tags == adv.tags and np.array_equal(plain.m.values, adv.m.values)
    checks["empty attack set bit-equals mixup"] = bool(same)
    tags = mixup_choices(10_000, 0.8, np.random.default_rng(0))
    frac = tags.count(SPEECH) / 10_000
    checks["speech fraction within 0.02"] = abs(frac - 0.8) <= 0.02 and tags.count(TEXT) == 10_000 - tags.count(SPEECH)
    criterion(3, checks, f"speech fraction at p*=0.8 over 10,000 draws: {frac:.4f}")


# ---------------------------------------------------------------------------
# criteria 5 and 6: CKA and BLEU


def _hsic(k, l):
    n = k.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    return np.trace(k @ h @ l @ h) / (n - 1) ** 2


def test_criterion_5_cka(criterion):
    checks = {"CKA(X,X)=1": True, "orthogonal/scale invariance": True, "symmetry": True, "HSIC equivalence": True}
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(k)
        x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        c = float(rng.uniform(0.1, 10))
        checks["CKA(X,X)=1"] &= abs(an.linear_cka(x, x) - 1) <= 1e-10
        checks["orthogonal/scale invariance"] &= abs(an.linear_cka(x, c * x @ q) - 1) <= 1e-10
        checks["orthogonal/scale invariance"] &= abs(an.linear_cka(x @ q, y) - an.linear_cka(x, y)) <= 1e-10
        checks["symmetry"] &= abs(an.linear_cka(x, y) - an.linear_cka(y, x)) <= 1e-10
        kx, ky = x @ x.T, y @ y.T
        brute = _hsic(kx, ky) / math.sqrt(_hsic(kx, kx) * _hsic(ky, ky))
        err = abs(an.linear_cka(x, y) - brute)
        worst = max(worst, err)
        checks["HSIC equivalence"] &= err <= 1e-10
    criterion(5, {k: bool(v) for k, v in checks.items()}, f"max |CKA - centered HSIC| = {worst:.1e} over 20 5x3 instances")


PAIRS = [
    ("de hond lopen +t", "de hond lopen +t"),
    ("de kat", "de kat springen +de"),
    ("een vogel gisteren trappen +de", "een vogel gisteren trekken +de"),
    ("twee boer +en nu poetsen +nd", "twee boer +en poetsen +nd"),
    ("de zeer oud huis vaak verven +t", "de zeer oud huis verven +t"),
    ("meisje", "een meisje helpen +t"),
    ("de bal bal bal", "de bal"),
    ("een auto de tafel openen +t", "de auto een tafel openen +t"),
    ("de leraar nog klein +er appel heffen +n", "de leraar nog klein +er appel +en heffen +n"),
    ("x y z", "de tuin roepen +t"),
]


def test_criterion_6_bleu(criterion):
    checks = {}
    hyps, refs = [list(t) for t in zip(*PAIRS)]
    ref_corpus = sacrebleu.corpus_bleu(hyps, [refs], tokenize="none", smooth_method="none", force=True).score
    got = an.bleu(hyps, refs)
    checks["corpus BLEU vs reference"] = abs(got - ref_corpus) <= 0.01
    worst = 0.0
    for h, r in PAIRS:
        want = sacrebleu.sentence_bleu(h, [r], tokenize="none", smooth_method="floor", smooth_value=0.1,
                                       use_effective_order=True).score
        worst = max(worst, abs(an.sentence_bleu(h, r) - want))
    checks["sentence BLEU vs reference"] = worst <= 0.01
    checks["identity = 100"] = abs(an.bleu(refs, refs) - 100.0) <= 1e-9
    checks["zero overlap = 0"] = an.bleu(["a b c", "d e"], ["f g h", "i j"]) == 0.0
    criterion(6, checks, f"corpus {got:.4f} vs reference {ref_corpus:.4f}; worst sentence diff {worst:.1e}")


# ---------------------------------------------------------------------------
# end-to-end runs


def _run_complete(d: Path, sweep: bool) -> bool:
    need = [d / "analysis/summary.json", d / "timing.json"]
    if sweep:
        need.append(d / "sweep/report.csv")
    return all(p.exists() for p in need)


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """Run (or reuse) the default pipeline for each seed; the sweep runs for seed 0 only."""
    env = os.environ.get("CMRT_E2E_DIR")
    root = Path(env) if env else tmp_path_factory.mktemp("e2e")
    runs = {}
    for seed in SEEDS:
        d = root / f"seed{seed}"
        sweep = seed == 0
        if not (env and _run_complete(d, sweep)):
            if d.exists():
                shutil.rmtree(d)
            t0 = time.time()
            code = main(["run-all", "--out", str(d), "--seed", str(seed)])
            timing = {"pipeline_s": time.time() - t0, "exit": code}
            if sweep and code == 0:
                t0 = time.time()
                timing["sweep_exit"] = main(["sweep-kl", "--out", str(d), "--seed", str(seed)])
                timing["sweep_s"] = time.time() - t0
            d.mkdir(parents=True, exist_ok=True)
            (d / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
        runs[seed] = d
    return runs


def _summary(d):
    return json.loads((d / "analysis/summary.json").read_text())


def _manifest(d, stage):
    return json.loads((d / stage / "manifest.json").read_text())


@pytest.mark.slow
def test_criterion_7_end_to_end(criterion, e2e):
    checks, lines = {}, []
    wins_b, wins_c = 0, 0
    for seed, d in e2e.items():
        timing = json.loads((d / "timing.json").read_text())
        checks[f"seed {seed} pipeline exit 0"] = timing["exit"] == 0
        checks[f"seed {seed} runtime {timing['pipeline_s']:.0f}s < 900s"] = timing["pipeline_s"] < E2E_BUDGET_S
        if timing["exit"] != 0:
            continue
        s = _summary(d)
        base_c, base_a = s["base"]["clean-test"], s["base"]["adv-test"]
        tr_c, tr_a = s["tr"]["clean-test"], s["tr"]["adv-test"]
        fn_c, fn_a = s["fn"]["clean-test"], s["fn"]["adv-test"]
        as_c = s["advspeech"]["clean-test"]
        checks[f"(a) seed {seed} base adv < clean"] = base_a < base_c
        b = fn_a - tr_a >= 1.0
        fn_drop, as_drop = tr_c - fn_c, base_c - as_c
        c = fn_drop <= 2.0 and as_drop > fn_drop
        wins_b += b
        wins_c += c
        fn_inputs = _manifest(d, "fn")["inputs"]
        checks[f"(d) seed {seed} fn consumed no adversarial speech"] = (
            all(e["kind"] != "adversarial-speech" for e in fn_inputs)
            and not any(e["path"].startswith("attack/") and "speech" in e["path"] for e in fn_inputs)
            and any(e["kind"] == "adversarial-text" for e in fn_inputs))
        lines.append(f"seed {seed}: base {base_c:.1f}/{base_a:.1f} tr {tr_c:.1f}/{tr_a:.1f} "
                     f"fn {fn_c:.1f}/{fn_a:.1f} advsp clean {as_c:.1f} (fn-tr adv {fn_a - tr_a:+.2f}, "
                     f"fn drop {fn_drop:+.2f}, advsp drop {as_drop:+.2f})")
    checks[f"(b) fn-tr adv >= 1.0 on {wins_b}/3 seeds"] = wins_b >= 2
    checks[f"(c) robustness-accuracy pattern on {wins_c}/3 seeds"] = wins_c >= 2
    criterion(7, checks, "clean/adv BLEU; " + "; ".join(lines))


@pytest.mark.slow
def test_criterion_8_analysis(criterion, e2e):
    checks, lines = {}, []
    wins_cos, wins_cka = 0, 0
    for seed, d in e2e.items():
        if not (d / "analysis/summary.json").exists():
            checks[f"seed {seed} analysis present"] = False
            continue
        s = _summary(d)
        cos_tr, cos_mix = s["tr"]["mean_cosine"], s["mixup-only"]["mean_cosine"]
        cka_fn, cka_tr = s["fn"]["cka_vs_advspeech"], s["tr"]["cka_vs_advspeech"]
        wins_cos += cos_tr > cos_mix
        wins_cka += cka_fn >= cka_tr
        lines.append(f"seed {seed}: cosine tr {cos_tr:.3f} vs mixup-only {cos_mix:.3f}, "
                     f"CKA fn {cka_fn:.4f} vs tr {cka_tr:.4f}")
    checks[f"cosine tr > mixup-only on {wins_cos}/3 seeds"] = wins_cos >= 2
    checks[f"CKA fn >= tr on {wins_cka}/3 seeds"] = wins_cka >= 2
    sweep = e2e[0] / "sweep/report.csv"
    rows = an.read_report(sweep) if sweep.exists() else []
    checks["sweep table has 5 rows"] = [float(r["lambda_kl"]) for r in rows] == [1.0, 2.0, 5.0, 8.0, 10.0]
    trend = ", ".join(f"{float(r['lambda_kl']):g}:{float(r['bleu']):.1f}" for r in rows)
    criterion(8, checks, "; ".join(lines) + f"; sweep adv-test BLEU by lambda_kl {trend}")


# ---------------------------------------------------------------------------
# criterion 4: attack oracle on the seed-0 test split


@pytest.mark.slow
def test_criterion_4_attack_oracle(criterion, e2e):
    d = e2e[0]
    cfg = dataclasses.replace(load_config(None), out=str(d), seed=0)
    run = Run(cfg)
    lex, vocab = run.lexicon(), run.vocab()
    victim = _manifest(d, "attack")["victim"]
    scorer = VictimScorer(run.load(victim), vocab, cfg.attack.objective, cfg.corpus.max_piece_len,
                          cfg.attack.max_len)
    test = [u for u in run.split("test") if sum(1 for w in u.x if attack_candidates(w, lex)) <= 4]
    advs = batch_greedy_attack([u.x for u in test], [u.y for u in test], scorer, lex)
    reported = {json.loads(line)["id"]: json.loads(line)
                for line in (d / "attack/test.report.jsonl").read_text().splitlines()}
    n_trials = n_accepted = 0
    greedy_ok = sound_ok = mono_ok = report_ok = True
    for u, adv in zip(test, advs):
        single = scorer.single(u.y)
        prefix = list(u.x)
        running = single(prefix)
        mono_ok &= abs(running - adv.score_before) <= 1e-9
        for t in adv.trials:
            n_trials += 1
            i = t.index
            options = attack_candidates(u.x[i], lex)
            scores = [single(prefix[:i] + [w] + prefix[i + 1:]) for w in options]
            best = min(scores)
            want = options[scores.index(best)] if best < running else prefix[i]
            greedy_ok &= t.chosen == want and np.allclose(t.scores, scores, rtol=0, atol=1e-9)
            if want != prefix[i]:
                n_accepted += 1
                sound_ok &= (lex.phonemes(want) != lex.phonemes(u.x[i]) and lex.lemma(want) == lex.lemma(u.x[i])
                             and lex.pos(want) == lex.pos(u.x[i]))
                mono_ok &= best <= running
                prefix[i] = want
                running = best
        greedy_ok &= adv.x_adv == prefix
        mono_ok &= adv.score_after <= adv.score_before
        adv.validate(lex)
        report_ok &= reported[u.id]["x_adv"] == adv.x_adv
    checks = {"greedy = exhaustive per position": bool(greedy_ok),
              "phoneme filter sound on accepted replacements": bool(sound_ok),
              "running victim score non-increasing": bool(mono_ok),
              "pipeline attack output agrees": bool(report_ok)}
    criterion(4, checks, f"{len(test)} test sentences, {n_trials} positions, {n_accepted} accepted replacements "
                         f"(victim: {victim})")


# ---------------------------------------------------------------------------
# criterion 9: determinism


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_9_determinism(criterion, e2e, tmp_path):
    checks = {}
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "0"]) == 0
    a, b = _files(tmp_path / "a/data"), _files(tmp_path / "b/data")
    checks["gen-data rerun byte-identical"] = a == b and len(a) > 0
    checks["gen-data matches pipeline run"] = a == _files(e2e[0] / "data")

    d = tmp_path / "attack-rerun"
    (d / "data").mkdir(parents=True)
    for f in (e2e[0] / "data").iterdir():
        shutil.copy(f, d / "data" / f.name)
    victim = _manifest(e2e[0], "attack")["victim"]
    (d / victim).mkdir()
    shutil.copy(e2e[0] / victim / "model.ckpt", d / victim / "model.ckpt")
    assert main(["attack", "--out", str(d), "--seed", "0"]) == 0
    orig, again = _files(e2e[0] / "attack"), _files(d / "attack")
    orig.pop("manifest.json")
    again.pop("manifest.json")
    checks["attack rerun byte-identical"] = orig == again and len(orig) > 0
    criterion(9, checks, f"{len(a)} data files, {len(orig)} attack files compared")
