"""End-to-end acceptance checks; each test records one PASS/FAIL line."""

import json
import time
import zlib
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from latentcot import codi
from latentcot import tensor as tn
from latentcot.cli import main as cli_main
from latentcot.codi import HiddenCapture, LossWeights, codi_infer, codi_step, kd_loss
from latentcot.config import load_config
from latentcot.data import (
    LANGUAGES, CorpusConfig, build_corpus, corpus_stats, expected_digits, gen_problem,
    reference_budgets, render, rendered_digits,
)
from latentcot.evaluate import ExperimentMatrix, compression_ratio, evaluate, reports_csv, run_matrix
from latentcot.tensor import Tensor
from latentcot.train import CheckpointError, TrainConfig, load, save, train
from latentcot.transformer import ModelConfig, init_params

from gradcheck import check, sampled_param_check
from test_tensor import OPS

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DESK = ModelConfig(vocab_size=80)  # d_model=64, 4 layers


def frozen(cap):
    return HiddenCapture([Tensor(l.data.copy()) for l in cap.layers], cap.position)


def grads(params):
    return {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for n, t in params.named()}


def codi_with_constant_teacher(params, ex, w, t_const):
    t_loss, _ = codi.teacher_loss(params, ex)
    state = codi.latent_rollout(params, ex.question)
    s_loss, s_cap = codi.student_loss(params, ex, state)
    d = kd_loss(t_const, s_cap, w.normalize_kd)
    return tn.scale(s_loss, w.alpha) + tn.scale(d, w.beta) + tn.scale(t_loss, w.gamma)


@pytest.fixture(scope="module")
def example():
    corpus = build_corpus(CorpusConfig(budgets={"en": 4}, test_fraction=0.0, max_difficulty=3))
    return corpus.examples[0]


def test_gradient_fidelity(criterion, example):
    start = time.perf_counter()
    worst = {}
    for name, (fn, shapes) in OPS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(10):
            arrays = [rng.normal(size=s) for s in shapes]
            with tn.no_grad():
                probe = Tensor(rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape))
            err = check(lambda *t: tn.sum(tn.mul(fn(*t), probe)), arrays)
            worst[name] = max(worst.get(name, 0.0), err)
    cfg = ModelConfig(vocab_size=80, d_model=16, n_layers=2, n_heads=2, max_seq_len=96, proj_hidden=16)
    weights = LossWeights(alpha=1.0, beta=20.0, gamma=1.0)
    composite = 0.0
    for point in range(10):
        params = init_params(cfg, seed=100 + point)
        with tn.no_grad():
            t_const = frozen(codi.teacher_loss(params, example)[1])
        composite = max(composite, sampled_param_check(
            params, lambda p: codi_with_constant_teacher(p, example, weights, t_const),
            np.random.default_rng(point), per_tensor=2))
    elapsed = time.perf_counter() - start
    op_worst = max(worst.values())
    criterion("gradient fidelity", op_worst < 1e-4 and composite < 1e-4 and elapsed < 120,
              f"{len(OPS)} ops x 10 points max rel err {op_worst:.2e}; composite CODI loss x 10 points "
              f"{composite:.2e}; {elapsed:.1f}s")


def test_stop_gradient_unidirectional(criterion, example):
    params = init_params(DESK, seed=3)
    w = LossWeights()
    tn.backward(codi_step(params, example, w).total)
    live = grads(params)
    params.zero_grad()
    _, t_cap = codi.teacher_loss(params, example)
    tn.backward(codi_with_constant_teacher(params, example, w, frozen(t_cap)))
    diff = max(float(np.max(np.abs(g - live[n]))) for n, g in grads(params).items())
    # teacher-path-only gradient of beta * KD: student capture held constant
    params.zero_grad()
    _, t_cap = codi.teacher_loss(params, example)
    _, s_cap = codi.student_loss(params, example, codi.latent_rollout(params, example.question))
    tn.backward(tn.scale(kd_loss(t_cap, frozen(s_cap)), w.beta))
    through_teacher = max(float(np.max(np.abs(g))) for g in grads(params).values())
    criterion("stop-gradient unidirectionality", diff == 0.0 and through_teacher == 0.0,
              f"max |grad - constant-copy grad| = {diff}; teacher-path KD grad max = {through_teacher}")


def test_loss_composition_linear(criterion, example):
    params = init_params(DESK, seed=4)
    basis = []
    for w in (LossWeights(1, 0, 0), LossWeights(0, 1, 0), LossWeights(0, 0, 1)):
        params.zero_grad()
        out = codi_step(params, example, w)
        tn.backward(out.total)
        basis.append((out.total.item(), grads(params)))
    worst = 0.0
    for a, b, c in [(1.0, 20.0, 1.0), (0.5, 3.0, 2.0), (2.0, 0.0, 0.25)]:
        params.zero_grad()
        out = codi_step(params, example, LossWeights(a, b, c))
        tn.backward(out.total)
        worst = max(worst, abs(out.total.item() - (a * basis[0][0] + b * basis[1][0] + c * basis[2][0])))
        for n, g in grads(params).items():
            lin = a * basis[0][1][n] + b * basis[1][1][n] + c * basis[2][1][n]
            worst = max(worst, float(np.max(np.abs(g - lin))))
    lw = TrainConfig.reference().loss_weights
    ok = worst < 1e-10 and lw.beta == 20 and lw.normalize_kd and (lw.alpha, lw.gamma) == (1, 1)
    criterion("loss composition", ok, f"max deviation from linearity {worst:.1e}; default profile "
              f"alpha={lw.alpha} beta={lw.beta} gamma={lw.gamma} normalized KD={lw.normalize_kd}")


def test_latent_rollout_contract(criterion, example):
    params = init_params(DESK, seed=5)
    sizes, gap = {}, 0.0
    for k in (1, 2, 6):
        z = codi.latent_rollout(params, example.question, k).z
        sizes[k] = len(z)
        slow = codi.latent_rollout_reforward(params, example.question, k)
        gap = max(gap, max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(z, slow)))
    out = codi_infer(params, example.question, example.answer_prompt, example.answer[-1])
    ok = all(sizes[k] == k for k in sizes) and gap < 1e-9 and out.explicit_tokens == 0 and out.thinking_tokens == 6
    criterion("latent rollout contract", ok, f"|Z| {sizes}; cache vs re-forward max diff {gap:.1e}; "
              f"explicit tokens {out.explicit_tokens}, thinking tokens {out.thinking_tokens}")


def test_compression_accounting(criterion):
    a, b = round(compression_ratio(176, 6), 1), round(compression_ratio(299, 6), 1)
    ok = a == 29.3 and b == 49.8 and abs(a - 29) <= 1 and abs(b - 50) <= 1
    criterion("compression accounting", ok, f"(176, 6) -> {a}x, (299, 6) -> {b}x")


@pytest.fixture(scope="module")
def overfit():
    cfg = load_config(CONFIGS / "overfit.json")
    corpus = build_corpus(cfg.corpus)
    model = cfg.model_config(len(corpus.vocab))
    out = {}
    for objective in ("codi", "sft"):
        start = time.perf_counter()
        res = train(cfg.train.replace(objective=objective), corpus.train(), model, corpus.vocab.fingerprint())
        rep = evaluate(res.checkpoint, corpus.train(), objective, corpus.vocab, max_total=cfg.max_total)
        out[objective] = (res, rep, time.perf_counter() - start)
    return corpus, model, cfg, out


def test_overfit_sanity(criterion, overfit):
    corpus, model, cfg, out = overfit
    accs = {o: out[o][1].row("en").accuracy for o in out}
    secs = {o: out[o][2] for o in out}
    ok = (len(corpus.train()) == 64 and model.d_model == 64 and model.n_layers == 4 and cfg.train.epochs <= 10
          and all(a >= 95.0 for a in accs.values()) and sum(secs.values()) < 600)
    criterion("overfit sanity", ok, f"64 examples, d_model=64, 4 layers, {cfg.train.epochs} epochs, batch "
              f"{cfg.train.batch_size}: CODI {accs['codi']:.2f}%, CoT-SFT {accs['sft']:.2f}% "
              f"({secs['codi']:.0f}s + {secs['sft']:.0f}s)")


def test_corpus_invariants(criterion):
    corpus = build_corpus(CorpusConfig(budgets=reference_budgets(2000)))
    counts = corpus.counts()
    share = 100.0 * counts["ur"] / sum(counts.values())
    langs_of = defaultdict(set)
    for e in corpus.examples:
        langs_of[e.source_problem_id].add(e.language)
    overlap = sum(len(v) > 1 for v in langs_of.values())
    numerals = all(rendered_digits(e, corpus.vocab) == expected_digits(corpus.problems[e.source_problem_id])
                   for e in corpus.examples)
    digit_ids = set(corpus.vocab.digit_ids)
    for seed in range(50):
        p = gen_problem(seed, 4)
        spellings = {tuple(t for t in render(p, lang, corpus.vocab).question if t in digit_ids)
                     for lang in LANGUAGES.values()}
        numerals &= len(spellings) == 1
    pct_sum = sum(r.percent for r in corpus_stats(corpus))
    equal = [r.percent for r in corpus_stats(build_corpus(CorpusConfig(budgets={t: 50 for t in LANGUAGES})))]
    ok = abs(share - 1.2) < 0.1 and overlap == 0 and numerals and abs(pct_sum - 100) <= 0.1 and equal == [20.0] * 5
    criterion("corpus invariants", ok, f"low-resource share {share:.2f}%; cross-language overlaps {overlap}; "
              f"numerals preserved {numerals}; stats sum {pct_sum:.1f}%; equal budgets -> {equal}")


def test_experiment_matrix(criterion, tmp_path):
    cfg = load_config(CONFIGS / "desk.json")
    corpus = build_corpus(cfg.corpus)
    start = time.perf_counter()
    result = run_matrix(cfg.matrix, corpus, cfg.model_config(len(corpus.vocab)), cfg.train,
                        cfg.max_answer, cfg.max_total)
    elapsed = time.perf_counter() - start
    reps = result.reports
    held = next(r for r in reps if r.setup == "Multi-Lingual" and r.objective == "codi")
    ood_ok = all(
        {row.language for row in r.rows if row.ood} == set(r.languages) - set(s.train_languages)
        for r in reps for s in cfg.matrix.setups if s.name == r.setup)
    deltas = {(c.setup, c.language): c.delta for c in result.comparison}
    ok = len(reps) == 6 and held.row("ur").ood and ood_ok and elapsed < 1800
    criterion("experiment matrix", ok, f"{len(reps)} reports in {elapsed:.0f}s; held-out Urdu-like row OOD="
              f"{held.row('ur').ood}; observed CODI-SFT delta on held-out language "
              f"{deltas[('Multi-Lingual', 'ur')]:+.2f} (not asserted)")


def test_determinism(criterion, tmp_path):
    run = json.loads((CONFIGS / "desk.json").read_text())
    run["corpus"]["budgets"] = {"en": 10, "de": 10, "fr": 10, "zh": 10, "ur": 5}
    run["train"]["epochs"] = 2
    path = tmp_path / "det.json"
    path.write_text(json.dumps(run))
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        assert cli_main(["matrix", "--config", str(path), "--out", str(out), "--seed", "11"]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    same = files == sorted(p.name for p in outs[1].iterdir()) and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    kinds = {k: sum(f.endswith(k) for f in files) for k in (".log.csv", ".ckpt", "report.csv")}
    criterion("determinism", same and kinds[".ckpt"] == 6, f"seed 11, two runs, {len(files)} artifacts "
              f"({kinds['.log.csv']} loss logs, {kinds['.ckpt']} checkpoints, reports) byte-identical: {same}")


def test_persistence(criterion, overfit, tmp_path):
    corpus, _, cfg, out = overfit
    same, rejected = True, False
    for objective, (res, rep, _) in out.items():
        path = tmp_path / f"{objective}.ckpt"
        save(res.checkpoint, path)
        back = load(path, vocab_hash=corpus.vocab.fingerprint())
        again = evaluate(back, corpus.train(), objective, corpus.vocab, max_total=cfg.max_total)
        same &= reports_csv([again]) == reports_csv([rep])
    raw = bytearray((tmp_path / "codi.ckpt").read_bytes())
    raw[30] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    try:
        load(tmp_path / "bad.ckpt")
    except CheckpointError:
        rejected = True
    criterion("persistence", same and rejected,
              f"reloaded checkpoints reproduce accuracy exactly: {same}; corrupted header rejected: {rejected}")
