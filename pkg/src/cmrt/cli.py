"""Command-line pipeline: data generation, training stages, attack, analysis.

Every stage reads and writes files under one output directory and records
what it consumed in ``<stage>/manifest.json``::

    out/
      data/        train|dev|test.jsonl (+ .frames), lexicon.tsv, vocab.txt
      mt/          MT-pretrained checkpoint
      base/ tr/ mixup-only/ waco-only/
      attack/      <split>.adv.jsonl (text), <split>.speech.jsonl (speech), <split>.report.jsonl
      fn/ advspeech/ sweep/ analysis/
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analysis as an
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import (AlignedUtterance, SynthSpec, derive_seed, generate_corpus, read_corpus, utterance_seed,
                     vocabulary_tokens, write_corpus)
from .lexicon import InflectionLexicon, toy_lexicon
from .model import ModelConfig, ToyModel, Vocab, load_checkpoint, save_checkpoint
from .morpheus import (VictimScorer, attack_utterances, read_adversarial_text, speech_morpheus,
                       write_adversarial_text, write_attack_report)
from .objectives import TrainConfig, cmrt_fn_loss, cmrt_tr_loss, make_batch, mt_loss, st_loss
from .training import LoopConfig, StepLog, train
from .model import Ctx

log = logging.getLogger("cmrt")

VARIANTS = {
    # name: (output dir, use_ctr, use_mixup, use_mt)
    "cmrt": ("tr", True, True, True),
    "mixup-only": ("mixup-only", False, True, True),
    "waco-only": ("waco-only", True, False, True),
    "base": ("base", False, False, False),
}

# provenance kinds recorded in manifests
CLEAN = "clean-corpus"
ADV_TEXT = "adversarial-text"
ADV_SPEECH = "adversarial-speech"
CHECKPOINT = "checkpoint"


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


class Run:
    """Resolved paths and shared artifacts for one experiment directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.data = self.root / "data"

    def stage(self, name: str) -> Path:
        return self.root / name

    def seed(self, *parts) -> int:
        return derive_seed(self.cfg.seed, *parts)

    @property
    def corpus_seed(self) -> int:
        return self.seed("gen-data")

    def spec(self, lexicon: InflectionLexicon | None = None) -> SynthSpec:
        c = self.cfg.corpus
        if lexicon is None:
            lexicon = InflectionLexicon.read(c.lexicon) if c.lexicon else toy_lexicon()
        return SynthSpec(d_in=c.d_in, frames_per_phoneme=tuple(c.frames_per_phoneme), noise=c.noise,
                         max_piece_len=c.max_piece_len, p_the=c.p_the, p_adj=c.p_adj, p_object=c.p_object,
                         p_adverb=c.p_adverb, seed=c.voice_seed, lexicon=lexicon)

    def require(self, *paths: Path) -> None:
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise PipelineError(f"missing input(s): {', '.join(missing)}")

    def split(self, name: str) -> list[AlignedUtterance]:
        p = self.data / f"{name}.jsonl"
        self.require(p)
        return read_corpus(p)

    def lexicon(self) -> InflectionLexicon:
        p = self.data / "lexicon.tsv"
        self.require(p)
        return InflectionLexicon.read(p)

    def vocab(self) -> Vocab:
        p = self.data / "vocab.txt"
        self.require(p)
        return Vocab(p.read_text(encoding="utf-8").split("\n")[:-1])

    def checkpoint(self, stage: str) -> Path:
        return self.stage(stage) / "model.ckpt"

    def load(self, stage: str) -> ToyModel:
        model, _ = load_checkpoint(self.checkpoint(stage))
        return model


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run: Run, stage: str, inputs: Sequence[tuple[Path, str]], outputs: Sequence[Path],
                   extra: dict | None = None) -> Path:
    """Record consumed files (with provenance kind and hash) and produced files for a stage."""
    def entry(p: Path, kind: str | None = None):
        e = {"path": str(p.relative_to(run.root)), "sha256": _sha256(p)}
        if kind:
            e["kind"] = kind
        return e

    doc = {"stage": stage, "seed": run.cfg.seed,
           "inputs": [entry(p, k) for p, k in inputs],
           "outputs": [entry(p) for p in outputs if p.exists()]}
    if extra:
        doc.update(extra)
    path = run.stage(stage) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(run: Run, stage: str) -> dict:
    p = run.stage(stage) / "manifest.json"
    run.require(p)
    return json.loads(p.read_text(encoding="utf-8"))


def _frames_inputs(p: Path, kind: str) -> list[tuple[Path, str]]:
    return [(p, kind), (Path(str(p) + ".frames"), kind)]


def _loop(stage_cfg, seed: int, max_steps: int | None = None, average: int = 0) -> LoopConfig:
    return LoopConfig(epochs=getattr(stage_cfg, "epochs", 10 ** 6), max_steps=max_steps,
                      batch_size=stage_cfg.batch_size, lr=stage_cfg.lr, warmup=stage_cfg.warmup,
                      clip=stage_cfg.clip, patience=getattr(stage_cfg, "patience", 10 ** 6),
                      average_last=average, seed=seed)


def _dev_ce(model: ToyModel, dev: list[AlignedUtterance], vocab: Vocab, loss, max_piece_len: int) -> float:
    total = n = 0.0
    for i in range(0, len(dev), 100):
        b = make_batch(dev[i:i + 100], vocab, max_piece_len)
        k = float(b.targets.mask.sum())
        total += float(loss(b, model).total.values) * k
        n += k
    return total / n


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# stages


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    """Write train/dev/test splits, the lexicon and the vocabulary."""
    cfg.validate()
    run = Run(cfg)
    spec = run.spec()
    splits = generate_corpus(spec, cfg.corpus.n, run.corpus_seed)
    out = run.data
    out.mkdir(parents=True, exist_ok=True)
    for name, utts in splits.items():
        write_corpus(utts, out / f"{name}.jsonl")
    spec.lexicon.write(out / "lexicon.tsv")
    (out / "vocab.txt").write_text("".join(t + "\n" for t in vocabulary_tokens(spec)), encoding="utf-8")
    files = [out / f for f in ("train.jsonl", "train.jsonl.frames", "dev.jsonl", "dev.jsonl.frames",
                               "test.jsonl", "test.jsonl.frames", "lexicon.tsv", "vocab.txt")]
    write_manifest(run, "data", [], files, {"corpus_seed": run.corpus_seed,
                                            "sizes": {k: len(v) for k, v in splits.items()}})
    log.info("gen-data: %s", {k: len(v) for k, v in splits.items()})
    return out


def _model_config(cfg: ExperimentConfig, vocab: Vocab) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=len(vocab), d_in=cfg.corpus.d_in, d=m.d, n_speech=m.n_speech, n_enc=m.n_enc,
                       n_dec=m.n_dec, heads=m.heads, ffn=m.ffn, dropout=m.dropout)


def cmd_pretrain_mt(cfg: ExperimentConfig) -> Path:
    """Train the text path (embedding + translation encoder-decoder) on transcript -> translation."""
    run = Run(cfg)
    run.require(run.data / "train.jsonl", run.data / "dev.jsonl")
    vocab = run.vocab()
    train_utts, dev = run.split("train"), run.split("dev")
    mpl = cfg.corpus.max_piece_len
    model = ToyModel.init(_model_config(cfg, vocab), run.seed("init"))
    out = _fresh_dir(run.stage("mt"))
    dev_rows = []
    t0 = time.time()

    def on_epoch(e, dl):
        dev_rows.append([e + 1, f"{dl:.6f}"])
        log.info("pretrain-mt: epoch %d dev CE %.4f (%.0fs)", e + 1, dl, time.time() - t0)

    res = train(model, len(train_utts), lambda idx: make_batch([train_utts[i] for i in idx], vocab, mpl),
                lambda b, rng, _: mt_loss(b, model, Ctx(True, rng, cfg.model.dropout)),
                _loop(cfg.mt, run.seed("pretrain-mt"), cfg.mt.max_steps, cfg.mt.averaging()),
                dev_loss=lambda: _dev_ce(model, dev, vocab, mt_loss, mpl), lengths=train_utts,
                log=StepLog(out / "steps.csv"), on_epoch=on_epoch)
    _write_rows(out / "dev_ce.csv", ["epoch", "dev_ce"], dev_rows)
    save_checkpoint(model, out / "model.ckpt", {"stage": "mt", "vocab": vocab.itos, "steps": res.steps})
    write_manifest(run, "mt", _frames_inputs(run.data / "train.jsonl", CLEAN),
                   [out / "model.ckpt", out / "dev_ce.csv", out / "steps.csv"],
                   {"steps": res.steps, "epochs": res.epochs, "stopped_early": res.stopped_early})
    return out / "model.ckpt"


def cmd_train_tr(cfg: ExperimentConfig, variant: str = "cmrt") -> Path:
    """Multi-task training from the MT checkpoint (``base`` trains speech translation only)."""
    if variant not in VARIANTS:
        raise PipelineError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    stage, use_ctr, use_mix, use_mt = VARIANTS[variant]
    run = Run(cfg)
    run.require(run.checkpoint("mt"))
    vocab = run.vocab()
    train_utts, dev = run.split("train"), run.split("dev")
    mpl = cfg.corpus.max_piece_len
    scfg = cfg.st if variant == "base" else cfg.tr
    model = run.load("mt")
    tc = TrainConfig(tau=scfg.tau, p_star=scfg.p_star, lambda_ctr=scfg.lambda_ctr, lambda_kl=scfg.lambda_kl,
                     lr=scfg.lr, batch_size=scfg.batch_size, seed=cfg.seed, beam=cfg.eval.beam)
    out = _fresh_dir(run.stage(stage))
    epochs_dir = out / "epochs"
    epochs_dir.mkdir()
    keep = scfg.averaging()
    dev_rows = []
    t0 = time.time()

    def loss(b, rng, _):
        ctx = Ctx(True, rng, cfg.model.dropout)
        if variant == "base":
            return st_loss(b, model, ctx)
        return cmrt_tr_loss(b, model, tc, rng, ctx, use_ctr=use_ctr, use_mixup=use_mix, use_mt=use_mt)

    def on_epoch(e, dl):
        dev_rows.append([e + 1, f"{dl:.6f}"])
        if keep:
            save_checkpoint(model, epochs_dir / f"epoch{e + 1:03d}.ckpt", {"epoch": e + 1})
            stale = sorted(epochs_dir.glob("epoch*.ckpt"))[:-keep]
            for p in stale:
                p.unlink()
        log.info("train-tr[%s]: epoch %d dev ST CE %.4f (%.0fs)", variant, e + 1, dl, time.time() - t0)

    res = train(model, len(train_utts), lambda idx: make_batch([train_utts[i] for i in idx], vocab, mpl), loss,
                _loop(scfg, run.seed("train-tr", variant), scfg.max_steps, keep),
                dev_loss=lambda: _dev_ce(model, dev, vocab, st_loss, mpl), lengths=train_utts,
                log=StepLog(out / "steps.csv"), on_epoch=on_epoch)
    _write_rows(out / "dev_ce.csv", ["epoch", "dev_st_ce"], dev_rows)
    save_checkpoint(model, out / "model.ckpt", {"stage": stage, "variant": variant, "vocab": vocab.itos,
                                                "steps": res.steps, "averaged_epochs": len(res.epoch_states)})
    write_manifest(run, stage, [(run.checkpoint("mt"), CHECKPOINT), *_frames_inputs(run.data / "train.jsonl", CLEAN)],
                   [out / "model.ckpt", out / "steps.csv", out / "dev_ce.csv"],
                   {"variant": variant, "steps": res.steps, "epochs": res.epochs,
                    "stopped_early": res.stopped_early, "averaged_epochs": len(res.epoch_states)})
    return out / "model.ckpt"


def cmd_attack(cfg: ExperimentConfig, splits: Sequence[str] | None = None) -> Path:
    """Attack transcripts of each split against the victim's text path and synthesize adversarial speech."""
    run = Run(cfg)
    victim_stage = {"mt": "mt", "base": "base", "tr": "tr"}[cfg.attack.victim]
    run.require(run.checkpoint(victim_stage))
    vocab, lex = run.vocab(), run.lexicon()
    spec = run.spec(lex)
    corpus_seed = read_manifest(run, "data")["corpus_seed"]
    victim = run.load(victim_stage)
    scorer = VictimScorer(victim, vocab, cfg.attack.objective, cfg.corpus.max_piece_len, cfg.attack.max_len)
    out = run.stage("attack")
    out.mkdir(parents=True, exist_ok=True)
    inputs = [(run.checkpoint(victim_stage), CHECKPOINT)]
    outputs = []
    summary = {}
    for name in splits or cfg.attack.splits:
        utts = run.split(name)
        t0 = time.time()
        advs = attack_utterances(utts, scorer, lex)
        for a in advs:
            a.validate(lex)
        recs = [(u.id, a) for u, a in zip(utts, advs)]
        write_attack_report(recs, out / f"{name}.report.jsonl")
        write_adversarial_text(recs, out / f"{name}.adv.jsonl")
        adv_utts = [speech_morpheus(u, a, spec, utterance_seed(corpus_seed, u.id)) for u, a in zip(utts, advs)]
        write_corpus(adv_utts, out / f"{name}.speech.jsonl")
        inputs.append((run.data / f"{name}.jsonl", CLEAN))
        outputs += [out / f"{name}.report.jsonl", out / f"{name}.adv.jsonl", out / f"{name}.speech.jsonl",
                    out / f"{name}.speech.jsonl.frames"]
        summary[name] = {"sentences": len(utts), "attacked": sum(1 for a in advs if a.indices),
                         "replacements": sum(len(a.indices) for a in advs),
                         "mean_score_before": float(np.mean([a.score_before for a in advs])) if advs else 0.0,
                         "mean_score_after": float(np.mean([a.score_after for a in advs])) if advs else 0.0}
        log.info("attack[%s]: %d/%d sentences perturbed (%.0fs)", name, summary[name]["attacked"], len(utts),
                 time.time() - t0)
    # merge with earlier runs on other splits
    prev = {}
    mpath = out / "manifest.json"
    if mpath.exists():
        prev = json.loads(mpath.read_text()).get("splits", {})
    prev.update(summary)
    write_manifest(run, "attack", inputs, outputs, {"victim": victim_stage, "objective": cfg.attack.objective,
                                                     "splits": dict(sorted(prev.items()))})
    return out


def _tr_steps(run: Run) -> int:
    return int(read_manifest(run, "tr")["steps"])


def _ft_steps(run: Run, ft) -> int:
    return ft.steps if ft.steps is not None else max(1, _tr_steps(run) // 8)


def cmd_finetune_fn(cfg: ExperimentConfig, lambda_kl: float | None = None, stage: str = "fn") -> Path:
    """Robustness fine-tuning on clean speech plus adversarial transcripts; speech encoder frozen."""
    run = Run(cfg)
    adv_path = run.stage("attack") / "train.adv.jsonl"
    run.require(run.checkpoint("tr"), adv_path, run.data / "train.jsonl")
    vocab = run.vocab()
    mpl = cfg.corpus.max_piece_len
    train_utts = run.split("train")
    adv = read_adversarial_text(adv_path)
    missing = [u.id for u in train_utts if u.id not in adv]
    if missing:
        raise PipelineError(f"{adv_path}: no adversarial transcript for {len(missing)} utterances (e.g. {missing[0]})")
    ft = cfg.fn
    lam = ft.lambda_kl if lambda_kl is None else float(lambda_kl)
    tc = TrainConfig(p_star=ft.p_star, lambda_kl=lam, lr=ft.lr, batch_size=ft.batch_size, seed=cfg.seed,
                     beam=cfg.eval.beam)
    model = run.load("tr")
    frozen = model.speech_params()
    model.set_frozen(frozen)
    before = {k: model[k].values.copy() for k in frozen}
    steps = _ft_steps(run, ft)
    out = _fresh_dir(run.stage(stage))

    def batch(idx):
        us = [train_utts[i] for i in idx]
        return make_batch(us, vocab, mpl, adv_x=[adv[u.id][0] for u in us], adv_indices=[adv[u.id][1] for u in us])

    res = train(model, len(train_utts), batch,
                lambda b, rng, _: cmrt_fn_loss(b, model, tc, rng, Ctx(True, rng, cfg.model.dropout)),
                _loop(ft, run.seed("finetune-fn", lam), steps), lengths=train_utts,
                log=StepLog(out / "steps.csv", adversarial=True))
    changed = [k for k in frozen if not np.array_equal(before[k], model[k].values)]
    if changed:
        raise PipelineError(f"frozen speech parameters changed during fine-tuning: {changed[:3]}")
    model.set_frozen(frozen, False)
    save_checkpoint(model, out / "model.ckpt", {"stage": stage, "lambda_kl": lam, "vocab": vocab.itos,
                                                "steps": res.steps})
    write_manifest(run, stage, [(run.checkpoint("tr"), CHECKPOINT), *_frames_inputs(run.data / "train.jsonl", CLEAN),
                                (adv_path, ADV_TEXT)],
                   [out / "model.ckpt", out / "steps.csv"],
                   {"steps": res.steps, "lambda_kl": lam, "frozen": frozen})
    return out / "model.ckpt"


def cmd_baseline_advspeech_fn(cfg: ExperimentConfig) -> Path:
    """Fine-tune the base speech model with the plain ST loss on adversarial speech."""
    run = Run(cfg)
    sp = run.stage("attack") / "train.speech.jsonl"
    run.require(run.checkpoint("base"), sp, run.checkpoint("tr"))
    vocab = run.vocab()
    mpl = cfg.corpus.max_piece_len
    adv_utts = read_corpus(sp)
    model = run.load("base")
    ft = cfg.advspeech
    steps = _ft_steps(run, ft)
    out = _fresh_dir(run.stage("advspeech"))
    res = train(model, len(adv_utts), lambda idx: make_batch([adv_utts[i] for i in idx], vocab, mpl),
                lambda b, rng, _: st_loss(b, model, Ctx(True, rng, cfg.model.dropout)),
                _loop(ft, run.seed("baseline-advspeech-fn"), steps), lengths=adv_utts,
                log=StepLog(out / "steps.csv"))
    save_checkpoint(model, out / "model.ckpt", {"stage": "advspeech", "vocab": vocab.itos, "steps": res.steps})
    write_manifest(run, "advspeech", [(run.checkpoint("base"), CHECKPOINT), *_frames_inputs(sp, ADV_SPEECH)],
                   [out / "model.ckpt", out / "steps.csv"], {"steps": res.steps})
    return out / "model.ckpt"


def _test_sets(run: Run) -> dict[str, list[AlignedUtterance]]:
    adv = run.stage("attack") / "test.speech.jsonl"
    run.require(adv)
    return {"clean-test": run.split("test"), "adv-test": read_corpus(adv)}


def _lam_tag(v: float) -> str:
    return f"{v:g}".replace(".", "p")


def cmd_sweep_kl(cfg: ExperimentConfig, lambdas: Sequence[float] | None = None) -> Path:
    """Fine-tune once per KL weight, each in its own directory, and tabulate test BLEU."""
    run = Run(cfg)
    lambdas = list(lambdas if lambdas is not None else cfg.sweep.lambdas)
    vocab = run.vocab()
    sets = _test_sets(run)
    dev = run.split("dev")
    root = run.stage("sweep")
    root.mkdir(parents=True, exist_ok=True)
    adv_rows, clean_rows = [], []
    for lam in lambdas:
        stage = f"sweep/lambda_{_lam_tag(lam)}"
        cmd_finetune_fn(cfg, lam, stage)
        model = run.load(stage)
        cos = an.alignment_cosine(model, dev, vocab, cfg.corpus.max_piece_len)
        for name, rows in (("adv-test", adv_rows), ("clean-test", clean_rows)):
            b = an.corpus_bleu(model, sets[name], vocab, "speech", cfg.eval.beam, cfg.eval.max_len,
                               cfg.corpus.max_piece_len)
            rows.append(an.SimilarityReport("cmrt-fn", name, b, cos, None, float(lam), cfg.seed))
        log.info("sweep-kl: lambda %g adv BLEU %.2f clean BLEU %.2f", lam, adv_rows[-1].bleu, clean_rows[-1].bleu)
    an.emit_report(adv_rows, root / "report.csv", {"metric": "BLEU on attacked test speech", "seed": cfg.seed})
    an.emit_report(clean_rows, root / "report_clean.csv", {"metric": "BLEU on clean test speech", "seed": cfg.seed})
    return root / "report.csv"


ANALYZE_MODELS = ("base", "tr", "mixup-only", "waco-only", "fn", "advspeech")


def cmd_analyze(cfg: ExperimentConfig, models: Sequence[str] | None = None) -> Path:
    """BLEU on clean/attacked test speech, word alignment cosine on dev, and CKA against the
    adversarial-speech baseline on attacked dev speech."""
    run = Run(cfg)
    vocab = run.vocab()
    mpl = cfg.corpus.max_piece_len
    if models is None:
        models = [m for m in ANALYZE_MODELS if run.checkpoint(m).exists()]
    run.require(*(run.checkpoint(m) for m in models))
    sets = _test_sets(run)
    dev = run.split("dev")
    adv_dev_path = run.stage("attack") / "dev.speech.jsonl"
    adv_dev = read_corpus(adv_dev_path) if adv_dev_path.exists() else None
    ref = None
    if adv_dev is not None and "advspeech" in models:
        ref = an.sentence_representations(run.load("advspeech"), adv_dev, vocab, "speech", mpl)
    reports = []
    summary: dict[str, dict[str, float]] = {}
    for name in models:
        model = run.load(name)
        cos = an.alignment_cosine(model, dev, vocab, mpl)
        cka = None
        if ref is not None:
            cka = an.linear_cka(an.sentence_representations(model, adv_dev, vocab, "speech", mpl), ref)
        summary[name] = {"mean_cosine": cos}
        if cka is not None:
            summary[name]["cka_vs_advspeech"] = cka
        for ds, utts in sets.items():
            b = an.corpus_bleu(model, utts, vocab, "speech", cfg.eval.beam, cfg.eval.max_len, mpl)
            reports.append(an.SimilarityReport(name, ds, b, cos, cka, None, cfg.seed))
            summary[name][ds] = b
        log.info("analyze: %s %s", name, {k: round(v, 3) for k, v in summary[name].items()})
    out = run.stage("analysis")
    out.mkdir(parents=True, exist_ok=True)
    meta = {"cka_layer": an.CKA_LAYER + " (final translation-encoder output, sentence mean)",
            "cka_reference": "advspeech" if ref is not None else None,
            "cka_dataset": "attacked dev speech", "cosine_dataset": "clean dev",
            "beam": cfg.eval.beam, "seed": cfg.seed}
    an.emit_report(reports, out / "report.csv", meta)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    inputs = [(run.checkpoint(m), CHECKPOINT) for m in models]
    if adv_dev is not None:
        inputs += _frames_inputs(adv_dev_path, ADV_SPEECH)
    write_manifest(run, "analysis", inputs, [out / "report.csv", out / "summary.json"], {"models": list(models)})
    return out / "report.csv"


def cmd_run_all(cfg: ExperimentConfig, sweep: bool = False) -> Path:
    """Every stage in dependency order."""
    cmd_gen_data(cfg)
    cmd_pretrain_mt(cfg)
    for v in ("base", "cmrt", "mixup-only"):
        cmd_train_tr(cfg, v)
    cmd_attack(cfg)
    cmd_finetune_fn(cfg)
    cmd_baseline_advspeech_fn(cfg)
    if sweep:
        cmd_sweep_kl(cfg)
    return cmd_analyze(cfg)


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cmrt", description="Cross-modal robustness transfer desk lab")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("pretrain-mt", parents=[common], help="pre-train the text translation path")
    s = sub.add_parser("train-tr", parents=[common], help="alignment training (or an ablation)")
    s.add_argument("--variant", choices=list(VARIANTS), default="cmrt")
    s = sub.add_parser("attack", parents=[common], help="inflectional attack + adversarial speech")
    s.add_argument("--split", action="append", choices=["train", "dev", "test"],
                   help="split to attack (repeatable; default: all configured splits)")
    s = sub.add_parser("finetune-fn", parents=[common], help="robustness fine-tuning on adversarial text")
    s.add_argument("--lambda-kl", type=float)
    sub.add_parser("baseline-advspeech-fn", parents=[common], help="fine-tune base model on adversarial speech")
    s = sub.add_parser("sweep-kl", parents=[common], help="fine-tune across KL weights")
    s.add_argument("--lambdas", type=_floats, help="comma-separated KL weights")
    s = sub.add_parser("analyze", parents=[common], help="BLEU, alignment cosine and CKA reports")
    s.add_argument("--models", help="comma-separated stage names (default: all present)")
    s = sub.add_parser("run-all", parents=[common], help="run every stage")
    s.add_argument("--sweep", action="store_true", help="include the KL sweep")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    import dataclasses

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg.validate()


COMMANDS: dict[str, Callable[[ExperimentConfig, argparse.Namespace], object]] = {
    "gen-data": lambda c, a: cmd_gen_data(c),
    "pretrain-mt": lambda c, a: cmd_pretrain_mt(c),
    "train-tr": lambda c, a: cmd_train_tr(c, a.variant),
    "attack": lambda c, a: cmd_attack(c, a.split),
    "finetune-fn": lambda c, a: cmd_finetune_fn(c, a.lambda_kl),
    "baseline-advspeech-fn": lambda c, a: cmd_baseline_advspeech_fn(c),
    "sweep-kl": lambda c, a: cmd_sweep_kl(c, a.lambdas),
    "analyze": lambda c, a: cmd_analyze(c, a.models.split(",") if a.models else None),
    "run-all": lambda c, a: cmd_run_all(c, a.sweep),
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg, args)
    except (ConfigError, PipelineError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"cmrt {args.command}: error: {msg}", file=sys.stderr)
        return 1
    if result is not None:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
