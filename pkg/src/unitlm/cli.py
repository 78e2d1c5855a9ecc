"""Command-line pipeline.

Typical order::

    unitlm fit-codebook -w run
    unitlm gen-data -w run
    unitlm fit-centroids -w run
    unitlm init-embed -w run
    unitlm train -w run
    unitlm eval-pref -w run

Every command reads the same YAML config (``--config``, plus ``--set
section.key=value`` overrides), verifies its inputs against their manifests
and writes a manifest next to each output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, synthgen
from .augment import AugmentError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .distill import DistillError, fit_centroids, fit_coarse, load_distill, save_distill
from .eval import (EvalError, ModelScorer, make_preference_pairs, preference_accuracy,
                   probe_over_stages, run_ablation)
from .interleave import InterleaveError, speech_only
from .model import Journal, ModelError, NonFiniteLossError
from .pipeline import Trainer, World, build_codebook, build_vocab_for, init_state
from .provenance import ProvenanceError, verify, write_manifest
from .scoring import ScoreError, score_many
from .vocab import UnifiedVocab, VocabError

log = logging.getLogger("unitlm")

EXIT_OK, EXIT_CONFIG, EXIT_PROVENANCE, EXIT_CHECKPOINT, EXIT_DATA, EXIT_NONFINITE = 0, 2, 3, 4, 5, 6
EXIT_CODES = [
    (ConfigError, EXIT_CONFIG),
    (ModelError, EXIT_CONFIG),
    (ProvenanceError, EXIT_PROVENANCE),
    (CheckpointError, EXIT_CHECKPOINT),
    (NonFiniteLossError, EXIT_NONFINITE),
    ((synthgen.SynthError, VocabError, DistillError, AugmentError, InterleaveError, ScoreError,
      EvalError, FileNotFoundError), EXIT_DATA),
]

# artifact names inside the work directory
CODEBOOK, VOCAB, CORPUS, DISTILL = "codebook.npy", "vocab.txt", "corpus.jsonl", "distill.bin"
INIT_CKPT, FINAL_CKPT, JOURNAL, CKPT_DIR = "init.ckpt", "final.ckpt", "journal.jsonl", "ckpt"


def stage_name(stage: float) -> str:
    return f"stage{int(round(stage * 100)):03d}.ckpt"


class Ctx:
    def __init__(self, args):
        self.args = args
        self.work = Path(args.workdir)
        self.work.mkdir(parents=True, exist_ok=True)
        self.cfg: RunConfig = load_config(args.config, args.set)

    def p(self, name) -> Path:
        return self.work / name

    def emit(self, report: dict, text: str) -> None:
        print(json.dumps(report, indent=2, sort_keys=True) if self.args.json else text)

    # -- shared loaders, all provenance-checked --
    def codebook(self):
        verify(self.p(CODEBOOK), self.cfg, ("world",))
        return synthgen.Codebook.load(self.p(CODEBOOK))

    def world(self) -> World:
        cb = self.codebook()
        for name in (VOCAB, CORPUS, DISTILL):
            verify(self.p(name), self.cfg, ("world",))
        corpus = synthgen.read_corpus(self.p(CORPUS))
        centroids, coarse = load_distill(self.p(DISTILL))
        vocab = UnifiedVocab.load(self.p(VOCAB))
        return World(self.cfg.world, cb, vocab, corpus, centroids, coarse)

    def world_inputs(self):
        return [self.p(n) for n in (CODEBOOK, VOCAB, CORPUS, DISTILL)]

    def pairs(self, cb, vocab) -> dict:
        e = self.cfg.eval
        return {f: make_preference_pairs(
                    synthgen.make_pairs(self.cfg.world.latent, cb, e.n_pairs, e.pair_seed, f,
                                        e.pair_length), vocab, f)
                for f in e.factors}

    def manifest(self, path, inputs=(), extra=None):
        write_manifest(path, self.args.command, self.cfg, inputs, extra)

    def write_report(self, name: str, report: dict, inputs=()) -> Path:
        path = self.p(name)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.manifest(path, inputs)
        return path


# --- subcommands -------------------------------------------------------------

def cmd_fit_codebook(ctx: Ctx) -> int:
    cb = build_codebook(ctx.cfg.world)
    cb.save(ctx.p(CODEBOOK))
    ctx.manifest(ctx.p(CODEBOOK), extra={"codebook_digest": cb.digest()})
    ctx.emit({"codebook": str(ctx.p(CODEBOOK)), "n_codes": cb.n_codes, "digest": cb.digest()},
             f"codebook: {cb.n_codes} codes x {cb.dim} dims -> {ctx.p(CODEBOOK)}")
    return EXIT_OK


def cmd_gen_data(ctx: Ctx) -> int:
    w = ctx.cfg.world
    cb = ctx.codebook()
    corpus = synthgen.make_corpus(w.latent, cb, w.n_train, w.corpus_seed, w.min_len, w.max_len)
    synthgen.write_corpus(ctx.p(CORPUS), corpus)
    vocab = build_vocab_for(w.latent, cb.n_codes)
    vocab.save(ctx.p(VOCAB))
    for name in (CORPUS, VOCAB):
        ctx.manifest(ctx.p(name), [ctx.p(CODEBOOK)])
    frames = sum(len(s) for s in corpus)
    ctx.emit({"utterances": len(corpus), "frames": frames, "vocab_size": vocab.total_size},
             f"corpus: {len(corpus)} utterances, {frames} frames; vocab size {vocab.total_size}")
    return EXIT_OK


def cmd_fit_centroids(ctx: Ctx) -> int:
    verify(ctx.p(CORPUS), ctx.cfg, ("world",))
    cb = ctx.codebook()
    corpus = synthgen.read_corpus(ctx.p(CORPUS))
    cents = fit_centroids(corpus, cb.n_codes)
    K = min(ctx.cfg.world.n_buckets, int(cents.populated.sum()))
    coarse = fit_coarse(cents, K, seed=ctx.cfg.world.coarse_seed)
    save_distill(ctx.p(DISTILL), cents, coarse)
    ctx.manifest(ctx.p(DISTILL), [ctx.p(CORPUS), ctx.p(CODEBOOK)])
    ctx.emit({"populated_codes": int(cents.populated.sum()), "buckets": coarse.K,
              "kmeans_objective": coarse.history[-1]},
             f"centroids: {int(cents.populated.sum())}/{cb.n_codes} codes seen; "
             f"{coarse.K} coarse buckets (objective {coarse.history[-1]:.4f})")
    return EXIT_OK


def cmd_init_embed(ctx: Ctx) -> int:
    world = ctx.world()
    state = init_state(world, ctx.cfg.train)
    state.meta["config_hash"] = ctx.cfg.digest()
    save_checkpoint(state, ctx.p(INIT_CKPT))
    ctx.manifest(ctx.p(INIT_CKPT), ctx.world_inputs())
    ctx.emit({"checkpoint": str(ctx.p(INIT_CKPT)), "init": ctx.cfg.train.init,
              "sigma": state.meta.get("sigma")},
             f"init ({ctx.cfg.train.init}) -> {ctx.p(INIT_CKPT)}")
    return EXIT_OK


def _train_loop(ctx: Ctx, state, world, stop_after) -> int:
    tc = ctx.cfg.train
    ckdir = ctx.p(CKPT_DIR)
    ckdir.mkdir(exist_ok=True)
    journal = Journal(ctx.p(JOURNAL))
    trainer = Trainer(state, world, tc, journal)
    stage_steps = {max(1, int(round(s * tc.steps))): s for s in ctx.cfg.eval.stages}
    end = tc.steps if stop_after is None else min(tc.steps, stop_after)
    inputs = ctx.world_inputs()

    def save(path):
        save_checkpoint(state, path)
        ctx.manifest(path, inputs, extra={"step": state.step})

    while state.step < end:
        trainer.step()
        s = state.step
        if tc.ckpt_every and s % tc.ckpt_every == 0:
            save(ckdir / f"step{s:07d}.ckpt")
        if s in stage_steps:
            save(ckdir / stage_name(stage_steps[s]))
    last = ckdir / f"step{state.step:07d}.ckpt"
    if not last.exists():
        save(last)
    if state.step >= tc.steps:
        save(ctx.p(FINAL_CKPT))
    ctx.manifest(ctx.p(JOURNAL), inputs)
    recs = journal.records
    tail = recs[-1] if recs else {}
    ctx.emit({"step": state.step, "last": {k: v for k, v in tail.items() if k != "augment"},
              "checkpoint": str(last)},
             f"step {state.step}/{tc.steps}: loss {tail.get('loss', float('nan')):.4f} "
             f"(main {tail.get('main', float('nan')):.4f}) -> {last}")
    return EXIT_OK


def cmd_train(ctx: Ctx) -> int:
    world = ctx.world()
    verify(ctx.p(INIT_CKPT), ctx.cfg, ("world", "train"))
    state = load_checkpoint(ctx.p(INIT_CKPT))
    if state.step != 0:
        raise CheckpointError(f"{INIT_CKPT} is at step {state.step}; use resume")
    if ctx.p(JOURNAL).exists():
        ctx.p(JOURNAL).unlink()
    return _train_loop(ctx, state, world, ctx.args.stop_after)


def cmd_resume(ctx: Ctx) -> int:
    world = ctx.world()
    path = Path(ctx.args.checkpoint)
    verify(path, ctx.cfg, ("world", "train"))
    state = load_checkpoint(path)
    # the journal is truncated to the checkpoint step so a resumed run appends cleanly
    if ctx.p(JOURNAL).exists():
        kept = [r for r in Journal.read(ctx.p(JOURNAL)) if r["step"] <= state.step]
        ctx.p(JOURNAL).write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in kept),
                                  encoding="utf-8")
    return _train_loop(ctx, state, world, ctx.args.stop_after)


def _model_from(ctx: Ctx):
    path = Path(ctx.args.checkpoint) if ctx.args.checkpoint else ctx.p(FINAL_CKPT)
    verify(path)
    return load_checkpoint(path), path


def cmd_score(ctx: Ctx) -> int:
    state, ck = _model_from(ctx)
    src = Path(ctx.args.input) if ctx.args.input else ctx.p(CORPUS)
    verify(src)
    verify(ctx.p(VOCAB))
    vocab = UnifiedVocab.load(ctx.p(VOCAB))
    seqs = [speech_only(s, vocab) for s in synthgen.read_corpus(src)]
    results = score_many(state.model, seqs, vocab.pad_id)
    out = ctx.p(ctx.args.output)
    with open(out, "w", encoding="utf-8") as fh:
        for i, r in enumerate(results):
            fh.write(json.dumps({"index": i, **r.to_dict()}) + "\n")
    ctx.manifest(out, [ck, src, ctx.p(VOCAB)])
    mean = float(np.mean([r.nll_mean for r in results]))
    ctx.emit({"n": len(results), "mean_nll": mean, "output": str(out)},
             f"scored {len(results)} sequences; mean NLL {mean:.4f} nats/token -> {out}")
    return EXIT_OK


def _pref_table(rows) -> str:
    lines = [f"{'factor':<12}{'accuracy':>10}{'95% CI':>20}{'pairs':>8}{'excluded':>10}"]
    for f, r in rows.items():
        lines.append(f"{f:<12}{r['accuracy']:>10.4f}{'[%.4f, %.4f]' % tuple(r['ci95']):>20}"
                     f"{r['n_pairs']:>8}{r['n_excluded']:>10}")
    return "\n".join(lines)


def cmd_eval_pref(ctx: Ctx) -> int:
    state, ck = _model_from(ctx)
    cb = ctx.codebook()
    verify(ctx.p(VOCAB))
    vocab = UnifiedVocab.load(ctx.p(VOCAB))
    scorer = ModelScorer(state.model, vocab.pad_id)
    rows = {}
    for f, pairs in ctx.pairs(cb, vocab).items():
        res = preference_accuracy(scorer, pairs, ctx.cfg.eval.n_boot, ctx.cfg.eval.boot_seed)
        rows[f] = res.to_dict(with_pairs=ctx.args.dump_pairs)
    report = {"checkpoint": str(ck), "config_hash": ctx.cfg.digest(), "factors": rows}
    path = ctx.write_report("pref_report.json", report, [ck, ctx.p(CODEBOOK), ctx.p(VOCAB)])
    summary = {f: {k: v for k, v in r.items() if k != "pairs"} for f, r in rows.items()}
    ctx.emit(dict(report, factors=summary, report=str(path)), _pref_table(summary))
    return EXIT_OK


def cmd_ablate(ctx: Ctx) -> int:
    world = ctx.world()
    plus = ctx.cfg.train
    minus = replace(plus, weights=replace(plus.weights, coarse=0.0, next=0.0))
    pairs = ctx.pairs(world.codebook, world.vocab)

    def progress(name, seed, acc):
        log.info("ablate %s seed %d: %s", name, seed, acc)

    rep = run_ablation({"plus_aux": plus, "minus_aux": minus}, world, pairs,
                       list(ctx.cfg.eval.ablate_seeds), progress)
    report = dict(rep.to_dict(), config_hash=ctx.cfg.digest(), param_digests=rep.param_digests)
    path = ctx.write_report("ablation_report.json", report, ctx.world_inputs())
    lines = [f"{'factor':<12}{'+aux':>10}{'-aux':>10}{'diff':>10}"]
    for f in pairs:
        a, b = rep.mean("plus_aux", f), rep.mean("minus_aux", f)
        lines.append(f"{f:<12}{a:>10.4f}{b:>10.4f}{a - b:>+10.4f}")
    ctx.emit(dict(report, report=str(path)), "\n".join(lines))
    return EXIT_OK


def cmd_probe(ctx: Ctx) -> int:
    cb = ctx.codebook()
    verify(ctx.p(VOCAB))
    vocab = UnifiedVocab.load(ctx.p(VOCAB))
    ckdir = Path(ctx.args.checkpoint_dir) if ctx.args.checkpoint_dir else ctx.p(CKPT_DIR)
    models, used = {}, []
    for s in ctx.cfg.eval.stages:
        path = ckdir / stage_name(s)
        if path.exists():
            verify(path)
            models[s] = load_checkpoint(path).model
            used.append(path)
    e, w = ctx.cfg.eval, ctx.cfg.world
    streams = synthgen.make_corpus(w.latent, cb, e.probe_n, e.probe_seed, w.min_len, w.max_len)
    seqs = [speech_only(s, vocab) for s in streams]
    out = {}
    for kind, factor in (("content", "content"), ("prosody-analog", "speaker")):
        labels = [s.latents[factor] for s in streams]
        acc = probe_over_stages(models, seqs, labels, vocab.pad_id, e.probe_split_seed, kind,
                                tuple(e.stages))
        out[kind] = {f"{int(round(k * 100))}%": v for k, v in acc.items()}
    report = {"config_hash": ctx.cfg.digest(), "probes": out}
    path = ctx.write_report("probe_report.json", report, used + [ctx.p(CODEBOOK), ctx.p(VOCAB)])
    lines = [f"{'task':<16}" + "".join(f"{k:>8}" for k in next(iter(out.values())))]
    for kind, accs in out.items():
        lines.append(f"{kind:<16}" + "".join(f"{v:>8.3f}" for v in accs.values()))
    ctx.emit(dict(report, report=str(path)), "\n".join(lines))
    return EXIT_OK


def cmd_show_config(ctx: Ctx) -> int:
    if ctx.args.json:
        print(json.dumps(ctx.cfg.to_dict(), indent=2))
    else:
        print(dump_config(ctx.cfg), end="")
    return EXIT_OK


COMMANDS = {
    "fit-codebook": (cmd_fit_codebook, "fit the frozen codec codebook on synthetic features"),
    "gen-data": (cmd_gen_data, "synthesize the training corpus and write the unified vocabulary"),
    "fit-centroids": (cmd_fit_centroids, "per-code feature centroids and coarse buckets"),
    "init-embed": (cmd_init_embed, "create the step-0 checkpoint (distilled or random speech rows)"),
    "train": (cmd_train, "train from the step-0 checkpoint"),
    "resume": (cmd_resume, "continue training from a checkpoint"),
    "score": (cmd_score, "length-normalized NLL for every utterance of a corpus file"),
    "eval-pref": (cmd_eval_pref, "pairwise preference accuracy per switched factor"),
    "ablate": (cmd_ablate, "train with and without the auxiliary losses over several seeds"),
    "probe": (cmd_probe, "linear probes on the training-stage checkpoints"),
    "show-config": (cmd_show_config, "print the effective configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-w", "--workdir", default="run",
                        help="directory holding all artifacts and manifests (default: run)")
    common.add_argument("-c", "--config", default=None,
                        help="YAML run config; omitted keys take their defaults")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable), e.g. train.steps=100")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON reports")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")

    parser = argparse.ArgumentParser(
        prog="unitlm", description="Synthetic speech-token language model pipeline.",
        epilog="exit codes: 0 ok, 2 config, 3 provenance, 4 checkpoint, 5 data, 6 non-finite loss")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}",
                        help="print the tool version and exit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                help="pipeline stage to run")
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        if name in ("train", "resume"):
            sp.add_argument("--stop-after", type=int, default=None, metavar="STEP",
                            help="stop once this global step is reached (the run stays resumable)")
        if name == "resume":
            sp.add_argument("--checkpoint", required=True, help="checkpoint to continue from")
        if name in ("score", "eval-pref"):
            sp.add_argument("--checkpoint", default=None,
                            help="model checkpoint (default: final.ckpt in the workdir)")
        if name == "score":
            sp.add_argument("--input", default=None,
                            help="corpus JSONL with a manifest (default: the training corpus)")
            sp.add_argument("--output", default="scores.jsonl",
                            help="result file name inside the workdir")
        if name == "eval-pref":
            sp.add_argument("--dump-pairs", action="store_true",
                            help="include per-pair scores in the report for auditing")
        if name == "probe":
            sp.add_argument("--checkpoint-dir", default=None,
                            help="directory with stage checkpoints (default: <workdir>/ckpt)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        return fn(Ctx(args))
    except Exception as e:  # map known failures to their exit codes
        for types_, code in EXIT_CODES:
            if isinstance(e, types_):
                print(f"unitlm {args.command}: error: {e}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
