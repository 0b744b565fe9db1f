"""Command-line entry point: ``ctrlgen <command> ...``.

Every command prints a report with a human-readable part and a trailing
``key=value`` block; rejected input exits with status 2 and one ``error:`` line.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation as ev
from . import gradcheck
from .text import (
    GrammarSpec,
    decode,
    default_grammar,
    encode_labeled,
    generate_synthetic_corpus,
    read_labeled,
    write_corpus,
    write_labeled,
)
from .trainer import (
    TrainConfig,
    Trainer,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
)


class UsageError(Exception):
    pass


def _grammar_of(state) -> GrammarSpec:
    g = state.grammar
    if g is None:
        raise UsageError("checkpoint carries no grammar; oracle evaluation needs a synthetic grammar")
    return g


def _check_attr(state, name: str) -> None:
    if name not in state.config.attributes:
        raise UsageError(f"unknown attribute {name!r}; checkpoint has {', '.join(state.config.attributes)}")


def _base_values(state, ckpt: str, seed: int) -> dict:
    return {"checkpoint": ckpt, "checkpoint_digest": ev.digest(checkpoint_bytes(state)), "seed": seed}


def cmd_synth(args) -> ev.EvalReport:
    grammar = GrammarSpec.load(args.spec) if args.spec else default_grammar()
    corp = generate_synthetic_corpus(grammar, args.n_unlabeled, args.n_labeled, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "unlabeled.txt", corp.unlabeled)
    grammar.save(out / "grammar.txt")
    rep = ev.EvalReport("synthetic corpus", {"seed": args.seed, "out": str(out), "n_unlabeled": len(corp.unlabeled)})
    for attr, pairs in corp.labeled.items():
        write_labeled(out / f"labeled.{attr}.tsv", pairs)
        write_labeled(out / f"words.{attr}.tsv", corp.word_labeled[attr])
        rep.values[f"n_labeled.{attr}"] = len(pairs)
    rep.text.extend(corp.unlabeled[:5])
    return rep


def _train_report(title: str, trainer: Trainer, path: Path, t0: float) -> ev.EvalReport:
    st = trainer.state
    rep = ev.EvalReport(title, {
        "seed": st.config.seed,
        "global_step": st.global_step,
        "pretrain_steps": st.pretrain_done,
        "cycles": st.cycles_done,
        "checkpoint": str(path),
        "checkpoint_digest": ev.digest(path.read_bytes()),
        "seconds": round(time.time() - t0, 1),
    })
    if trainer.metrics.rows:
        last = trainer.metrics.rows[-1]
        rep.text.append("last metrics: " + ", ".join(f"{k}={v:.4g}" for k, v in last.items() if isinstance(v, float)))
    return rep


def _load_config(path: str) -> TrainConfig:
    cfg = TrainConfig.load(path)
    if not cfg.out_dir:
        cfg = cfg.replace(out_dir=str(Path(path).parent))
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def cmd_pretrain(args) -> ev.EvalReport:
    cfg = _load_config(args.config)
    t0 = time.time()
    trainer = Trainer.from_config(cfg)
    trainer.pretrain()
    path = Path(cfg.out_dir) / "pretrained.ckpt"
    save_checkpoint(trainer.state, path)
    return _train_report("VAE pretraining", trainer, path, t0)


def cmd_train(args) -> ev.EvalReport:
    cfg = _load_config(args.config)
    t0 = time.time()
    trainer = Trainer.from_config(cfg, resume=args.resume)
    trainer.train()
    path = Path(cfg.out_dir) / "final.ckpt"
    save_checkpoint(trainer.state, path)
    return _train_report("joint training", trainer, path, t0)


def _parse_codes(state, items: List[str], n: int, rng) -> dict:
    fixed = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--attr expects name=value, got {item!r}")
        name, value = item.split("=", 1)
        _check_attr(state, name)
        cats = state.categories[name]
        if value not in cats:
            raise UsageError(f"unknown value {value!r} for {name}; choose from {', '.join(cats)}")
        fixed[name] = cats.index(value)
    z, c = state.model.sample_prior(n, rng)
    for name, k in fixed.items():
        c[name] = np.full(n, k)
    return z, c


def cmd_sample(args) -> ev.EvalReport:
    st = load_checkpoint(args.ckpt)
    if args.n <= 0:
        raise UsageError("--n must be positive")
    rng = np.random.default_rng([args.seed, 707])
    z, c = _parse_codes(st, args.attr, args.n, rng)
    code = st.model.code(c)
    if args.greedy:
        seqs = st.model.generator.greedy(z, code, st.config.max_len)
    else:
        seqs = st.model.generator.sample(z, code, 1.0, st.config.max_len, rng)
    rep = ev.EvalReport("samples", _base_values(st, args.ckpt, args.seed))
    rep.values.update(n=args.n, decoding="greedy" if args.greedy else "sample")
    for i, s in enumerate(seqs):
        tags = " ".join(f"{a}={st.categories[a][int(c[a][i])]}" for a in st.config.attributes)
        rep.text.append(f"[{tags}] {decode(s, st.vocab)}")
    return rep


def cmd_eval_attr(args) -> ev.EvalReport:
    st = load_checkpoint(args.ckpt)
    _check_attr(st, args.attr)
    if args.n <= 0:
        raise UsageError("--n must be positive")
    res = ev.eval_attribute_accuracy(st.model, st.vocab, _grammar_of(st), args.attr, args.n, args.seed, st.config.max_len)
    rep = ev.EvalReport(f"attribute accuracy: {args.attr}", _base_values(st, args.ckpt, args.seed))
    rep.values.update(
        attribute=args.attr, n=res.n, accuracy=f"{res.accuracy:.4f}", stderr=f"{res.stderr:.4f}",
        undecidable_rate=f"{res.undecidable_rate:.4f}",
    )
    rep.text.append(f"accuracy {res.accuracy:.4f} +/- {res.stderr:.4f} (n={res.n})")
    rep.text.extend(res.samples[:10])
    return rep


def cmd_eval_disentangle(args) -> ev.EvalReport:
    st = load_checkpoint(args.ckpt)
    _check_attr(st, args.attr)
    if args.pairs <= 0:
        raise UsageError("--pairs must be positive")
    res = ev.eval_disentanglement(st.model, st.vocab, _grammar_of(st), args.attr, args.pairs, args.seed, st.config.max_len)
    rep = ev.EvalReport(f"content preservation: {args.attr}", _base_values(st, args.ckpt, args.seed))
    rep.values.update(attribute=args.attr, pairs=res.n_pairs, preservation=f"{res.rate:.4f}",
                      lambda_z=st.config.lambda_z)
    rep.text.extend(f"{a}  |  {b}" for a, b in res.pairs)
    return rep


def cmd_augment_eval(args) -> ev.EvalReport:
    st = load_checkpoint(args.ckpt)
    grammar = _grammar_of(st)
    attr = args.attr or st.config.attributes[0]
    _check_attr(st, attr)
    pairs = read_labeled(args.labeled)
    labeled = encode_labeled(pairs, st.categories[attr], st.vocab, st.config.max_len)
    test = ev.synthetic_test_set(grammar, attr, st.vocab, args.n_test, args.seed + 10_000, st.config.max_len)
    acc = ev.augment_and_train_classifier(
        st.model, attr, labeled, test, args.variant, args.n_gen, args.seed,
        steps=args.steps, weights=st.config.weights(), max_len=st.config.max_len,
    )
    rep = ev.EvalReport(f"augmented classifier ({args.variant})", _base_values(st, args.ckpt, args.seed))
    rep.values.update(attribute=attr, variant=args.variant, n_labeled=len(labeled), n_generated=args.n_gen,
                      n_test=len(test), accuracy=f"{acc:.4f}")
    return rep


def cmd_gradcheck(args) -> ev.EvalReport:
    if args.scale != "micro":
        raise UsageError("only --scale micro is supported")
    rep = ev.EvalReport("gradient check (micro model)", {"seed": args.seed, "tolerance": gradcheck.TOLERANCE})
    t0 = time.time()
    errors = gradcheck.run_suite(args.seed, log=rep.text.append)
    for name, err in errors.items():
        rep.values[f"max_rel_err.{name}"] = f"{err:.3e}"
    ok = all(e < gradcheck.TOLERANCE for e in errors.values())
    rep.values["passed"] = ok
    rep.values["seconds"] = round(time.time() - t0, 1)
    rep.ok = ok
    return rep


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctrlgen", description="Attribute-controlled sentence generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus and labeled sets")
    s.add_argument("--spec", help="grammar file (default: built-in grammar)")
    s.add_argument("--out", required=True)
    s.add_argument("--n-unlabeled", type=int, default=2000)
    s.add_argument("--n-labeled", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="VAE initialisation only")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="pretraining plus joint training")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="conditional generation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--attr", action="append", metavar="NAME=VALUE")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--greedy", action="store_true")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval-attr", help="attribute accuracy of generated sentences")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--attr", required=True)
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_attr)

    s = sub.add_parser("eval-disentangle", help="content preservation when one attribute flips")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--attr", required=True)
    s.add_argument("--pairs", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_disentangle)

    s = sub.add_parser("augment-eval", help="train a classifier on augmented data")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--labeled", required=True)
    s.add_argument("--variant", choices=ev.VARIANTS, required=True)
    s.add_argument("--n-gen", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--attr")
    s.add_argument("--n-test", type=int, default=1000)
    s.add_argument("--steps", type=int, default=300)
    s.set_defaults(func=cmd_augment_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--scale", default="micro")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = args.func(args)
    except (UsageError, ValueError, FileNotFoundError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    print(report.render())
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
