"""Command-line entry points: gen, train, eval, gradcheck, dump-relations.

Exit codes: 0 success, 1 usage or input problem, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import trainer
from .errors import LGDEAError, NumericError
from .evaluation import evaluate

log = logging.getLogger("lgdea")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageExit(f"{args.command}: missing required flag(s) {', '.join(missing)}")


def _existing(path, what):
    if not Path(path).is_file():
        raise UsageExit(f"{what} not found: {path}")
    return path


def _train_config(args):
    if args.config is not None:
        cfg = trainer.load_config(_existing(args.config, "config"))
    else:
        cfg = trainer.preset_config(args.preset or "small")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    if getattr(args, "max_steps", None) is not None:
        changes["max_steps"] = args.max_steps
    return dataclasses.replace(cfg, **changes).validate()


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    _require(args, "out")
    cfg = corpus_mod.PRESETS[args.corpus_preset]
    if args.pairing_ratio is not None:
        cfg = dataclasses.replace(cfg, pairing_ratio=args.pairing_ratio)
    seed = 0 if args.seed is None else args.seed
    if args.eval_set:
        data = corpus_mod.generate_eval_set(cfg, args.per_concept, seed=10_000 + seed)
    else:
        data = corpus_mod.generate_corpus(cfg, seed=seed)
    corpus_mod.save_corpus(data, args.out)
    print(f"wrote {args.out}: {len(data.paired)} paired, {len(data.unpaired_images)} images, "
          f"{len(data.unpaired_reports)} reports")


def cmd_train(args):
    _require(args, "corpus", "out")
    data = corpus_mod.load_corpus(_existing(args.corpus, "corpus"))
    cfg = _train_config(args)
    state = None
    if args.checkpoint is not None:
        state = trainer.load_checkpoint(_existing(args.checkpoint, "checkpoint"), data, cfg)
    metrics_path = args.metrics or f"{args.out}.metrics.jsonl"
    with open(metrics_path, "a" if state is not None else "w") as fh:
        state, history = trainer.train(data, cfg, state, metrics=fh)
    trainer.save_checkpoint(state, args.out)
    last = history[-1] if history else None
    print(f"trained to step {state.step}; checkpoint {args.out}; metrics {metrics_path}")
    if last is not None:
        terms = "  ".join(f"{k}={v:.4f}" for k, v in last["losses"].items())
        print(f"last step: total={last['total']:.4f}  {terms}")


def cmd_eval(args):
    _require(args, "checkpoint", "corpus")
    data = corpus_mod.load_corpus(_existing(args.corpus, "corpus"))
    state = trainer.load_checkpoint(_existing(args.checkpoint, "checkpoint"), data)
    report = evaluate(state, data, extractor=args.extractor)
    line = report.to_json()
    if args.out is not None:
        with open(args.out, "a") as fh:
            fh.write(line + "\n")
    print(line)
    print(report.summary(), file=sys.stderr)


def cmd_gradcheck(args):
    cfg = _train_config(args)
    errors = trainer.gradient_suite(seed=cfg.seed, n_prototypes=min(cfg.n_prototypes, 16),
                                    n_lesions=min(cfg.n_lesions, 8))
    worst = max(errors.values())
    for term, err in errors.items():
        flag = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{term:10s} max rel err {err:.3e}  {flag}")
    if worst >= GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")


def cmd_dump_relations(args):
    _require(args, "corpus")
    data = corpus_mod.load_corpus(_existing(args.corpus, "corpus"))
    cfg = dataclasses.replace(_train_config(args), mode="lgdea")
    if args.checkpoint is not None:
        state = trainer.load_checkpoint(_existing(args.checkpoint, "checkpoint"), data, cfg)
    else:
        state = trainer.init_state(cfg, data)
    evidence = trainer.extract_all(data, cfg.extractor)
    batch = trainer.make_batches(data, cfg, [cfg.seed, 0])[0]
    _, _, rel = trainer.compute_losses(state, batch, evidence)
    doc = {"ids": batch.ids, "n_paired": batch.n_paired, **trainer.relation_dump(rel),
           "stats": trainer.relation_stats(rel, batch)}
    text = json.dumps(doc, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="lgdea", description="Evidence-aligned image/report pretraining on "
                                          "synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    def training(sp):
        sp.add_argument("--config")
        sp.add_argument("--preset", choices=sorted(trainer.PRESETS))
        sp.add_argument("--mode", choices=trainer.MODES)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    common(g)
    g.add_argument("--corpus-preset", default="reference", choices=sorted(corpus_mod.PRESETS))
    g.add_argument("--pairing-ratio", type=float)
    g.add_argument("--eval-set", action="store_true",
                   help="write a balanced, fully paired held-out set instead")
    g.add_argument("--per-concept", type=int, default=25)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a corpus, write a checkpoint")
    common(t)
    training(t)
    t.add_argument("--corpus")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--metrics", help="metrics stream (default: <out>.metrics.jsonl)")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a (held-out) corpus")
    common(e, seed=False)
    e.add_argument("--corpus")
    e.add_argument("--checkpoint")
    e.add_argument("--extractor", default="ground_truth")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    common(c)
    training(c)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-relations", help="emit Y, S_I, S_T and P for one batch")
    common(d)
    training(d)
    d.add_argument("--corpus")
    d.add_argument("--checkpoint")
    d.set_defaults(func=cmd_dump_relations)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args.func(args)
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LGDEAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
