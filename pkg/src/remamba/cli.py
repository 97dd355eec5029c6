"""Command-line entry point for the remamba subcommands.

Every subcommand reads one JSON run config (``--config``, defaults when
omitted) plus ``--set section.key=value`` overrides and writes its artifacts
under ``output_dir``.  CSV outputs start with ``#`` lines holding the resolved
config; JSONL outputs start with a ``{"config": ...}`` record.  Exit status is
0 when every invoked check passes, 1 when a check fails and 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench, tasks, training
from .config import RunConfig, load_run_config
from .errors import CheckpointError, ConfigError, ContractError
from .estimator import VARIANTS, ReMambaLM

log = logging.getLogger("remamba")

CHECKPOINT = "checkpoint.rmt"
GRADCHECK_TOL = 1e-4


# -- corpora ------------------------------------------------------------------

def make_corpus(config: RunConfig, split: str, lengths: Sequence[int] | None = None) -> list[tasks.TaskInstance]:
    """Seeded train or eval corpus for the configured task."""
    t = config.tasks
    if split == "train":
        lengths, n, stream = lengths or t.train_lengths, t.n_train_per_length, 1
    else:
        lengths, n, stream = lengths or t.eval_lengths, t.n_eval_per_length, 2
    seed = [config.seed, stream]
    if t.kind == "passkey":
        return tasks.passkey_corpus(seed, n, lengths, t.key_length, config.model.vocab_size, t.needle_positions)
    rng = np.random.default_rng(seed)
    return [tasks.gen_assoc_recall(rng, t.n_pairs, int(L), config.model.vocab_size) for L in lengths for _ in range(n)]


def _xy(corpus):
    return [c.prompt_tokens for c in corpus], [c.target_tokens for c in corpus]


# -- helpers ------------------------------------------------------------------

def _provenance(config: RunConfig, command: str, **extra) -> str:
    lines = [f"remamba {command}", f"config: {config.to_json()}"]
    lines += [f"{k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(extra.items())]
    return "\n".join(lines)


def _out_dir(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _estimator(config: RunConfig, checkpoint: str | None, random_init: bool) -> ReMambaLM:
    """Load a checkpoint (or initialize) and apply the config's inference settings."""
    if random_init:
        return ReMambaLM(**config.estimator_params()).init_params()
    path = Path(checkpoint) if checkpoint else Path(config.output_dir) / CHECKPOINT
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found; train first or pass --random-init")
    est = ReMambaLM.load(path)
    if est.model_config() != config.model:
        raise ConfigError(f"checkpoint model {est.model_config()} does not match config model {config.model}")
    c, a = config.compression, config.adaptation
    return est.set_params(s=c.s, p=c.p, rho=c.rho, placement=c.placement, strategy=c.strategy, eps=c.eps,
                          selection_seed=c.seed, adaptation=a.kind, exact_delta_scale=a.exact_delta_scale)


def _write_jsonl(path: Path, config: RunConfig, records) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"config": config.to_dict()}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _fit(config: RunConfig, out: Path, stem: str = "") -> ReMambaLM:
    est = ReMambaLM(**config.estimator_params())
    X, y = _xy(make_corpus(config, "train"))
    log.info("training on %d examples", len(X))

    def progress(r):
        if r["step"] % 100 == 0:
            log.info("step %d loss %.4f", r["step"], r["loss"])

    est.fit(X, y, on_step=progress)
    _write_jsonl(out / f"{stem}metrics.jsonl", config, est.history_)
    est.save(out / f"{stem}{CHECKPOINT}", {"run_config": config.to_dict()})
    return est


def _evaluate(est: ReMambaLM, corpus, lengths) -> tasks.EvalReport:
    return tasks.evaluate(lambda X, T: est.predict(X, T), corpus, lengths)


# -- subcommands --------------------------------------------------------------

def cmd_train(config: RunConfig, args) -> int:
    out = _out_dir(config)
    _fit(config, out)
    log.info("wrote %s", out / CHECKPOINT)
    return 0


def cmd_eval(config: RunConfig, args) -> int:
    est = _estimator(config, args.checkpoint, args.random_init)
    lengths = args.lengths or list(config.tasks.eval_lengths)
    corpus = tasks.read_corpus(args.corpus) if args.corpus else make_corpus(config, "eval", lengths)
    report = _evaluate(est, corpus, lengths)
    path = _out_dir(config) / (args.output or "eval.csv")
    report.to_csv(path, _provenance(config, "eval", lengths=lengths, corpus=args.corpus))
    for L in report.lengths:
        log.info("length %d exact match %.4f (n=%d)", L, report.accuracy(L), report.count(L))
    return 0


def cmd_sweep(config: RunConfig, args) -> int:
    est = _estimator(config, args.checkpoint, args.random_init)
    lengths = args.lengths or list(config.tasks.eval_lengths)
    corpus = make_corpus(config, "eval", lengths)
    rows = []
    for p in args.p_values:
        for rho in args.rho_values:
            est.set_params(p=p, rho=rho)
            report = _evaluate(est, corpus, lengths)
            hits = sum(report.cells[(L, "all")][0] for L in lengths)
            n = sum(report.count(L) for L in lengths)
            row = {"p": repr(float(p)), "rho": repr(float(rho)), "exact_match": f"{hits / n:.6f}", "n": n}
            row.update({f"exact_match@{L}": f"{report.accuracy(L):.6f}" for L in lengths})
            rows.append(row)
    columns = ["p", "rho", "exact_match", "n"] + [f"exact_match@{L}" for L in lengths]
    tasks.write_csv(_out_dir(config) / "sweep.csv", columns, rows,
                    _provenance(config, "sweep", p_values=args.p_values, rho_values=args.rho_values, lengths=lengths))
    return 0


def cmd_bench(config: RunConfig, args) -> int:
    est = _estimator(config, args.checkpoint, args.random_init)
    b = config.bench
    records = []
    for pipeline in b.pipelines:
        records += bench.run_bench(est, pipeline, b.input_lens, b.output_len, b.reps, seed=config.seed)
    bench.emit_report(records, _out_dir(config) / "bench.csv", _provenance(config, "bench"))
    return 0


def cmd_gradcheck(config: RunConfig, args) -> int:
    est = ReMambaLM(**config.estimator_params()).init_params()
    rng = np.random.default_rng(config.seed)
    V = config.model.vocab_size
    batch = training.Batch(rng.integers(0, V, (args.batch, args.length)), rng.integers(0, V, (args.batch, 2)))
    spec = est.compression_spec()
    if spec.p == 0:
        log.info("compression.p is 0; scorer and cos' groups are not exercised")
    rows = training.gradient_check(est.model_, est.scorer_, batch, spec, est.adaptation_mode(),
                                   args.entries, seed=config.seed)
    ok = True
    for r in rows:
        r["pass"] = bool(r["rel_err"] < GRADCHECK_TOL)
        ok &= r["pass"]
        log.info("%-22s rel err %.2e  %s", r["group"], r["rel_err"], "pass" if r["pass"] else "FAIL")
        r["rel_err"] = f"{r['rel_err']:.3e}"
    tasks.write_csv(_out_dir(config) / "gradcheck.csv", ["group", "entries", "rel_err", "pass"], rows,
                    _provenance(config, "gradcheck", length=args.length, batch=args.batch, entries=args.entries,
                                tolerance=GRADCHECK_TOL))
    return 0 if ok else 1


def _variant_config(config: RunConfig, name: str, seed: int) -> RunConfig:
    data = config.to_dict()
    v = VARIANTS[name]
    data["seed"] = seed
    data["adaptation"]["kind"] = v["adaptation"]
    data["compression"]["strategy"] = v["strategy"]
    if "p" in v:
        data["compression"]["p"] = v["p"]
    if "p_range" in v:
        data["training"]["p_range"] = list(v["p_range"])
    return RunConfig.from_dict(data)


def cmd_study(config: RunConfig, args) -> int:
    """Ablation over pipelines and seeds, plus the eval-time placement study."""
    out = _out_dir(config)
    lengths = list(config.tasks.eval_lengths)
    rows, placement_rows = [], []
    for seed in args.seeds:
        for name in args.variants:
            vc = _variant_config(config, name, seed)
            run_dir = out / f"{name}_seed{seed}"
            run_dir.mkdir(exist_ok=True)
            log.info("training %s seed %d", name, seed)
            est = _fit(vc, run_dir)
            corpus = make_corpus(vc, "eval", lengths)
            report = _evaluate(est, corpus, lengths)
            report.to_csv(run_dir / "eval.csv", _provenance(vc, "eval", lengths=lengths))
            for L in lengths:
                rows.append({"variant": name, "seed": seed, "length": L,
                             "exact_match": f"{report.accuracy(L):.6f}", "n": report.count(L)})
                log.info("%s seed %d length %d: %.4f", name, seed, L, report.accuracy(L))
            if name == "remamba":
                for placement, s in (("standard", 0.0), ("middle", args.middle_s), ("special-append", 0.0)):
                    est.set_params(placement=placement, s=s)
                    rep = _evaluate(est, corpus, lengths)
                    for L in lengths:
                        placement_rows.append({"placement": placement, "s": s, "seed": seed, "length": L,
                                               "exact_match": f"{rep.accuracy(L):.6f}", "n": rep.count(L)})
    header = _provenance(config, "study", variants=args.variants, seeds=args.seeds, middle_s=args.middle_s)
    tasks.write_csv(out / "study.csv", ["variant", "seed", "length", "exact_match", "n"], rows, header)
    if placement_rows:
        tasks.write_csv(out / "placement.csv", ["placement", "s", "seed", "length", "exact_match", "n"],
                        placement_rows, header)
    return 0


# -- entry point --------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. compression.p=0.18 (repeatable)")
        p.set_defaults(func=fn)
        return p

    def model_source(p):
        p.add_argument("--checkpoint", help=f"checkpoint path (default: <output_dir>/{CHECKPOINT})")
        p.add_argument("--random-init", action="store_true", help="use untrained weights")

    add("train", cmd_train, "train a model and write checkpoint + metrics.jsonl")
    p = add("eval", cmd_eval, "exact-match evaluation by length and needle position")
    model_source(p)
    p.add_argument("--lengths", type=_ints, help="comma-separated eval lengths")
    p.add_argument("--corpus", help="JSONL corpus to evaluate instead of the generated one")
    p.add_argument("--strategy", help="shorthand for --set compression.strategy=...")
    p.add_argument("--placement", help="shorthand for --set compression.placement=...")
    p.add_argument("--output", help="CSV file name inside output_dir (default eval.csv)")
    p = add("sweep", cmd_sweep, "accuracy grid over p and rho")
    model_source(p)
    p.add_argument("--p-values", type=_floats, default=[0.1, 0.2, 0.3])
    p.add_argument("--rho-values", type=_floats, default=[0.05, 0.1, 0.2])
    p.add_argument("--lengths", type=_ints)
    p = add("bench", cmd_bench, "decode memory and throughput by input length")
    model_source(p)
    p = add("gradcheck", cmd_gradcheck, "finite-difference check per parameter group")
    p.add_argument("--length", type=int, default=24)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--entries", type=int, default=4, help="entries sampled per tensor")
    p = add("study", cmd_study, "train and evaluate ablation pipelines over seeds")
    p.add_argument("--variants", type=lambda t: t.split(","), default=list(VARIANTS))
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--middle-s", type=float, default=0.2)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    for flag in ("strategy", "placement"):
        if getattr(args, flag, None):
            overrides.append(f"compression.{flag}={getattr(args, flag)}")
    try:
        config = load_run_config(args.config, overrides)
        if args.command == "study":
            unknown = set(args.variants) - set(VARIANTS)
            if unknown:
                raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {sorted(VARIANTS)}")
        return args.func(config, args)
    except (ConfigError, ContractError, CheckpointError) as exc:
        print(f"remamba {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
