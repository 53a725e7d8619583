"""
Command line: python -m disp <command> [flags]

    pretrain             train the dense model on --corpus
    search               train the gate generator against the frozen dense model
    prune                finalize gates, slice weights, check equivalence
    eval                 perplexity of the dense / pruned model
    verify               invariant suites (gradcheck, prop1, reinmax, equivalence)
    verify-equivalence   masked vs pruned check for a saved pruned model
    report               width and dimension-preservation CSVs
    ablate               parametrization ablation, lambda sweep, random baseline

Exit codes: 0 success, 1 contract violation or failed check, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from disp import tensor as T
from disp.checkpoint import (
    SearchState,
    file_sha256,
    load_dense,
    load_pruned,
    load_search_state,
    save_dense,
    save_pruned,
    save_search_state,
)
from disp.config import Settings, resolve_settings
from disp.data import BatchSource, Corpus, perplexity, pretrain_dense
from disp.errors import ConfigError, ContractViolation, DimensionError, NonFiniteLossError, UsageError
from disp.experiments import ablation_means, ablation_study, lambda_sweep, random_structure_baseline
from disp.hypernet import GATE_PARAMS
from disp.model import DenseModel
from disp.pruner import equivalence_report, extract, finalize_gates
from disp.reinmax import GateRNG
from disp.report import RunManifest, append_manifest, report_architecture
from disp.trainer import SEARCH_MODES, RunLog, freeze_check, search
from disp.verify import SUITES, run_suites

logger = logging.getLogger("disp")

console = Console()

# flags that are not settings
_CLI_ONLY = ("command", "config", "handler")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disp", description="Dimension-independent structural pruning")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="Output directory")
    common.add_argument("--precision", choices=["f32", "f64"])
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--corpus", help="UTF-8 text file")
    common.add_argument("--model", help="Dense checkpoint (default <out>/dense.ckpt)")
    common.add_argument("--seq-len", type=int)

    arch = argparse.ArgumentParser(add_help=False)
    arch.add_argument("--d", type=int)
    arch.add_argument("--n-layers", type=int)
    arch.add_argument("--n-heads", type=int)
    arch.add_argument("--d-mid", type=int)
    arch.add_argument("--mlp-kind", choices=["gated", "standard"])
    arch.add_argument("--norm-kind", choices=["layernorm", "rmsnorm"])
    arch.add_argument("--max-seq-len", type=int)

    searching = argparse.ArgumentParser(add_help=False)
    searching.add_argument("--mode", choices=SEARCH_MODES)
    searching.add_argument("--gate-param", choices=GATE_PARAMS, help="Gate generator; defaults to the one --mode implies")
    searching.add_argument("--tau", type=float)
    searching.add_argument("--gate-bias", type=float, help="Constant c added to every gate latent")
    searching.add_argument("--lambda", dest="lambda_", type=float, help="Weight of the budget regularizer")
    searching.add_argument("--target-ratio", type=float, help="Fraction p of gate-controlled parameters to keep")
    searching.add_argument("--iterations", type=int)
    searching.add_argument("--lr", type=float)
    searching.add_argument("--weight-decay", type=float)
    searching.add_argument("--batch-size", type=int)
    searching.add_argument("--log-every", type=int)
    searching.add_argument("--prefetch", action="store_true", default=None)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common, arch], help="Train the dense model")
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--pretrain-lr", type=float)
    p.add_argument("--pretrain-batch-size", type=int)
    p.add_argument("--log-every", type=int)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("search", parents=[common, searching], help="Search a pruned structure")
    p.add_argument("--state", help="Search checkpoint (default <out>/search.ckpt)")
    p.add_argument("--resume", action="store_true", default=None,
                   help="Continue the saved search for --iterations more iterations")
    p.set_defaults(handler=cmd_search)

    p = sub.add_parser("prune", parents=[common], help="Finalize gates and extract the pruned model")
    p.add_argument("--state", help="Search checkpoint (default <out>/search.ckpt)")
    p.add_argument("--enforce-budget", action="store_true", default=None)
    p.add_argument("--equivalence-trials", type=int)
    p.set_defaults(handler=cmd_prune)

    p = sub.add_parser("eval", parents=[common], help="Perplexity of dense and pruned models")
    p.add_argument("--pruned", help="Pruned checkpoint")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("verify", parents=[common], help="Run invariant suites")
    p.add_argument("--suite", choices=list(SUITES) + ["all"])
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("verify-equivalence", parents=[common], help="Masked vs pruned check for saved models")
    p.add_argument("--pruned", help="Pruned checkpoint (default <out>/pruned.ckpt)")
    p.add_argument("--equivalence-trials", type=int)
    p.set_defaults(handler=cmd_verify_equivalence)

    p = sub.add_parser("report", parents=[common], help="Architecture CSVs for a pruned model")
    p.add_argument("--pruned", help="Pruned checkpoint (default <out>/pruned.ckpt)")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("ablate", parents=[common, searching], help="Ablations, lambda sweep, random baseline")
    p.add_argument("--modes", help="Comma-separated search modes")
    p.add_argument("--seeds", help="Comma-separated seeds")
    p.add_argument("--lambdas", help="Comma-separated lambda values (runs the sweep instead)")
    p.add_argument("--random-seeds", help="Comma-separated seeds for random same-budget structures")
    p.set_defaults(handler=cmd_ablate)
    return parser


def setup_logging(level: str) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
    )


def _require_corpus(settings: Settings) -> Corpus:
    if not settings.corpus:
        raise UsageError("--corpus is required for this command")
    return Corpus.from_file(settings.corpus, settings.valid_fraction)


def _load_dense(settings: Settings, windows: bool = True) -> DenseModel:
    path = settings.model_path
    if not path.is_file():
        raise UsageError(f"Dense checkpoint not found: {path} (run `disp pretrain` or pass --model)")
    model = load_dense(path)
    if windows and settings.seq_len > model.spec.max_seq_len:
        raise UsageError(f"--seq-len {settings.seq_len} exceeds the model's max_seq_len {model.spec.max_seq_len}")
    return model


def _record(settings: Settings, command: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
    manifest = RunManifest(
        command=command,
        config=settings.model_dump(by_alias=True),
        seeds={"seed": settings.seed},
        inputs={str(p): file_sha256(p) for p in inputs},
        outputs=[str(p) for p in outputs],
    )
    append_manifest(settings.out_dir, manifest)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_pretrain(settings: Settings) -> int:
    corpus = _require_corpus(settings)
    spec = settings.model_spec()
    console.print(f"🚀 Pretraining d={spec.d} L={spec.n_layers} on {corpus.source} ({len(corpus.tokens):,} tokens)")
    model, history = pretrain_dense(spec, corpus, settings.pretrain_config())
    out = save_dense(settings.model_path, model, seed=settings.seed)
    result = perplexity(model, corpus.split("valid"), settings.seq_len)
    console.print(f"✅ Saved {out}  final loss {history[-1]:.4f}  valid PPL {result.ppl:.3f}")
    _record(settings, "pretrain", [Path(settings.corpus)], [out])
    return 0


def cmd_search(settings: Settings) -> int:
    corpus = _require_corpus(settings)
    model = _load_dense(settings)
    before = model.copy()
    cfg, reinmax_cfg = settings.train_config(), settings.reinmax_config()
    budget = settings.budget(model.spec)
    data = BatchSource(corpus.split("train"), cfg.seq_len, cfg.batch_size, seed=cfg.seed)
    runlog_path = settings.out_dir / "runlog.csv"

    if settings.resume:
        if not settings.state_path.is_file():
            raise UsageError(f"Search checkpoint not found: {settings.state_path}")
        state = load_search_state(settings.state_path)
        if state.rng.seed != cfg.seed:
            raise UsageError(f"The saved search used --seed {state.rng.seed}; resume with the same seed")
        cfg = cfg.model_copy(update={"mode": state.search_mode})
        reinmax_cfg, budget = state.reinmax, state.budget
        data.seek(state.data_position)
        console.print(f"🔁 Resuming {state.search_mode} search after iteration {state.iteration}")
        net, log = search(model, data, budget, cfg, reinmax_cfg, net=state.net, rng=state.rng,
                          optimizer_state=state.optimizer_state, start_iteration=state.iteration)
        if runlog_path.is_file():
            log = RunLog.from_csv(runlog_path, model.spec.n_layers).extend(log)
    else:
        net, log = search(model, data, budget, cfg, reinmax_cfg)
    if not freeze_check(before, model):
        raise ContractViolation("Dense weights changed during search")

    state = SearchState(net, cfg.mode, GateRNG.from_state(log.rng_state), reinmax_cfg, budget,
                        optimizer_state=log.optimizer_state, data_position=log.data_position,
                        iteration=log.last_iteration)
    out = save_search_state(settings.state_path, state)
    runlog = log.to_csv(runlog_path)
    final = log.final()
    console.print(
        f"✅ Search done: lm {final['lm']:.4f}  R_norm {final['R_norm']:.4f}  ratio {final['ratio']:.4f} "
        f"(target {budget.p})"
    )
    _record(settings, "search", [Path(settings.corpus), settings.model_path], [out, runlog])
    return 0


def cmd_prune(settings: Settings) -> int:
    model = _load_dense(settings, windows=False)
    if not settings.state_path.is_file():
        raise UsageError(f"Search checkpoint not found: {settings.state_path}")
    state = load_search_state(settings.state_path)
    gates = finalize_gates(state.net, state.reinmax, settings.enforce_budget, state.budget, tied=state.tied)
    pruned = extract(model, gates)
    report = equivalence_report(model, pruned, gates, trials=settings.equivalence_trials, seed=settings.seed)
    out = save_pruned(settings.pruned_path, pruned)
    arch = report_architecture(pruned, out_dir=settings.out_dir, p=state.budget.p)
    summary = arch.summary.iloc[0]
    console.print(
        f"📊 T(s)={int(summary['T']):,} of {int(summary['T_total']):,}  ratio {summary['ratio']:.4f}  "
        f"whole model {summary['model_ratio']:.4f}"
    )
    _record(settings, "prune", [settings.model_path, settings.state_path],
            [out] + [Path(p) for p in arch.paths.values()])
    if not report.passed:
        console.print(f"❌ Equivalence failed: max diff {report.max_abs_diff:.3e} (block {report.offending_block})")
        return 1
    console.print(f"✅ Pruned model saved to {out}; equivalence max diff {report.max_abs_diff:.3e}")
    return 0


def cmd_eval(settings: Settings) -> int:
    corpus = _require_corpus(settings)
    tokens = corpus.split("valid")
    results = [perplexity(_load_dense(settings), tokens, settings.seq_len)]
    if settings.pruned:
        results.append(perplexity(load_pruned(settings.pruned_path), tokens, settings.seq_len))
    table = Table(title="Perplexity")
    for column in ("model", "split", "ppl", "tokens"):
        table.add_column(column)
    for r in results:
        table.add_row(r.model, r.split, f"{r.ppl:.4f}", f"{r.tokens:,}")
    console.print(table)
    out = settings.out_dir / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps([r.model_dump() for r in results], indent=2), encoding="utf-8")
    inputs = [Path(settings.corpus), settings.model_path] + ([settings.pruned_path] if settings.pruned else [])
    _record(settings, "eval", inputs, [out])
    return 0


def cmd_verify(settings: Settings) -> int:
    names = list(SUITES) if settings.suite == "all" else [settings.suite]
    results = run_suites(names, seed=settings.seed)
    table = Table(title="Invariant suites")
    for column in ("suite", "result", "trials", "max violation", "threshold"):
        table.add_column(column)
    for r in results:
        table.add_row(r.suite, "✅ pass" if r.passed else "❌ FAIL", f"{r.trials:,}", f"{r.max_error:.3e}",
                      f"{r.threshold:.0e}")
    console.print(table)
    return 0 if all(r.passed for r in results) else 1


def cmd_verify_equivalence(settings: Settings) -> int:
    model = _load_dense(settings, windows=False)
    pruned = load_pruned(settings.pruned_path)
    report = equivalence_report(model, pruned, pruned.gates(), trials=settings.equivalence_trials, seed=settings.seed)
    console.print(f"📊 max abs diff {report.max_abs_diff:.3e}  per block {[f'{d:.1e}' for d in report.per_block_diffs]}")
    if report.passed:
        console.print("✅ Masked and pruned models agree")
        return 0
    console.print(f"❌ Mismatch in block {report.offending_block}")
    return 1


def cmd_report(settings: Settings) -> int:
    pruned = load_pruned(settings.pruned_path)
    arch = report_architecture(pruned, out_dir=settings.out_dir)
    table = Table(title="Widths per block")
    for column in arch.widths.columns:
        table.add_column(str(column))
    for row in arch.widths.itertuples(index=False):
        table.add_row(*(str(v) for v in row))
    console.print(table)
    summary = arch.summary.iloc[0]
    console.print(
        f"📊 ratio {summary['ratio']:.4f} (whole model {summary['model_ratio']:.4f}); CSVs in {settings.out_dir}"
    )
    _record(settings, "report", [settings.pruned_path], [Path(p) for p in arch.paths.values()])
    return 0


def cmd_ablate(settings: Settings) -> int:
    corpus = _require_corpus(settings)
    model = _load_dense(settings)
    cfg, reinmax_cfg = settings.train_config(), settings.reinmax_config()
    budget = settings.budget(model.spec)
    train, valid = corpus.split("train"), corpus.split("valid")
    settings.out_dir.mkdir(parents=True, exist_ok=True)
    outputs: List[Path] = []

    if settings.lambdas:
        df = lambda_sweep(model, train, valid, budget, cfg, reinmax_cfg, settings.float_list("lambdas"))
        path = settings.out_dir / "lambda_sweep.csv"
    else:
        modes = settings.str_list("modes")
        bad = [m for m in modes if m not in SEARCH_MODES]
        if bad:
            raise UsageError(f"Unknown mode(s) {bad}; choose from {SEARCH_MODES}")
        df = ablation_study(model, train, valid, budget, cfg, reinmax_cfg, modes, settings.int_list("seeds"))
        console.print(ablation_means(df).to_string(index=False))
        path = settings.out_dir / "ablation.csv"
    df.to_csv(path, index=False)
    outputs.append(path)

    if settings.random_seeds:
        baseline = random_structure_baseline(model, valid, budget, cfg.seq_len, settings.int_list("random_seeds"))
        path = settings.out_dir / "random_baseline.csv"
        baseline.to_csv(path, index=False)
        outputs.append(path)
        console.print(f"📊 random same-budget structures: mean loss {baseline['loss'].mean():.4f}")

    console.print(f"✅ Wrote {', '.join(str(p) for p in outputs)}")
    _record(settings, "ablate", [Path(settings.corpus), settings.model_path], outputs)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    handler: Callable[[Settings], int] = args.handler
    flags: Dict[str, object] = {k: v for k, v in vars(args).items() if k not in _CLI_ONLY}
    try:
        settings = resolve_settings(flags, config_file=args.config)
        setup_logging(settings.log_level)
        T.set_precision(settings.precision)
        logger.debug("Resolved settings: %s", settings.model_dump(by_alias=True))
        return handler(settings)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        console.print(f"❌ {e}", style="red")
        return 2
    except (ContractViolation, DimensionError, NonFiniteLossError) as e:
        console.print(f"❌ {type(e).__name__}: {e}", style="red")
        return 1
