"""Command-line entry point ``cltr-lab``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .clicksim import SimulatorConfig, dbn_params_from_relevance, simulate_log
from .core import (
    CCMParams,
    ClickLog,
    DCMParams,
    NoiseSpec,
    PBMParams,
    ValidationError,
    params_from_dict,
    read_lists_jsonl,
)
from .dataset import (
    DatasetFormatError,
    PreparedDataset,
    generate_synthetic,
    load_letor,
    prepare,
    split_queries,
    train_initial_ranker,
)
from .evaluation import evaluate_ranker, select_method
from .experiment import (
    ExperimentSpec,
    SpecError,
    emit_results,
    finalize,
    load_results,
    run_experiment,
)
from .ltr import TrainConfig, train
from .propensity import DEFAULT_CLIPPING, ClippingPolicy, DLAConfig, estimate_pbm_dla, mle_dcm_lambda, pbm_oracle_theta
from .ranker import Ranker

EXIT_OK, EXIT_PARTIAL, EXIT_SPEC = 0, 1, 2


def _load_data(path) -> PreparedDataset:
    p = Path(path)
    if p.is_dir():
        return PreparedDataset.load(p)
    lists = read_lists_jsonl(p)
    dim = lists[0].dim if lists else 0
    return PreparedDataset(lists, lists, dim, max((ql.length for ql in lists), default=0))


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _model_params(args, lists) -> object:
    if args.model == "pbm":
        return PBMParams(eta=args.eta)
    if args.model == "dcm":
        return DCMParams(beta=args.beta, eta=args.eta)
    if args.model == "dbn":
        return dbn_params_from_relevance(lists, args.gamma, args.s_relevant, args.s_nonrelevant)
    return CCMParams(args.alpha1, args.alpha2, args.alpha3)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--alpha1", type=float, default=1.0)
    p.add_argument("--alpha2", type=float, default=0.5)
    p.add_argument("--alpha3", type=float, default=0.5)
    p.add_argument("--s-relevant", type=float, default=0.6, help="DBN satisfaction of relevant docs")
    p.add_argument("--s-nonrelevant", type=float, default=0.1, help="DBN satisfaction of other docs")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.synthetic:
        raw = generate_synthetic(args.n_queries, args.docs_per_query, args.feature_dim,
                                 args.relevant_fraction, args.seed, args.label_noise,
                                 args.query_spread, args.query_shift)
    else:
        if not args.input:
            raise SpecError("prepare needs --input or --synthetic")
        raw = load_letor(args.input, args.threshold)
    if args.test_input:
        test_raw = load_letor(args.test_input, args.threshold, raw[0].dim)
        train_raw = raw
    else:
        train_raw, test_raw = split_queries(raw, args.test_fraction, args.seed)
    initial = train_initial_ranker(train_raw, args.init_sample, args.seed)
    data = prepare(train_raw, initial, args.k, test_raw)
    data.save(args.out)
    initial.save(Path(args.out) / "initial_ranker.json")
    print(_dump(data.provenance), end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    data = _load_data(args.data)
    params = _model_params(args, data.train)
    noise = NoiseSpec(args.noise, args.p_relevant)
    config = SimulatorConfig(params, noise, args.keep_empty, args.seed, args.clicks)
    log = simulate_log(data.train, config)
    log.save(args.out)
    print(f"{len(log)} sessions, {log.n_clicks} clicks -> {args.out}")
    return EXIT_OK


def cmd_propensity(args) -> int:
    data = _load_data(args.data) if args.data else None
    log = ClickLog.load(args.log) if args.log else None
    policy = ClippingPolicy(args.max_weight)
    k = args.k or (data.k if data else 20)
    method = args.method
    out = {"method": method, "clipping": policy.to_dict()}
    if method in ("pbm-dla", "dcm-mle") and log is None:
        raise SpecError(f"{method} needs --log")
    if method in ("pbm-dla", "dbn-oracle") and data is None:
        raise SpecError(f"{method} needs --data")
    if method == "pbm-oracle":
        if args.from_model and data is not None:
            source = _model_params(argparse.Namespace(**{**vars(args), "model": args.from_model}), data.train)
            params = pbm_oracle_theta(data.train, source, NoiseSpec(args.noise), k)
        else:
            params = PBMParams(theta=PBMParams(eta=args.eta).examination(k))
        out.update(params=params.to_dict(), flagged=[False] * k)
    elif method == "pbm-dla":
        est = estimate_pbm_dla(log, data.train, k, DLAConfig(seed=args.seed, max_weight=args.max_weight))
        out.update(params=est.params.to_dict(), flagged=est.flagged.tolist())
    elif method == "dcm-oracle":
        out.update(params=DCMParams(lam=DCMParams(beta=args.beta, eta=args.eta).continuation(k)).to_dict(),
                   flagged=[False] * k)
    elif method == "dcm-mle":
        est = mle_dcm_lambda(log, k)
        out.update(params=est.params.to_dict(), flagged=est.flagged.tolist(), support=est.support.tolist())
    elif method == "dbn-oracle":
        params = dbn_params_from_relevance(data.train, args.gamma, args.s_relevant, args.s_nonrelevant)
        out.update(params=params.to_dict(), flagged=[False] * k)
    else:
        out.update(params=CCMParams(args.alpha1, args.alpha2, args.alpha3).to_dict(), flagged=[False] * k)
    _write(args.out, _dump(out))
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_data(args.data)
    mode = args.mode.replace("-", "_")
    prop = None
    if mode == "ips":
        if not args.propensity:
            raise SpecError("ips training needs --propensity")
        doc = json.loads(Path(args.propensity).read_text())
        prop = params_from_dict(doc.get("params", doc))
    log = ClickLog.load(args.log) if args.log else None
    config = TrainConfig(mode=mode, lr=args.lr, steps=args.steps, seed=args.seed, batch_size=args.batch_size,
                         max_weight=args.max_weight, eval_every=args.eval_every, architecture=args.architecture)
    result = train(data.train, log, prop, config, data.test)
    result.ranker.save(args.out)
    if args.curve:
        _write(args.curve, result.curve_csv())
    if result.curve:
        print(f"final ndcg@10 {result.curve[-1][1]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = _load_data(args.data)
    report = evaluate_ranker(Ranker.load(args.model), data.test)
    _write(args.out, report.to_csv())
    print(f"mean ndcg@10 {report.mean:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_select(args) -> int:
    data = _load_data(args.data)
    log = ClickLog.load(args.log)
    doc = json.loads(Path(args.candidates).read_text())
    candidates = [(params_from_dict(c["params"]), c["label"]) for c in doc]
    sel = select_method(log, data.train, Ranker.load(args.model), candidates, args.normalizer)
    _write(args.out, _dump(sel.to_dict()))
    return EXIT_OK


def cmd_run(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    out = args.out or spec.out
    if not out:
        raise SpecError("no output directory: pass --out or set 'out' in the experiment file")
    only = None
    if args.cell:
        only = []
        for cell in args.cell:
            sim, method, repeat = cell.split(",")
            only.append((sim, method, int(repeat)))
    result = run_experiment(spec, out, only)
    for f in result.failed:
        print(f"FAILED {f.get('sim')} {f.get('method', 'selection')} r{f.get('repeat')}: {f.get('error')}",
              file=sys.stderr)
    print(f"{len(result.cells)} cells, {len(result.failed)} failed -> {out}")
    return EXIT_PARTIAL if result.failed else EXIT_OK


def cmd_emit(args) -> int:
    result = load_results(args.input)
    csv_text, summary = emit_results(result.matrix(), result.selections)
    _write(args.csv, csv_text)
    if args.summary:
        _write(args.summary, _dump(summary))
    return EXIT_PARTIAL if result.failed else EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cltr-lab", description="Counterfactual learning to rank with cascade propensities")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="rank with an initial scorer, truncate to top-k and filter")
    p.add_argument("--input", help="LETOR/SVMLight training file")
    p.add_argument("--test-input", help="separate LETOR test file (default: split --input)")
    p.add_argument("--synthetic", action="store_true", help="generate synthetic data instead of reading --input")
    p.add_argument("--n-queries", type=int, default=1000)
    p.add_argument("--docs-per-query", type=int, default=25)
    p.add_argument("--feature-dim", type=int, default=20)
    p.add_argument("--relevant-fraction", type=float, default=0.1)
    p.add_argument("--label-noise", type=float, default=0.3)
    p.add_argument("--query-spread", type=float, default=0.5)
    p.add_argument("--query-shift", type=float, default=2.0)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--init-sample", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("simulate", help="simulate a click log on the prepared training lists")
    p.add_argument("--model", choices=["pbm", "dcm", "dbn", "ccm"], required=True)
    _add_model_args(p)
    p.add_argument("--noise", type=float, default=0.05, help="click probability of examined non-relevant docs")
    p.add_argument("--p-relevant", type=float, default=1.0, help="click probability of examined relevant docs")
    p.add_argument("--clicks", type=int, default=200_000)
    p.add_argument("--keep-empty", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("propensity", help="oracle or estimated propensity parameters")
    p.add_argument("--method", required=True,
                   choices=["pbm-oracle", "pbm-dla", "dcm-oracle", "dcm-mle", "dbn-oracle", "ccm-oracle"])
    p.add_argument("--log")
    p.add_argument("--data")
    p.add_argument("--from-model", choices=["pbm", "dcm", "dbn", "ccm"],
                   help="pbm-oracle: best PBM curve for logs of this model (needs --data)")
    _add_model_args(p)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--k", type=int)
    p.add_argument("--max-weight", type=float, default=DEFAULT_CLIPPING.max_weight)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_propensity)

    p = sub.add_parser("train", help="train a ranker")
    p.add_argument("--mode", choices=["ips", "no-ips", "full-info"], required=True)
    p.add_argument("--propensity")
    p.add_argument("--log")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--max-weight", type=float, default=TrainConfig.max_weight)
    p.add_argument("--eval-every", type=int, default=TrainConfig.eval_every)
    p.add_argument("--architecture", choices=["linear", "mlp"], default="linear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-query nDCG@10 on the test lists")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="choose a click model by click log-likelihood")
    p.add_argument("--log", required=True)
    p.add_argument("--candidates", required=True, help="JSON list of {label, params}")
    p.add_argument("--normalizer", default="exp-minmax", choices=["softmax", "sigmoid", "exp-minmax", "exp_minmax"])
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.add_argument("--cell", action="append", help="only rerun 'sim,method,repeat' (repeatable)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("emit", help="merge cell results into a long CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--csv", default="-")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_emit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SPEC if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpecError, ValidationError, DatasetFormatError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
