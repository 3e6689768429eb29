"""Command-line entry point: ``proreg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, harness, q2s
from .model import load_checkpoint, predict, save_checkpoint
from .oracle import build_oracle, cache_zero_shot_labels, save_oracle
from .probs import DEFAULT_TEMPERATURE


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: {exc}") from exc


def cmd_generate_data(args) -> int:
    raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    oracle_cfg = raw.pop("oracle", None)
    spec = datagen.BiasSpec.from_dict(raw)
    ds = datagen.generate(spec)
    if oracle_cfg is not None:
        oracle = build_oracle(spec, float(oracle_cfg.get("sigma", 0.0)),
                              int(oracle_cfg.get("seed", spec.seed)),
                              float(oracle_cfg.get("temperature") or DEFAULT_TEMPERATURE))
        ds = cache_zero_shot_labels(oracle, ds)
    out = harness.resolve_output(args.output, "dataset.prds")
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.save(ds, out)
    if oracle_cfg is not None:
        save_oracle(oracle, out.with_suffix(".oracle.json"))
    if args.jsonl:
        datagen.export_jsonl(ds, out.with_suffix(".jsonl"))
    print(f"wrote {out} ({len(ds.labels)} samples)")
    return 0


def _write_rows(rows, out: Path, timings: bool, truncated: str | None = None) -> None:
    harness.write_results(out, rows, truncated=truncated)
    if timings:
        harness.write_timings(out.with_suffix(".timings.csv"), rows)


def _report(rows) -> None:
    for s in harness.aggregate(rows):
        m, sd = s.mean, s.std
        print(f"{s.label:28s} ID {m['id_accuracy']:.4f}±{sd['id_accuracy']:.4f}  "
              f"OOD {m['ood_accuracy']:.4f}±{sd['ood_accuracy']:.4f}  "
              f"HM {m['harmonic_mean']:.4f}±{sd['harmonic_mean']:.4f}")


def _run_rows(runner, out: Path, timings: bool):
    try:
        rows = runner()
    except harness.ExperimentError as exc:
        _write_rows(exc.partial_rows, out, timings, truncated=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return None
    _write_rows(rows, out, timings)
    return rows


def _sibling(template, name: str) -> str:
    """Sweep outputs go next to the template's own output, under their own name."""
    return str(Path(template.output).parent / name) if template.output else name


def cmd_train(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    out = harness.resolve_output(args.output or config.output, "results.csv")
    rows = _run_rows(lambda: harness.run_experiment(config, args.jobs), out, args.timings)
    if rows is None:
        return 1
    if args.checkpoints:
        ckpt_dir = harness.resolve_output(args.checkpoints, "checkpoints")
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for seed in config.seeds:
            _, art = harness.run_seed(config, seed, keep=True)
            if art.model is not None:
                save_checkpoint(art.model, ckpt_dir / f"{config.method.name}_seed{seed}.ckpt",
                                config.to_dict())
    _report(rows)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    model, digest = load_checkpoint(args.checkpoint)
    ds = datagen.load(args.dataset)
    accs = {}
    for split in datagen.SPLITS:
        view = ds.split(split)
        if len(view):
            accs[split] = harness.accuracy(predict(model, view.x), view.labels)
    record = {"checkpoint": str(args.checkpoint), "config_sha256": digest.hex(), **accs}
    if "id_test" in accs and "ood_test" in accs:
        record["harmonic_mean"] = harness.harmonic_mean(accs["id_test"], accs["ood_test"])
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    template = harness.ExperimentConfig.load(args.template)
    if args.seeds:
        template = replace(template, seeds=tuple(int(s) for s in args.seeds.split(",")))
    out = harness.resolve_output(args.output or _sibling(template, f"sweep_{args.param}.csv"), "")
    rows = _run_rows(lambda: harness.sweep(template, args.param, args.grid, args.jobs), out, args.timings)
    if rows is None:
        return 1
    _report(rows)
    print(f"wrote {out}")
    return 0


def cmd_compare(args) -> int:
    template = harness.ExperimentConfig.load(args.template)
    out = harness.resolve_output(args.output or _sibling(template, "comparison.csv"), "")
    rows = _run_rows(lambda: harness.compare_methods(template, args.alpha, args.kd_grid,
                                                     args.ensemble_grid, args.jobs), out, args.timings)
    if rows is None:
        return 1
    _report(rows)
    stats = harness.aggregate(rows)
    print(f"best KD: {harness.best_in_grid(stats, 'kd').label}; "
          f"best ensemble: {harness.best_in_grid(stats, 'ensemble').label}")
    print(f"wrote {out}")
    return 0


def cmd_q2s(args) -> int:
    stream = open(args.input, encoding="utf-8") if args.input and args.input != "-" else sys.stdin
    unsupported = 0
    try:
        for line in stream:
            if not line.strip():
                continue
            rec = q2s.convert_record(line, args.mask)
            unsupported += rec["type"] == q2s.QuestionKind.UNSUPPORTED.value
            sys.stdout.write(json.dumps(rec) + "\n")
    finally:
        if stream is not sys.stdin:
            stream.close()
    return 1 if (args.strict and unsupported) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proreg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="generate a synthetic biased dataset")
    g.add_argument("spec", help="JSON file with BiasSpec fields and an optional 'oracle' block")
    g.add_argument("-o", "--output", default=None)
    g.add_argument("--jsonl", action="store_true", help="also write a JSON-lines export")
    g.set_defaults(func=cmd_generate_data)

    def common(sp):
        sp.add_argument("-o", "--output", default=None, help="results CSV path")
        sp.add_argument("-j", "--jobs", type=int, default=None,
                        help=f"parallel workers (default ${harness.ENV_JOBS} or 1)")
        sp.add_argument("--timings", action="store_true", help="write wall times next to the CSV")

    t = sub.add_parser("train", help="run one experiment config over its seeds")
    t.add_argument("config")
    t.add_argument("--checkpoints", default=None, help="directory for per-seed checkpoints")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset file")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="sweep one hyper-parameter over a grid")
    s.add_argument("template")
    s.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMETERS))
    s.add_argument("--grid", required=True, type=_grid)
    s.add_argument("--seeds", default=None, help="comma-separated override of the template seeds")
    common(s)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="all baselines against ProReg on shared seeds")
    c.add_argument("template")
    c.add_argument("--alpha", type=float, default=2.0)
    c.add_argument("--kd-grid", type=_grid, default=list(harness.KD_GRID))
    c.add_argument("--ensemble-grid", type=_grid, default=list(harness.ENSEMBLE_GRID))
    common(c)
    c.set_defaults(func=cmd_compare)

    q = sub.add_parser("q2s", help="rewrite VQA questions as prompt statements (JSON lines)")
    q.add_argument("input", nargs="?", default="-", help="file with one question per line (default stdin)")
    q.add_argument("--mask", default=q2s.MASK, help="mask placeholder token (default %(default)s)")
    q.add_argument("--strict", action="store_true", help="exit 1 if any question is unsupported")
    q.set_defaults(func=cmd_q2s)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
