"""Command-line entry point: ``spikevpr {synth,convert,train,eval,energy}``.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig
from .energy import OpCountReport, count_ops
from .evaluation import evaluate, format_reports, match_volumes, sweep_thresholds, write_pr_csv, write_reports_csv
from .events import DatasetManifest, EventFormatError, load_traverse, synth_dataset
from .model import SpikeEVPR
from .representations import SmlpEncoder, build_mcs_tensor, build_ts_map, sample_tss_tensor, save_spike_tensor
from .training import TrainingAborted, load_model, train, volume_seed

log = logging.getLogger("spikevpr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args, overrides: dict) -> RunConfig:
    overrides = {"seed": args.seed, "threads": args.threads, **overrides}
    return RunConfig.load(args.config, overrides)


def _load_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.load(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _traverse(manifest, i):
    if not 0 <= i < len(manifest.event_files):
        raise CliError(f"manifest has no traverse {i}", EXIT_CONFIG)
    return load_traverse(manifest, i)


def cmd_synth(args) -> int:
    cfg = _config(args, {
        "synth.places": args.places, "synth.traverses": args.traverses,
        "synth.noise_rate": args.noise_rate, "synth.events_per_place": args.events_per_place,
    })
    try:
        synth = cfg.synth()
        synth_dataset(synth, args.out)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    cfg.echo(args.out)
    print(f"wrote {synth.traverses} traverses x {synth.n_places} places to {args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg = _config(args, {})
    manifest = _load_manifest(args.manifest)
    mc = cfg.model()
    if args.checkpoint:
        encoder = load_model(args.checkpoint).encoder
    else:
        encoder = SmlpEncoder(mc.steps, mc.smlp_hidden, mc.lif, seed=mc.seed)
    traverses = [args.traverse] if args.traverse is not None else range(len(manifest.event_files))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tss_seed = cfg.component_seed("convert")
    total = 0
    for r in traverses:
        volumes = _traverse(manifest, r)
        for v in volumes:
            with torch.no_grad():
                mcs = build_mcs_tensor(v, encoder, mc.steps)
            tss = sample_tss_tensor(build_ts_map(v, mc.eta), mc.steps, volume_seed(tss_seed, f"t{r}", v.index))
            save_spike_tensor(mcs, out / f"t{r}_v{v.index:05d}_mcs.spk")
            save_spike_tensor(tss, out / f"t{r}_v{v.index:05d}_tss.spk")
        total += len(volumes)
    cfg.echo(out)
    print(f"{total} volumes")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, {
        "train.max_steps": args.steps, "train.epochs": args.epochs, "train.optimizer": args.optimizer,
    })
    manifest = _load_manifest(args.manifest)
    model = SpikeEVPR(cfg.model())
    db = _traverse(manifest, cfg["data.db_traverse"])
    queries = _traverse(manifest, cfg["data.query_traverse"])
    tc = cfg.train()
    cfg.echo(args.out)
    validate = None
    if tc.validate_every:
        from .evaluation import recall_at_n

        eval_seed = cfg.component_seed("eval")
        validate = lambda m: recall_at_n(match_volumes(queries, db, m, eval_seed), 1, cfg["eval.phi"])  # noqa: E731
    try:
        result = train(model, db, queries, tc, args.out, validate)
    except TrainingAborted as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    last = result.losses[-1][1] if result.losses else float("nan")
    print(f"trained {result.steps} steps; last loss {last:.6f}; checkpoint {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, {"eval.phi": args.phi})
    manifest = _load_manifest(args.manifest)
    try:
        model = load_model(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    db = _traverse(manifest, cfg["data.db_traverse"])
    queries = _traverse(manifest, cfg["data.query_traverse"])
    if not db:
        raise CliError("empty database traverse", EXIT_CONFIG)
    result = match_volumes(queries, db, model, cfg.component_seed("eval"))
    out = Path(args.out)
    cfg.echo(out)
    reports = sweep_thresholds(result, cfg["eval.phi_sweep"]) if args.phi_sweep else [evaluate(result, cfg["eval.phi"])]
    write_reports_csv(reports, out / "metrics.csv")
    main = next((r for r in reports if r.phi == cfg["eval.phi"]), reports[-1])
    write_pr_csv(main.pr, out / "pr.csv")
    with open(out / "ranking.csv", "w") as fh:
        fh.write("query,rank1,distance1\n")
        for q, (r, d) in enumerate(zip(result.ranking[:, 0], result.distances[:, 0])):
            fh.write(f"{q},{r},{d!r}\n")
    text = format_reports(reports)
    (out / "metrics.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_energy(args) -> int:
    cfg = _config(args, {"energy.mode": args.mode, "energy.rate": args.rate})
    mode = cfg["energy.mode"]
    if args.ac_g is not None or args.mac_g is not None:
        report = OpCountReport.from_counts(mode, (args.ac_g or 0.0) * 1e9, (args.mac_g or 0.0) * 1e9)
    else:
        if mode == "snn-measured" and not args.manifest:
            raise CliError("--mode snn-measured needs an input batch (--manifest)", EXIT_CONFIG)
        model = load_model(args.checkpoint) if args.checkpoint else SpikeEVPR(cfg.model())
        model.eval()
        if args.manifest:
            manifest = _load_manifest(args.manifest)
            volumes = [v for v in _traverse(manifest, cfg["data.query_traverse"]) if not v.empty][: args.batch]
            source = f"{len(volumes)} volumes of {args.manifest}"
        else:
            from .events import EventStream, EventVolume

            w, h = cfg["synth.width"], cfg["synth.height"]
            volumes = [EventVolume(EventStream.empty((w, h)), 0, 1)]
            source = f"empty {w}x{h} volume (shapes only)"
        if not volumes:
            raise CliError("no non-empty volumes to drive the count", EXIT_CONFIG)
        seed = cfg.component_seed("energy")
        seeds = [volume_seed(seed, "energy", i) for i in range(len(volumes))]
        report = count_ops(
            model, mode, lambda: model.describe(volumes, seeds), rate=cfg["energy.rate"],
            batch=len(volumes), source=source,
        )
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        cfg.echo(out)
        (out / "energy.txt").write_text(text + "\n")
        (out / "energy.csv").write_text(report.to_csv())
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikevpr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--threads", type=int, help="cap on torch worker threads")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic multi-traverse dataset")
    common(p)
    p.add_argument("--places", type=int)
    p.add_argument("--traverses", type=int)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--events-per-place", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="slice event files and write SPK1 spike tensors")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--traverse", type=int)
    p.add_argument("--checkpoint", help="take the timestamp encoder from this model")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="triplet training")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phi", type=float)
    p.add_argument("--phi-sweep", action="store_true", help="report every eval.phi_sweep threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("energy", help="operation counts and energy estimate")
    common(p, out_required=False)
    p.add_argument("--mode", choices=("ann", "snn-static", "snn-measured"))
    p.add_argument("--rate", type=float, help="assumed firing rate for snn-static")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="volumes that drive snn-measured counting")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--ac-g", type=float, help="inject an AC count (billions) instead of counting")
    p.add_argument("--mac-g", type=float, help="inject a MAC count (billions) instead of counting")
    p.set_defaults(func=cmd_energy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads:
            torch.set_num_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EventFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
