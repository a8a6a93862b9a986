"""Command-line entry point: ``spela train|eval|sweep|profile|embed``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint, profiler
from .config import ConfigError, config_from_flat, load_config, load_data, preset_names
from .embeddings import (SimulationConfig, cache_path, energy, generate_symmetric,
                         symmetric_cached, write_spev)
from .experiments import (evaluate_exits, manifest, profile_row, run_once, summarize,
                          sweep_points)
from .plotting import plot_relative_memory, plot_sweep, plot_training_curves

log = logging.getLogger("spela")


def _seeds(cfg, args) -> tuple:
    return (args.seed,) if args.seed is not None else tuple(cfg.seeds)


def _apply_common(cfg, args):
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
        if cfg.algorithm == "spela_cnn":
            cfg.cnn.block_epochs = tuple(min(e, args.epochs) for e in cfg.cnn.block_epochs)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_net(path_stem: Path, net, cfg) -> Path:
    echo = cfg.to_flat()
    kind = cfg.algorithm
    if kind == "spela_cnn":
        p = path_stem.with_suffix(".spcn")
        checkpoint.save_cnn(p, net, echo)
    elif kind.startswith("spela"):
        p = path_stem.with_suffix(".spnw")
        checkpoint.save_spela(p, net, echo)
    else:
        p = path_stem.with_suffix(".bpnw")
        checkpoint.save_bp(p, net, echo)
    return p


def _progress(epoch, net, metrics):
    rows = [r for r in metrics.records if r["epoch"] == epoch and r["split"] == "test"]
    if rows:
        log.info("epoch %d test %s", epoch,
                 " ".join(f"L{r['layer']}={100 * r['accuracy']:.2f}%" for r in rows))


def cmd_train(args) -> int:
    cfg = _apply_common(load_config(args.config), args)
    out = _out_dir(args, cfg)
    seeds = _seeds(cfg, args)
    checksums = {}
    for seed in seeds:
        res = run_once(cfg, seed, profile=args.profile, cache_dir=args.cache_dir,
                       callback=_progress)
        checksums.update(res.metrics.info["checksums"])
        (out / f"metrics_seed{seed}.csv").write_text(res.metrics.to_csv())
        ck = _save_net(out / f"model_seed{seed}", res.net, cfg)
        plot_training_curves(res.metrics, out / f"curves_seed{seed}.png", f"{cfg.name} seed {seed}")
        finals = sorted({r["layer"] for r in res.metrics.records if r["split"] == "test"})
        summary = ", ".join(f"layer {k}: {100 * res.metrics.final('test', k):.2f}%" for k in finals)
        print(f"seed {seed}: {summary}  [{ck}]")
        if res.ledger is not None:
            row = profile_row(cfg, res, cfg.train.batch_size if cfg.algorithm != "spela_cnn"
                              else cfg.cnn.batch_size)
            (out / f"profile_seed{seed}.csv").write_text(profiler.to_csv([row]))
            print(profiler.to_table([row]))
    (out / "manifest.txt").write_text(manifest(cfg, seeds, checksums, sys.argv))
    return 0


def cmd_eval(args) -> int:
    _, net, echo = checkpoint.load_any(args.checkpoint, args.cache_dir)
    # without --config the data section is taken from the checkpoint's echo
    cfg = load_config(args.config) if args.config else config_from_flat(echo)
    _, test = load_data(cfg.data)
    for k, acc in evaluate_exits(net, test, args.exit_layer):
        print(f"exit {k}: accuracy {100 * acc:.2f}%")
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_common(load_config(args.config), args)
    out = _out_dir(args, cfg)
    seeds = _seeds(cfg, args)
    rows, checksums = [], {}
    for label, point in sweep_points(cfg):
        for seed in seeds:
            res = run_once(point, seed, cache_dir=args.cache_dir)
            checksums.update(res.metrics.info["checksums"])
            (out / f"metrics_{label}_seed{seed}.csv").write_text(res.metrics.to_csv())
            last = max(r["epoch"] for r in res.metrics.records if r["split"] == "test")
            for r in res.metrics.records:
                if r["split"] == "test" and r["epoch"] == last:
                    rows.append({"label": label, "seed": seed, "layer": r["layer"],
                                 "accuracy": r["accuracy"]})
            log.info("sweep %s seed %d done", label, seed)
    summary = summarize(rows)
    (out / "sweep_runs.csv").write_text(profiler.to_csv(rows))
    (out / "sweep.csv").write_text(profiler.to_csv(summary))
    plot_sweep(summary, out / "sweep.png", cfg.sweep.param or "config")
    print(profiler.to_table(summary))
    (out / "manifest.txt").write_text(manifest(cfg, seeds, checksums, sys.argv))
    return 0


def cmd_profile(args) -> int:
    cfg = _apply_common(load_config(args.config), args)
    out = _out_dir(args, cfg)
    seed = _seeds(cfg, args)[0]
    batch_sizes = args.batch_sizes or (cfg.train.batch_size,)
    data = load_data(cfg.data, seed)
    rows = []
    for _, point in sweep_points(cfg):
        for alg in ("spela", "bp"):
            for bs in batch_sizes:
                p = replace(point, algorithm=alg)
                p.train = replace(p.train, batch_size=bs)
                res = run_once(p, seed, data=data, profile=True, cache_dir=args.cache_dir)
                rows.append(profile_row(p, res, bs))
    rows = profiler.report(rows)
    (out / "profile.csv").write_text(profiler.to_csv(rows))
    plot_relative_memory(rows, out / "relative_memory.png")
    print(profiler.to_table(rows))
    (out / "manifest.txt").write_text(manifest(cfg, (seed,), {}, sys.argv))
    return 0


def cmd_embed(args) -> int:
    sim = SimulationConfig(rng_seed=args.seed, energy_rel_tolerance=args.tol)
    if args.out:
        e = generate_symmetric(args.n, args.dim, sim)
        write_spev(args.out, e)
        where, hit = args.out, False
    else:
        e, hit = symmetric_cached(args.n, args.dim, args.seed, args.tol, args.cache_dir)
        where = cache_path(args.n, args.dim, args.seed, args.tol, args.cache_dir)
    status = "cache hit" if hit else f"{e.iterations} iterations, energy {e.initial_energy:.6g} -> {energy(e):.6g}"
    print(f"{args.n} vectors in {args.dim} dims, seed {args.seed}: {status}  [{where}]")
    return 0


def _int_list(s: str) -> tuple:
    return tuple(int(x) for x in s.split(","))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spela", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, required=True):
        sp.add_argument("--config", required=required,
                        help=f"config file or preset name ({', '.join(preset_names())})")
        sp.add_argument("--seed", type=int, default=None, help="run only this seed")
        sp.add_argument("--out", default=None, help="output directory (default runs/<name>)")
        sp.add_argument("--cache-dir", default=None, help="embedding cache directory")

    t = sub.add_parser("train", help="train one configuration")
    common(t)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--profile", action="store_true", help="attach the cost ledger")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint at one or every exit")
    common(e, required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--exit-layer", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid over the config's [sweep] values and seeds")
    common(s)
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("profile", help="SPELA vs backprop cost model across the sweep")
    common(pr)
    pr.add_argument("--epochs", type=int, default=None)
    pr.add_argument("--batch-sizes", type=_int_list, default=None, help="e.g. 50,100,200")
    pr.set_defaults(func=cmd_profile)

    em = sub.add_parser("embed", help="generate or fetch a symmetric embedding set")
    em.add_argument("--n", type=int, required=True)
    em.add_argument("--dim", type=int, required=True)
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--tol", type=float, default=1e-9)
    em.add_argument("--out", default=None, help="write here instead of the cache")
    em.add_argument("--cache-dir", default=None)
    em.set_defaults(func=cmd_embed)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
