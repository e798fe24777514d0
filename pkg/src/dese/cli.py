"""Command-line front end: train, discover, verify, sbm-gen.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 divergence,
4 verify failures.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, graph_io, metrics, trainer, verify
from .graph_io import DataError, GraphDataset
from .trainer import ConfigError, DivergenceError, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("dese")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4
SCHEMA_PATH = Path(__file__).with_name("schemas") / "result.schema.json"


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ------------------------------------------------------------ config flags

def _config_fields(cls=TrainConfig, prefix=""):
    """(dotted key, default) for every scalar/list leaf of the config tree."""
    default = cls()
    for f in dataclasses.fields(cls):
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(value):
            yield from _config_fields(type(value), f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", value


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _flag_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, list):
        return _int_list
    return str


def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("config keys (override the config file)")
    for key, default in _config_fields():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", type=_flag_type(default), default=None,
                       metavar=type(default).__name__.upper(), help=f"default {default!r}")


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    for part in parts[:-1]:
        d = d.setdefault(part, {})
    d[parts[-1]] = value


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    # a result.json carries its config under "config"
    if isinstance(data, dict) and "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a table/object")
    return data


def build_config(args) -> TrainConfig:
    data = read_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            _set_dotted(data, key[4:], value)
    if getattr(args, "clusters", None):
        _set_dotted(data, "ass.clusters", args.clusters)
        _set_dotted(data, "ass.depth", len(args.clusters))
    try:
        cfg = TrainConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate()


# ------------------------------------------------------------ datasets

def _add_data_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("input graph")
    g.add_argument("--dataset", help="dataset directory (edges.tsv, features.csv, labels.csv)")
    g.add_argument("--sbm", type=_int_list, help="planted-partition block sizes, e.g. 50,50,50")
    g.add_argument("--p-in", type=float, default=0.3)
    g.add_argument("--p-out", type=float, default=0.02)
    g.add_argument("--feature-dim", type=int, default=32)
    g.add_argument("--feature-noise", type=float, default=0.1)
    g.add_argument("--sbm-seed", type=int, default=0, help="graph seed, independent of the training seeds")


def load_input(args) -> GraphDataset:
    if bool(args.dataset) == bool(args.sbm):
        raise ConfigError("give exactly one of --dataset or --sbm")
    if args.dataset:
        return graph_io.load_dataset(args.dataset)
    return graph_io.generate_sbm(args.sbm, args.p_in, args.p_out, args.feature_dim,
                                 args.feature_noise, args.sbm_seed)


def dataset_spec(args) -> dict:
    if args.dataset:
        return {"path": str(args.dataset)}
    return {"sbm": {"block_sizes": args.sbm, "p_in": args.p_in, "p_out": args.p_out,
                    "feature_dim": args.feature_dim, "feature_noise": args.feature_noise,
                    "seed": args.sbm_seed}}


# ------------------------------------------------------------ output files

def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_matrix(path: Path, m: np.ndarray):
    # repr keeps every float64 bit
    _write_text(path, "".join(",".join(repr(float(x)) for x in row) + "\n" for row in m))


def result_record(res: trainer.ClusteringResult, ds: GraphDataset, spec: dict) -> dict:
    return {
        "version": __version__,
        "dataset": {"name": ds.name, "n_nodes": ds.n_nodes, "n_edges": ds.n_edges, **spec},
        "seed": res.config.seed,
        "metrics": res.metrics,
        "n_clusters_used": res.n_clusters_used,
        "best_epoch": res.best_epoch,
        "wall_clock": res.wall_clock,
        "config": res.config.to_dict(),
        "loss_trace": [list(map(float, row)) for row in res.loss_trace],
    }


def write_run(out_dir: Path, res: trainer.ClusteringResult, ds: GraphDataset, spec: dict):
    """Write all per-run files into a temp dir next to ``out_dir`` and rename it into place."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        record = result_record(res, ds, spec)
        _write_text(tmp / "result.json", json.dumps(record, indent=2) + "\n")
        _write_text(tmp / "labels.csv", "node,label\n"
                    + "".join(f"{i},{int(y)}\n" for i, y in enumerate(res.hard_labels)))
        _write_matrix(tmp / "soft_assignment.csv", res.soft_assignment)
        _write_matrix(tmp / "embeddings.csv", res.embeddings)
        if ds.labels is not None:
            _write_text(tmp / "contingency.csv", metrics.contingency(res.hard_labels, ds.labels).to_csv())
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def write_rounds(path: Path, rounds) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "c_in", "clusters_out", "nmi_if_labels"])
        for r in rounds:
            w.writerow([r.round, r.c_in, r.clusters_out, "" if r.nmi is None else repr(r.nmi)])


# ------------------------------------------------------------ workers

def worker_count(requested: int | None, n_jobs: int) -> int:
    n = requested if requested else 1
    cap = os.environ.get("SEDESC_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"SEDESC_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n, n_jobs))


def _train_job(ds: GraphDataset, cfg: TrainConfig):
    return trainer.train(ds, cfg)


def _discover_job(ds: GraphDataset, cfg: TrainConfig, c_start: int, max_rounds: int):
    return trainer.discover_cluster_count(ds, cfg, c_start, max_rounds)


def _run_jobs(fn, jobs: list, workers: int) -> list:
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _seed_config(cfg: TrainConfig, seed: int) -> TrainConfig:
    out = TrainConfig.from_dict(cfg.to_dict())
    out.seed = seed
    return out


def _summary(seed, res) -> str:
    m = res.metrics
    scores = (f"nmi {m['nmi']:.4f} ari {m['ari']:.4f} acc {m['acc']:.4f} f1 {m['f1']:.4f} "
              if m else "")
    return (f"seed {seed}: {scores}clusters {res.n_clusters_used} "
            f"best_epoch {res.best_epoch} time {res.wall_clock:.1f}s")


# ------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = build_config(args)
    ds = load_input(args)
    seeds = args.seeds or [cfg.seed]
    out = Path(args.out)
    results = _run_jobs(_train_job, [(ds, _seed_config(cfg, s)) for s in seeds],
                        worker_count(args.workers, len(seeds)))
    spec = dataset_spec(args)
    for s, res in zip(seeds, results):
        write_run(out / f"seed_{s}", res, ds, spec)
        print(_summary(s, res))
    if all(r.metrics for r in results):
        med = {k: float(np.median([r.metrics[k] for r in results])) for k in ("nmi", "ari", "acc", "f1")}
        print(f"median over {len(seeds)} seeds: " + " ".join(f"{k} {v:.4f}" for k, v in med.items()))
    else:
        print(f"median over {len(seeds)} seeds: clusters "
              f"{float(np.median([r.n_clusters_used for r in results])):g}")
    return EXIT_OK


def cmd_discover(args) -> int:
    cfg = build_config(args)
    ds = load_input(args)
    seeds = args.seeds or [cfg.seed]
    out = Path(args.out)
    jobs = [(ds, _seed_config(cfg, s), args.c_start, args.max_rounds) for s in seeds]
    outcomes = _run_jobs(_discover_job, jobs, worker_count(args.workers, len(seeds)))
    for s, (c_final, rounds, converged) in zip(seeds, outcomes):
        d = out / f"seed_{s}"
        d.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{d.name}.", dir=d.parent))
        try:
            write_rounds(tmp / "rounds.csv", rounds)
            _write_text(tmp / "discover.json", json.dumps(
                {"seed": s, "c_start": args.c_start, "c_final": c_final,
                 "converged": converged, "n_rounds": len(rounds)}, indent=2) + "\n")
            if d.exists():
                shutil.rmtree(d)
            tmp.rename(d)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        seq = " -> ".join([str(rounds[0].c_in)] + [str(r.clusters_out) for r in rounds])
        flag = "" if converged else " (not converged)"
        print(f"seed {s}: {seq}, final c = {c_final}{flag}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all()
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_sbm_gen(args) -> int:
    if not args.sbm:
        raise ConfigError("sbm-gen needs --sbm")
    ds = graph_io.generate_sbm(args.sbm, args.p_in, args.p_out, args.feature_dim,
                               args.feature_noise, args.sbm_seed)
    graph_io.save_dataset(ds, args.out)
    print(f"wrote {ds.name}: {ds.n_nodes} nodes, {ds.n_edges} edges -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dese", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dese {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, fn, helptext in (("train", cmd_train, "train over one or more seeds"),
                               ("discover", cmd_discover, "iterate training until the cluster count is stable")):
        sp = sub.add_parser(name, help=helptext)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="TOML or JSON config (a result.json also works)")
        sp.add_argument("--clusters", type=_int_list, help="clusters per level, e.g. 7 or 20,7")
        sp.add_argument("--seeds", type=_int_list, help="comma-separated training seeds")
        sp.add_argument("--out", default="runs", help="output directory (default: runs)")
        sp.add_argument("--workers", type=int, default=1, help="parallel seed runs (capped by SEDESC_THREADS)")
        if name == "discover":
            sp.add_argument("--c-start", type=int, required=True)
            sp.add_argument("--max-rounds", type=int, default=20)
        _add_data_flags(sp)
        _add_config_flags(sp)

    sp = sub.add_parser("verify", help="run the fast property suite")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sbm-gen", help="write a planted-partition dataset directory")
    sp.set_defaults(func=cmd_sbm_gen)
    sp.add_argument("--out", required=True)
    _add_data_flags(sp)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
