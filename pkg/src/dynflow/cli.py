"""Command line entry point: generate | ingest | train | eval | ablate | enumerate.

Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 enumeration cap.
Outputs land under ``$DYNFLOW_OUT`` (default ``./runs``) unless ``--out`` is absolute.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import graphs as gr
from . import metrics as mt
from .baselines import BaselineConfig, BaselineError, FactorModel
from .gflownet import (CheckpointError, DynGFN, GFNConfig, IntractableError, TrainingError,
                       warm_start)
from .structmodel import RidgeStats, hyper_theta, predict_dx
from .synthdata import (ConfigError, DynDataset, SystemSpec, choose_multiplicities,
                        duplicate_variables, normalize, read_csv, sample_system, simulate_pairs,
                        split, write_csv)

log = logging.getLogger("dynflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4
MODELS = ("dyngfn", "dynbcd", "dyndibs")
DEFAULT_N = 5000

# keys accepted in a JSON config file and as flags (flags win)
TRAIN_KEYS = ("model", "solver", "form", "data", "epochs", "lr", "hyper_lr", "lambda0", "T",
              "alpha", "gamma", "particles", "n_samples", "batch_size", "data_batch", "period",
              "c_max", "hidden", "ridge_lambda", "seed", "val_every", "val_samples")
SYSTEM_KEYS = ("d", "sparsity", "form", "dt", "noise", "n", "modes", "split")


# --- small helpers ------------------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get("DYNFLOW_OUT") or "runs")


def resolve_out(out: str | None, default_name: str) -> Path:
    p = Path(out) if out else Path(default_name)
    if not p.is_absolute():
        p = output_root() / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def digest_of(config: dict, inputs: list) -> str:
    h = hashlib.sha256(canonical(config).encode())
    for p in sorted(str(x) for x in inputs):
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")
    tmp.replace(path)


def write_manifest(out: Path, config: dict, digest: str, started: float,
                   reads: list, writes: list, checkpoints: list | None = None) -> Path:
    path = out / "manifest.json"
    if path.exists():
        try:
            if json.loads(path.read_text()).get("digest") == digest:
                log.warning("re-running with identical input digest %s", digest[:12])
        except json.JSONDecodeError:
            pass
    write_json(path, {"config": config, "digest": digest, "wall_clock_s": time.time() - started,
                      "reads": sorted(map(str, reads)),
                      "writes": sorted(map(str, writes + [path])),
                      "checkpoints": sorted(map(str, checkpoints or []))})
    return path


def parse_floats(s: str) -> list[float]:
    return [float(v) for v in str(s).split(",") if v.strip()]


def parse_ints(s: str) -> list[int]:
    return [int(v) for v in str(s).split(",") if v.strip()]


def load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def merge(file_cfg: dict, args: argparse.Namespace, keys) -> dict:
    out = {k: file_cfg[k] for k in keys if k in file_cfg}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


# --- datasets on disk ---------------------------------------------------------------


def save_dataset_dir(out: Path, ds: DynDataset, extra: dict, adm: gr.AdmissibleSet | None) -> list[Path]:
    csv_path = out / "dataset.csv"
    write_csv(ds, csv_path)
    written = [csv_path]
    doc = {"csv": "dataset.csv", "names": list(ds.names), "n": ds.n, "D": ds.D,
           "split": None if ds.split is None else [str(t) for t in ds.split],
           "csv_sha256": sha256_file(csv_path), **extra}
    if adm is not None:
        adm_path = out / "admissible.json"
        adm.save(adm_path)
        doc["admissible"] = "admissible.json"
        written.append(adm_path)
    write_json(out / "dataset.json", doc)
    written.append(out / "dataset.json")
    return written


def load_dataset_dir(path) -> tuple[DynDataset, dict, gr.AdmissibleSet | None, list[Path]]:
    p = Path(path)
    meta_path = p / "dataset.json" if p.is_dir() else p
    if not meta_path.exists():
        raise ConfigError(f"no dataset manifest at {meta_path}")
    meta = json.loads(meta_path.read_text())
    base = meta_path.parent
    csv_path = base / meta["csv"]
    if not csv_path.exists():
        raise ConfigError(f"dataset file {csv_path} missing")
    ds, _ = read_csv(csv_path)
    if meta.get("split") is not None:
        if len(meta["split"]) != ds.n:
            raise ConfigError("split tags do not match dataset rows")
        ds = DynDataset(ds.X, ds.dX, ds.names, np.asarray(meta["split"]))
    reads = [meta_path, csv_path]
    adm = None
    if meta.get("admissible"):
        adm_path = base / meta["admissible"]
        adm = gr.AdmissibleSet.load(adm_path)
        if adm.D != ds.D:
            raise ConfigError(f"admissible graphs have D={adm.D}, dataset D={ds.D}")
        reads.append(adm_path)
    return ds, meta, adm, reads


def rows(ds: DynDataset, tag: str) -> DynDataset:
    if ds.split is None:
        return ds
    sub = ds.rows(tag)
    return sub if sub.n else ds


# --- models ---------------------------------------------------------------------


def build_model(cfg: dict, D: int):
    model = cfg.get("model", "dyngfn")
    if model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}")
    if cfg.get("solver", "ridge") not in ("ridge", "hyper"):
        raise ConfigError("solver must be ridge or hyper")
    if model == "dyngfn":
        names = {f.name for f in fields(GFNConfig)}
        kw = {k: v for k, v in cfg.items() if k in names and v is not None}
        return DynGFN.init(D, GFNConfig(**kw))
    names = {f.name for f in fields(BaselineConfig)} - {"model"}
    kw = {k: v for k, v in cfg.items() if k in names and v is not None}
    return FactorModel.init(D, BaselineConfig.defaults(model, **kw))


def load_model(path):
    _, _, extra = dm.load_checkpoint(path)
    kind = extra.get("model")
    if kind == "dyngfn":
        return DynGFN.load(path)
    if kind in ("dynbcd", "dyndibs"):
        return FactorModel.load(path)
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def model_kind(model) -> str:
    return "dyngfn" if isinstance(model, DynGFN) else model.kind


def model_T(model) -> float:
    return model.config.T


def hyper_of(model):
    return model.hyper


# --- evaluation (one path for every model) -------------------------------------------


def _sampled_nll(model, modes, test: DynDataset) -> float | None:
    h = hyper_of(model)
    if h is None:
        return None
    total, weight = 0.0, 0
    for g, cnt in modes:
        dx_hat = predict_dx(test.X, g, hyper_theta(h, g))
        total += cnt * mt.nll(test.dX, dx_hat)
        weight += cnt
    return total / weight


def evaluate(model, ds: DynDataset, adm: gr.AdmissibleSet | None, M: int, seed: int,
             digest: str = "") -> tuple[mt.EvalReport, np.ndarray, list]:
    """Sample M graphs at c = 1 and compute every applicable metric."""
    rng = np.random.default_rng(seed)
    samples = model.sample(M, rng)
    modes = mt.mode_counts(samples)
    marg = mt.edge_marginals(samples)
    notes = {}
    shd, auc, kl = 0.0, None, None
    if adm is not None:
        shd = mt.bayes_shd(samples, adm)
        auc = mt.auc(marg, adm)
        if auc is None:
            notes["auc_omitted"] = "admissible union has a single label class"
        try:
            res = mt.kl_restricted(model.log_prob, adm)
            kl = res.value
            if not res.finite:
                notes["kl_per_graph_log_q"] = res.per_graph
        except IntractableError as e:
            notes["kl_omitted"] = str(e)
    else:
        notes["admissible"] = "no admissible set; graph metrics skipped"
    test = rows(ds, "test")
    nll = _sampled_nll(model, modes, test)
    rep = mt.EvalReport(bayes_shd=shd, auc=auc, kl=kl, nll=nll, n_samples=M, seed=seed,
                        config_digest=digest, notes=notes)
    return rep, marg, modes


def write_eval(out: Path, rep: mt.EvalReport, marg, modes, names, adm) -> list[Path]:
    paths = [out / "report.json", out / "marginals.csv", out / "samples.json", out / "mode_counts.csv"]
    (out / "report.json.tmp").write_text(rep.dumps() + "\n")
    (out / "report.json.tmp").replace(paths[0])
    mt.write_marginals_csv(paths[1], marg, names)
    write_json(paths[2], mt.samples_json(modes))
    mt.write_mode_counts_csv(paths[3], modes, adm)
    return paths


# --- training loop shared by train and ablate ---------------------------------------------


def _val_metrics(model, val: DynDataset, adm, M: int, seed: int) -> dict:
    g = model.sample(M, np.random.default_rng(seed))
    out = {}
    if adm is not None:
        out["val_bayes_shd"] = mt.bayes_shd(g, adm)
    stats = RidgeStats(val.X, val.dX)
    D = val.D
    nodes = np.tile(np.arange(D), len(g))
    masks = np.transpose(g, (0, 2, 1)).reshape(-1, D)
    _, mse = stats.fit(nodes, masks)
    out["val_mse"] = float(mse.mean())
    return out


def train_model(model, ds: DynDataset, cfg: dict, out: Path | None = None,
                adm: gr.AdmissibleSet | None = None, extra_meta: dict | None = None):
    """Fit until ``cfg['epochs']`` total epochs; checkpoint after every epoch."""
    train = rows(ds, "train")
    val = rows(ds, "val")
    target = int(cfg.get("epochs", 1000))
    remaining = max(target - model.epoch, 0)
    val_every = int(cfg.get("val_every") or 10)
    val_M = int(cfg.get("val_samples") or 256)
    ckpt = out / "checkpoint.json" if out else None
    stream = open(out / "metrics.jsonl", "a") if out else None

    def save():
        if ckpt is None:
            return
        psets, opts, extra = model.checkpoint()
        extra["meta"] = extra_meta or {}
        dm.save_checkpoint(ckpt, psets, opts, extra)

    def callback(m, summary):
        if (m.epoch % val_every == 0) or m.epoch == target:
            summary.update(_val_metrics(m, val, adm, val_M, int(cfg.get("seed", 0)) + m.epoch))
        if stream:
            stream.write(json.dumps(summary, sort_keys=True) + "\n")
            stream.flush()
        save()

    try:
        save()
        if remaining == 0 and stream:
            rec = {"epoch": model.epoch, **_val_metrics(model, val, adm, val_M, int(cfg.get("seed", 0)))}
            stream.write(json.dumps(rec, sort_keys=True) + "\n")
        model.fit(train.X, train.dX, remaining, callback)
    except (dm.NumericError, TrainingError, FloatingPointError) as e:
        raise dm.NumericError(f"{e} (last good checkpoint: {ckpt})") from e
    finally:
        if stream:
            stream.close()
    return model


# --- subcommands ----------------------------------------------------------------------


def generate_dataset(d: int, sparsity: float, form: str = "linear", seed: int = 0, n: int = DEFAULT_N,
                     dt: float = 0.0, noise: float = 0.0, modes: int = 1,
                     fractions=(0.8, 0.1, 0.1), cap: int = gr.ENUMERATION_CAP):
    """System, augmented split dataset and admissible set for one seed."""
    spec = sample_system(d, sparsity, form, seed, dt, noise)
    base = simulate_pairs(spec, n, seed)
    g = spec.graph()
    m = choose_multiplicities(g, modes, np.random.default_rng(seed)) if modes > 1 else gr.Multiplicities.ones(d)
    ds, adm = duplicate_variables(base, g, m, cap)
    ds = split(ds, fractions, seed)
    return spec, m, ds, adm


def cmd_generate(args) -> int:
    cfg = merge(load_config_file(args.config), args, SYSTEM_KEYS + ("seed",))
    if "d" not in cfg or "sparsity" not in cfg:
        raise ConfigError("generate needs --d and --sparsity")
    if "seed" not in cfg:
        raise ConfigError("seed is mandatory")
    sparsity = float(cfg["sparsity"])
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError("sparsity must lie in [0, 1)")
    fr = parse_floats(cfg.get("split", "0.8,0.1,0.1"))
    spec, m, ds, adm = generate_dataset(int(cfg["d"]), sparsity, cfg.get("form", "linear"),
                                        int(cfg["seed"]), int(cfg.get("n", DEFAULT_N)),
                                        float(cfg.get("dt", 0.0)), float(cfg.get("noise", 0.0)),
                                        int(cfg.get("modes", 1)), fr, args.cap)
    digest = digest_of(cfg, [])
    out = resolve_out(args.out, f"data-{digest[:12]}")
    save_dataset_dir(out, ds, {"system": spec.to_json(), "m": list(m.m),
                                         "base_graph": spec.graph().tolist(), "generator": cfg}, adm)
    print(json.dumps({"out": str(out), "D": ds.D, "admissible": len(adm)}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    started = time.time()
    src = Path(args.csv)
    if not src.exists():
        raise ConfigError(f"{src} does not exist")
    ds, rejected = read_csv(src)
    if rejected:
        print(f"rejected {rejected} rows with missing cells", file=sys.stderr)
    stats = {}
    if args.normalize:
        ds, mu, sd = normalize(ds)
        stats = {"mean": mu.tolist(), "std": sd.tolist()}
    adm = None
    reads = [src]
    if args.admissible:
        adm = gr.AdmissibleSet.load(args.admissible)
        if adm.D != ds.D:
            raise ConfigError(f"admissible graphs have D={adm.D}, dataset D={ds.D}")
        if adm.names and list(adm.names) != list(ds.names):
            log.warning("admissible-set names differ from dataset columns")
        reads.append(Path(args.admissible))
    ds = split(ds, parse_floats(args.split), args.seed)
    cfg = {"csv": str(src), "normalize": bool(args.normalize), "split": args.split, "seed": args.seed}
    digest = digest_of(cfg, reads)
    out = resolve_out(args.out, f"ingest-{digest[:12]}")
    written = save_dataset_dir(out, ds, {"source": str(src), "rejected_rows": rejected,
                                         "normalization": stats}, adm)
    write_manifest(out, cfg, digest, started, reads, written)
    print(json.dumps({"out": str(out), "D": ds.D, "n": ds.n, "rejected_rows": rejected}))
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = merge(load_config_file(args.config), args, TRAIN_KEYS)
    if cfg.get("seed") is None:
        raise ConfigError("seed is mandatory")
    if not cfg.get("data"):
        raise ConfigError("train needs --data")
    ds, meta, adm, reads = load_dataset_dir(cfg["data"])
    cfg.setdefault("epochs", 1000)
    digest = digest_of({k: v for k, v in cfg.items() if k != "data"}, reads)
    out = resolve_out(args.out, f"train-{cfg.get('model', 'dyngfn')}-{digest[:12]}")
    ckpt = out / "checkpoint.json"
    if args.resume and ckpt.exists():
        model = load_model(ckpt)
        log.info("resuming from epoch %d", model.epoch)
    elif args.warm_start:
        if cfg.get("model", "dyngfn") != "dyngfn" or cfg.get("solver") != "hyper":
            raise ConfigError("--warm-start applies to dyngfn with the hyper solver")
        names = {f.name for f in fields(GFNConfig)}
        gcfg = GFNConfig(**{k: v for k, v in cfg.items() if k in names})
        model = warm_start(args.warm_start, gcfg, ds.D)
        reads.append(Path(args.warm_start))
    else:
        model = build_model(cfg, ds.D)
    if model.D != ds.D:
        raise ConfigError(f"model D={model.D} does not match dataset D={ds.D}")
    train_model(model, ds, cfg, out, adm, {"data_digest": meta.get("csv_sha256"), "digest": digest,
                                           "data": str(cfg["data"])})
    written = [ckpt, out / "metrics.jsonl"]
    write_manifest(out, cfg, digest, started, reads, written, [ckpt])
    print(json.dumps({"out": str(out), "epochs": model.epoch, "checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"{ckpt} does not exist")
    model = load_model(ckpt)
    ds, meta, adm, reads = load_dataset_dir(args.data)
    if args.admissible:
        adm = gr.AdmissibleSet.load(args.admissible)
        reads.append(Path(args.admissible))
    if model.D != ds.D or (adm is not None and adm.D != ds.D):
        raise ConfigError(f"model D={model.D}, dataset D={ds.D}, admissible D={adm.D if adm else '-'}")
    _, _, extra = dm.load_checkpoint(ckpt)
    train_digest = (extra.get("meta") or {}).get("data_digest")
    if train_digest and train_digest != meta.get("csv_sha256"):
        log.warning("checkpoint was trained on a different dataset (digest mismatch)")
    cfg = {"checkpoint_sha256": sha256_file(ckpt), "samples": args.samples, "seed": args.seed}
    reads.append(ckpt)
    digest = digest_of(cfg, reads)
    rep, marg, modes = evaluate(model, ds, adm, args.samples, args.seed, digest)
    out = resolve_out(args.out, f"eval-{digest[:12]}")
    written = write_eval(out, rep, marg, modes, ds.names, adm)
    ledger = output_root() / "results.csv"
    mt.append_ledger(ledger, {"run_id": digest[:12], "model": model_kind(model),
                              "dataset": str(args.data), "seed": args.seed, **_metric_row(rep)})
    write_manifest(out, cfg, digest, started, reads, written + [ledger])
    print(rep.dumps())
    return EXIT_OK


def _metric_row(rep: mt.EvalReport) -> dict:
    return {"bayes_shd": rep.bayes_shd, "auc": rep.auc, "kl": rep.kl, "nll": rep.nll}


def run_point(system: dict, train_cfg: dict, seed: int, M: int = 1000):
    """Generate, train and evaluate one (system, seed) without touching disk."""
    _, _, ds, adm = generate_dataset(int(system["d"]), float(system["sparsity"]),
                                     system.get("form", "linear"), seed,
                                     int(system.get("n", DEFAULT_N)), float(system.get("dt", 0.0)),
                                     float(system.get("noise", 0.0)), int(system.get("modes", 1)),
                                     parse_floats(system.get("split", "0.8,0.1,0.1")))
    cfg = {**train_cfg, "seed": seed}
    model = build_model(cfg, ds.D)
    train_model(model, ds, cfg, None, adm)
    rep, _, _ = evaluate(model, ds, adm, M, seed)
    return rep, model, ds, adm


def cmd_ablate(args) -> int:
    started = time.time()
    base = load_config_file(args.config)
    system = {**{"d": 10, "sparsity": 0.9, "form": "linear", "dt": 0.0, "n": DEFAULT_N},
              **base.get("system", {})}
    train_cfg = {**{k: v for k, v in base.items() if k in TRAIN_KEYS}, **merge({}, args, TRAIN_KEYS)}
    train_cfg.pop("seed", None)
    grid = parse_floats(args.grid)
    if not grid:
        raise ConfigError("grid must be non-empty")
    seeds = parse_ints(args.seeds)
    axis = {"sparsity": "sparsity", "dt": "dt"}[args.axis]
    cfg = {"axis": axis, "grid": grid, "seeds": seeds, "system": system, "train": train_cfg,
           "samples": args.samples}
    digest = digest_of(cfg, [])
    out = resolve_out(args.out, f"ablate-{axis}-{digest[:12]}")
    ledger = out / "ledger.csv"
    results = {v: [] for v in grid}
    for value in grid:
        for seed in seeds:
            run_id = f"{axis}={value}/seed={seed}"
            try:
                rep, model, _, _ = run_point({**system, axis: value}, train_cfg, seed, args.samples)
            except Exception as e:          # isolate per-point failures
                log.error("%s failed: %s", run_id, e)
                mt.append_ledger(ledger, {"run_id": run_id, "model": train_cfg.get("model", "dyngfn"),
                                          "dataset": f"synthetic:{axis}={value}", "seed": seed})
                results[value].append(None)
                continue
            mt.append_ledger(ledger, {"run_id": run_id, "model": model_kind(model),
                                      "dataset": f"synthetic:{axis}={value}", "seed": seed,
                                      **_metric_row(rep)})
            results[value].append(rep)
    summary = out / "summary.csv"
    write_summary(summary, axis, results)
    write_manifest(out, cfg, digest, started, [], [ledger, summary])
    print(summary.read_text(), end="")
    return EXIT_OK


def write_summary(path, axis: str, results: dict) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "runs", "failed", "bayes_shd_mean", "bayes_shd_std", "auc_mean", "kl_mean"])
        for value in sorted(results):
            ok = [r for r in results[value] if r is not None]
            shd = [r.bayes_shd for r in ok]
            aucs = [r.auc for r in ok if r.auc is not None]
            kls = [r.kl for r in ok if r.kl is not None]
            w.writerow([value, len(ok), len(results[value]) - len(ok),
                        repr(float(np.mean(shd))) if shd else "",
                        repr(float(np.std(shd))) if shd else "",
                        repr(float(np.mean(aucs))) if aucs else "",
                        repr(float(np.mean(kls))) if kls else ""])


def parse_graph(text: str) -> np.ndarray:
    """Rows separated by ';', entries by ',' -- or a path to a JSON matrix."""
    p = Path(text)
    if p.exists():
        return gr.as_graph(np.asarray(json.loads(p.read_text())))
    rows_ = [parse_ints(r) for r in text.split(";") if r.strip()]
    return gr.as_graph(np.asarray(rows_))


def cmd_enumerate(args) -> int:
    g = parse_graph(args.graph)
    m = gr.Multiplicities(tuple(parse_ints(args.m))) if args.m else gr.Multiplicities.ones(g.shape[0])
    count = gr.count_admissible(g, m, not args.full)
    print(json.dumps({"count": count, "l0_minimal": not args.full, "D": m.D}))
    if args.count_only:
        return EXIT_OK
    adm = gr.enumerate_admissible(g, m, not args.full, args.cap)
    if args.out:
        out = Path(args.out)
        if not out.is_absolute():
            out = output_root() / out
        out.parent.mkdir(parents=True, exist_ok=True)
        adm.save(out)
    return EXIT_OK


# --- argparse ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic system")
    g.add_argument("--config")
    g.add_argument("--d", type=int)
    g.add_argument("--sparsity", type=float)
    g.add_argument("--form", choices=("linear", "sigmoid"))
    g.add_argument("--modes", type=int, help="target admissible-set size")
    g.add_argument("--n", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--split")
    g.add_argument("--seed", type=int)
    g.add_argument("--cap", type=int, default=gr.ENUMERATION_CAP)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_generate)

    i = sub.add_parser("ingest", help="import a paired x/dx CSV")
    i.add_argument("csv")
    i.add_argument("--admissible")
    i.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    i.add_argument("--split", default="0.8,0.1,0.1")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(fn=cmd_ingest)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--model", choices=MODELS)
    t.add_argument("--solver", choices=("ridge", "hyper"))
    t.add_argument("--form", choices=("linear", "mlp"))
    t.add_argument("--data")
    for name, typ in (("epochs", int), ("lr", float), ("hyper-lr", float), ("lambda0", float),
                      ("T", float), ("alpha", float), ("gamma", float), ("particles", int),
                      ("n-samples", int), ("batch-size", int), ("data-batch", int), ("period", int),
                      ("c-max", float), ("hidden", int), ("ridge-lambda", float), ("seed", int),
                      ("val-every", int), ("val-samples", int)):
        t.add_argument(f"--{name}", type=typ)
    t.add_argument("--warm-start")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--admissible")
    e.add_argument("--samples", type=int, default=5000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep sparsity or dt")
    a.add_argument("--axis", choices=("sparsity", "dt"), required=True)
    a.add_argument("--grid", required=True)
    a.add_argument("--seeds", default="0")
    a.add_argument("--config")
    a.add_argument("--samples", type=int, default=1000)
    for name, typ in (("model", str), ("solver", str), ("epochs", int), ("lr", float),
                      ("lambda0", float), ("T", float), ("batch-size", int), ("c-max", float)):
        a.add_argument(f"--{name}", type=typ)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    n = sub.add_parser("enumerate", help="count or list admissible graphs")
    n.add_argument("--graph", required=True, help="'0,1;1,0' rows or a JSON file")
    n.add_argument("--m", help="comma-separated multiplicities")
    n.add_argument("--full", action="store_true", help="all non-empty copy subsets, not L0-minimal")
    n.add_argument("--count-only", action="store_true")
    n.add_argument("--cap", type=int, default=gr.ENUMERATION_CAP)
    n.add_argument("--out")
    n.set_defaults(fn=cmd_enumerate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except gr.EnumerationTooLarge as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAP
    except (dm.NumericError, TrainingError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, BaselineError, dm.ShapeError, ValueError, KeyError,
            json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
