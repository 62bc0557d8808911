"""Command-line entry point for dataset generation, training, evaluation,
gradient auditing, attention export, and cluster/iteration sweeps.

Every run resolves a single ExperimentConfig (one JSON document with a
content hash); the resolved config and its hash are written into the
artifact directory, and re-running into the same directory with the same
hash is refused unless --force is given.

Exit codes: 0 success, 1 configuration error, 2 data/I-O error,
3 numeric failure. Log verbosity comes from DAAM_LOG={error,info,debug}.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import clustering, data, losses, metrics, net, train
from . import tensor as T
from .errors import (ConfigError, DataError, FormatError, NumericError,
                     ShapeError)

log = logging.getLogger("daam")

DATASET_FILES = ("source_train", "target_train", "target_query",
                 "target_gallery")


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass
class ExperimentConfig:
    gen: data.GenConfig = field(default_factory=data.GenConfig)
    backbone: net.BackboneConfig = field(
        default_factory=lambda: net.BackboneConfig(channels=[8, 16]))
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    metric: str = "euclidean"
    data_dir: str = "data"
    seed: int = 0

    def validate(self):
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown distance metric '{self.metric}'")
        self.gen.validate()
        self.backbone.validate()
        self.train.validate()

    def resolve(self) -> "ExperimentConfig":
        """Propagate the experiment seed and image extents into every component."""
        self.gen.seed = self.seed
        self.train.seed = self.seed
        self.backbone.image_h = self.gen.height
        self.backbone.image_w = self.gen.width
        self.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["lr_drop_epochs"] = list(self.train.lr_drop_epochs)
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__) | {"hash"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(
                f"unknown ExperimentConfig fields: {sorted(unknown)}")
        cfg = cls(gen=data.GenConfig.from_dict(d.get("gen", {})),
                  backbone=net.BackboneConfig.from_dict(
                      d.get("backbone", {"channels": [8, 16]})),
                  train=train.TrainConfig.from_dict(d.get("train", {})),
                  metric=d.get("metric", "euclidean"),
                  data_dir=d.get("data_dir", "data"),
                  seed=d.get("seed", 0))
        cfg.validate()
        return cfg


def load_config(path: str | None, args) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        cfg = ExperimentConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.train.iterations = args.iterations
    if getattr(args, "clusters", None) is not None:
        cfg.train.k_clusters = args.clusters
    if getattr(args, "ablate", None) is not None:
        cfg.train.ablate = None if args.ablate == "none" else args.ablate
    return cfg.resolve()


def prepare_out(out_dir: str, cfg: ExperimentConfig, force: bool) -> str:
    """Create the artifact directory and pin the resolved config + hash."""
    h = cfg.content_hash()
    cfg_path = os.path.join(out_dir, "config.json")
    if os.path.exists(cfg_path) and not force:
        with open(cfg_path) as fh:
            existing = json.load(fh)
        if existing.get("hash") == h:
            raise ConfigError(
                f"{out_dir} already holds a completed run of this exact "
                f"configuration (hash {h[:12]}); pass --force to redo it")
    os.makedirs(out_dir, exist_ok=True)
    with open(cfg_path, "w") as fh:
        json.dump({**cfg.to_dict(), "hash": h}, fh, indent=2, sort_keys=True)
    return h


def write_csv(path: str, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def load_datasets(data_dir: str) -> dict:
    sets = {}
    for name in DATASET_FILES:
        path = os.path.join(data_dir, f"{name}.drid")
        if not os.path.exists(path):
            raise DataError(f"dataset file missing: {path} (run `daam gen` "
                            f"with data_dir={data_dir!r} first)")
        sets[name] = data.load(path)
    return sets


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    cfg = load_config(args.config, args)
    out = args.out or cfg.data_dir
    prepare_out(out, cfg, args.force)
    sets = data.generate(cfg.gen)
    manifest = {"files": {}, "delta": cfg.gen.delta, "seed": cfg.gen.seed}
    for name in DATASET_FILES:
        path = os.path.join(out, f"{name}.drid")
        data.save(sets[name], path)
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        manifest["files"][name] = {"path": f"{name}.drid",
                                   "n_samples": len(sets[name]),
                                   "sha256": digest}
        log.info("wrote %s (%d samples)", path, len(sets[name]))
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return 0


def _train_run(cfg: ExperimentConfig, sets: dict, out: str | None):
    t0 = time.time()
    state, traj = train.run_alg1(
        sets["source_train"], sets["target_train"], sets["target_query"],
        sets["target_gallery"], cfg.backbone, cfg.train,
        checkpoint_dir=out, probe_seed=cfg.seed)
    probe_sh, probe_sp = train.domain_probes(
        state, sets["source_train"], sets["target_train"], seed=cfg.seed)
    traj[-1]["report"].probe_sh = probe_sh
    traj[-1]["report"].probe_sp = probe_sp
    elapsed = time.time() - t0
    return state, traj, elapsed


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    out = args.out or "run"
    prepare_out(out, cfg, args.force)
    sets = load_datasets(cfg.data_dir)
    state, traj, elapsed = _train_run(cfg, sets, out)

    write_csv(os.path.join(out, "metrics.csv"),
              metrics.MetricsReport.CSV_COLUMNS,
              [r["report"].as_row() for r in traj])
    write_csv(os.path.join(out, "losses.csv"),
              ["iteration", "epoch", "step"] + losses.LossBreakdown.CSV_COLUMNS,
              state.loss_log)
    net.save_params(state.params, os.path.join(out, "params.dprm"))
    report = {
        "elapsed_seconds": elapsed,
        "iterations": [{"report": json.loads(r["report"].to_json()),
                        **{k: v for k, v in r.items() if k != "report"}}
                       for r in traj],
        "final_mAP": traj[-1]["report"].mAP,
        "baseline_mAP": traj[0]["report"].mAP,
        "probe_sh": traj[-1]["report"].probe_sh,
        "probe_sp": traj[-1]["report"].probe_sp,
        "params_hash": train.params_hash(state.params),
        "config_hash": cfg.content_hash(),
    }
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    log.info("final mAP %.3f (baseline %.3f) in %.1fs",
             report["final_mAP"], report["baseline_mAP"], elapsed)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args)
    if args.checkpoint is None:
        raise ConfigError("eval requires --checkpoint")
    sets = load_datasets(cfg.data_dir)
    try:
        state = train.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    report = metrics.evaluate(state.params, sets["target_query"],
                              sets["target_gallery"], metric=cfg.metric,
                              iteration=state.iteration)
    sh, sp = train.domain_probes(state, sets["source_train"],
                                 sets["target_train"], seed=cfg.seed)
    report.probe_sh, report.probe_sp = sh, sp
    print(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, "eval.csv")
        new = not os.path.exists(csv_path)
        with open(csv_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(metrics.MetricsReport.CSV_COLUMNS)
            w.writerow(report.as_row())
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            fh.write(report.to_json())
    return 0


# ---------------------------------------------------------------------------
# gradient audit

def _op_cases(rng):
    """One scalar-valued probe per differentiable primitive."""
    def t(shape):
        return T.Tensor(rng.random(shape) + 0.1, requires_grad=True)

    a, b = t((3, 4)), t((3, 4))
    m, v, u = t((4, 5)), t(4), t(5)
    img, ker = t((6, 4, 2)), t((3, 3, 2, 3))
    pool = t((4, 2, 3))
    gamma, beta = t(3), t(3)
    bn_in = t((5, 3))
    n = t((5, 3))
    cases = {
        "add": lambda: T.tsum(T.add(a, b)),
        "sub": lambda: T.tsum(T.sub(a, b)),
        "mul": lambda: T.tsum(T.mul(a, b)),
        "div": lambda: T.tsum(T.div(a, b)),
        "scale": lambda: T.tsum(T.scale(a, 1.7)),
        "add_const": lambda: T.tsum(T.mul(T.add_const(a, 0.3), b)),
        "sqrt": lambda: T.tsum(T.sqrt(a)),
        "exp": lambda: T.tsum(T.exp(a)),
        "tmean": lambda: T.tmean(T.mul(a, b)),
        "element": lambda: T.element(T.mul(v, v), 2),
        "l2_norm_sq": lambda: T.l2_norm_sq(v),
        "matmul": lambda: T.tsum(T.matmul(m, n)),
        "linear": lambda: T.tsum(T.linear(v, m)),
        "dot": lambda: T.dot(T.row(m, 1), u),
        "row": lambda: T.tsum(T.mul(T.row(m, 2), T.row(m, 3))),
        "relu": lambda: T.tsum(T.relu(T.sub(a, b))),
        "sigmoid": lambda: T.tsum(T.sigmoid(a)),
        "log": lambda: T.tsum(T.log(a)),
        "clamp_min": lambda: T.tsum(T.mul(T.clamp_min(T.sub(a, b), 0.05), a)),
        "clamp": lambda: T.tsum(T.mul(T.clamp(T.sub(a, b), -0.3, 0.3), b)),
        "softmax": lambda: T.tsum(T.mul(T.softmax(v), v)),
        "reshape": lambda: T.tsum(T.mul(T.reshape(a, (4, 3)),
                                        T.reshape(b, (4, 3)))),
        "conv2d": lambda: T.tsum(T.conv2d(img, ker, stride=2, padding=1)),
        "avg_pool_channels": lambda: T.tsum(T.avg_pool_channels(pool)),
        "global_avg_pool_spatial":
            lambda: T.tsum(T.global_avg_pool_spatial(pool)),
        "upsample_nearest": lambda: T.tsum(T.mul(
            T.upsample_nearest(T.avg_pool_channels(pool), 8, 4),
            T.upsample_nearest(T.avg_pool_channels(pool), 8, 4))),
        "stack_rows": lambda: T.tsum(T.stack_rows([v, v])),
        "concat_rows": lambda: T.tsum(T.mul(T.concat_rows([a, b]),
                                            T.concat_rows([b, a]))),
        "row_block": lambda: T.tsum(T.row_block(a, 1, 3)),
        "batchnorm": lambda: T.tsum(T.sigmoid(T.batchnorm(
            bn_in, gamma, beta, T.BnState(3), training=True))),
    }
    leaves = {
        "add": [a, b], "sub": [a, b], "mul": [a, b], "div": [a, b],
        "scale": [a], "add_const": [a, b], "sqrt": [a], "exp": [a],
        "tmean": [a, b], "element": [v], "l2_norm_sq": [v],
        "matmul": [m, n], "linear": [v, m],
        "dot": [m, u], "row": [m], "relu": [a, b], "sigmoid": [a], "log": [a],
        "clamp_min": [a, b], "clamp": [a, b],
        "softmax": [v], "reshape": [a, b], "conv2d": [img, ker],
        "avg_pool_channels": [pool], "global_avg_pool_spatial": [pool],
        "upsample_nearest": [pool], "stack_rows": [v],
        "concat_rows": [a, b], "row_block": [a],
        "batchnorm": [bn_in, gamma, beta],
    }
    return cases, leaves


def run_gradcheck(seed: int = 0, tol: float = 1e-4) -> dict:
    """Audit every primitive op plus the full network with the composite
    objective against central finite differences."""
    rng = np.random.default_rng(seed)
    t0 = time.time()
    results = {}
    cases, leaves = _op_cases(rng)
    for name, f in cases.items():
        rep = T.grad_check(f, leaves[name], tol=tol)
        results[name] = rep["max_rel_error"]
        if not rep["passed"]:
            results["failed"] = name
            break
    else:
        bcfg = net.BackboneConfig(channels=[4, 4], reduction=2, embed_dim=6,
                                  image_h=16, image_w=8)
        params = net.init_params(bcfg, 3, 2, rng)
        images = [T.Tensor(rng.random((16, 8, 3))) for _ in range(4)]
        domains = [0, 0, 1, 1]
        src_labels = [0, 2]
        weak = [1, 0]
        weights = [0.4, 0.25]

        def full():
            for st in params.bn_states.values():
                st.mean[:] = 0.0
                st.var[:] = 1.0
            arts = net.forward_batch(images, params, training=True)
            total, _ = losses.total_loss(arts, src_labels, weak, weights,
                                         domains)
            return total

        rep = T.grad_check(full, [params[n] for n in params.names()], tol=tol)
        results["full_network"] = rep["max_rel_error"]
        if not rep["passed"]:
            results["failed"] = "full_network"
    results["max_rel_error"] = max(v for k, v in results.items()
                                   if isinstance(v, float))
    results["elapsed_seconds"] = time.time() - t0
    results["passed"] = "failed" not in results
    return results


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(seed=seed)
    print(json.dumps(results, indent=2, sort_keys=True))
    if not results["passed"]:
        raise NumericError(
            f"gradient audit failed at '{results['failed']}' "
            f"(max rel error {results['max_rel_error']:.3e})")
    return 0


def cmd_export_attn(args) -> int:
    cfg = load_config(args.config, args)
    if args.checkpoint is None:
        raise ConfigError("export-attn requires --checkpoint")
    out = args.out or "attn"
    os.makedirs(out, exist_ok=True)
    sets = load_datasets(cfg.data_dir)
    try:
        state = train.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    ds = sets["target_query"]
    indices = [int(s) for s in args.samples.split(",")] if args.samples \
        else list(range(min(4, len(ds))))
    for i in indices:
        if not 0 <= i < len(ds):
            raise DataError(f"sample index {i} out of range "
                            f"(query set has {len(ds)} samples)")
        prefix = os.path.join(out, f"sample{i:04d}")
        metrics.export_attention(ds.samples[i], state.params, prefix)
        log.info("exported attention maps for sample %d -> %s_*", i, prefix)
    return 0


def cmd_sweep_k(args) -> int:
    cfg = load_config(args.config, args)
    out = args.out or "sweep_k"
    prepare_out(out, cfg, args.force)
    sets = load_datasets(cfg.data_dir)
    ks = [int(s) for s in args.k_list.split(",")]
    rows = []
    for k in ks:
        run_cfg = train.TrainConfig.from_dict(
            {**asdict(cfg.train),
             "lr_drop_epochs": list(cfg.train.lr_drop_epochs),
             "k_clusters": k})
        state, traj = train.run_alg1(
            sets["source_train"], sets["target_train"], sets["target_query"],
            sets["target_gallery"], cfg.backbone, run_cfg)
        rep = traj[-1]["report"]
        rows.append([k, rep.mAP, rep.cmc[1], rep.cmc[5], rep.cmc[10]])
        log.info("k=%d -> mAP %.3f", k, rep.mAP)
    write_csv(os.path.join(out, "sweep_k.csv"),
              ["k", "mAP", "cmc1", "cmc5", "cmc10"], rows)
    return 0


def cmd_sweep_iters(args) -> int:
    cfg = load_config(args.config, args)
    out = args.out or "sweep_iters"
    prepare_out(out, cfg, args.force)
    sets = load_datasets(cfg.data_dir)
    state, traj, _ = _train_run(cfg, sets, None)
    rows = [[r["report"].iteration, r["report"].mAP, r["report"].cmc[1],
             r["report"].cmc[5], r["report"].cmc[10]] for r in traj]
    write_csv(os.path.join(out, "sweep_iters.csv"),
              ["iteration", "mAP", "cmc1", "cmc5", "cmc10"], rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="daam",
                     description="Attention-based cross-domain retrieval "
                                 "experiments on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="ExperimentConfig JSON path")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="artifact output directory")
        p.add_argument("--force", action="store_true",
                       help="redo an existing run with the same config hash")

    p = sub.add_parser("gen", help="generate and persist the datasets")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="pretrain and run adaptation iterations")
    common(p)
    p.add_argument("--iterations", type=int,
                   help="adaptation iterations (0 = direct-transfer baseline)")
    p.add_argument("--clusters", type=int, help="cluster count override")
    p.add_argument("--ablate",
                   choices=["none", "no-ds", "no-dsp", "no-orth",
                            "no-weights", "no-attention"],
                   help="disable one loss term or module")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint (.dckp) path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of ops + full network")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="export attention heatmaps")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint (.dckp) path")
    p.add_argument("--samples", help="comma-separated query sample indices")
    p.set_defaults(fn=cmd_export_attn)

    p = sub.add_parser("sweep-k", help="final mAP vs. cluster count")
    common(p)
    p.add_argument("--k-list", default="2,4,8,16,32",
                   help="comma-separated cluster counts")
    p.set_defaults(fn=cmd_sweep_k)

    p = sub.add_parser("sweep-iters", help="mAP vs. adaptation iteration")
    common(p)
    p.add_argument("--iterations", type=int,
                   help="number of adaptation iterations to trace")
    p.set_defaults(fn=cmd_sweep_iters)
    return parser


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(
        os.environ.get("DAAM_LOG", "info").lower())
    if level is None:
        raise ConfigError(
            f"DAAM_LOG must be one of error|info|debug, "
            f"got {os.environ.get('DAAM_LOG')!r}")
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
