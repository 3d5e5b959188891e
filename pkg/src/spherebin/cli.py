"""Command-line front end.

Every subcommand accepts ``--config FILE``, ``--preset NAME`` and a
``--<key> VALUE`` override for every configuration key (see ``--help``).
Tables are written as comma-separated files with a ``#`` header line. On
failure a single JSON error line goes to stderr and the exit code is
nonzero (2 for configuration problems, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import KEYS, PRESETS, RunConfig, load_config
from .core import MarginVariant, inject_label_noise, load_dataset, make_synthetic, save_dataset
from .errors import ConfigError, SphereBinError
from .evaluation import (
    best_threshold_accuracy,
    build_pairs,
    distribution_overlap,
    pair_scores,
    tar_at_far,
    write_metrics,
    write_scores,
)
from .gradcheck import ABS_TOL, REL_TOL, run_suite
from .loss import (
    DEFAULT_ARC_MARGIN,
    DEFAULT_MULT_MARGIN,
    LOSS_KINDS,
    bias_init,
    bias_init_direct,
    bias_residual,
    loss_curvature,
    loss_softmax,
)
from .shard import throughput_bench, write_bench
from .simadjust import g, g_prime
from .train import TrainConfig, export_features, load_model, save_model, train

log = logging.getLogger("spherebin")


class CommandFailed(SphereBinError):
    """A command ran but its check did not pass."""


def _write_table(path: Path, header: str, rows) -> None:
    lines = ["# " + header] + [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_config(cfg: RunConfig, loss: str | None = None) -> TrainConfig:
    loss = loss or cfg.loss
    if loss not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss!r}; expected one of {LOSS_KINDS}")
    if len(cfg.s) != 1:
        raise ConfigError("training takes a single softmax scale s")
    hp = cfg.hyperparams()
    if loss in ("arc", "mult"):
        variant = MarginVariant.ARC_ADDITIVE if loss == "arc" else MarginVariant.MULTIPLICATIVE
        hp = hp.with_(margin_variant=variant, m_n=0.0)
    try:
        return TrainConfig(
            lr=cfg.softmax_lr if loss == "softmax" else cfg.lr, momentum=cfg.momentum,
            epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed, loss=loss, hp=hp,
            bias_init=cfg.bias_init, hidden=tuple(cfg.hidden), d_feat=cfg.d_feat,
            weight_decay=cfg.weight_decay, s=cfg.s[0], softmax_margin=cfg.softmax_margin,
            bias_lr_mult=cfg.bias_lr_mult,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def benchmark_spec(cfg: RunConfig) -> ex.BenchmarkSpec:
    return ex.BenchmarkSpec(
        K_train=cfg.K, K_held=cfg.K_held, D_in=cfg.D_in, n_per_class=cfg.n_per_class,
        concentration=cfg.concentration, identity_dim=cfg.identity_dim,
        nuisance_dim=cfg.nuisance_dim, nuisance_scale=cfg.nuisance_scale,
        n_pos=cfg.n_pos, n_neg=cfg.n_neg, seed=cfg.seed,
    )


def _benchmark(cfg: RunConfig) -> ex.Benchmark:
    bench = ex.make_benchmark(benchmark_spec(cfg))
    if cfg.noise_rate > 0:
        noisy = inject_label_noise(bench.train, cfg.noise_rate, np.random.default_rng(cfg.seed))
        bench = ex.Benchmark(noisy, bench.held, bench.pairs, bench.spec)
    return bench


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: RunConfig) -> str:
    rng = np.random.default_rng(cfg.seed)
    ds = make_synthetic(cfg.K, cfg.D_in, cfg.n_per_class, cfg.concentration, rng,
                        identity_dim=cfg.identity_dim, nuisance_dim=cfg.nuisance_dim,
                        nuisance_scale=cfg.nuisance_scale, seed=cfg.seed)
    if cfg.noise_rate > 0:
        ds = inject_label_noise(ds, cfg.noise_rate, rng)
    path = _out_dir(cfg) / "data.csv"
    save_dataset(ds, path)
    return f"wrote {path} ({len(ds)} samples, {ds.K} identities, noise {ds.noise_rate})"


def cmd_train(cfg: RunConfig) -> str:
    tcfg = train_config(cfg)
    if cfg.data:
        ds, held, pairs = load_dataset(cfg.data), None, None
    else:
        bench = _benchmark(cfg)
        ds, held, pairs = bench.train, bench.held, bench.pairs
    result = train(tcfg, ds, val=held, val_pairs=pairs)
    out = _out_dir(cfg)
    save_model(result.model, result.bank, out / "model.json", meta={"loss": tcfg.loss})
    export_features(result.model, result.bank, ds, out / "features.csv", tcfg.hp)
    _write_table(out / "history.csv", "epoch,loss,accuracy", result.history)
    last = result.history[-1]
    return f"trained {tcfg.loss}: final loss {last[1]:.6f}, held-out accuracy {last[2]:.4f}"


def cmd_eval(cfg: RunConfig) -> str:
    if cfg.data:
        ds = load_dataset(cfg.data)
        pairs = build_pairs(ds, cfg.n_pos, cfg.n_neg, seed=cfg.seed)
    else:
        bench = ex.make_benchmark(benchmark_spec(cfg))
        ds, pairs = bench.held, bench.pairs
    model = load_model(cfg.model)[0] if cfg.model else None
    scores = pair_scores(model, ds, pairs)
    out = _out_dir(cfg)
    write_scores(out / "scores.csv", scores, pairs.same)
    thr, acc = best_threshold_accuracy(scores, pairs.same)
    rows = [("accuracy", "", acc), ("threshold", "", thr)]
    if pairs.n_pos and pairs.n_neg:
        levels = [f for f in cfg.far_levels if f >= 1.0 / pairs.n_neg]
        if levels:
            rows += [("tar", f"far={f!r}", v) for f, v in zip(levels, tar_at_far(scores, pairs.same, levels))]
        rows.append(("overlap", f"bins={cfg.bins}",
                     distribution_overlap(scores[pairs.same], scores[~pairs.same], cfg.bins)))
    write_metrics(out / "metrics.csv", rows)
    return f"accuracy {acc:.4f} at threshold {thr:.6f} over {len(pairs)} pairs"


def cmd_gradcheck(cfg: RunConfig) -> str:
    kinds = LOSS_KINDS if cfg.loss == "all" else (cfg.loss,)
    if any(k not in LOSS_KINDS for k in kinds):
        raise ConfigError(f"unknown loss {cfg.loss!r}; expected 'all' or one of {LOSS_KINDS}")
    results = run_suite(kinds, cfg.trials, seed=cfg.seed, h=cfg.h)
    rows, lines, failed = [], [], []
    for kind, res in results.items():
        rel = max(r.max_rel_err for r in res)
        absolute = max(r.max_abs_err for r in res)
        status = "PASS" if all(r.passed for r in res) else "FAIL"
        rows.append((kind, len(res), rel, absolute, status))
        lines.append(f"{kind}: {status} max_rel_err={rel:.3e} max_abs_err={absolute:.3e} "
                     f"(tol rel {REL_TOL:g}, abs {ABS_TOL:g})")
        if status == "FAIL":
            failed.append(kind)
    _write_table(_out_dir(cfg) / "gradcheck.csv", "loss,trials,max_rel_err,max_abs_err,status", rows)
    if failed:
        raise CommandFailed(f"gradient check failed for {', '.join(failed)}")
    return "\n".join(lines)


def cmd_bias_init(cfg: RunConfig) -> str:
    hp = cfg.hyperparams()
    K = cfg.K
    b = bias_init(hp, K)
    b_direct = bias_init_direct(hp, K)
    residual = abs(bias_residual(b, hp, K))
    _write_table(_out_dir(cfg) / "bias_init.csv", "lambda,K,r,m,t,variant,b,b_direct,residual",
                 [(hp.lam, K, hp.r, hp.m_p, hp.t, hp.margin_variant.value, b, b_direct, residual)])
    return f"b = {b!r}\nresidual = {residual:.3e}\nb_direct = {b_direct!r}"


def cmd_bench_shard(cfg: RunConfig) -> str:
    rows = throughput_bench(K=cfg.bench_K, D=cfg.bench_D, S_list=cfg.shards, batch=cfg.bench_batch,
                            repetitions=cfg.repetitions, seed=cfg.seed, hp=cfg.hyperparams())
    write_bench(_out_dir(cfg) / "bench.csv", rows)
    return "\n".join(f"{r.loss} S={r.S}: {r.steps_per_sec:.2f} steps/s" for r in rows)


def cmd_ablate(cfg: RunConfig) -> str:
    bench = _benchmark(cfg)
    rows = ex.run_ablation(bench, cfg=train_config(cfg, "final"), naive_fallback=cfg.naive_fallback)
    _write_table(_out_dir(cfg) / "ablation.csv", "row,pn,eh,am,sa,accuracy,final_loss,status",
                 [(r.flags.name, r.flags.pn, r.flags.eh, r.flags.am, r.flags.sa, r.accuracy,
                   r.final_loss, r.status) for r in rows])
    return "\n".join(f"{r.flags.name}: {r.accuracy:.4f} ({r.status})" for r in rows)


def cmd_noise(cfg: RunConfig) -> str:
    bench = ex.make_benchmark(benchmark_spec(cfg))
    losses = ("final", "softmax") if cfg.loss == "final" else (cfg.loss, "softmax")
    rows = ex.run_noise_sweep(bench, cfg.rates, losses, cfg=train_config(cfg, "final"),
                              softmax_lr=cfg.softmax_lr)
    _write_table(_out_dir(cfg) / "noise.csv", "loss,rate,accuracy",
                 [(r.loss, r.rate, r.accuracy) for r in rows])
    return "\n".join(f"{r.loss} @ {r.rate}: {r.accuracy:.4f}" for r in rows)


def _curve_rows(cfg: RunConfig):
    grid = np.linspace(-1.0, 1.0, cfg.points)
    K = max(cfg.K, 2)
    if cfg.curve == "easyhard":
        cos = np.full((grid.size, K), cfg.cos_neg)
        cos[:, 0] = grid
        y = np.zeros(grid.size, dtype=int)
        rows = []
        for s in cfg.s:
            out = loss_softmax(cos, y, s=s)
            rows += [(s, c, v, d) for c, v, d in zip(grid, out.value, out.d_cos[:, 0])]
        return "s,cos_y,loss,d_cos_y", rows
    if cfg.curve == "rcurve":
        cos = np.full((grid.size, K), cfg.cos_neg)
        cos[:, 0] = grid
        y = np.zeros(grid.size, dtype=int)
        rows = []
        for r in cfg.r_values:
            out = loss_curvature(cos, y, cfg["lambda"], r)
            rows += [(r, c, v, d) for c, v, d in zip(grid, out.value, out.d_cos[:, 0])]
        return "r,cos_y,loss,d_cos_y", rows
    if cfg.curve == "g":
        rows = []
        for t in cfg.t_values:
            z = grid[1:] if t < 1 else grid
            rows += [(t, zz, gv, gp) for zz, gv, gp in zip(z, g(z, t), g_prime(z, t))]
        return "t,z,g,g_prime", rows
    if cfg.curve == "margin":
        theta = np.linspace(0.0, np.pi, cfg.points)
        shifted = {
            "none": np.cos(theta),
            "cosine": np.cos(theta) - cfg.m,
            "arc": np.cos(np.minimum(theta + DEFAULT_ARC_MARGIN, np.pi)),
            "mult": np.cos(np.minimum(DEFAULT_MULT_MARGIN * theta, np.pi)),
        }
        return "variant,theta,positive_score", [(k, th, v) for k, vals in shifted.items()
                                                for th, v in zip(theta, vals)]
    if cfg.curve == "overlap":
        res = ex.run_similarity_overlap(ex.make_benchmark(benchmark_spec(cfg)),
                                        cfg=replace(train_config(cfg, "final"), flags=None))
        edges = np.linspace(-1.0, 1.0, cfg.bins + 1)
        rows = []
        for t, (_, _, pos, neg) in res.items():
            p, _ = np.histogram(pos, edges)
            q, _ = np.histogram(neg, edges)
            rows += [(t, lo, hi, pp / pos.size, qq / neg.size)
                     for lo, hi, pp, qq in zip(edges[:-1], edges[1:], p, q)]
        return "t,bin_lo,bin_hi,pos_frac,neg_frac", rows
    if cfg.curve == "geometry":
        rows = []
        for res in ex.run_margin_geometry(seed=cfg.seed, r=cfg.r, lam=cfg["lambda"]):
            rows += [("feature", res.margin, int(lab), f[0], f[1]) for lab, f in zip(res.labels, res.features)]
            rows += [("direction", res.margin, k, w[0], w[1]) for k, w in enumerate(res.directions)]
        return "kind,m,label,x,y", rows
    raise ConfigError(f"unknown curve {cfg.curve!r}")


def cmd_plot_data(cfg: RunConfig) -> str:
    header, rows = _curve_rows(cfg)
    path = _out_dir(cfg) / f"curve_{cfg.curve}.csv"
    _write_table(path, header, rows)
    return f"wrote {path} ({len(rows)} rows)"


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic identity dataset"),
    "train": (cmd_train, "train encoder and classifier; write model, features and history"),
    "eval": (cmd_eval, "score verification pairs; write scores and metrics"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the loss gradients"),
    "bias-init": (cmd_bias_init, "closed-form bias initialization and its residual"),
    "bench-shard": (cmd_bench_shard, "thread-parallel sharded classifier throughput"),
    "ablate": (cmd_ablate, "cumulative ablation table on the toy benchmark"),
    "noise": (cmd_noise, "label-noise sweep for the binary loss and softmax"),
    "plot-data": (cmd_plot_data, "CSV data for loss, g, margin, overlap and 2D geometry plots"),
}


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as a JSON line like every other failure."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    keys = common.add_argument_group("config keys (override the file)")
    for k in KEYS:
        keys.add_argument(f"--{k.name}", dest=f"key_{k.name}", metavar="VALUE",
                          help=f"{k.doc} (default: {k.default})")
    parser = _Parser(prog="spherebin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k.name: getattr(args, f"key_{k.name}") for k in KEYS
                 if getattr(args, f"key_{k.name}") is not None}
    try:
        cfg = load_config(args.config, overrides, args.preset)
        fn = COMMANDS[args.command][0]
        print(fn(cfg))
    except ConfigError as exc:
        return _fail(exc, 2)
    except (SphereBinError, OSError, ValueError) as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
