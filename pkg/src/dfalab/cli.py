"""Command-line entry point.

Subcommands: prepare-data, train, evaluate, compare, export-patterns,
grad-check. Every command prints its root seed where one applies, writes
its resolved configuration beside its outputs, and exits 0 on success or
nonzero with a one-line `error:<category>: <message>` diagnostic.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dfa, diffmath as dm, nn, train as train_mod
from .config import ACQUIRERS, DATASET_DEFAULTS, ExperimentConfig
from .selection import GumbelConfig, sample_gumbel

DATASET_FILES = {
    "m-forda": ("FordA_TRAIN.tsv", "FordA_TEST.tsv"),
    "spoken-arabic": ("SpokenArabicDigits_TRAIN.ts", "SpokenArabicDigits_TEST.ts"),
}

FAKE_CHOICES = ("none", "zeros", "noise", "gp")


# ---------------------------------------------------------------- prepare

def cmd_prepare_data(args) -> int:
    if args.dataset not in DATASET_FILES:
        raise ValueError(f"unknown dataset {args.dataset!r}")
    if args.shift and args.fake == "none":
        raise ValueError("--shift requires fake features (--fake != none)")
    train_name, test_name = DATASET_FILES[args.dataset]
    src = Path(args.in_dir)
    missing = [n for n in (train_name, test_name) if not (src / n).exists()]
    if missing:
        raise FileNotFoundError(
            f"archive file(s) not found in {src}: expected " + ", ".join(missing))

    rng = np.random.default_rng(args.seed)
    if args.dataset == "m-forda":
        train_series, train_labels = data_mod.load_ucr_tsv(src / train_name)
        test_series, test_labels = data_mod.load_ucr_tsv(src / test_name)
        bundle = data_mod.bundle_from_arrays(
            "m-forda",
            (data_mod.make_m_forda(train_series, args.fold), train_labels),
            (data_mod.make_m_forda(test_series, args.fold), test_labels),
            class_count=int(max(train_labels.max(), test_labels.max())) + 1)
    else:
        tr = data_mod.load_ts_multivariate(src / train_name)
        te = data_mod.load_ts_multivariate(src / test_name)
        if tr[3] != te[3]:
            raise ValueError("train/test class counts differ")
        bundle = data_mod.bundle_from_arrays(
            "spoken-arabic", (tr[0], tr[2]), (te[0], te[2]),
            class_count=tr[3], train_lengths=tr[1], test_lengths=te[1])

    if args.znorm:
        bundle = data_mod.znormalize(bundle)
    if args.fake != "none":
        bundle = data_mod.inject_fake(bundle, args.fake, args.fake_count, rng)
    if args.shift:
        bundle = data_mod.shift_real_features(bundle)

    out = Path(args.out)
    data_mod.save_bundle(out, bundle)
    resolved = [
        f"dataset = {args.dataset}",
        f"fake = {args.fake}",
        f"fake_count = {args.fake_count}",
        f"shift = {args.shift}",
        f"znorm = {args.znorm}",
        f"fold = {args.fold}",
        f"seed = {args.seed}",
        f"in = {src}",
    ]
    (out / "prepare_config.txt").write_text("\n".join(resolved) + "\n")
    print(f"seed: {args.seed}")
    for key, value in bundle.summary().items():
        print(f"{key}: {value}")
    return 0


# ---------------------------------------------------------------- train

_TRAIN_FLAGS = {
    # flag name -> (config field, type)
    "data": ("data_dir", str),
    "out": ("output_dir", str),
    "dataset": ("dataset", str),
    "acquirer": ("acquirer", str),
    "budget": ("budget", int),
    "temperature": ("temperature", float),
    "penalty_scale": ("penalty_scale", float),
    "acquirer_hidden": ("acquirer_hidden", int),
    "lstm_layers": ("lstm_layers", int),
    "batch_size": ("batch_size", int),
    "lr": ("learning_rate", float),
    "max_epochs": ("max_epochs", int),
    "patience": ("patience", int),
    "val_fraction": ("val_fraction", float),
    "forest_trees": ("forest_trees", int),
    "train_limit": ("train_limit", int),
    "seed": ("seed", int),
    "eval_seed": ("eval_seed", int),
}


def resolve_train_config(args) -> ExperimentConfig:
    """File config (if any) under CLI-flag overrides; dataset defaults fill
    the architecture fields unless set explicitly somewhere."""
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
        if (args.dataset or cfg.dataset) in DATASET_DEFAULTS:
            hidden, layers = DATASET_DEFAULTS[args.dataset or cfg.dataset]
            cfg.acquirer_hidden = hidden
            cfg.lstm_layers = layers
    for flag, (field, _) in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, field, value)
    if not cfg.data_dir:
        raise ValueError("no dataset directory: pass --data or a config file")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    print(f"seed: {cfg.seed}")
    print(f"config_hash: {cfg.config_hash()}")
    record = train_mod.train_run(cfg, verbose=args.verbose)
    if record.diverged:
        print("training diverged (non-finite loss); record flagged")
        return 3
    print(f"best_epoch: {record.best_epoch}")
    print(f"test_accuracy: {record.test_accuracy:.4f}")
    print(f"test_mean_cost: {record.test_mean_cost:.1f}")
    print(f"test_hit_rate: {record.test_hit_rate:.4f}")
    print(f"wall_time_sec: {record.wall_time_sec:.1f}")
    return 0


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    bundle = data_mod.load_bundle(args.data)
    cfg = ExperimentConfig(data_dir=args.data, batch_size=args.batch_size,
                           eval_seed=args.eval_seed, budget=args.budget)
    metrics = train_mod.evaluate_checkpoint(args.checkpoint, bundle,
                                            args.split, cfg)
    print(f"eval_seed: {args.eval_seed}")
    print(f"split: {args.split}")
    print(f"accuracy: {metrics.accuracy:.4f}")
    print(f"mean_cost: {metrics.mean_cost:.1f}")
    print(f"hit_rate: {metrics.hit_rate:.4f}")
    return 0


# ---------------------------------------------------------------- compare

def cmd_compare(args) -> int:
    root = Path(args.config_dir)
    record_files = sorted(root.rglob("record.txt"))
    if not record_files:
        raise FileNotFoundError(f"no run records under {root}")
    acquirers = args.acquirers.split(",")
    for a in acquirers:
        if a not in ACQUIRERS:
            raise ValueError(f"unknown acquirer {a!r}")
    records = [train_mod.load_run_record(p.parent) for p in record_files]
    corruptions = args.fakes.split(",") if args.fakes else sorted(
        {r.corruption for r in records})

    cells: dict[tuple[str, str], list] = {}
    for r in records:
        cells.setdefault((r.acquirer, r.corruption), []).append(r)

    lines = ["acquirer," + ",".join(corruptions)]
    for acq in acquirers:
        row = [acq]
        for corr in corruptions:
            got = cells.get((acq, corr))
            if not got:
                raise ValueError(f"missing cell: acquirer={acq} "
                                 f"corruption={corr} under {root}")
            if len(got) == 1:
                row.append(f"{got[0].test_accuracy:.3f}")
            else:
                agg = train_mod.aggregate_seeds(got)
                row.append(f"{agg['accuracy_mean']:.3f} ± "
                           f"{agg['accuracy_std']:.3f}")
        lines.append(",".join(row))
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


# ---------------------------------------------------------------- patterns

def cmd_export_patterns(args) -> int:
    bundle = data_mod.load_bundle(args.data)
    acquirer, classifier, meta = train_mod.restore_models(args.checkpoint,
                                                          bundle)
    series = getattr(bundle, f"{args.split}_series")[:args.n_series]
    lengths = getattr(bundle, f"{args.split}_lengths")[:args.n_series]
    budget = bundle.n_features if meta["acquirer"] == "complete" \
        else int(meta["budget"])
    rng = np.random.default_rng(args.eval_seed)
    res = dfa.batch_episodes(series, lengths, None, acquirer, classifier,
                             budget, rng, record_trace=True)
    valid = (np.arange(series.shape[1])[None, :] < lengths[:, None])
    freq = (res.masks * valid[:, :, None]).sum(axis=0) / \
        np.maximum(valid.sum(axis=0), 1)[:, None]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dfa.export_heatmap_pgm(out / "patterns.pgm", freq)
    rows = ["step,feature,frequency"]
    for t in range(freq.shape[0]):
        for f in range(freq.shape[1]):
            rows.append(f"{t},{f},{float(freq[t, f])!r}")
    (out / "patterns.csv").write_text("\n".join(rows) + "\n")
    (out / "patterns_config.txt").write_text(
        f"checkpoint = {args.checkpoint}\ndata = {args.data}\n"
        f"split = {args.split}\nn_series = {args.n_series}\n"
        f"eval_seed = {args.eval_seed}\n")
    real = bundle.real_feature_matrix()
    real_mass = float((freq * real).sum() / max(freq.sum(), 1e-12))
    print(f"eval_seed: {args.eval_seed}")
    print(f"series: {len(series)}")
    print(f"real_feature_mass: {real_mass:.4f}")
    print(f"wrote: {out / 'patterns.pgm'}")
    return 0


# ---------------------------------------------------------------- grad-check

def _episode_grad_error() -> float:
    """Max relative error of the analytic episode gradient (soft masks,
    frozen noise) against central differences on a T=5, F=6, b=2 toy."""
    rng = np.random.default_rng(99)
    series = rng.normal(size=(2, 5, 6))
    labels = np.array([0, 1])
    acq_init = nn.MlpAcquirerParams.init(np.random.default_rng(1), 6, 3)
    clf_init = nn.LstmClassifierParams.init(np.random.default_rng(2), 6, 2, 2)
    arrays = nn.merge_prefixed(acquirer=acq_init.parameters(),
                               classifier=clf_init.parameters())

    def run(values: nn.ParamArrays):
        acq = nn.MlpAcquirerParams.init(np.random.default_rng(1), 6, 3)
        acq.load_arrays(nn.split_prefixed(values)["acquirer"])
        clf = nn.LstmClassifierParams.init(np.random.default_rng(2), 6, 2, 2)
        clf.load_arrays(nn.split_prefixed(values)["classifier"])
        rngs = [np.random.default_rng(17 + i) for i in range(2)]
        return dfa.batch_episodes(series, None, labels,
                                  dfa.LearnedAcquirer(acq, GumbelConfig()),
                                  clf, 2, rngs, soft_masks=True)

    res = run(arrays)
    grads = dm.backward(res.tape, res.loss)
    pick_rng = np.random.default_rng(5)
    worst = 0.0
    h = 1e-5
    for name, arr in arrays.items():
        n_check = arr.size if name.startswith("acquirer.") and arr.size <= 50 \
            else 2
        for idx in pick_rng.choice(arr.size, size=min(n_check, arr.size),
                                   replace=False):
            mod = {k: v.copy() for k, v in arrays.items()}
            mod[name].flat[idx] += h
            up = float(run(mod).loss.value)
            mod[name].flat[idx] -= 2 * h
            down = float(run(mod).loss.value)
            fd = (up - down) / (2 * h)
            analytic = grads[res.bound[name].node_id].value.flat[idx]
            worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0

    unary = {
        "relu": (dm.relu, (0.3, 2.0)),
        "sigmoid": (dm.sigmoid, (-2.0, 2.0)),
        "tanh": (dm.tanh, (-2.0, 2.0)),
        "exp": (dm.exp, (-2.0, 2.0)),
        "log": (dm.log, (0.5, 3.0)),
        "abs": (dm.absolute, (0.3, 2.0)),
        "softmax_last_axis": (dm.softmax, (-2.0, 2.0)),
        "log_softmax_last_axis": (dm.log_softmax, (-2.0, 2.0)),
    }
    for name, (op, (lo, hi)) in unary.items():
        weight = rng.normal(size=(2, 5))

        def f(x, op=op, weight=weight):
            return dm.reduce_sum(dm.mul(op(x), x.tape.leaf(weight)))

        x = rng.uniform(lo, hi, size=(2, 5)) * rng.choice([-1.0, 1.0], (2, 5)) \
            if name in ("relu", "abs") else rng.uniform(lo, hi, size=(2, 5))
        err = dm.grad_check(f, x)
        status = "ok" if err < 1e-4 else "FAIL"
        failures += status == "FAIL"
        print(f"op {name:22s} max_rel_err {err:.3e} {status}")

    matmul_weight = rng.normal(size=(3, 2))
    for kind in ("add", "sub", "mul_elementwise", "matmul", "sum", "mean",
                 "concat_last_axis", "slice"):
        def f(x, kind=kind):
            a = dm.slice_cols(x, 0, 3)
            b = dm.slice_cols(x, 3, 6)
            if kind == "matmul":
                y = dm.matmul(a, x.tape.leaf(matmul_weight))
            elif kind == "sum":
                y = dm.forward_op(kind, dm.mul(a, b), axis=-1)
            elif kind == "mean":
                y = dm.forward_op(kind, dm.mul(a, b), axis=-1)
            elif kind == "concat_last_axis":
                y = dm.forward_op(kind, a, b)
            elif kind == "slice":
                y = dm.forward_op(kind, x, start=1, stop=5)
            else:
                y = dm.forward_op(kind, a, b)
            return dm.reduce_sum(dm.mul(y, y))

        err = dm.grad_check(f, rng.uniform(-1.5, 1.5, size=(2, 6)))
        status = "ok" if err < 1e-4 else "FAIL"
        failures += status == "FAIL"
        print(f"op {kind:22s} max_rel_err {err:.3e} {status}")

    episode_err = _episode_grad_error()
    status = "ok" if episode_err < 1e-3 else "FAIL"
    failures += status == "FAIL"
    print(f"episode graph (T=5, F=6, b=2) max_rel_err {episode_err:.3e} {status}")
    print(f"gumbel sample mean (n=1e5): "
          f"{sample_gumbel(rng, (10 ** 5,)).mean():.4f}")
    return 1 if failures else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfalab",
        description="budgeted dynamic feature acquisition laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build a corrupted dataset cache")
    p.add_argument("--dataset", required=True, choices=sorted(DATASET_FILES))
    p.add_argument("--fake", default="none", choices=FAKE_CHOICES)
    p.add_argument("--fake-count", type=int, default=30)
    p.add_argument("--shift", action="store_true")
    p.add_argument("--znorm", action="store_true")
    p.add_argument("--fold", type=int, default=10,
                   help="steps folded into one multivariate step (m-forda)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory holding the archive text files")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prepare_data)

    p = sub.add_parser("train", help="train one run from a config")
    p.add_argument("--config", default=None)
    p.add_argument("--verbose", action="store_true")
    for flag, (_, typ) in _TRAIN_FLAGS.items():
        option = "--" + flag.replace("_", "-")
        if flag == "acquirer":
            p.add_argument(option, choices=ACQUIRERS, default=None)
        elif flag == "dataset":
            p.add_argument(option, default=None)
        else:
            p.add_argument(option, type=typ, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--budget", type=int, default=5)
    p.add_argument("--eval-seed", type=int, default=9999)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="aggregate run records into a table")
    p.add_argument("--config-dir", required=True)
    p.add_argument("--acquirers", default="random,learned,complete")
    p.add_argument("--fakes", default=None,
                   help="comma-separated corruption columns (default: all found)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("export-patterns", help="acquisition-frequency heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--n-series", type=int, default=100)
    p.add_argument("--eval-seed", type=int, default=9999)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_patterns)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)
    return parser


ERROR_CATEGORIES = [
    (FileNotFoundError, "missing-file"),
    (np.linalg.LinAlgError, "numerical"),
    (dm.NonFiniteError, "non-finite"),
    (ValueError, "invalid-input"),
    (OSError, "io"),
]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - single reporting point
        for exc_type, category in ERROR_CATEGORIES:
            if isinstance(err, exc_type):
                print(f"error:{category}: {err}", file=sys.stderr)
                return 2
        print(f"error:internal: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
