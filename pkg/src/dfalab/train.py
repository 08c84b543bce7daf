"""Training and evaluation harness.

One run trains the classifier (and, for the learned policy, the acquirer
jointly through the same loss) from scratch with Adam, early-stops on
validation accuracy, restores the best checkpoint and reports test metrics.
All randomness is derived from the config seed through named substreams, so
a run is a pure function of its resolved config.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dfa, diffmath as dm, forest, nn
from .config import ExperimentConfig
from .selection import GumbelConfig


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class EvalMetrics:
    accuracy: float
    loss: float
    mean_cost: float
    hit_rate: float


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    acquirer: str
    dataset: str
    corruption: str = "none"
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    test_accuracy: float = 0.0
    test_loss: float = 0.0
    test_mean_cost: float = 0.0
    test_hit_rate: float = 0.0
    wall_time_sec: float = 0.0
    diverged: bool = False


# ---------------------------------------------------------------- utilities

def _stream(cfg_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([cfg_seed, *path])


def stratified_indices(labels: np.ndarray, fraction: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (rest, held_out) with per-class proportions."""
    rest, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = max(1, int(round(len(idx) * fraction)))
        held.append(idx[:k])
        rest.append(idx[k:])
    return np.sort(np.concatenate(rest)), np.sort(np.concatenate(held))


def subsample_stratified(labels: np.ndarray, limit: int,
                         rng: np.random.Generator) -> np.ndarray:
    if limit <= 0 or limit >= len(labels):
        return np.arange(len(labels))
    keep = []
    classes = np.unique(labels)
    per_class = max(1, limit // len(classes))
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        keep.append(idx[:per_class])
    return np.sort(np.concatenate(keep))


def build_models(cfg: ExperimentConfig, bundle: data_mod.DatasetBundle,
                 train_idx: np.ndarray):
    """Initialize the classifier and the acquirer policy for a run."""
    init_rng = _stream(cfg.seed, 0)
    classifier = nn.LstmClassifierParams.init(
        init_rng, bundle.n_features, bundle.class_count, cfg.lstm_layers)
    gumbel = GumbelConfig(temperature=cfg.temperature,
                          penalty_scale=cfg.penalty_scale)
    if cfg.acquirer == "learned":
        params = nn.MlpAcquirerParams.init(init_rng, bundle.n_features,
                                           cfg.acquirer_hidden)
        acquirer = dfa.LearnedAcquirer(params, gumbel)
    elif cfg.acquirer == "random":
        acquirer = dfa.RandomAcquirer()
    elif cfg.acquirer == "complete":
        acquirer = dfa.CompleteAcquirer()
    else:
        x = bundle.train_series[train_idx]
        flat = x.reshape(len(train_idx), -1)
        fcfg = forest.ForestConfig(n_trees=cfg.forest_trees, seed=cfg.seed)
        fitted = forest.fit_forest(flat, bundle.train_labels[train_idx], fcfg)
        importance = forest.feature_importance(fitted)
        mask = forest.static_mask(importance, bundle.max_length,
                                  bundle.n_features, cfg.budget)
        acquirer = dfa.StaticAcquirer(mask)
    return acquirer, classifier


def _effective_budget(cfg: ExperimentConfig, bundle) -> int:
    return bundle.n_features if cfg.acquirer == "complete" else cfg.budget


def trainable_arrays(acquirer, classifier) -> nn.ParamArrays:
    groups = {"classifier": classifier.parameters()}
    if isinstance(acquirer, dfa.LearnedAcquirer):
        groups["acquirer"] = acquirer.params.parameters()
    return nn.merge_prefixed(**groups)


def evaluate_split(acquirer, classifier, bundle, split: str,
                   cfg: ExperimentConfig, eval_stream: int = 0) -> EvalMetrics:
    """Forward-only metrics with hard sampling under the fixed eval seed."""
    series = getattr(bundle, f"{split}_series")
    lengths = getattr(bundle, f"{split}_lengths")
    labels = getattr(bundle, f"{split}_labels")
    real = bundle.real_feature_matrix()
    budget = _effective_budget(cfg, bundle)

    n = len(labels)
    correct = 0
    loss_sum = 0.0
    cost_sum = 0
    hits = 0
    acquired = 0
    for chunk, start in enumerate(range(0, n, cfg.batch_size)):
        sl = slice(start, min(start + cfg.batch_size, n))
        rng = np.random.default_rng([cfg.eval_seed, eval_stream, chunk])
        res = dfa.batch_episodes(series[sl], lengths[sl], labels[sl],
                                 acquirer, classifier, budget, rng)
        correct += int((res.class_logits.argmax(1) == labels[sl]).sum())
        loss_sum += float(res.loss.value) * (sl.stop - sl.start)
        cost_sum += int(res.costs.sum())
        hits += int((res.masks * real[None, :, :]).sum())
        acquired += int(res.masks.sum())
    return EvalMetrics(accuracy=correct / n, loss=loss_sum / n,
                       mean_cost=cost_sum / n,
                       hit_rate=hits / acquired if acquired else 0.0)


# ---------------------------------------------------------------- training

def train_run(cfg: ExperimentConfig,
              bundle: data_mod.DatasetBundle | None = None,
              verbose: bool = False) -> RunRecord:
    """Train per the config; writes record, curves, resolved config and the
    best checkpoint into cfg.output_dir (when set)."""
    started = time.monotonic()
    if bundle is None:
        bundle = data_mod.load_bundle(cfg.data_dir)

    pool = subsample_stratified(bundle.train_labels, cfg.train_limit,
                                _stream(cfg.seed, 3))
    rest, val_idx = stratified_indices(bundle.train_labels[pool],
                                       cfg.val_fraction, _stream(cfg.seed, 2))
    train_idx, val_idx = pool[rest], pool[val_idx]

    acquirer, classifier = build_models(cfg, bundle, train_idx)
    params = trainable_arrays(acquirer, classifier)
    adam = nn.AdamState(params, lr=cfg.learning_rate)
    budget = _effective_budget(cfg, bundle)

    val_view = data_mod.DatasetBundle(
        name=bundle.name, class_count=bundle.class_count,
        f_real=bundle.f_real, f_fake=bundle.f_fake,
        fake_kind=bundle.fake_kind, shift_schedule=bundle.shift_schedule,
        train_series=bundle.train_series[train_idx],
        train_lengths=bundle.train_lengths[train_idx],
        train_labels=bundle.train_labels[train_idx],
        test_series=bundle.train_series[val_idx],
        test_lengths=bundle.train_lengths[val_idx],
        test_labels=bundle.train_labels[val_idx])

    corruption = bundle.fake_kind + ("+shift" if bundle.shift_schedule else "")
    record = RunRecord(config_hash=cfg.config_hash(), seed=cfg.seed,
                       acquirer=cfg.acquirer, dataset=cfg.dataset,
                       corruption=corruption)
    best_val = -1.0
    best_params: nn.ParamArrays | None = None
    stale = 0

    for epoch in range(cfg.max_epochs):
        order = _stream(cfg.seed, 1, epoch).permutation(len(train_idx))
        shuffled = train_idx[order]
        loss_sum = 0.0
        correct = 0
        try:
            for step, start in enumerate(range(0, len(shuffled), cfg.batch_size)):
                batch = shuffled[start:start + cfg.batch_size]
                rng = _stream(cfg.seed, 1, epoch, step, 7)
                res = dfa.batch_episodes(
                    bundle.train_series[batch], bundle.train_lengths[batch],
                    bundle.train_labels[batch], acquirer, classifier, budget, rng)
                grads_map = dm.backward(res.tape, res.loss)
                grads = {name: grads_map[t.node_id].value
                         for name, t in res.bound.items()}
                loss_sum += float(res.loss.value) * len(batch)
                correct += int((res.class_logits.argmax(1) ==
                                bundle.train_labels[batch]).sum())
                del res, grads_map
                nn.adam_step(adam, params, grads)
        except dm.NonFiniteError:
            record.diverged = True
            break

        val = evaluate_split(acquirer, classifier, val_view, "test", cfg,
                             eval_stream=1)
        stats = EpochStats(epoch=epoch,
                           train_loss=loss_sum / len(shuffled),
                           train_acc=correct / len(shuffled),
                           val_loss=val.loss, val_acc=val.accuracy)
        record.epochs.append(stats)
        if verbose:
            print(f"epoch {epoch:3d} train_loss {stats.train_loss:.4f} "
                  f"train_acc {stats.train_acc:.3f} val_acc {val.accuracy:.3f}")
        if val.accuracy > best_val:
            best_val = val.accuracy
            record.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    if best_params is not None:
        for k in params:
            params[k][...] = best_params[k]

    if not record.diverged:
        test = evaluate_split(acquirer, classifier, bundle, "test", cfg,
                              eval_stream=2)
        record.test_accuracy = test.accuracy
        record.test_loss = test.loss
        record.test_mean_cost = test.mean_cost
        record.test_hit_rate = test.hit_rate
    record.wall_time_sec = time.monotonic() - started

    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        save_run_record(out, record)
        nn.save_checkpoint(out / "checkpoint.txt", params,
                           meta=checkpoint_meta(cfg, bundle))
        if isinstance(acquirer, dfa.StaticAcquirer):
            data_mod.write_array(out / "static_mask.bin", acquirer.mask)
    return record


def checkpoint_meta(cfg: ExperimentConfig, bundle) -> dict[str, str]:
    return {
        "acquirer": cfg.acquirer,
        "dataset": cfg.dataset,
        "config_hash": cfg.config_hash(),
        "seed": str(cfg.seed),
        "n_features": str(bundle.n_features),
        "class_count": str(bundle.class_count),
        "lstm_layers": str(cfg.lstm_layers),
        "acquirer_hidden": str(cfg.acquirer_hidden),
        "budget": str(cfg.budget),
        "temperature": str(cfg.temperature),
        "penalty_scale": str(cfg.penalty_scale),
    }


def restore_models(ckpt_path: str | Path, bundle: data_mod.DatasetBundle):
    """Rebuild (acquirer, classifier) from a checkpoint written by train_run."""
    arrays, meta = nn.load_checkpoint(ckpt_path)
    if int(meta["class_count"]) != bundle.class_count:
        raise ValueError(f"checkpoint has {meta['class_count']} classes, "
                         f"dataset has {bundle.class_count}")
    if int(meta["n_features"]) != bundle.n_features:
        raise ValueError(f"checkpoint has {meta['n_features']} features, "
                         f"dataset has {bundle.n_features}")
    groups = nn.split_prefixed(arrays)
    classifier = nn.LstmClassifierParams.init(
        np.random.default_rng(0), bundle.n_features, bundle.class_count,
        int(meta["lstm_layers"]))
    classifier.load_arrays(groups["classifier"])
    kind = meta["acquirer"]
    if kind == "learned":
        params = nn.MlpAcquirerParams.init(
            np.random.default_rng(0), bundle.n_features,
            int(meta["acquirer_hidden"]))
        params.load_arrays(groups["acquirer"])
        acquirer = dfa.LearnedAcquirer(
            params, GumbelConfig(temperature=float(meta["temperature"]),
                                 penalty_scale=float(meta["penalty_scale"])))
    elif kind == "random":
        acquirer = dfa.RandomAcquirer()
    elif kind == "complete":
        acquirer = dfa.CompleteAcquirer()
    else:
        mask = data_mod.read_array(Path(ckpt_path).parent / "static_mask.bin")
        acquirer = dfa.StaticAcquirer(mask)
    return acquirer, classifier, meta


def evaluate_checkpoint(ckpt_path: str | Path, bundle: data_mod.DatasetBundle,
                        split: str, cfg: ExperimentConfig) -> EvalMetrics:
    acquirer, classifier, _ = restore_models(ckpt_path, bundle)
    return evaluate_split(acquirer, classifier, bundle, split, cfg,
                          eval_stream=2)


# ---------------------------------------------------------------- records

def save_run_record(directory: str | Path, record: RunRecord) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"config_hash = {record.config_hash}",
        f"seed = {record.seed}",
        f"acquirer = {record.acquirer}",
        f"dataset = {record.dataset}",
        f"corruption = {record.corruption}",
        f"best_epoch = {record.best_epoch}",
        f"test_accuracy = {record.test_accuracy!r}",
        f"test_loss = {record.test_loss!r}",
        f"test_mean_cost = {record.test_mean_cost!r}",
        f"test_hit_rate = {record.test_hit_rate!r}",
        f"wall_time_sec = {record.wall_time_sec!r}",
        f"diverged = {record.diverged}",
    ]
    (directory / "record.txt").write_text("\n".join(lines) + "\n")
    curves = ["epoch,split,loss,accuracy"]
    for s in record.epochs:
        curves.append(f"{s.epoch},train,{s.train_loss!r},{s.train_acc!r}")
        curves.append(f"{s.epoch},val,{s.val_loss!r},{s.val_acc!r}")
    (directory / "curves.csv").write_text("\n".join(curves) + "\n")


def load_run_record(directory: str | Path) -> RunRecord:
    directory = Path(directory)
    raw: dict[str, str] = {}
    for line in (directory / "record.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    record = RunRecord(
        config_hash=raw["config_hash"], seed=int(raw["seed"]),
        acquirer=raw["acquirer"], dataset=raw["dataset"],
        corruption=raw.get("corruption", "none"),
        best_epoch=int(raw["best_epoch"]),
        test_accuracy=float(raw["test_accuracy"]),
        test_loss=float(raw["test_loss"]),
        test_mean_cost=float(raw["test_mean_cost"]),
        test_hit_rate=float(raw["test_hit_rate"]),
        wall_time_sec=float(raw["wall_time_sec"]),
        diverged=raw["diverged"] == "True")
    curves = directory / "curves.csv"
    if curves.exists():
        stats: dict[int, EpochStats] = {}
        for line in curves.read_text().splitlines()[1:]:
            epoch, split, loss, acc = line.split(",")
            s = stats.setdefault(int(epoch), EpochStats(int(epoch), 0, 0, 0, 0))
            if split == "train":
                s.train_loss, s.train_acc = float(loss), float(acc)
            else:
                s.val_loss, s.val_acc = float(loss), float(acc)
        record.epochs = [stats[e] for e in sorted(stats)]
    return record


def aggregate_seeds(records: list[RunRecord]) -> dict[str, float]:
    """Mean and sample std of test accuracy over seed replicates of one
    experiment cell."""
    if len(records) < 2:
        raise ValueError("need at least two seed replicates to aggregate")
    hashes = {r.config_hash for r in records}
    if len(hashes) != 1:
        raise ValueError(f"records mix different configs: {sorted(hashes)}")
    seeds = [r.seed for r in records]
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds in aggregation")
    accs = np.array([r.test_accuracy for r in records])
    costs = np.array([r.test_mean_cost for r in records])
    return {
        "n_seeds": len(records),
        "accuracy_mean": float(accs.mean()),
        "accuracy_std": float(accs.std(ddof=1)),
        "cost_mean": float(costs.mean()),
    }
