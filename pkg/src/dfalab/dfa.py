"""Next-step acquisition episodes: measure, classify, request, repeat.

The loop follows the acquisition cycle on a regular series of length T:
the acquirer proposes mask m_0 before anything is seen; at each step t the
requested features are measured as m_t * x_t, the classifier consumes the
measurement (plus mask and normalized time), and the acquirer proposes
m_{t+1} from what was just measured. The prediction is read at each series'
final step. m_T is still produced (the loop is uniform) but measures
nothing, so it never counts toward cost.

Randomness is per series: a batch spawns one child generator per row, so a
batched run and a loop of single-series runs over the same children agree
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import nn
from .diffmath import Tensor, Tape
from .selection import GumbelConfig, budgeted_select, gumbel_from_uniform


@dataclass
class Episode:
    """One series' acquisition trace. masks/measured cover t in [0, T)."""

    masks: np.ndarray        # [T, F] int8
    measured: np.ndarray     # [T, F] float64
    cost: int
    class_logits: np.ndarray  # [C]
    label: int | None
    series_id: int


class LearnedAcquirer:
    kind = "learned"

    def __init__(self, params: nn.MlpAcquirerParams, cfg: GumbelConfig):
        self.params = params
        self.cfg = cfg


class RandomAcquirer:
    """Uniform without-replacement choice of b features, fresh each step."""

    kind = "random"


class CompleteAcquirer:
    """Selects every feature at every step."""

    kind = "complete"


class StaticAcquirer:
    """One fixed mask applied at every step."""

    kind = "static"

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=np.float64)
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("static mask must be binary")
        self.mask = mask


AcquirerKind = LearnedAcquirer | RandomAcquirer | CompleteAcquirer | StaticAcquirer


@dataclass
class BatchResult:
    episodes: list[Episode]
    loss: Tensor | None
    class_logits: np.ndarray      # [B, C]
    costs: np.ndarray             # [B] int64
    masks: np.ndarray             # [B, T, F] int8 (padded steps zeroed)
    tape: Tape
    bound: dict[str, Tensor]      # trainable leaves, prefixed acquirer./classifier.


def _batch_uniform(rngs: list[np.random.Generator],
                   shape: tuple[int, ...]) -> np.ndarray:
    """Stack one uniform draw of ``shape`` per series stream."""
    return np.stack([r.random(shape) for r in rngs])


def _random_masks(rngs, n_features: int, budget: int) -> np.ndarray:
    masks = np.zeros((len(rngs), n_features))
    for i, r in enumerate(rngs):
        masks[i, r.permutation(n_features)[:budget]] = 1.0
    return masks


def acquirer_step_learned(params: nn.MlpAcquirerParams, prev_obs: np.ndarray,
                          prev_mask: np.ndarray, t: int, series_len: int,
                          budget: int, cfg: GumbelConfig,
                          rng: np.random.Generator):
    """Standalone one-step request: logits from the MLP, then budgeted
    selection. Returns the AcquisitionMask (own throwaway tape)."""
    tape = Tape()
    bound = params.bind(tape)
    batch = prev_obs.shape[0]
    t_norm = np.full((batch, 1), t / series_len)
    logits = nn.mlp_acquirer_forward(bound, tape.leaf(prev_obs),
                                     tape.leaf(prev_mask), tape.leaf(t_norm))
    return budgeted_select(logits, budget, cfg, rng)


def batch_episodes(series: np.ndarray, lengths: np.ndarray | None,
                   labels: np.ndarray | None, acquirer: AcquirerKind,
                   classifier: nn.LstmClassifierParams, budget: int,
                   rng, record_trace: bool = False,
                   soft_masks: bool = False) -> BatchResult:
    """Run every series in ``series`` [B, T, F] through the acquisition loop.

    ``lengths`` marks each series' true length (padding beyond it is inert:
    no cost, no loss). ``rng`` is a Generator (spawned into one child per
    series) or an explicit list of per-series Generators. With
    ``record_trace`` each Episode keeps its full mask/measurement arrays.

    ``soft_masks`` replaces the straight-through hard masks with soft
    relaxations everywhere (measurements, classifier input, and the
    re-selection penalty inside the selector); the episode graph is then
    smooth end to end, which is what finite-difference gradient checks
    need. Diagnostics only.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3:
        raise ValueError(f"series must be [B, T, F], got shape {series.shape}")
    batch, horizon, n_features = series.shape
    if horizon < 1:
        raise ValueError("series must have at least one time step")
    if not np.isfinite(series).all():
        raise ValueError("series contains NaN or Inf")
    if lengths is None:
        lengths = np.full(batch, horizon, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,):
        raise ValueError(f"lengths shape {lengths.shape} != ({batch},)")
    if lengths.min() < 1:
        raise ValueError("every series needs at least one valid step")
    if lengths.max() > horizon:
        raise ValueError(f"length {lengths.max()} exceeds tensor extent {horizon}")
    if not 0 <= budget <= n_features:
        raise ValueError(f"budget {budget} out of range [0, {n_features}]")
    if isinstance(acquirer, StaticAcquirer):
        if acquirer.mask.shape != (n_features,):
            raise ValueError("static mask width != feature count")
        if int(acquirer.mask.sum()) != budget:
            raise ValueError(f"static mask popcount {int(acquirer.mask.sum())} "
                             f"!= budget {budget}")

    rngs = list(rng) if isinstance(rng, (list, tuple)) else rng.spawn(batch)
    if len(rngs) != batch:
        raise ValueError(f"need {batch} per-series generators, got {len(rngs)}")

    tape = Tape()
    bound_clf = classifier.bind(tape)
    bound: dict[str, Tensor] = {f"classifier.{k}": v for k, v in bound_clf.items()}
    learned = isinstance(acquirer, LearnedAcquirer)
    if learned:
        bound_acq = acquirer.params.bind(tape)
        bound.update({f"acquirer.{k}": v for k, v in bound_acq.items()})
        ones_col = tape.leaf(np.ones((batch, 1)))

    def learned_select(logits: Tensor):
        if budget == 0:
            return budgeted_select(logits, 0, acquirer.cfg)
        u = _batch_uniform(rngs, (budget, n_features))
        return budgeted_select(logits, budget, acquirer.cfg,
                               noise=gumbel_from_uniform(u),
                               accumulate_soft=soft_masks,
                               smooth=soft_masks)

    def constant_mask() -> np.ndarray:
        if isinstance(acquirer, RandomAcquirer):
            return _random_masks(rngs, n_features, budget)
        if isinstance(acquirer, CompleteAcquirer):
            return np.ones((batch, n_features))
        return np.tile(acquirer.mask, (batch, 1))

    def pick_mask(selection):
        return selection.soft if soft_masks else selection.hard

    # m_0: the request made before anything is observed
    fixed_mask = not isinstance(acquirer, (LearnedAcquirer, RandomAcquirer))
    if learned:
        init_logits = dm.matmul(ones_col,
                                tape.leaf(acquirer.params.init_logits[None, :]))
        sel = learned_select(init_logits)
        mask_t, mask_record = pick_mask(sel), sel.hard.value
    else:
        mask_t = tape.leaf(constant_mask())
        mask_record = mask_t.value

    state = classifier.initial_state(tape, batch)
    t_norm_values = np.arange(horizon + 1)[:, None] / lengths[None, :]
    np.minimum(t_norm_values, 1.0, out=t_norm_values)

    hard_masks = np.zeros((batch, horizon, n_features))
    measured_all = np.empty((batch, horizon, n_features)) if record_trace else None
    final_h: Tensor | None = None

    for t in range(horizon):
        hard_masks[:, t, :] = mask_record
        x_t = tape.leaf(series[:, t, :])
        measured = dm.mul(mask_t, x_t)
        if record_trace:
            measured_all[:, t, :] = measured.value
        t_norm = tape.leaf(t_norm_values[t][:, None])
        state = nn.classifier_step(bound_clf, state, measured, mask_t, t_norm)

        ends_here = lengths == t + 1
        if ends_here.any():
            pick = tape.leaf(np.tile(ends_here[:, None].astype(np.float64),
                                     (1, nn.LSTM_HIDDEN)))
            picked = dm.mul(state[-1][0], pick)
            final_h = picked if final_h is None else dm.add(final_h, picked)

        # the request for step t+1 (produced even on the last iteration;
        # it measures nothing and never counts toward cost)
        if learned:
            next_t_norm = tape.leaf(t_norm_values[t + 1][:, None])
            logits = nn.mlp_acquirer_forward(bound_acq, measured, mask_t,
                                             next_t_norm)
            sel = learned_select(logits)
            mask_t, mask_record = pick_mask(sel), sel.hard.value
        elif not fixed_mask:
            mask_t = tape.leaf(constant_mask())
            mask_record = mask_t.value

    class_logits = nn.predict_from_hidden(bound_clf, final_h)
    loss = nn.cross_entropy(class_logits, labels) if labels is not None else None

    valid = np.arange(horizon)[None, :] < lengths[:, None]
    hard_int = np.rint(hard_masks).astype(np.int8)
    costs = (hard_int * valid[:, :, None]).sum(axis=(1, 2)).astype(np.int64)
    hard_int *= valid[:, :, None].astype(np.int8)

    episodes = []
    for i in range(batch):
        n = int(lengths[i])
        episodes.append(Episode(
            masks=hard_int[i, :n].copy() if record_trace else hard_int[i, :0],
            measured=measured_all[i, :n].copy() if record_trace
            else np.empty((0, n_features)),
            cost=int(costs[i]),
            class_logits=class_logits.value[i].copy(),
            label=None if labels is None else int(labels[i]),
            series_id=i,
        ))
    return BatchResult(episodes=episodes, loss=loss,
                       class_logits=class_logits.value, costs=costs,
                       masks=hard_int, tape=tape, bound=bound)


def run_episode(series: np.ndarray, label: int | None, acquirer: AcquirerKind,
                classifier: nn.LstmClassifierParams, budget: int,
                rng: np.random.Generator, record_trace: bool = True) -> Episode:
    """Single-series wrapper around batch_episodes (batch of one)."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError(f"series must be [T, F], got shape {series.shape}")
    labels = None if label is None else np.array([label])
    result = batch_episodes(series[None, :, :], None, labels, acquirer,
                            classifier, budget, [rng], record_trace=record_trace)
    return result.episodes[0]


# ---------------------------------------------------------------- trace export

def mask_frequency(masks: np.ndarray) -> np.ndarray:
    """Per-(step, feature) selection frequency over a stack of [T, F] masks."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 3:
        raise ValueError("expected [N, T, F] mask stack")
    return masks.mean(axis=0)


def export_trace_csv(path: str | Path, masks: np.ndarray) -> None:
    """Write one (step, feature, mask bit) row per cell of a [T, F] mask."""
    masks = np.asarray(masks)
    lines = ["step,feature,mask"]
    for t in range(masks.shape[0]):
        for f in range(masks.shape[1]):
            lines.append(f"{t},{f},{int(masks[t, f])}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_heatmap_pgm(path: str | Path, freq: np.ndarray) -> None:
    """ASCII PGM (P2) heatmap of values in [0, 1], one image row per step."""
    freq = np.asarray(freq, dtype=np.float64)
    if freq.ndim != 2 or freq.min() < 0.0 or freq.max() > 1.0:
        raise ValueError("heatmap must be a [T, F] array of values in [0, 1]")
    height, width = freq.shape
    grey = np.rint(freq * 255).astype(int)
    rows = [" ".join(str(v) for v in row) for row in grey]
    Path(path).write_text(f"P2\n{width} {height}\n255\n" + "\n".join(rows) + "\n")
