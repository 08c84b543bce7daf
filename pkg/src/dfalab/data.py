"""Dataset ingestion, fold-to-multivariate construction, fake-feature
injection (zeros / Gaussian noise / GP prior samples) and the periodic
feature-shift transform.

Bundles keep train and test splits padded to a common length with explicit
per-series lengths; padding positions hold 0 and never reach losses or
costs. All corruption is drawn once at construction time under the caller's
generator, so corrupted bundles are pure functions of (data, seed).
"""

from __future__ import annotations

import hashlib
import struct
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass
class GpKernelConfig:
    """RBF kernel k(s,t) = variance * exp(-(s-t)^2 / (2 lengthscale^2))."""

    variance: float = 0.5
    length_scale: float = 1.5
    jitter: float = 1e-8

    def __post_init__(self):
        if self.variance <= 0 or self.length_scale <= 0:
            raise ValueError("variance and length_scale must be positive")


@dataclass
class DatasetBundle:
    name: str
    train_series: np.ndarray   # [N, T, F]
    train_lengths: np.ndarray  # [N]
    train_labels: np.ndarray   # [N]
    test_series: np.ndarray
    test_lengths: np.ndarray
    test_labels: np.ndarray
    class_count: int
    f_real: int
    f_fake: int = 0
    fake_kind: str = "none"
    # (start_step, real_index_offset) per segment; empty = no shift
    shift_schedule: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        for split in ("train", "test"):
            series = getattr(self, f"{split}_series")
            lengths = getattr(self, f"{split}_lengths")
            labels = getattr(self, f"{split}_labels")
            if series.ndim != 3:
                raise ValueError(f"{split} series must be [N, T, F]")
            if lengths.min(initial=1) < 1:
                raise ValueError(f"{split} lengths must be >= 1")
            if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ValueError(f"{split} labels out of [0, {self.class_count})")
        if self.f_real + self.f_fake != self.n_features:
            raise ValueError("f_real + f_fake must equal the feature count")

    @property
    def n_features(self) -> int:
        return self.train_series.shape[2]

    @property
    def max_length(self) -> int:
        return self.train_series.shape[1]

    def real_feature_matrix(self, horizon: int | None = None) -> np.ndarray:
        """Boolean [T, F]: which (step, feature) cells carry real signal."""
        horizon = horizon or self.max_length
        out = np.zeros((horizon, self.n_features), dtype=bool)
        schedule = self.shift_schedule or [(0, 0)]
        for i, (start, offset) in enumerate(schedule):
            stop = schedule[i + 1][0] if i + 1 < len(schedule) else horizon
            out[start:stop, offset:offset + self.f_real] = True
        return out

    def summary(self) -> dict[str, str]:
        lengths = np.concatenate([self.train_lengths, self.test_lengths])
        return {
            "name": self.name,
            "train_size": str(len(self.train_labels)),
            "test_size": str(len(self.test_labels)),
            "features": str(self.n_features),
            "real_features": str(self.f_real),
            "fake_features": str(self.f_fake),
            "fake_kind": self.fake_kind,
            "classes": str(self.class_count),
            "length_min": str(int(lengths.min())),
            "length_max": str(int(lengths.max())),
            "shifted": "yes" if self.shift_schedule else "no",
        }


# ---------------------------------------------------------------- loaders

def _remap_labels(raw: list[str], vocab: list[str] | None,
                  where: str) -> tuple[np.ndarray, int]:
    if vocab is None:
        vocab = sorted(set(raw), key=_label_sort_key)
    else:
        unknown = set(raw) - set(vocab)
        if unknown:
            raise ValueError(f"{where}: unknown class label(s) {sorted(unknown)}")
        vocab = sorted(vocab, key=_label_sort_key)
    index = {label: i for i, label in enumerate(vocab)}
    return np.array([index[r] for r in raw], dtype=np.int64), len(vocab)


def _label_sort_key(token: str):
    try:
        return (0, float(token), "")
    except ValueError:
        return (1, 0.0, token)


def load_ucr_tsv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Univariate UCR file: each row is `label v1 ... vT`, whitespace/tab
    separated. Returns (series [N, T], labels remapped to 0..C-1 by sorted
    original value, so FordA's {-1, 1} becomes {0, 1})."""
    path = Path(path)
    rows: list[np.ndarray] = []
    raw_labels: list[str] = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ValueError(f"{path}:{lineno}: ragged row "
                                 f"({len(tokens)} fields, expected {width})")
            try:
                values = np.array([float(tok) for tok in tokens[1:]])
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: unparseable number "
                                 f"({err})") from None
            raw_labels.append(tokens[0])
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    labels, _ = _remap_labels(raw_labels, None, str(path))
    return np.stack(rows), labels


def load_ts_multivariate(path: str | Path) -> tuple[np.ndarray, np.ndarray,
                                                    np.ndarray, int]:
    """Multivariate `.ts` file: `@`-prefixed headers, then one case per
    line with `:`-separated dimensions of comma-separated values and the
    class label last. Returns (series [N, Tmax, F] zero-padded, lengths,
    labels, class_count)."""
    path = Path(path)
    vocab: list[str] | None = None
    cases: list[np.ndarray] = []
    raw_labels: list[str] = []
    n_dims = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@"):
                head, _, rest = line.partition(" ")
                if head.lower() == "@classlabel":
                    parts = rest.split()
                    if parts and parts[0].lower() == "true":
                        vocab = parts[1:]
                continue
            segments = line.split(":")
            if len(segments) < 2:
                raise ValueError(f"{path}:{lineno}: expected `dim:...:label`")
            *dims, label = segments
            if n_dims is None:
                n_dims = len(dims)
            elif len(dims) != n_dims:
                raise ValueError(f"{path}:{lineno}: inconsistent dimension "
                                 f"count {len(dims)} (expected {n_dims})")
            try:
                channels = [np.array([float(v) for v in d.split(",")])
                            for d in dims]
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: unparseable number "
                                 f"({err})") from None
            if len({len(c) for c in channels}) != 1:
                raise ValueError(f"{path}:{lineno}: dimensions have unequal "
                                 "lengths within one case")
            cases.append(np.stack(channels, axis=1))  # [T_i, F]
            raw_labels.append(label.strip())
    if not cases:
        raise ValueError(f"{path}: empty dataset file")
    labels, class_count = _remap_labels(raw_labels, vocab, str(path))
    lengths = np.array([c.shape[0] for c in cases], dtype=np.int64)
    t_max = int(lengths.max())
    series = np.zeros((len(cases), t_max, n_dims))
    for i, c in enumerate(cases):
        series[i, :c.shape[0]] = c
    return series, lengths, labels, class_count


def make_m_forda(series: np.ndarray, m: int = 10) -> np.ndarray:
    """Fold m consecutive univariate steps into one multivariate step:
    new[n, t, f] = old[n, t*m + f]."""
    series = np.asarray(series)
    if series.ndim != 2:
        raise ValueError("expected univariate series [N, T]")
    n, t0 = series.shape
    if t0 % m != 0:
        raise ValueError(f"length {t0} not divisible by m={m}")
    return series.reshape(n, t0 // m, m).copy()


def bundle_from_arrays(name: str, train, test, class_count: int,
                       train_lengths=None, test_lengths=None) -> DatasetBundle:
    """Assemble a clean (uncorrupted) bundle from (series, labels) pairs."""
    train_series, train_labels = train
    test_series, test_labels = test
    if train_lengths is None:
        train_lengths = np.full(len(train_labels), train_series.shape[1],
                                dtype=np.int64)
    if test_lengths is None:
        test_lengths = np.full(len(test_labels), test_series.shape[1],
                               dtype=np.int64)
    return DatasetBundle(
        name=name,
        train_series=np.asarray(train_series, dtype=np.float64),
        train_lengths=np.asarray(train_lengths, dtype=np.int64),
        train_labels=np.asarray(train_labels, dtype=np.int64),
        test_series=np.asarray(test_series, dtype=np.float64),
        test_lengths=np.asarray(test_lengths, dtype=np.int64),
        test_labels=np.asarray(test_labels, dtype=np.int64),
        class_count=class_count,
        f_real=train_series.shape[2],
    )


# ---------------------------------------------------------------- GP sampling

def _cholesky_with_jitter(cov: np.ndarray, jitter: float,
                          max_jitter: float = 1e-4) -> np.ndarray:
    while True:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > max_jitter:
                raise np.linalg.LinAlgError(
                    f"Cholesky failed even with jitter {max_jitter}") from None


def gp_covariance(time_points: np.ndarray, cfg: GpKernelConfig) -> np.ndarray:
    d = np.subtract.outer(time_points, time_points)
    return cfg.variance * np.exp(-d * d / (2.0 * cfg.length_scale ** 2))


def sample_gp_paths(rng: np.random.Generator, time_points,
                    n_paths: int, cfg: GpKernelConfig | None = None) -> np.ndarray:
    """Draw ``n_paths`` samples [n_paths, len(time_points)] from the GP prior."""
    cfg = cfg or GpKernelConfig()
    time_points = np.asarray(time_points, dtype=np.float64)
    chol = _cholesky_with_jitter(gp_covariance(time_points, cfg), cfg.jitter)
    z = rng.standard_normal((n_paths, time_points.size))
    return z @ chol.T


# ---------------------------------------------------------------- corruption

FAKE_KINDS = ("zeros", "noise", "gp")
NOISE_STD = 0.5


def inject_fake(bundle: DatasetBundle, kind: str, count: int = 30,
                rng: np.random.Generator | None = None,
                gp_cfg: GpKernelConfig | None = None) -> DatasetBundle:
    """Append ``count`` label-independent features after the real ones.

    zeros: constant 0. noise: i.i.d. N(0, 0.5^2). gp: one GP-prior path per
    (series, fake feature) over time indices 0..T-1. Padding stays zero.
    """
    if kind not in FAKE_KINDS:
        raise ValueError(f"fake kind must be one of {FAKE_KINDS}, got {kind!r}")
    if count < 0:
        raise ValueError("fake feature count must be >= 0")
    if bundle.f_fake:
        raise ValueError("bundle already has fake features")
    if count and kind != "zeros" and rng is None:
        raise ValueError(f"kind {kind!r} needs an rng")

    def fakes_for(series: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        n, t_max, _ = series.shape
        if kind == "zeros" or count == 0:
            fake = np.zeros((n, t_max, count))
        elif kind == "noise":
            fake = rng.normal(0.0, NOISE_STD, size=(n, t_max, count))
        else:
            paths = sample_gp_paths(rng, np.arange(t_max), n * count,
                                    gp_cfg)  # [n*count, t_max]
            fake = paths.reshape(n, count, t_max).transpose(0, 2, 1)
        fake *= (np.arange(t_max)[None, :, None] < lengths[:, None, None])
        return fake

    train_fake = fakes_for(bundle.train_series, bundle.train_lengths)
    test_fake = fakes_for(bundle.test_series, bundle.test_lengths)
    return replace(
        bundle,
        train_series=np.concatenate([bundle.train_series, train_fake], axis=2),
        test_series=np.concatenate([bundle.test_series, test_fake], axis=2),
        f_fake=bundle.f_fake + count,
        fake_kind=kind if count else bundle.fake_kind,
    )


def shift_real_features(bundle: DatasetBundle) -> DatasetBundle:
    """Relocate the real block periodically: in segment k (of length
    floor(T*R/F) steps, last one extended to T) the real signals sit at
    indices [k*R, (k+1)*R), swapped with the fake content that lived there.
    Requires the fake count to be a multiple of the real count."""
    r = bundle.f_real
    total = bundle.n_features
    if bundle.f_fake % r != 0:
        raise ValueError(f"fake count {bundle.f_fake} must be a multiple of "
                         f"the real count {r}")
    horizon = bundle.max_length
    n_segments = total // r
    seg_len = (horizon * r) // total
    if n_segments > 1 and seg_len == 0:
        raise ValueError("series too short to host the shift segments")

    schedule = [(k * seg_len, k * r) for k in range(n_segments)]

    def apply(series: np.ndarray) -> np.ndarray:
        out = series.copy()
        for k, (start, offset) in enumerate(schedule):
            stop = schedule[k + 1][0] if k + 1 < len(schedule) else horizon
            if k == 0:
                continue
            block = out[:, start:stop, :]
            real = block[:, :, 0:r].copy()
            block[:, :, 0:r] = block[:, :, offset:offset + r]
            block[:, :, offset:offset + r] = real
        return out

    return replace(bundle,
                   train_series=apply(bundle.train_series),
                   test_series=apply(bundle.test_series),
                   shift_schedule=schedule if n_segments > 1 else [])


STD_FLOOR = 1e-6


def znormalize(bundle: DatasetBundle, per_feature: bool = True) -> DatasetBundle:
    """Standardize with train statistics over valid (non-padded) steps; the
    same affine map is applied to test. Features with train std below
    1e-6 (e.g. zeros fakes) are left untouched."""
    valid = (np.arange(bundle.max_length)[None, :] <
             bundle.train_lengths[:, None])  # [N, T]
    samples = bundle.train_series[valid]  # [n_valid_steps, F]
    if per_feature:
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
    else:
        mean = np.full(bundle.n_features, samples.mean())
        std = np.full(bundle.n_features, samples.std())
    keep = std < STD_FLOOR
    mean = np.where(keep, 0.0, mean)
    scale = np.where(keep, 1.0, np.where(std < STD_FLOOR, 1.0, std))

    def apply(series: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        out = (series - mean) / scale
        out *= (np.arange(series.shape[1])[None, :, None] <
                lengths[:, None, None])
        return out

    return replace(bundle,
                   train_series=apply(bundle.train_series, bundle.train_lengths),
                   test_series=apply(bundle.test_series, bundle.test_lengths))


# ---------------------------------------------------------------- cache

_MAGIC = b"DFL1"
_DTYPES = {"f": np.float64, "i": np.int64}


def write_array(path: str | Path, arr: np.ndarray) -> None:
    """Shape-prefixed little-endian flat dump (float64 or int64)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        code = b"f"
    elif arr.dtype == np.int64:
        code = b"i"
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + code + struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_array(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) != 6 or head[:4] != _MAGIC:
            raise ValueError(f"{path}: not a dfalab array file")
        code = chr(head[4])
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code!r}")
        ndim = head[5]
        shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.dtype(_DTYPES[code]).newbyteorder("<"))
    return data.reshape(shape).astype(_DTYPES[code])


_BUNDLE_ARRAYS = ("train_series", "train_lengths", "train_labels",
                  "test_series", "test_lengths", "test_labels")


def save_bundle(directory: str | Path, bundle: DatasetBundle) -> None:
    """Binary arrays plus a human-readable key=value metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in _BUNDLE_ARRAYS:
        write_array(directory / f"{name}.bin", getattr(bundle, name))
    schedule = ";".join(f"{s}:{o}" for s, o in bundle.shift_schedule)
    meta = [
        f"name = {bundle.name}",
        f"class_count = {bundle.class_count}",
        f"f_real = {bundle.f_real}",
        f"f_fake = {bundle.f_fake}",
        f"fake_kind = {bundle.fake_kind}",
        f"shift_schedule = {schedule}",
    ]
    (directory / "meta.txt").write_text("\n".join(meta) + "\n")


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    meta_path = directory / "meta.txt"
    if not meta_path.exists():
        raise FileNotFoundError(f"{directory}: missing meta.txt "
                                "(not a prepared dataset directory)")
    meta: dict[str, str] = {}
    for line in meta_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    arrays = {name: read_array(directory / f"{name}.bin")
              for name in _BUNDLE_ARRAYS}
    schedule = []
    if meta.get("shift_schedule"):
        for piece in meta["shift_schedule"].split(";"):
            start, _, offset = piece.partition(":")
            schedule.append((int(start), int(offset)))
    return DatasetBundle(
        name=meta["name"],
        class_count=int(meta["class_count"]),
        f_real=int(meta["f_real"]),
        f_fake=int(meta["f_fake"]),
        fake_kind=meta["fake_kind"],
        shift_schedule=schedule,
        **arrays,
    )


# ---------------------------------------------------------------- fetching

def fetch_archive(urls: list[str], dest: str | Path,
                  sha256: str | None = None, timeout: float = 30.0) -> Path:
    """Download the first reachable mirror to ``dest``; verify the checksum
    when given. Purely optional: every test runs offline on local files."""
    dest = Path(dest)
    errors = []
    for url in urls:
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                payload = resp.read()
            break
        except Exception as err:  # noqa: BLE001 - report every mirror
            errors.append(f"{url}: {err}")
    else:
        raise OSError("no mirror reachable:\n" + "\n".join(errors))
    if sha256 is not None:
        digest = hashlib.sha256(payload).hexdigest()
        if digest != sha256:
            raise OSError(f"checksum mismatch for {dest.name}: "
                          f"expected {sha256}, got {digest}")
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_bytes(payload)
    return dest
