"""Synthetic stand-in datasets written in the real archive text formats.

The sandbox has no route to the benchmark archives, so these generators
produce files with the same layout (univariate whitespace TSV, multivariate
`.ts`), the same shape statistics, and a class signal that is carried only
by the real features. The ingestion code cannot tell them apart from the
genuine archives, which keeps the whole prepare/train/evaluate path
exercised end to end offline.

Univariate engine-style series: label s in {-1, +1}, x_t = s * a(t) + noise
with a late-weighted amplitude ramp, so later steps carry more signal.
Speech-style series: ten classes, each a fixed +-1 pattern over 13 bands,
variable lengths in [4, 93].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _format_row(values, sep="\t"):
    return sep.join(f"{v:.6f}" for v in values)


def write_forda_like(directory: str | Path, rng: np.random.Generator,
                     n_train: int = 1000, n_test: int = 500,
                     length: int = 500, signal: float = 0.35,
                     ramp: float = 0.2) -> tuple[Path, Path]:
    """Write FordA_TRAIN.tsv / FordA_TEST.tsv with labels in {-1, 1}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    envelope = ramp + (1.0 - ramp) * np.arange(length) / (length - 1)

    def split(n: int, path: Path) -> Path:
        labels = np.where(np.arange(n) % 2 == 0, -1, 1)
        labels = labels[rng.permutation(n)]
        rows = []
        for lab in labels:
            x = lab * signal * envelope + rng.standard_normal(length)
            rows.append(f"{lab}\t{_format_row(x)}")
        path.write_text("\n".join(rows) + "\n")
        return path

    return (split(n_train, directory / "FordA_TRAIN.tsv"),
            split(n_test, directory / "FordA_TEST.tsv"))


def write_spoken_like(directory: str | Path, rng: np.random.Generator,
                      n_train: int = 800, n_test: int = 400,
                      n_classes: int = 10, n_features: int = 13,
                      length_range: tuple[int, int] = (4, 93),
                      signal: float = 0.6) -> tuple[Path, Path]:
    """Write SpokenArabicDigits_TRAIN.ts / _TEST.ts (sktime-style text)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patterns = rng.choice([-1.0, 1.0], size=(n_classes, n_features))
    lo, hi = length_range
    header = [
        "@problemName SpokenLike",
        "@timeStamps false",
        "@missing false",
        f"@dimensions {n_features}",
        "@equalLength false",
        "@classLabel true " + " ".join(str(c) for c in range(n_classes)),
        "@data",
    ]

    def split(n: int, path: Path) -> Path:
        labels = np.arange(n) % n_classes
        labels = labels[rng.permutation(n)]
        lines = list(header)
        for lab in labels:
            t_len = int(rng.integers(lo, hi + 1))
            x = signal * patterns[lab][None, :] + \
                rng.standard_normal((t_len, n_features))
            dims = [",".join(f"{v:.6f}" for v in x[:, f]) for f in range(n_features)]
            lines.append(":".join(dims) + f":{lab}")
        path.write_text("\n".join(lines) + "\n")
        return path

    return (split(n_train, directory / "SpokenArabicDigits_TRAIN.ts"),
            split(n_test, directory / "SpokenArabicDigits_TEST.ts"))
