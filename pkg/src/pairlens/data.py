"""Paired datasets: synthetic generation, misalignment injection,
batch segmentation, subset location, and JSONL interchange.

A dataset is an ordered list of (text-feature, image-feature) pairs with
unique integer ids. All generation is a pure function of (config, seed);
the JSONL format round-trips bit-exactly via 17-significant-digit floats.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .errors import (
    DimensionMismatchError,
    InvalidConfigError,
    InvalidRatioError,
    InvalidSegError,
    ParseError,
    TooFewPairsError,
    UnknownIdError,
)
from .numerics import Rng

JSONL_VERSION = 1


def round_half_up(x: float) -> int:
    """round(2.5) -> 3, unlike banker's rounding."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Pair:
    id: int
    text: np.ndarray
    image: np.ndarray
    misaligned: bool | None = None

    def __post_init__(self):
        for name in ("text", "image"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise DimensionMismatchError(f"pair {self.id}: {name} must be 1-d")
            if not np.all(np.isfinite(arr)):
                raise InvalidConfigError(f"pair {self.id}: {name} has NaN/Inf")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


class PairedDataset:
    """Immutable ordered collection of pairs with fixed feature dims."""

    def __init__(self, pairs, d_t: int | None = None, d_i: int | None = None,
                 provenance: dict | None = None):
        self.pairs: tuple[Pair, ...] = tuple(pairs)
        if self.pairs:
            d_t = d_t if d_t is not None else self.pairs[0].text.shape[0]
            d_i = d_i if d_i is not None else self.pairs[0].image.shape[0]
        elif d_t is None or d_i is None:
            raise InvalidConfigError("empty dataset needs explicit d_t and d_i")
        self.d_t = int(d_t)
        self.d_i = int(d_i)
        self.provenance = dict(provenance or {})
        seen: set[int] = set()
        for pair in self.pairs:
            if pair.id in seen:
                raise InvalidConfigError(f"duplicate pair id {pair.id}")
            seen.add(pair.id)
            if pair.text.shape[0] != self.d_t:
                raise DimensionMismatchError(
                    f"pair {pair.id}: text dim {pair.text.shape[0]} != {self.d_t}")
            if pair.image.shape[0] != self.d_i:
                raise DimensionMismatchError(
                    f"pair {pair.id}: image dim {pair.image.shape[0]} != {self.d_i}")
        self._row_of = {pair.id: row for row, pair in enumerate(self.pairs)}
        n = len(self.pairs)
        self._text = np.zeros((n, self.d_t))
        self._image = np.zeros((n, self.d_i))
        for row, pair in enumerate(self.pairs):
            self._text[row] = pair.text
            self._image[row] = pair.image
        self._text.flags.writeable = False
        self._image.flags.writeable = False

    def __len__(self) -> int:
        return len(self.pairs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairedDataset):
            return NotImplemented
        return (
            self.d_t == other.d_t
            and self.d_i == other.d_i
            and len(self) == len(other)
            and all(
                a.id == b.id
                and a.misaligned == b.misaligned
                and np.array_equal(a.text, b.text)
                and np.array_equal(a.image, b.image)
                for a, b in zip(self.pairs, other.pairs)
            )
        )

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(pair.id for pair in self.pairs)

    def by_id(self, pair_id: int) -> Pair:
        try:
            return self.pairs[self._row_of[pair_id]]
        except KeyError:
            raise UnknownIdError(f"unknown pair id {pair_id}") from None

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row_of[i] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise UnknownIdError(f"unknown pair id {exc.args[0]}") from None

    def features(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """(text-matrix, image-matrix) for the given ids, in the given order."""
        rows = self.rows(ids)
        return self._text[rows], self._image[rows]


@dataclass(frozen=True)
class SyntheticConfig:
    """Shared-latent generator: text = A z + sigma * noise, image = B z + sigma * noise."""

    n: int
    latent_dim: int
    d_t: int
    d_i: int
    noise_sigma: float = 0.1
    misalign_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 0 or self.latent_dim < 1 or self.d_t < 1 or self.d_i < 1:
            raise InvalidConfigError("n >= 0 and positive dims required")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.misalign_ratio < 1.0:
            raise InvalidConfigError("misalign_ratio must be in [0, 1)")
        k = round_half_up(self.misalign_ratio * self.n)
        if k >= self.n and self.n > 0:
            raise InvalidConfigError("misalign count must stay below n")
        if self.misalign_ratio > 0 and k < 2:
            raise InvalidConfigError(
                "misalign_ratio too small: a feature permutation without "
                "fixed points needs at least 2 selected pairs")


def generate_synthetic(cfg: SyntheticConfig) -> PairedDataset:
    """Draw a paired dataset from the shared-latent model, deterministically."""
    rng = Rng(cfg.seed).generator(0)
    map_t = rng.standard_normal((cfg.d_t, cfg.latent_dim))
    map_i = rng.standard_normal((cfg.d_i, cfg.latent_dim))
    latents = rng.standard_normal((cfg.n, cfg.latent_dim))
    text = latents @ map_t.T + cfg.noise_sigma * rng.standard_normal((cfg.n, cfg.d_t))
    image = latents @ map_i.T + cfg.noise_sigma * rng.standard_normal((cfg.n, cfg.d_i))
    pairs = [
        Pair(id=i, text=text[i], image=image[i], misaligned=False)
        for i in range(cfg.n)
    ]
    ds = PairedDataset(pairs, d_t=cfg.d_t, d_i=cfg.d_i,
                       provenance={"generator": "shared-latent", **_cfg_dict(cfg)})
    if cfg.misalign_ratio > 0:
        ds = inject_misalignment(ds, cfg.misalign_ratio, seed=cfg.seed)
    return ds


def _cfg_dict(cfg: SyntheticConfig) -> dict:
    return {
        "n": cfg.n, "latent_dim": cfg.latent_dim, "d_t": cfg.d_t, "d_i": cfg.d_i,
        "noise_sigma": cfg.noise_sigma, "misalign_ratio": cfg.misalign_ratio,
        "seed": cfg.seed,
    }


def inject_misalignment(ds: PairedDataset, ratio: float, seed: int) -> PairedDataset:
    """Permute image features among round(ratio * n) pairs, no fixed points.

    The permuted pairs are flagged misaligned; everything else is untouched.
    The multiset of image feature vectors is preserved.
    """
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatioError("ratio must be in [0, 1)")
    if ratio == 0.0:
        return ds
    n = len(ds)
    k = round_half_up(ratio * n)
    if k < 2:
        raise InvalidRatioError(
            f"round(ratio * n) = {k}: a derangement needs at least 2 pairs")
    if k >= n:
        raise InvalidRatioError("cannot misalign every pair")
    rng = Rng(seed).generator(1)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    perm = _derangement(k, rng)
    source = {int(chosen[j]): int(chosen[perm[j]]) for j in range(k)}
    pairs = []
    for row, pair in enumerate(ds.pairs):
        if row in source:
            donor = ds.pairs[source[row]]
            pairs.append(Pair(id=pair.id, text=pair.text, image=donor.image,
                              misaligned=True))
        else:
            pairs.append(pair)
    prov = dict(ds.provenance)
    prov["misalignment"] = {"ratio": ratio, "seed": seed, "count": k}
    return PairedDataset(pairs, d_t=ds.d_t, d_i=ds.d_i, provenance=prov)


def _derangement(k: int, rng: np.random.Generator) -> np.ndarray:
    # rejection sampling; success probability ~ 1/e per draw
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


@dataclass(frozen=True)
class BatchSegmentation:
    """Partition of pair ids into ordered batches."""

    batches: tuple[tuple[int, ...], ...]
    batch_size: int | None = None
    seed: int | None = None

    def __post_init__(self):
        seen: set[int] = set()
        for batch in self.batches:
            for pair_id in batch:
                if pair_id in seen:
                    raise InvalidSegError(f"pair id {pair_id} in two batches")
                seen.add(pair_id)

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(i for batch in self.batches for i in batch)

    def batch_of(self, pair_id: int) -> tuple[int, int]:
        """(batch index, position within batch) of a pair id."""
        for m, batch in enumerate(self.batches):
            if pair_id in batch:
                return m, batch.index(pair_id)
        raise UnknownIdError(f"pair id {pair_id} not in segmentation")

    def drop_ids(self, removed) -> "BatchSegmentation":
        """Shrink batches in place; a batch left with < 2 pairs merges into
        its predecessor (or successor for the first batch)."""
        removed = set(int(i) for i in removed)
        shrunk = [[i for i in batch if i not in removed] for batch in self.batches]
        shrunk = [batch for batch in shrunk if batch]
        merged: list[list[int]] = []
        for batch in shrunk:
            if len(batch) >= 2:
                merged.append(batch)
            elif merged:
                merged[-1].extend(batch)
            else:
                merged.append(batch)  # first batch; fixed up below
        if len(merged) >= 2 and len(merged[0]) < 2:
            merged[1] = merged[0] + merged[1]
            merged.pop(0)
        # a lone remaining singleton stays: its batch loss is identically 0
        return BatchSegmentation(
            batches=tuple(tuple(batch) for batch in merged),
            batch_size=self.batch_size, seed=self.seed)


@dataclass(frozen=True)
class Seg:
    """Located subset: (batch index m, positions E_m within batch m)."""

    entries: tuple[tuple[int, tuple[int, ...]], ...]

    @property
    def batch_indices(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.entries)

    def __len__(self) -> int:
        return sum(len(positions) for _, positions in self.entries)

    def validate(self, seg: BatchSegmentation) -> None:
        for m, positions in self.entries:
            if not 0 <= m < len(seg.batches):
                raise InvalidSegError(f"batch index {m} out of range")
            size = len(seg.batches[m])
            if len(set(positions)) != len(positions):
                raise InvalidSegError(f"batch {m}: duplicate positions")
            for pos in positions:
                if not 0 <= pos < size:
                    raise InvalidSegError(f"batch {m}: position {pos} out of range")


def make_segmentation(ds: PairedDataset, batch_size: int, seed: int) -> BatchSegmentation:
    """Shuffle ids by seed and cut into consecutive batches of batch_size.

    The final remainder batch is kept when it has >= 2 pairs, otherwise its
    pairs join the previous batch (1-pair batches have identically zero
    contrastive loss).
    """
    if batch_size < 2:
        raise InvalidConfigError("batch_size must be >= 2")
    n = len(ds)
    if n < 2:
        raise TooFewPairsError(f"need at least 2 pairs, got {n}")
    ids = np.array(ds.ids)
    rng = Rng(seed).generator(2)
    shuffled = [int(i) for i in ids[rng.permutation(n)]]
    batches = [shuffled[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1].extend(tail)
    return BatchSegmentation(
        batches=tuple(tuple(batch) for batch in batches),
        batch_size=batch_size, seed=seed)


def locate(ds: PairedDataset, seg: BatchSegmentation, subset_ids) -> Seg:
    """Positions of subset ids inside the segmentation, grouped per batch."""
    subset = set(int(i) for i in subset_ids)
    for pair_id in subset:
        ds.by_id(pair_id)
    position: dict[int, tuple[int, int]] = {}
    for m, batch in enumerate(seg.batches):
        for pos, pair_id in enumerate(batch):
            if pair_id in subset:
                position[pair_id] = (m, pos)
    missing = subset - set(position)
    if missing:
        raise UnknownIdError(f"ids not present in segmentation: {sorted(missing)}")
    grouped: dict[int, list[int]] = {}
    for m, pos in position.values():
        grouped.setdefault(m, []).append(pos)
    entries = tuple(
        (m, tuple(sorted(grouped[m]))) for m in sorted(grouped)
    )
    return Seg(entries=entries)


# --- JSONL interchange -------------------------------------------------------

def save_jsonl(ds: PairedDataset, path: str | os.PathLike) -> None:
    """First line is a header {"d_t", "d_i", "version"}; one pair per line."""
    lines = [jsonio.dumps({"d_t": ds.d_t, "d_i": ds.d_i, "version": JSONL_VERSION})]
    for pair in ds.pairs:
        row: dict = {"id": pair.id, "text": pair.text, "image": pair.image}
        if pair.misaligned is not None:
            row["misaligned"] = pair.misaligned
        lines.append(jsonio.dumps(row))
    jsonio.atomic_write_text(path, "\n".join(lines) + "\n")


def load_jsonl(path: str | os.PathLike) -> PairedDataset:
    import json

    with open(path, "r", encoding="utf-8") as handle:
        raw_lines = handle.read().splitlines()
    lines = [(no + 1, line) for no, line in enumerate(raw_lines) if line.strip()]
    if not lines:
        raise ParseError("missing header row", line=1)
    header_no, header_line = lines[0]
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON: {exc.msg}", line=header_no) from exc
    if not isinstance(header, dict) or "d_t" not in header or "d_i" not in header:
        raise ParseError("header must carry d_t and d_i", line=header_no)
    if header.get("version") != JSONL_VERSION:
        raise ParseError(f"unsupported version {header.get('version')!r}",
                         line=header_no)
    d_t, d_i = int(header["d_t"]), int(header["d_i"])
    pairs = []
    for no, line in lines[1:]:
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad JSON: {exc.msg}", line=no) from exc
        if not isinstance(row, dict) or "id" not in row:
            raise ParseError("pair row must carry an id", line=no)
        text = np.asarray(row.get("text", []), dtype=np.float64)
        image = np.asarray(row.get("image", []), dtype=np.float64)
        if text.shape != (d_t,):
            raise DimensionMismatchError(
                f"line {no}: text length {text.shape[0] if text.ndim == 1 else '?'} != d_t={d_t}")
        if image.shape != (d_i,):
            raise DimensionMismatchError(
                f"line {no}: image length {image.shape[0] if image.ndim == 1 else '?'} != d_i={d_i}")
        pairs.append(Pair(id=int(row["id"]), text=text, image=image,
                          misaligned=row.get("misaligned")))
    return PairedDataset(pairs, d_t=d_t, d_i=d_i,
                         provenance={"source": os.fspath(path)})
