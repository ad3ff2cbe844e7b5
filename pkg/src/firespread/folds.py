"""
Cross-validation protocols as explicit, serializable fold plans.

Granularity of a plan:
    year   -> train_years / val_years / test_years   (loyo, wsts_plus)
    event  -> train_events / val_events / test_events (random_event)
    sample -> train_samples / test_samples, validation shared (cross_year)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import KFold

from . import config_store
from .core_data import WindowSample, sample_key
from .errors import ProtocolError

PROTOCOLS = ("loyo", "wsts_plus", "random_event", "cross_year")
_GRANULARITY = {"loyo": "year", "wsts_plus": "year", "random_event": "event", "cross_year": "sample"}


@dataclass(frozen=True)
class FoldPlan:
    fold_id: int
    protocol: str
    train_years: Tuple[int, ...] = ()
    val_years: Tuple[int, ...] = ()
    test_years: Tuple[int, ...] = ()
    train_events: Tuple[str, ...] = ()
    val_events: Tuple[str, ...] = ()
    test_events: Tuple[str, ...] = ()
    train_samples: Tuple[str, ...] = ()
    val_samples: Tuple[str, ...] = ()
    test_samples: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol!r}")
        train, val, test = self.splits()
        require_val = self.granularity != "sample"
        if not train or not test or (require_val and not val):
            raise ProtocolError(f"fold {self.fold_id}: every split must be non-empty")
        if set(train) & set(val) or set(train) & set(test) or set(val) & set(test):
            raise ProtocolError(f"fold {self.fold_id}: train/val/test overlap")

    @property
    def granularity(self) -> str:
        return _GRANULARITY[self.protocol]

    def splits(self) -> Tuple[tuple, tuple, tuple]:
        if self.granularity == "year":
            return self.train_years, self.val_years, self.test_years
        if self.granularity == "event":
            return self.train_events, self.val_events, self.test_events
        return self.train_samples, self.val_samples, self.test_samples

    def to_dict(self) -> Dict[str, object]:
        prefix = {"year": "years", "event": "events", "sample": "samples"}[self.granularity]
        train, val, test = self.splits()
        return {
            "fold_id": self.fold_id,
            "protocol": self.protocol,
            f"train_{prefix}": list(train),
            f"val_{prefix}": list(val),
            f"test_{prefix}": list(test),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "FoldPlan":
        kwargs: Dict[str, object] = {"fold_id": int(data["fold_id"]), "protocol": str(data["protocol"])}
        for split in ("train", "val", "test"):
            if f"{split}_years" in data:
                kwargs[f"{split}_years"] = tuple(int(y) for y in data[f"{split}_years"])
            if f"{split}_events" in data:
                kwargs[f"{split}_events"] = tuple(str(e) for e in data[f"{split}_events"])
            if f"{split}_samples" in data:
                kwargs[f"{split}_samples"] = tuple(str(s) for s in data[f"{split}_samples"])
        return cls(**kwargs)


@dataclass(frozen=True)
class CrossYearProtocol:
    """Per-year plans plus the validation set shared by every year's run."""
    plans: Tuple[FoldPlan, ...]
    shared_validation: Tuple[str, ...]
    val_quota: int
    train_cap: int

    def plan_for(self, year: int) -> FoldPlan:
        for plan in self.plans:
            if plan.test_years == (year,):
                return plan
        raise KeyError(year)

    def to_dict(self) -> Dict[str, object]:
        return {
            "protocol": "cross_year",
            "val_quota": self.val_quota,
            "train_cap": self.train_cap,
            "shared_validation": list(self.shared_validation),
            "plans": [dict(p.to_dict(), year=p.test_years[0]) for p in self.plans],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "CrossYearProtocol":
        plans = []
        for entry in data["plans"]:
            year = int(entry["year"])
            plan = FoldPlan.from_dict(entry)
            plans.append(_with_year(plan, year))
        return cls(tuple(plans), tuple(data["shared_validation"]), int(data["val_quota"]), int(data["train_cap"]))


def _with_year(plan: FoldPlan, year: int) -> FoldPlan:
    return FoldPlan(
        fold_id=plan.fold_id,
        protocol=plan.protocol,
        train_years=(year,),
        test_years=(year,),
        train_samples=plan.train_samples,
        val_samples=plan.val_samples,
        test_samples=plan.test_samples,
    )


# =============================
# Year-based protocols
# =============================

def loyo_folds(years: Sequence[int]) -> List[FoldPlan]:
    """Every ordered (val, test) year pair; the remaining years train."""
    years = list(years)
    if len(set(years)) != len(years):
        raise ProtocolError("years must be unique")
    if len(years) < 3:
        raise ProtocolError(f"leave-one-year-out needs at least 3 years, got {len(years)}")
    plans: List[FoldPlan] = []
    for val in years:
        for test in years:
            if val == test:
                continue
            train = tuple(y for y in years if y not in (val, test))
            plans.append(FoldPlan(len(plans), "loyo", train_years=train, val_years=(val,), test_years=(test,)))
    return plans


def wsts_plus_folds(years: Sequence[int]) -> List[FoldPlan]:
    """
    Consecutive-pair blocks; fold i tests block i, validates on block i+2 (mod B).
    """
    years = sorted(years)
    if len(years) % 2:
        raise ProtocolError(f"an even number of years is required, got {len(years)}")
    if any(b - a != 1 for a, b in zip(years, years[1:])):
        raise ProtocolError("years must be consecutive")
    blocks = [tuple(years[i : i + 2]) for i in range(0, len(years), 2)]
    if len(blocks) < 4:
        raise ProtocolError(f"at least 4 two-year blocks are required, got {len(blocks)}")
    plans: List[FoldPlan] = []
    for i, test in enumerate(blocks):
        val = blocks[(i + 2) % len(blocks)]
        train = tuple(y for block in blocks if block not in (test, val) for y in block)
        plans.append(FoldPlan(i, "wsts_plus", train_years=train, val_years=val, test_years=test))
    return plans


# =============================
# Event-based protocol
# =============================

def random_event_folds(events: Sequence[str], k: int, seed: int) -> List[FoldPlan]:
    """
    Shuffle events into k near-equal folds; fold i tests part i, validates on
    part i+1 (mod k) and trains on the rest.
    """
    events = list(events)
    if len(set(events)) != len(events):
        raise ProtocolError("event ids must be unique")
    if k < 2:
        raise ProtocolError(f"k must be >= 2, got {k}")
    if k > len(events):
        raise ProtocolError(f"k={k} exceeds the number of events ({len(events)})")
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    parts = [tuple(events[j] for j in sorted(test_idx)) for _, test_idx in splitter.split(np.arange(len(events)))]
    plans: List[FoldPlan] = []
    for i, test in enumerate(parts):
        val = parts[(i + 1) % k]
        train = tuple(e for j, part in enumerate(parts) if j not in (i, (i + 1) % k) for e in part)
        if not train:
            raise ProtocolError(f"k={k} leaves no training events")
        plans.append(FoldPlan(i, "random_event", train_events=train, val_events=val, test_events=test))
    return plans


# =============================
# Cross-year protocol
# =============================

def index_samples(samples: Iterable[WindowSample]) -> Dict[int, Dict[str, List[str]]]:
    """year -> event_id -> ordered sample keys."""
    index: Dict[int, Dict[str, List[str]]] = {}
    for sample in samples:
        index.setdefault(sample.year, {}).setdefault(sample.event_id, []).append(sample_key(sample))
    return {year: dict(sorted(events.items())) for year, events in sorted(index.items())}


def _held_out_events(sizes: List[Tuple[str, int]], quota: int) -> List[str]:
    """
    Event subset whose sample total reaches `quota` with the least surplus,
    always leaving at least one event out. Ties go to the first subset found
    in the (seeded) order of `sizes`.
    """
    ceiling = quota + max(s for _, s in sizes)
    reach: Dict[int, List[str]] = {0: []}
    for event, size in sizes:
        for total, chosen in sorted(reach.items(), reverse=True):
            new_total = total + size
            if new_total not in reach and new_total <= ceiling and len(chosen) + 1 < len(sizes):
                reach[new_total] = chosen + [event]
    feasible = sorted(t for t in reach if t >= quota)
    return reach[feasible[0]] if feasible else []


def cross_year_protocol(
    index: Dict[int, Dict[str, List[str]]], val_quota: int, train_cap: int, seed: int
) -> CrossYearProtocol:
    """
    For each year: a held-out block of exactly `val_quota` samples drawn from
    whole events (surplus of the last event discarded), used both as the year's
    test set and as its share of the shared validation set; the year's training
    set is min(train_cap, remaining) samples of the other events.
    """
    if val_quota < 1 or train_cap < 1:
        raise ProtocolError("val_quota and train_cap must be >= 1")
    if not index:
        raise ProtocolError("no samples to split")
    plans: List[FoldPlan] = []
    shared: List[str] = []
    for fold_id, (year, events) in enumerate(index.items()):
        total = sum(len(keys) for keys in events.values())
        if total <= val_quota:
            raise ProtocolError(f"year {year}: {total} samples cannot cover a quota of {val_quota}")
        rng = np.random.default_rng([seed, year])
        order = [list(events)[i] for i in rng.permutation(len(events))]
        held = _held_out_events([(e, len(events[e])) for e in order], val_quota)
        remaining_events = [e for e in order if e not in held]
        if not held or not remaining_events:
            raise ProtocolError(f"year {year}: no event split leaves training events after a quota of {val_quota}")
        held_keys = [k for e in held for k in events[e]][:val_quota]
        pool = [k for e in remaining_events for k in events[e]]
        take = min(train_cap, len(pool))
        train_keys = [pool[i] for i in sorted(rng.choice(len(pool), size=take, replace=False))]
        plans.append(
            FoldPlan(
                fold_id,
                "cross_year",
                train_years=(year,),
                test_years=(year,),
                train_samples=tuple(train_keys),
                test_samples=tuple(held_keys),
            )
        )
        shared.extend(held_keys)
    return CrossYearProtocol(tuple(plans), tuple(shared), val_quota, train_cap)


# =============================
# Applying and persisting plans
# =============================

def split_samples(
    samples: Sequence[WindowSample], plan: FoldPlan, shared_validation: Optional[Sequence[str]] = None
) -> Tuple[List[WindowSample], List[WindowSample], List[WindowSample]]:
    """Partition samples into (train, val, test) under a plan."""
    if plan.granularity == "year":
        key = lambda s: s.year  # noqa: E731
    elif plan.granularity == "event":
        key = lambda s: s.event_id  # noqa: E731
    else:
        key = sample_key
    train_ids, val_ids, test_ids = (set(ids) for ids in plan.splits())
    if plan.granularity == "sample" and shared_validation is not None:
        val_ids = set(shared_validation)
    train = [s for s in samples if key(s) in train_ids]
    val = [s for s in samples if key(s) in val_ids]
    test = [s for s in samples if key(s) in test_ids]
    return train, val, test


def save_plans(plans: Sequence[FoldPlan], directory: Path) -> List[Path]:
    directory = Path(directory)
    return [config_store.save_document(plan.to_dict(), directory / f"fold_{plan.fold_id:02d}.json") for plan in plans]


def load_plans(path: Path) -> List[FoldPlan]:
    """Load one plan file or every fold_*.json in a directory, ordered by fold id."""
    path = Path(path)
    files = sorted(path.glob("fold_*.json")) if path.is_dir() else [path]
    if not files:
        raise ProtocolError(f"{path}: no fold plans found")
    plans = []
    for file in files:
        doc = config_store.load_document(file)
        doc.pop("format_version", None)
        plans.append(FoldPlan.from_dict(doc))
    return sorted(plans, key=lambda p: p.fold_id)


def save_cross_year(protocol: CrossYearProtocol, path: Path) -> Path:
    return config_store.save_document(protocol.to_dict(), path)


def load_cross_year(path: Path) -> CrossYearProtocol:
    return CrossYearProtocol.from_dict(config_store.load_document(path))
