"""Speaker-independent fold plans and the speaker-ID probe split."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..rng import substream


@dataclass(frozen=True)
class Fold:
    index: int
    test: tuple[str, ...]
    dev: tuple[str, ...]
    train: tuple[str, ...]


@dataclass
class FoldPlan:
    """Stratified assignment of speakers to folds.

    Fold ``k`` tests on group ``k``, uses group ``k+1`` (cyclically) for early
    stopping and trains on the rest.
    """

    groups: list[list[str]]
    labels: dict[str, str]
    seed: int = 0

    @property
    def n_folds(self) -> int:
        return len(self.groups)

    def fold(self, k: int) -> Fold:
        if not 0 <= k < self.n_folds:
            raise IndexError(f"fold {k} out of range for {self.n_folds} folds")
        dev_k = (k + 1) % self.n_folds
        train = sorted(s for j, g in enumerate(self.groups) if j not in (k, dev_k) for s in g)
        return Fold(k, tuple(self.groups[k]), tuple(self.groups[dev_k]), tuple(train))

    def folds(self) -> list[Fold]:
        return [self.fold(k) for k in range(self.n_folds)]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "groups": self.groups, "labels": dict(sorted(self.labels.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls([list(g) for g in d["groups"]], dict(d["labels"]), int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_folds(labels: dict[str, str], n_folds: int = 10, seed: int = 0) -> FoldPlan:
    """Deal each class's shuffled speakers round-robin over the folds.

    The second class continues where the first stopped, so fold sizes differ
    by at most one and classes are spread as evenly as the counts allow.
    """
    if n_folds < 3:
        raise ValueError("need at least 3 folds (test, dev and training groups)")
    if len(labels) < 2 * n_folds:
        raise ValueError(f"{len(labels)} speakers cannot form {n_folds} stratified folds (need {2 * n_folds})")
    rng = substream(seed, "folds")
    groups: list[list[str]] = [[] for _ in range(n_folds)]
    pos = 0
    for cls in sorted(set(labels.values())):
        members = sorted(s for s, lab in labels.items() if lab == cls)
        for s in rng.permutation(members):
            groups[pos % n_folds].append(str(s))
            pos += 1
    return FoldPlan([sorted(g) for g in groups], dict(labels), seed)


def check_plan(plan: FoldPlan) -> None:
    """Raise AssertionError unless the plan partitions the speakers and is stratified."""
    everyone = set(plan.labels)
    seen: set[str] = set()
    for g in plan.groups:
        assert not (seen & set(g)), "speaker assigned to two folds"
        seen |= set(g)
    assert seen == everyone, "folds do not cover the speaker set"
    sizes = [len(g) for g in plan.groups]
    assert max(sizes) - min(sizes) <= 1, f"unbalanced fold sizes {sizes}"
    for cls in set(plan.labels.values()):
        counts = [sum(plan.labels[s] == cls for s in g) for g in plan.groups]
        assert max(counts) - min(counts) <= 1, f"class {cls} unevenly spread: {counts}"
    for f in plan.folds():
        assert not (set(f.test) & set(f.dev)) and not (set(f.test) & set(f.train))
        assert not (set(f.dev) & set(f.train))
        assert len(f.dev) in (len(f.test) - 1, len(f.test), len(f.test) + 1)


@dataclass
class ProbeSplit:
    """Per-speaker utterance partition into probe train / dev / test."""

    speakers: list[str]  # class index = position in this list
    train: dict[str, list[str]] = field(default_factory=dict)
    dev: dict[str, list[str]] = field(default_factory=dict)
    test: dict[str, list[str]] = field(default_factory=dict)

    def part(self, name: str) -> dict[str, list[str]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def probe_split(utterances: dict[str, list[str]], seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> ProbeSplit:
    """Split every speaker's utterances 60/20/20; each part gets at least one."""
    split = ProbeSplit(sorted(utterances))
    for spk in split.speakers:
        utts = sorted(utterances[spk])
        n = len(utts)
        if n < 3:
            raise ValueError(f"speaker {spk} has {n} utterance(s); the probe split needs at least 3")
        n_dev = max(1, int(round(fractions[1] * n)))
        n_test = max(1, int(round(fractions[2] * n)))
        n_train = n - n_dev - n_test
        if n_train < 1:
            n_train, n_dev, n_test = 1, 1, n - 2
        idx = substream(seed, "probe_split", split.speakers.index(spk)).permutation(n)
        order = [utts[i] for i in idx]
        split.train[spk] = sorted(order[:n_train])
        split.dev[spk] = sorted(order[n_train : n_train + n_dev])
        split.test[spk] = sorted(order[n_train + n_dev :])
    return split


def check_probe_split(split: ProbeSplit, utterances: dict[str, list[str]]) -> None:
    for spk in split.speakers:
        tr, dv, te = set(split.train[spk]), set(split.dev[spk]), set(split.test[spk])
        assert tr and dv and te, f"speaker {spk} missing from a probe partition"
        assert not (tr & dv) and not (tr & te) and not (dv & te), f"overlapping probe utterances for {spk}"
        assert tr | dv | te == set(utterances[spk]), f"probe split of {spk} does not cover its utterances"
