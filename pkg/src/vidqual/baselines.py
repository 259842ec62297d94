"""Comparison classifiers: nearest average bit rate, and LZ78 probability trees."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codebook import Codebook
from .errors import EmptyModel, InsufficientData, InvariantViolation


@dataclass(frozen=True)
class NaiveModel:
    averages: Mapping[int, float]

    def __post_init__(self):
        if any(v <= 0 for v in self.averages.values()):
            raise InvariantViolation("naive averages must be positive")

    def to_dict(self) -> dict:
        return {"kind": "naive", "averages": {str(k): v for k, v in self.averages.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> NaiveModel:
        return cls({int(k): float(v) for k, v in d["averages"].items()})


def fit_naive(values_by_label: Mapping[int, Iterable[float]]) -> NaiveModel:
    """Per-quality mean of every training value."""
    avgs = {}
    for label in sorted(values_by_label):
        v = np.asarray(list(values_by_label[label]), dtype=float)
        if v.size:
            avgs[label] = float(v.mean())
    return NaiveModel(avgs)


def naive_classify(value: float, nm: NaiveModel) -> int:
    if not nm.averages:
        raise EmptyModel("naive model has no averages")
    best, best_d = None, math.inf
    for label in sorted(nm.averages):
        d = abs(value - nm.averages[label])
        if d < best_d:
            best, best_d = label, d
    return best


class Lz78Node:
    __slots__ = ("children", "count", "total")

    def __init__(self) -> None:
        self.children: dict[int, Lz78Node] = {}
        self.count = 0   # times this node was entered
        self.total = 0   # sum of children's counts

    def to_list(self) -> list:
        return [self.count, {str(s): c.to_list() for s, c in self.children.items()}]

    @classmethod
    def from_list(cls, data: list) -> Lz78Node:
        node = cls()
        node.count = int(data[0])
        for s, sub in data[1].items():
            child = cls.from_list(sub)
            node.children[int(s)] = child
            node.total += child.count
        return node


@dataclass
class Lz78Tree:
    root: Lz78Node = field(default_factory=Lz78Node)
    phrase_count: int = 0

    def node_count(self) -> int:
        n, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            n += 1
            stack.extend(node.children.values())
        return n

    def phrases(self) -> list[tuple]:
        out, stack = [], [((), self.root)]
        while stack:
            path, node = stack.pop()
            if path:
                out.append(path)
            for s, c in node.children.items():
                stack.append((path + (s,), c))
        return sorted(out)

    def to_dict(self) -> dict:
        return {"phrase_count": self.phrase_count, "root": self.root.to_list()}

    @classmethod
    def from_dict(cls, d: dict) -> Lz78Tree:
        return cls(Lz78Node.from_list(d["root"]), int(d["phrase_count"]))


def lz78_parse(seq: Iterable[int]) -> Lz78Tree:
    """Incremental LZ78 parse with visit counts on every traversed edge.

    A trailing partial phrase updates counts but adds no node.
    """
    tree = Lz78Tree()
    node = tree.root
    for s in seq:
        child = node.children.get(s)
        node.total += 1
        if child is None:
            child = node.children[s] = Lz78Node()
            child.count = 1
            tree.phrase_count += 1
            node = tree.root
        else:
            child.count += 1
            node = child
    return tree


def lz78_log_likelihood(tree: Lz78Tree, seq: Iterable[int], alphabet_size: int) -> float:
    """Natural-log probability of ``seq`` under add-one smoothed tree counts.

    Falling off the tree charges the smoothed mass of the unseen symbol and
    restarts the walk at the root.
    """
    if alphabet_size < 1:
        raise ValueError("alphabet_size must be >= 1")
    ll = 0.0
    root = tree.root
    node = root
    for s in seq:
        child = node.children.get(s)
        if child is None:
            ll -= math.log(node.total + alphabet_size)
            node = root
        else:
            ll += math.log((child.count + 1) / (node.total + alphabet_size))
            node = child
    return ll


def lz78_classify(seq: Sequence[int], trees: Mapping[int, Sequence[Lz78Tree]],
                  alphabet_size: int) -> int:
    """Label of the single most likely training tree; ties go to the lower label."""
    if not trees or not any(trees.values()):
        raise EmptyModel("no LZ78 trees")
    best, best_ll = None, -math.inf
    for label in sorted(trees):
        for tree in trees[label]:
            ll = lz78_log_likelihood(tree, seq, alphabet_size)
            if ll > best_ll:
                best, best_ll = label, ll
    return best


def time_deltas(timestamps: Sequence[float]) -> list[float]:
    if len(timestamps) < 2:
        raise InsufficientData("need at least two events for time differences")
    return [b - a for a, b in zip(timestamps, timestamps[1:])]


def time_diff_features(timestamps: Sequence[float], cb: Codebook) -> list[int]:
    """Inter-event time deltas quantized through a codebook trained on deltas."""
    return cb.quantize_many(time_deltas(timestamps))


@dataclass
class Lz78Model:
    codebook: Codebook
    trees: dict  # label -> list[Lz78Tree]
    feature: str = "bitrate"

    @property
    def alphabet_size(self) -> int:
        return self.codebook.k

    def classify(self, symbols: Sequence[int]) -> int:
        return lz78_classify(symbols, self.trees, self.alphabet_size)

    def to_dict(self) -> dict:
        return {"kind": "lz78", "feature": self.feature,
                "centers": list(self.codebook.centers),
                "trees": {str(y): [t.to_dict() for t in ts] for y, ts in self.trees.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> Lz78Model:
        return cls(Codebook(tuple(d["centers"])),
                   {int(y): [Lz78Tree.from_dict(t) for t in ts] for y, ts in d["trees"].items()},
                   d.get("feature", "bitrate"))


def fit_lz78(traces: Iterable[tuple[int, Sequence[float]]], cb: Codebook,
             feature: str = "bitrate") -> Lz78Model:
    """One tree per training trace over the shared codebook alphabet."""
    trees: dict[int, list] = {}
    for label, values in traces:
        trees.setdefault(label, []).append(lz78_parse(cb.quantize_many(values)))
    return Lz78Model(cb, trees, feature)
