"""Online trainer: join features with labels, decide when to retrain, publish envelopes.

Tree ensembles have no weights to fine-tune, so each retrain grows a fresh
model from a reservoir of past samples plus the samples that arrived since
the previous retrain, the latter duplicated ``recency_weight`` times.
"""

from __future__ import annotations

import threading
from collections import Counter, deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .core import ClassLabel, FlowKey
from .errors import EmptyDataset
from .features import FeatureVector
from .forest import Dataset, TrainParams, serialize_model, train_forest, train_tree
from .oracle import LabelEmission
from .pipeline import BatchItem
from .rng import SplitMix64, derive_seed


@dataclass(frozen=True)
class RetrainPolicy:
    min_new_samples: int = 500
    accuracy_floor: float = 0.90
    accuracy_window: int = 200
    min_interval_s: float = 10.0
    recency_weight: int = 2

    def __post_init__(self) -> None:
        if self.min_new_samples < 1:
            raise ValueError("min_new_samples must be >= 1")
        if not 0.0 <= self.accuracy_floor <= 1.0:
            raise ValueError("accuracy_floor must be in [0, 1]")
        if self.recency_weight < 1:
            raise ValueError("recency_weight must be >= 1")
        if self.accuracy_window < 1 or self.min_interval_s < 0:
            raise ValueError("accuracy_window must be >= 1 and min_interval_s >= 0")


class LabeledSample(NamedTuple):
    features: tuple[float, ...]
    label: ClassLabel
    flow: FlowKey
    window_index: int
    joined_at_us: int
    predicted: Optional[ClassLabel] = None


class ReplayBuffer:
    """Reservoir (Algorithm R) over every sample ever added.

    The trainer folds new samples in after each retrain so they are not
    counted twice in the next training set.
    """

    def __init__(self, capacity: int = 5000, seed: int = 0) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.samples: list = []
        self.seen = 0
        self._rng = SplitMix64(seed)

    def add(self, sample) -> None:
        self.seen += 1
        if len(self.samples) < self.capacity:
            self.samples.append(sample)
        else:
            j = self._rng.randbelow(self.seen)
            if j < self.capacity:
                self.samples[j] = sample

    def extend(self, samples: Iterable) -> None:
        for s in samples:
            self.add(s)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TrainerState:
    new_samples: int
    moving_accuracy: Optional[float]  # None until the accuracy window is full
    last_retrain_us: Optional[int]


def should_retrain(policy: RetrainPolicy, state: TrainerState, now_us: int) -> tuple[bool, str]:
    """Whether to retrain now, and why.

    The minimum interval is absolute; past it, either trigger suffices:
    ``batch`` (enough new samples) or ``drift`` (moving accuracy under the floor).
    """
    if state.last_retrain_us is not None and now_us - state.last_retrain_us < policy.min_interval_s * 1e6:
        return False, "interval"
    fired = []
    if state.new_samples >= policy.min_new_samples:
        fired.append("batch")
    if state.moving_accuracy is not None and state.moving_accuracy < policy.accuracy_floor:
        fired.append("drift")
    if not fired:
        return False, "none"
    return True, "+".join(fired)


def training_set(new: Sequence[LabeledSample], replay: Sequence[LabeledSample], recency_weight: int) -> Dataset:
    rows = list(replay) + list(new)
    if not rows:
        raise EmptyDataset("no samples to train on")
    X = np.array([s.features for s in rows], dtype=np.float64)
    y = np.array([int(s.label) for s in rows], dtype=np.int64)
    w = np.ones(len(rows), dtype=np.int64)
    w[len(replay):] = recency_weight
    return Dataset(X, y, w)


def retrain(
    current_version: int,
    new: Sequence[LabeledSample],
    replay: Union[ReplayBuffer, Sequence[LabeledSample]],
    params: TrainParams,
    policy: RetrainPolicy,
    kind: str = "rf",
) -> bytes:
    """Train a fresh model and wrap it in an envelope at ``current_version + 1``."""
    replay_samples = replay.samples if isinstance(replay, ReplayBuffer) else replay
    data = training_set(new, replay_samples, policy.recency_weight)
    version = current_version + 1
    fresh = replace(params, seed=derive_seed(params.seed, version))
    if kind == "dt":
        model = train_tree(data, fresh)
    elif kind == "rf":
        model = train_forest(data, fresh)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return serialize_model(model, version)


@dataclass
class JoinStats:
    joined: int = 0
    pending: int = 0
    expired: int = 0


class OnlineTrainer:
    def __init__(
        self,
        params: TrainParams = TrainParams(),
        policy: RetrainPolicy = RetrainPolicy(),
        kind: str = "rf",
        version: int = 0,
        label_ttl_us: int = 60_000_000,
        replay_capacity: int = 5000,
        seed: int = 0,
        start_us: Optional[int] = None,
    ) -> None:
        self.params = params
        self.policy = policy
        self.kind = kind
        self.version = version
        self.label_ttl_us = label_ttl_us
        self.replay = ReplayBuffer(replay_capacity, derive_seed(seed, 0x5EED))
        self.new: list[LabeledSample] = []
        self.labels: dict[FlowKey, ClassLabel] = {}
        self.pending: dict[FlowKey, list[tuple[int, BatchItem]]] = {}
        self.correct = deque(maxlen=policy.accuracy_window)
        self.stats = JoinStats()
        self.counters: Counter = Counter()
        self.last_retrain_us = start_us
        self._busy = threading.Lock()
        self._executor: Optional[ThreadPoolExecutor] = None
        self._inflight: Optional[Future] = None

    def _join(self, item: BatchItem, label: ClassLabel, now_us: int) -> None:
        fv, decision = item
        predicted = decision.label if decision is not None else None
        sample = LabeledSample(fv.values, label, fv.flow, fv.window_index, now_us, predicted)
        self.new.append(sample)
        if predicted is not None:
            self.correct.append(predicted == label)
        self.stats.joined += 1

    def ingest(
        self,
        features: Iterable[Union[BatchItem, FeatureVector]],
        labels: Iterable[LabelEmission] = (),
        now_us: int = 0,
    ) -> JoinStats:
        """Join a feature batch and a label batch; returns the cumulative join stats."""
        for e in labels:
            known = self.labels.get(e.flow)
            if known == e.label:
                self.counters["duplicate_labels"] += 1
                continue
            self.labels[e.flow] = e.label
            for _, item in self.pending.pop(e.flow, ()):
                self._join(item, e.label, now_us)
        for item in features:
            if isinstance(item, FeatureVector):
                item = BatchItem(item, None)
            label = self.labels.get(item.features.flow)
            if label is not None:
                self._join(item, label, now_us)
            else:
                self.pending.setdefault(item.features.flow, []).append((now_us, item))
        self._expire(now_us)
        self.stats.pending = sum(len(v) for v in self.pending.values())
        return self.stats

    def _expire(self, now_us: int) -> None:
        for flow in list(self.pending):
            keep = [(t, it) for t, it in self.pending[flow] if now_us - t <= self.label_ttl_us]
            self.stats.expired += len(self.pending[flow]) - len(keep)
            if keep:
                self.pending[flow] = keep
            else:
                del self.pending[flow]

    @property
    def moving_accuracy(self) -> Optional[float]:
        if len(self.correct) < self.correct.maxlen:
            return None
        return sum(self.correct) / len(self.correct)

    def state(self) -> TrainerState:
        return TrainerState(len(self.new), self.moving_accuracy, self.last_retrain_us)

    def should_retrain(self, now_us: int) -> tuple[bool, str]:
        return should_retrain(self.policy, self.state(), now_us)

    def retrain_now(self, now_us: int) -> bytes:
        """Retrain synchronously, advance the version and clear the new-sample set."""
        with self._busy:
            envelope = retrain(self.version, self.new, self.replay, self.params, self.policy, self.kind)
            self.version += 1
            self.replay.extend(self.new)
            self.new = []
            self.last_retrain_us = now_us
            return envelope

    def maybe_retrain(self, now_us: int) -> Optional[tuple[bytes, str]]:
        fire, reason = self.should_retrain(now_us)
        if not fire:
            return None
        return self.retrain_now(now_us), reason

    def retrain_async(self, now_us: int) -> Optional[Future]:
        """Start a background retrain unless one is already running (single flight)."""
        if self._inflight is not None and not self._inflight.done():
            return None
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="retrain")
        snapshot_new, snapshot_replay = list(self.new), list(self.replay.samples)
        version = self.version
        self.replay.extend(self.new)
        self.new = []
        self.last_retrain_us = now_us

        def job() -> bytes:
            with self._busy:
                env = retrain(version, snapshot_new, snapshot_replay, self.params, self.policy, self.kind)
                self.version = version + 1
                return env

        self._inflight = self._executor.submit(job)
        return self._inflight

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
