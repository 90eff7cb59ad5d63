"""Streaming adaptation loop: inference, memory upkeep, sparse updates.

Each batch is classified first (never benefiting from its own update),
its samples are offered to the memory, the domain centroid absorbs the
batch's early-layer statistics, and only then, when the rate accumulator
fires, does one entropy-minimization step run on the memory batch. The
statistics observed during that step seed the memory-based normalization
used for subsequent inference.

Wall time is measured with a monotonic clock and split into (inference +
memory maintenance) versus adaptation. Timing fields are therefore the
only non-deterministic part of a run's metrics.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import numerics as nm
from .datagen import StreamBatch
from .memory import MemorySample, SampleMemory, SampleStats
from .model import (
    Model,
    adapt_step,
    forward,
    load_model_dict,
    model_dict,
    per_sample_entropy,
)
from .numerics import Tensor

INFERENCE_STATS_MODES = ("iobmn", "ema", "batch", "frozen")


def _as_rate(value) -> Fraction:
    """Exact rational adaptation rate from float/str/Fraction input."""
    if isinstance(value, Fraction):
        rate = value
    elif isinstance(value, str):
        rate = Fraction(value)
    else:
        rate = Fraction(str(float(value)))
    if not (0 <= rate <= 1):
        raise ValueError(f"adaptation rate {value!r} outside [0, 1]")
    return rate


class AdaptationSchedule:
    """Exact proportional scheduler for sparse updates.

    A credit accumulator gains `ar` per batch and fires when it reaches 1
    (then pays 1 back), so after B batches exactly floor(B * ar) updates
    have fired for any rational rate, with no float drift.
    """

    def __init__(self, ar) -> None:
        self.ar = _as_rate(ar)
        self._credit = Fraction(0)
        self.adapt_count = 0
        self.batch_count = 0

    @property
    def credit(self) -> Fraction:
        return self._credit

    def should_adapt(self) -> bool:
        """Call exactly once per batch, in stream order."""
        self.batch_count += 1
        self._credit += self.ar
        if self._credit >= 1:
            self._credit -= 1
            self.adapt_count += 1
            return True
        return False


@dataclass(frozen=True)
class EngineConfig:
    ar: float | str | Fraction = "0.1"
    tau_conf: float = 0.5
    tau_delta: float = 0.1
    alpha: float = 4.0
    beta_centroid: float = 0.9
    ema_momentum: float = 0.9
    lr: float = 1e-3
    capacity: int | None = None  # None: match the batch size of the first batch
    selection_mode: str = "cndrm"
    inference_stats_mode: str = "iobmn"
    refresh_memory_stats: bool = False  # recompute memory stats every batch (sensitivity knob)
    seed: int = 0

    def __post_init__(self) -> None:
        _as_rate(self.ar)
        if self.inference_stats_mode not in INFERENCE_STATS_MODES:
            raise ValueError(f"unknown inference stats mode {self.inference_stats_mode!r}")
        if not (0.0 < self.beta_centroid <= 1.0):
            raise ValueError("beta_centroid must be in (0, 1]")


@dataclass
class BatchRecord:
    index: int
    segment: int
    size: int
    correct: int | None          # None when eval labels were withheld
    adapted: bool
    adapt_skipped: bool          # scheduled but memory was empty
    inserted: int
    inserted_correct: int | None
    rescored: int
    memory_size: int
    inference_seconds: float
    adaptation_seconds: float


class RunMetrics:
    """Per-batch records with segment/total summaries.

    Everything except the *_seconds fields is a deterministic function of
    (model, stream, config); `deterministic_dict` projects those fields
    out for reproducibility comparisons.
    """

    def __init__(self, records: list[BatchRecord] | None = None) -> None:
        self.records: list[BatchRecord] = records if records is not None else []

    def append(self, record: BatchRecord) -> None:
        self.records.append(record)

    @property
    def total_batches(self) -> int:
        return len(self.records)

    @property
    def total_samples(self) -> int:
        return sum(r.size for r in self.records)

    @property
    def adapt_count(self) -> int:
        return sum(1 for r in self.records if r.adapted)

    @property
    def skipped_adaptations(self) -> int:
        return sum(1 for r in self.records if r.adapt_skipped)

    def accuracy(self) -> float | None:
        labeled = [r for r in self.records if r.correct is not None]
        if not labeled:
            return None
        return sum(r.correct for r in labeled) / sum(r.size for r in labeled)

    def segment_accuracies(self) -> list[tuple[int, float | None]]:
        out: list[tuple[int, float | None]] = []
        seen: dict[int, list[BatchRecord]] = {}
        order: list[int] = []
        for r in self.records:
            if r.segment not in seen:
                seen[r.segment] = []
                order.append(r.segment)
            seen[r.segment].append(r)
        for seg in order:
            rows = [r for r in seen[seg] if r.correct is not None]
            acc = sum(r.correct for r in rows) / sum(r.size for r in rows) if rows else None
            out.append((seg, acc))
        return out

    def pseudo_label_accuracy(self) -> float | None:
        rows = [r for r in self.records if r.inserted_correct is not None and r.inserted > 0]
        total = sum(r.inserted for r in rows)
        if total == 0:
            return None
        return sum(r.inserted_correct for r in rows) / total

    def memory_occupancy(self) -> tuple[float, int]:
        if not self.records:
            return 0.0, 0
        return (sum(r.memory_size for r in self.records) / len(self.records),
                self.records[-1].memory_size)

    def mean_latency(self, adapted: bool | None = None) -> float | None:
        rows = self.records if adapted is None else [r for r in self.records if r.adapted == adapted]
        if not rows:
            return None
        return sum(r.inference_seconds + r.adaptation_seconds for r in rows) / len(rows)

    def adaptation_share(self) -> float:
        total = sum(r.inference_seconds + r.adaptation_seconds for r in self.records)
        if total == 0.0:
            return 0.0
        return sum(r.adaptation_seconds for r in self.records) / total

    def deterministic_dict(self) -> dict:
        return {
            "records": [
                {
                    "index": r.index,
                    "segment": r.segment,
                    "size": r.size,
                    "correct": r.correct,
                    "adapted": r.adapted,
                    "adapt_skipped": r.adapt_skipped,
                    "inserted": r.inserted,
                    "inserted_correct": r.inserted_correct,
                    "rescored": r.rescored,
                    "memory_size": r.memory_size,
                }
                for r in self.records
            ],
        }


class Engine:
    """One adaptation engine per stream; strictly single-threaded inside."""

    def __init__(self, model: Model, config: EngineConfig) -> None:
        if not model.norm_layers:
            raise ValueError("model has no norm layers to adapt")
        self.model = model
        self.config = config
        self.schedule = AdaptationSchedule(config.ar)
        self.memory: SampleMemory | None = None  # sized on the first batch
        self._arrival = 0
        self._rng = np.random.default_rng(config.seed)
        self._batch_index = 0
        for layer in model.norm_layers:
            layer.memory_norm.alpha = config.alpha
            layer.ema.momentum = config.ema_momentum

    # -- wiring ---------------------------------------------------------

    def _ensure_memory(self, batch_size: int) -> SampleMemory:
        if self.memory is None:
            capacity = self.config.capacity if self.config.capacity is not None else batch_size
            self.memory = SampleMemory(
                capacity=capacity,
                channels=self.model.norm_layers[0].channels,
                tau_conf=self.config.tau_conf,
                tau_delta=self.config.tau_delta,
                beta=self.config.beta_centroid,
                selection_mode=self.config.selection_mode,
                rng=self._rng,
            )
        return self.memory

    def _inference_source(self) -> str:
        mode = self.config.inference_stats_mode
        if mode == "iobmn":
            populated = all(l.memory_norm.populated for l in self.model.norm_layers)
            return "iobmn" if populated else "batch"
        return mode

    def _populate_memory_norm(self, result, count: int) -> None:
        for layer, stats, extent in zip(self.model.norm_layers, result.layer_stats, result.layer_extents):
            if extent * count >= 2:  # degenerate sampling-variance denominator guard
                layer.memory_norm.populate(stats, extent, count)

    def _refresh_memory_stats(self) -> None:
        batch = self.memory.batch() if self.memory is not None else None
        if batch is None:
            return
        if not all(l.memory_norm.populated for l in self.model.norm_layers):
            return
        result = forward(self.model, batch, "batch")
        self._populate_memory_norm(result, batch.shape[0])

    # -- the loop ---------------------------------------------------------

    def process_batch(self, x: Tensor, labels=None, segment: int = 0) -> BatchRecord:
        """Run one stream batch; labels feed metrics only."""
        xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if xv.ndim != 3 or xv.shape[0] < 1:
            raise ValueError(f"rejected batch of shape {xv.shape}")
        x = x if isinstance(x, Tensor) else Tensor(xv)
        memory = self._ensure_memory(xv.shape[0])

        t0 = time.perf_counter()
        if self.config.refresh_memory_stats and self.config.inference_stats_mode == "iobmn":
            self._refresh_memory_stats()
        result = forward(self.model, x, self._inference_source())
        probs = nm.softmax(result.logits).data
        preds = probs.argmax(axis=1)
        confidences = probs.max(axis=1)
        entropies = per_sample_entropy(probs)

        inserted = 0
        inserted_correct = 0 if labels is not None else None
        for i in range(xv.shape[0]):
            stats = SampleStats(result.early_mean[i], result.early_sigma[i])
            candidate = MemorySample(
                input=Tensor._wrap(xv[i].copy()),
                pseudo_label=int(preds[i]),
                confidence=float(confidences[i]),
                stats=stats,
                wdist=memory.score(stats),
                arrival_index=self._arrival,
                entropy=float(entropies[i]),
            )
            self._arrival += 1
            outcome = memory.insert(candidate)
            if outcome.kind != "rejected_low_conf":
                inserted += 1
                if labels is not None and int(preds[i]) == int(labels[i]):
                    inserted_correct += 1

        shift = memory.update_centroid(result.layer_stats[0])
        rescored = memory.maybe_rescore(shift)
        t1 = time.perf_counter()

        adapted = False
        skipped = False
        adaptation_seconds = 0.0
        if self.schedule.should_adapt():
            t2 = time.perf_counter()
            batch = memory.batch()
            step = adapt_step(self.model, batch, self.config.lr)
            if step is None:
                skipped = True
            else:
                adapted = True
                self._populate_memory_norm(step, batch.shape[0])
            adaptation_seconds = time.perf_counter() - t2

        correct = None
        if labels is not None:
            correct = int((preds == np.asarray(labels, dtype=np.intp)).sum())
        record = BatchRecord(
            index=self._batch_index,
            segment=segment,
            size=xv.shape[0],
            correct=correct,
            adapted=adapted,
            adapt_skipped=skipped,
            inserted=inserted,
            inserted_correct=inserted_correct,
            rescored=rescored,
            memory_size=len(memory),
            inference_seconds=t1 - t0,
            adaptation_seconds=adaptation_seconds,
        )
        self._batch_index += 1
        return record

    def run_stream(self, stream, use_labels: bool = True) -> RunMetrics:
        """Fold the batches of a stream; see `process_batch`."""
        metrics = RunMetrics()
        for batch in stream:
            if isinstance(batch, StreamBatch):
                labels = batch.labels if use_labels else None
                metrics.append(self.process_batch(batch.x, labels, batch.segment))
            else:
                x, labels, segment = batch
                metrics.append(self.process_batch(x, labels if use_labels else None, segment))
        return metrics

    # -- checkpoint/resume --------------------------------------------------

    ENGINE_FORMAT = "stta-engine"
    ENGINE_VERSION = 1

    def state_dict(self) -> dict:
        mem = None
        if self.memory is not None:
            mem = {
                "capacity": self.memory.capacity,
                "samples": [
                    {
                        "input": s.input.data.tolist(),
                        "pseudo_label": s.pseudo_label,
                        "confidence": s.confidence,
                        "mu": s.stats.mu.tolist(),
                        "sigma": s.stats.sigma.tolist(),
                        "wdist": s.wdist if s.wdist != float("inf") else "inf",
                        "arrival_index": s.arrival_index,
                        "entropy": s.entropy,
                    }
                    for s in self.memory.samples
                ],
                "centroid": {
                    "mu": self.memory.centroid.mu.tolist(),
                    "sigma": self.memory.centroid.sigma.tolist(),
                    "initialized": self.memory.centroid.initialized,
                },
            }
        return {
            "format": self.ENGINE_FORMAT,
            "version": self.ENGINE_VERSION,
            "config": _config_dict(self.config),
            "model": model_dict(self.model),
            "schedule": {
                "credit": [self.schedule.credit.numerator, self.schedule.credit.denominator],
                "adapt_count": self.schedule.adapt_count,
                "batch_count": self.schedule.batch_count,
            },
            "memory": mem,
            "arrival": self._arrival,
            "batch_index": self._batch_index,
            "rng": _rng_state_dict(self._rng),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def from_state_dict(cls, payload: dict) -> "Engine":
        if payload.get("format") != cls.ENGINE_FORMAT:
            raise ValueError("not an engine checkpoint")
        if payload.get("version") != cls.ENGINE_VERSION:
            raise ValueError(f"unsupported engine checkpoint version {payload.get('version')!r}")
        config = _config_from_dict(payload["config"])
        engine = cls(load_model_dict(payload["model"]), config)
        sched = payload["schedule"]
        engine.schedule._credit = Fraction(*sched["credit"])
        engine.schedule.adapt_count = sched["adapt_count"]
        engine.schedule.batch_count = sched["batch_count"]
        engine._arrival = payload["arrival"]
        engine._batch_index = payload["batch_index"]
        engine._rng = _rng_from_dict(payload["rng"])
        mem = payload["memory"]
        if mem is not None:
            memory = engine._ensure_memory(mem["capacity"])
            memory._rng = engine._rng
            cen = mem["centroid"]
            memory.centroid = replace(
                memory.centroid,
                mu=np.array(cen["mu"]), sigma=np.array(cen["sigma"]),
                initialized=cen["initialized"],
            )
            for s in mem["samples"]:
                memory.samples.append(MemorySample(
                    input=Tensor(np.array(s["input"])),
                    pseudo_label=s["pseudo_label"],
                    confidence=s["confidence"],
                    stats=SampleStats(np.array(s["mu"]), np.array(s["sigma"])),
                    wdist=float("inf") if s["wdist"] == "inf" else s["wdist"],
                    arrival_index=s["arrival_index"],
                    entropy=s["entropy"],
                ))
        return engine

    @classmethod
    def load(cls, path) -> "Engine":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_state_dict(json.load(fh))


def _config_dict(config: EngineConfig) -> dict:
    rate = _as_rate(config.ar)
    return {
        "ar": f"{rate.numerator}/{rate.denominator}",
        "tau_conf": config.tau_conf,
        "tau_delta": config.tau_delta,
        "alpha": config.alpha,
        "beta_centroid": config.beta_centroid,
        "ema_momentum": config.ema_momentum,
        "lr": config.lr,
        "capacity": config.capacity,
        "selection_mode": config.selection_mode,
        "inference_stats_mode": config.inference_stats_mode,
        "refresh_memory_stats": config.refresh_memory_stats,
        "seed": config.seed,
    }


def _config_from_dict(d: dict) -> EngineConfig:
    return EngineConfig(**d)


def _rng_state_dict(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _rng_from_dict(payload: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    state = dict(payload)
    inner = dict(state["state"])
    inner["state"] = int(inner["state"])
    inner["inc"] = int(inner["inc"])
    state["state"] = inner
    gen.bit_generator.state = state
    return gen
