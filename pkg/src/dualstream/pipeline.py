"""End-to-end orchestration: divergence check, evidence filtering, fused decode.

A run is driven by a ``RunConfig`` naming a host-model checkpoint and a fused
cross-attention checkpoint.  Per checkpoint the pipeline calibrates once — a
layer-pruning sweep over a canonical probe set yields the key/offset layers
and the entropy pair behind the filter gate — then every record flows through
three stages:

1. divergence check between the question and its reworded variant;
2. if flagged (or forced), energy-quotient filtering of the normalised
   evidence rows the fused block will read;
3. greedy decode, with the fused update hooked at the implicated layer when
   stage 2 ran, plain otherwise.
"""
from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import QARecord, Vocab, make_question
from .detector import (
    AGGREGATIONS,
    DetectionVerdict,
    detect,
    divergence_profile,
    make_variant,
)
from .errors import ContractViolationError
from .filtering import (
    RESCALE_MODES,
    FilterProfile,
    LayerClassification,
    SamplingSpec,
    classify_layers,
    compute_filter_profile,
    entropy_gate,
    filter_knowledge,
    pruning_sweep,
)
from .fusion import DsspParams, KnowledgeStream, load_dssp_params, make_dssp_hook
from .model import ForwardOptions, TinyTransformer, forward, generate, layer_distributions
from .training import TrainExample

PROBE_SUBJECTS_PER_HALF = 8


@dataclass
class RunConfig:
    """Everything a reproducible run needs; JSON config files mirror the field names."""

    model_checkpoint: str = ""   # empty = not referenced (checkpoint-free commands)
    dssp_checkpoint: str = ""
    delta: float = 1.0
    aggregation: str = "tail_sum"
    lam: float = 80.0
    top_t: int | None = None           # None = keep the checkpoint's value
    rescale: str = "none"
    mu: float = 0.55
    nu: float = 0.1
    seed: int = 0
    out_dir: str = "."
    force_retrieval: bool = False      # run the filter+fusion path on every record

    def __post_init__(self):
        if self.delta <= 0 or not np.isfinite(self.delta):
            raise ContractViolationError("delta must be finite and > 0")
        if self.aggregation not in AGGREGATIONS:
            raise ContractViolationError(f"aggregation must be one of {AGGREGATIONS}")
        if self.lam <= 0 or not np.isfinite(self.lam):
            raise ContractViolationError("lam must be finite and > 0")
        if self.top_t is not None and int(self.top_t) < 1:
            raise ContractViolationError("top_t must be >= 1")
        if self.rescale not in RESCALE_MODES:
            raise ContractViolationError(f"rescale must be one of {RESCALE_MODES}")
        if not 0.0 < self.mu < 1.0:
            raise ContractViolationError("mu must lie in (0, 1)")
        if self.nu < 0 or not np.isfinite(self.nu):
            raise ContractViolationError("nu must be finite and >= 0")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ContractViolationError(f"unknown config fields: {unknown}")
        return cls(**doc)


def load_config(path) -> RunConfig:
    """Read a JSON config and check that the referenced checkpoints exist."""
    with open(path, "r", encoding="utf-8") as fh:
        config = RunConfig.from_json(json.load(fh))
    for p in (config.model_checkpoint, config.dssp_checkpoint):
        if p and not os.path.exists(p):
            raise ContractViolationError(f"checkpoint path does not exist: {p}")
    return config


def write_config_echo(config: RunConfig, out_dir) -> str:
    """Persist the resolved config next to the outputs; reruns read this file."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config_echo.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# per-checkpoint calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    """Key/offset layers and the entropy pair, measured once per checkpoint."""
    key_layer: int
    offset_layer: int
    entropy_orig: float
    entropy_offset: float
    epsilon: float
    delta_entropy: float

    @property
    def classification(self) -> LayerClassification:
        return LayerClassification(self.key_layer, self.offset_layer)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def calibrate(model: TinyTransformer, queries, spec: SamplingSpec | None = None) -> Calibration:
    """Layer-pruning sweep over a probe query set, reduced to filter inputs."""
    sweep = pruning_sweep(model, queries, spec or SamplingSpec())
    cls = classify_layers(sweep)
    h_orig = float(sweep.baseline_entropy)
    h_off = float(sweep.layer_entropies[cls.offset_layer])
    epsilon, delta_entropy = entropy_gate(h_orig, h_off)
    return Calibration(cls.key_layer, cls.offset_layer, h_orig, h_off,
                       epsilon, delta_entropy)


def probe_questions(vocab: Vocab) -> list[list[int]]:
    """Canonical probe set: subjects from the front and from the middle of the range.

    Sampling both halves keeps memorised and novel subjects in the sweep, so
    the key and offset layers both leave a visible entropy footprint.
    """
    subs = list(vocab.subject_ids)
    k = min(PROBE_SUBJECTS_PER_HALF, len(subs))
    picked = subs[:k] + subs[len(subs) // 2:len(subs) // 2 + k]
    seen: dict[int, None] = {}
    for s in picked:
        seen.setdefault(s)
    return [make_question(vocab, s) for s in seen]


@dataclass
class Bundle:
    """A loaded checkpoint pair plus its one-time calibration."""
    model: TinyTransformer
    params: DsspParams
    vocab: Vocab | None
    calibration: Calibration


def meta_vocab(meta: dict) -> Vocab | None:
    """Rebuild the vocabulary a checkpoint was written with, if recorded."""
    if isinstance(meta.get("vocab"), dict):
        return Vocab(**{k: int(v) for k, v in meta["vocab"].items()})
    return None


def load_bundle(config: RunConfig, probe_queries=None) -> Bundle:
    """Load both checkpoints and calibrate.  Expensive; share across records."""
    from .model import load_model

    if not config.model_checkpoint or not config.dssp_checkpoint:
        raise ContractViolationError("config names no checkpoint pair to load")
    model, meta = load_model(config.model_checkpoint)
    params = load_dssp_params(config.dssp_checkpoint)
    if config.top_t is not None:
        params.top_t = int(config.top_t)
    vocab = meta_vocab(meta)
    if probe_queries is None:
        if vocab is None:
            raise ContractViolationError(
                "checkpoint metadata has no vocabulary; pass probe_queries")
        probe_queries = probe_questions(vocab)
    return Bundle(model, params, vocab,
                  calibrate(model, probe_queries, SamplingSpec(seed=config.seed)))


def vocab_meta(vocab: Vocab) -> dict:
    """Checkpoint metadata block that lets a run rebuild the vocabulary."""
    return {"vocab": {"n_subjects": vocab.n_subjects,
                      "n_objects": vocab.n_objects,
                      "n_junk": vocab.n_junk}}


# ---------------------------------------------------------------------------
# per-record flow
# ---------------------------------------------------------------------------

@dataclass
class PipelineTrace:
    """What one record went through: verdict, optional filter, answer, timings."""
    record_id: str
    verdict: DetectionVerdict
    filter: FilterProfile | None
    answer: list[int]
    timings: dict[str, float] = field(default_factory=dict)
    forced: bool = False

    def __post_init__(self):
        if self.filter is not None and not (self.verdict.hallucination or self.forced):
            raise ContractViolationError(
                "filter stage present although the verdict did not gate it in")

    def to_json(self) -> dict:
        if self.filter is None:
            filter_doc: dict | str = "skipped"
        else:
            filter_doc = {
                "key_layer": self.filter.key_layer,
                "offset_layer": self.filter.offset_layer,
                "epsilon": self.filter.epsilon,
                "delta_entropy": self.filter.delta_entropy,
                "eq": [float(x) for x in self.filter.eq],
                "delta_a": [float(x) for x in self.filter.delta_a],
            }
        return {
            "record_id": self.record_id,
            "verdict": self.verdict.to_json(),
            "filter": filter_doc,
            "answer": list(self.answer),
            "timings": dict(self.timings),
            "forced": self.forced,
        }


def trace_from_json(doc: dict) -> PipelineTrace:
    """Rebuild a trace from its JSON form (timings may have been stripped)."""
    vdoc = doc["verdict"]
    verdict = DetectionVerdict(
        hallucination=bool(vdoc["hallucination"]),
        statistic=float(vdoc["statistic"]),
        delta=float(vdoc["delta"]),
        aggregation=str(vdoc["aggregation"]),
        insertion_layer=int(vdoc["insertion_layer"]),
        per_layer=tuple(float(x) for x in vdoc["per_layer"]),
    )
    fdoc = doc["filter"]
    profile = None
    if fdoc != "skipped":
        profile = FilterProfile(
            key_layer=int(fdoc["key_layer"]),
            offset_layer=int(fdoc["offset_layer"]),
            delta_a=np.asarray(fdoc["delta_a"], dtype=np.float64),
            eq=np.asarray(fdoc["eq"], dtype=np.float64),
            epsilon=float(fdoc["epsilon"]),
            delta_entropy=float(fdoc["delta_entropy"]),
        )
    return PipelineTrace(
        record_id=str(doc["record_id"]),
        verdict=verdict,
        filter=profile,
        answer=[int(t) for t in doc["answer"]],
        timings={k: float(v) for k, v in doc.get("timings", {}).items()},
        forced=bool(doc.get("forced", False)),
    )


def context_tokens(record: QARecord, vocab: Vocab) -> list[int]:
    """Question, separator, then every evidence document in order."""
    toks = list(record.question) + [vocab.SEP]
    for doc in record.documents:
        toks.extend(doc)
    return toks


def offset_layer_stream(model: TinyTransformer, trace, span: tuple[int, int],
                        layer: int) -> np.ndarray:
    """Evidence rows exactly as the fused block at ``layer`` will read them."""
    if layer < 1:
        raise ContractViolationError("fused insertion needs a layer >= 1")
    rows = np.asarray(trace.hidden[layer - 1][span[0]:span[1]])
    xn = ad.layer_norm(Tensor(rows),
                       Tensor(model.weights[f"l{layer}.ln1.gain"]),
                       Tensor(model.weights[f"l{layer}.ln1.bias"]))
    return xn.value


def variant_tokens(record: QARecord, vocab: Vocab | None) -> list[int]:
    if record.variant is not None:
        return list(record.variant)
    if vocab is None:
        raise ContractViolationError(
            "record has no variant and no vocabulary is available to derive one")
    return make_variant(list(record.question), {vocab.WH}, {vocab.AUX})


def pipeline_run(record: QARecord, config: RunConfig,
                 bundle: Bundle | None = None) -> PipelineTrace:
    """Run one record through detect -> (filter -> fused decode) | plain decode."""
    if bundle is None:
        bundle = load_bundle(config)
    model, vocab, cal = bundle.model, bundle.vocab, bundle.calibration
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    profile = divergence_profile(
        layer_distributions(model, list(record.question)),
        layer_distributions(model, variant_tokens(record, vocab)),
    )
    verdict = detect(profile, delta=config.delta, aggregation=config.aggregation)
    timings["detect"] = time.perf_counter() - t0

    retrieve = verdict.hallucination or config.force_retrieval
    filter_profile: FilterProfile | None = None
    options = None
    if retrieve:
        if vocab is None:
            raise ContractViolationError(
                "retrieval path needs the checkpoint vocabulary to build context")
        t0 = time.perf_counter()
        ctx = context_tokens(record, vocab)
        span = (len(record.question) + 1, len(ctx))
        ctx_trace = forward(model, ctx)
        filter_profile = compute_filter_profile(
            ctx_trace, cal.classification, span,
            cal.entropy_orig, cal.entropy_offset, config.lam)
        hook_layer = cal.offset_layer
        if verdict.hallucination and verdict.insertion_layer >= 1:
            hook_layer = verdict.insertion_layer
        raw = offset_layer_stream(model, ctx_trace, span, hook_layer)
        filtered = filter_knowledge(
            KnowledgeStream(raw, "external"), filter_profile.eq,
            filter_profile.epsilon, filter_profile.delta_entropy,
            rescale=config.rescale)
        options = ForwardOptions(dssp_layer=hook_layer,
                                 dssp_hook=make_dssp_hook(filtered.tokens, bundle.params))
        prompt = ctx
        timings["filter"] = time.perf_counter() - t0
    else:
        prompt = list(record.question)

    t0 = time.perf_counter()
    answer = generate(model, prompt, 1, 0.0, config.seed,
                      max_new_tokens=max(1, len(record.answer)),
                      options=options)[0]
    timings["decode"] = time.perf_counter() - t0

    return PipelineTrace(record.record_id, verdict, filter_profile, answer,
                         timings, forced=config.force_retrieval)


def run_records(records, config: RunConfig, bundle: Bundle | None = None) -> list[PipelineTrace]:
    """Run a record list against one shared bundle, in order."""
    if bundle is None:
        bundle = load_bundle(config)
    return [pipeline_run(record, config, bundle) for record in records]


# ---------------------------------------------------------------------------
# evaluation and training-example conversion
# ---------------------------------------------------------------------------

def evaluate(traces, records) -> dict:
    """Exact-match accuracy, flag rate, and per-stage mean times as a JSON doc."""
    traces = list(traces)
    records = list(records)
    if not traces:
        raise ContractViolationError("nothing to evaluate")
    if len(traces) != len(records):
        raise ContractViolationError("traces and records are misaligned")
    for trace, record in zip(traces, records):
        if trace.record_id != record.record_id:
            raise ContractViolationError(
                f"trace {trace.record_id!r} does not match record {record.record_id!r}")
    hits = [t.answer == list(r.answer) for t, r in zip(traces, records)]
    stage_sums: dict[str, list[float]] = {}
    for t in traces:
        for stage, dt in t.timings.items():
            stage_sums.setdefault(stage, []).append(dt)
    return {
        "n_records": len(records),
        "answer_token_accuracy": float(np.mean(hits)),
        "detection_rate": float(np.mean([t.verdict.hallucination for t in traces])),
        "mean_stage_times": {k: float(np.mean(v)) for k, v in sorted(stage_sums.items())},
    }


def make_train_examples(model: TinyTransformer, records, vocab: Vocab,
                        insertion_layer: int) -> list[TrainExample]:
    """Freeze each record's context and raw evidence rows into a training example."""
    examples = []
    for record in records:
        ctx = context_tokens(record, vocab)
        span = (len(record.question) + 1, len(ctx))
        trace = forward(model, ctx)
        dhat = offset_layer_stream(model, trace, span, insertion_layer)
        examples.append(TrainExample(tokens=tuple(ctx),
                                     answer_id=int(record.answer[0]),
                                     dhat=dhat))
    return examples
