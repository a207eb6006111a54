"""Episodic meta-training and evaluation.

A :class:`Model` bundles three parameter groups: the low encoder layers
(shared across tasks, never adapted), the high encoder layers (re-fit on every
task's support set), and the graph-driven classifier generator.  Solving one
episode means: emit an initial classifier for the episode's classes from the
concept graph, run a few plain gradient-descent steps on the support set, and
score the query set.  The outer loop minimizes a weighted sum of the query
losses of one entity episode and one concept episode per abstract level, which
pushes gradient into all three groups at once.

Inner-loop gradients are detached constants (first-order): the adapted
parameters keep an additive dependence on their initialization, so the outer
gradient still reaches the generator through the emitted classifier, but no
second-derivative terms are formed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .classifier_gen import GeneratorConfig, TaskClassifier, emit_for_task
from .data import (Dataset, Episode, concept_levels_with, sample_concept_episode,
                   sample_entity_episode)
from .encoder import (EncoderConfig, apply_layers, embed_low, high_pairs,
                      init_encoder)
from .classifier_gen import init_generator
from .errors import ConfigError, DataError
from .graph import ConceptGraph, propagation_operator
from .tensor import (Rng, SgdOptimizer, Tensor, add, affine, backward,
                     cross_entropy, grad, scale, softmax_rows, transpose)


@dataclass
class TrainConfig:
    iterations: int = 2000
    outer_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    decay_period: int = 500
    inner_lr: float = 0.01
    adapt_steps: int = 5
    entity_weight: float = 1.0
    concept_weight: float = 1.0
    level_weights: dict = field(default_factory=dict)  # per-level overrides
    episodes_per_term: int = 1
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("outer_lr", "inner_lr", "weight_decay",
                     "entity_weight", "concept_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_period < 1:
            raise ConfigError(f"decay_period must be >= 1, got {self.decay_period}")
        if self.adapt_steps < 0:
            raise ConfigError(f"adapt_steps must be >= 0, got {self.adapt_steps}")
        if self.episodes_per_term < 1:
            raise ConfigError(
                f"episodes_per_term must be >= 1, got {self.episodes_per_term}")
        if min(self.n_way, self.k_shot, self.n_query) < 1:
            raise ConfigError("n_way, k_shot and n_query must be positive")
        if any(v < 0 for v in self.level_weights.values()):
            raise ConfigError("level_weights must be non-negative")

    def weight_for(self, level: int) -> float:
        return float(self.level_weights.get(level, self.concept_weight))

    def lr_at(self, iteration: int) -> float:
        return self.outer_lr * self.decay_factor ** (iteration // self.decay_period)


@dataclass
class EvalConfig:
    n_episodes: int = 600
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    adapt_steps: int = 20
    inner_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError(f"n_episodes must be >= 1, got {self.n_episodes}")
        if min(self.n_way, self.k_shot, self.n_query) < 1:
            raise ConfigError("n_way, k_shot and n_query must be positive")
        if self.adapt_steps < 0 or self.inner_lr < 0:
            raise ConfigError("adapt_steps and inner_lr must be non-negative")


class Model:
    """Graph + propagation structure + all trainable parameters.

    In one-hot semantics mode the generator's input is the identity matrix
    (one indicator column per node) instead of the graph's semantic vectors.
    """

    def __init__(self, graph: ConceptGraph, enc_cfg: EncoderConfig,
                 gen_cfg: GeneratorConfig, *, self_loops: bool = True,
                 first_order: bool = True, refine_placement: str = "write_back",
                 seed: int = 0):
        if not first_order:
            raise ConfigError("only detached (first-order) inner-loop gradients "
                              "are supported; first_order must stay true")
        if refine_placement not in ("write_back", "task_only"):
            raise ConfigError(f"unknown refine placement '{refine_placement}'")
        sem = (np.eye(graph.num_nodes) if gen_cfg.semantics == "one-hot"
               else graph.semantics)
        self.graph = graph
        self.enc_cfg = enc_cfg
        self.gen_cfg = gen_cfg
        self.refine_placement = refine_placement
        self.self_loops = self_loops
        self.semantic_input = Tensor(sem)
        self.prop = propagation_operator(graph, self_loops=self_loops)
        rng = Rng(seed).child("init")
        self.params = {}
        self.params.update(init_encoder(enc_cfg, rng.child("encoder")))
        self.params.update(init_generator(gen_cfg, sem.shape[1], enc_cfg.feature_dim,
                                          rng.child("generator")))

    def emit(self, class_ids, rng: Rng, training: bool) -> TaskClassifier:
        return emit_for_task(self.params, self.gen_cfg, self.prop,
                             self.semantic_input, class_ids, rng, training,
                             self.refine_placement)


@dataclass
class AdaptedState:
    """Task-local parameters; never written back into the model."""
    high: list                   # adapted (W, b) pairs of the high encoder
    classifier: TaskClassifier


def _head_logits(clf: TaskClassifier, feats: Tensor) -> Tensor:
    return affine(feats, transpose(clf.weights), clf.bias)


def inner_adapt(model: Model, clf: TaskClassifier, support_x, support_y,
                steps: int, lr: float) -> AdaptedState:
    """Fit {high encoder, classifier} to the support set with ``steps`` plain
    gradient-descent steps.  ``steps=0`` or ``lr=0`` returns the initialization
    unchanged.  Per-step gradients enter as constants, keeping the update
    graph first-order while preserving the path back to the generator."""
    high = list(high_pairs(model.params, model.enc_cfg))
    w, b = clf.weights, clf.bias
    if steps and lr:
        low = embed_low(model.params, model.enc_cfg, Tensor(support_x))
        for _ in range(steps):
            feats = apply_layers(high, low, model.enc_cfg.slope)
            loss = cross_entropy(_head_logits(TaskClassifier(w, b, clf.class_ids),
                                              feats), support_y)
            leaves = [t for pair in high for t in pair] + [w, b]
            stepped = [add(t, Tensor(-lr * g))
                       for t, g in zip(leaves, grad(loss, leaves))]
            high = [tuple(stepped[2 * i:2 * i + 2]) for i in range(len(high))]
            w, b = stepped[-2], stepped[-1]
    return AdaptedState(high=high,
                        classifier=TaskClassifier(w, b, clf.class_ids))


def task_features(model: Model, adapted: AdaptedState, x: Tensor) -> Tensor:
    return apply_layers(adapted.high, embed_low(model.params, model.enc_cfg, x),
                        model.enc_cfg.slope)


def predict(model: Model, adapted: AdaptedState, x) -> Tensor:
    """Per-row class probabilities for a query batch (rows sum to 1)."""
    feats = task_features(model, adapted, Tensor(np.asarray(x, dtype=np.float64)))
    return softmax_rows(_head_logits(adapted.classifier, feats))


def episode_loss(model: Model, ep: Episode, *, adapt_steps: int, inner_lr: float,
                 rng: Rng, training: bool):
    """Emit -> adapt -> query loss.  Returns (loss Tensor, query accuracy)."""
    clf = model.emit(ep.class_ids, rng, training)
    adapted = inner_adapt(model, clf, ep.support_x, ep.support_y,
                          adapt_steps, inner_lr)
    logits = _head_logits(adapted.classifier,
                          task_features(model, adapted, Tensor(ep.query_x)))
    loss = cross_entropy(logits, ep.query_y)
    acc = float((logits.data.argmax(axis=1) == ep.query_y).mean())
    return loss, acc


# ---------------------------------------------------------------------------
# outer loop

def eligible_concept_levels(ds: Dataset, g: ConceptGraph, cfg: TrainConfig):
    """(level, way count) pairs for every abstract level that can fill an
    episode; way count is capped by the classes available at that level."""
    pairs = concept_levels_with(ds, g, cfg.k_shot, cfg.n_query)
    return [(level, min(cfg.n_way, n)) for level, n in pairs]


def _mean_scalars(losses):
    total = losses[0]
    for t in losses[1:]:
        total = add(total, t)
    return total if len(losses) == 1 else scale(total, 1.0 / len(losses))


def train_step(model: Model, opt: SgdOptimizer, ds: Dataset, cfg: TrainConfig,
               levels, iteration: int) -> dict:
    """One outer update: sample episodes for every active loss term, combine
    them with their weights, backpropagate, and step the optimizer.

    All randomness is re-derived from (cfg.seed, iteration), so any term can
    be replayed in isolation and the step itself is resumable.
    """
    it_rng = Rng(cfg.seed).child("train", iteration)
    rec = {"iteration": iteration, "lr": cfg.lr_at(iteration)}

    def run_term(name, n_way, sample):
        losses, accs = [], []
        for b in range(cfg.episodes_per_term):
            ep = sample(n_way, it_rng.child("sample", name, b))
            loss, acc = episode_loss(model, ep, adapt_steps=cfg.adapt_steps,
                                     inner_lr=cfg.inner_lr,
                                     rng=it_rng.child("drop", name, b),
                                     training=True)
            losses.append(loss)
            accs.append(acc)
        return _mean_scalars(losses), float(np.mean(accs))

    parts = []
    rec["entity_loss"] = rec["entity_acc"] = float("nan")
    if cfg.entity_weight > 0:
        term, acc = run_term("entity", cfg.n_way,
                             lambda n, r: sample_entity_episode(
                                 ds, model.graph, "meta-train", n,
                                 cfg.k_shot, cfg.n_query, r))
        rec["entity_loss"], rec["entity_acc"] = term.item(), acc
        parts.append((cfg.entity_weight, term))
    if cfg.concept_weight > 0 and not levels:
        raise ConfigError("concept weight is positive but no abstract level has "
                          "enough classes for an episode")
    for level, n_way in levels:
        w = cfg.weight_for(level)
        rec[f"concept{level}_loss"] = rec[f"concept{level}_acc"] = float("nan")
        if w <= 0:
            continue
        term, acc = run_term(f"concept{level}", n_way,
                             lambda n, r, lv=level: sample_concept_episode(
                                 ds, model.graph, lv, n, cfg.k_shot, cfg.n_query, r))
        rec[f"concept{level}_loss"], rec[f"concept{level}_acc"] = term.item(), acc
        parts.append((w, term))
    if not parts:
        raise ConfigError("all loss weights are zero; nothing to train")

    total = None
    for w, term in parts:
        piece = scale(term, w)
        total = piece if total is None else add(total, piece)
    rec["total_loss"] = total.item()

    opt.zero_grad()
    backward(total)
    opt.step(rec["lr"])
    return rec


def metrics_columns(levels):
    cols = ["iteration", "lr", "total_loss", "entity_loss", "entity_acc"]
    for level, _ in levels:
        cols += [f"concept{level}_loss", f"concept{level}_acc"]
    return cols


def _fmt_cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


def write_metrics(path, columns, records):
    with open(path, "w", newline="") as f:
        f.write(",".join(columns) + "\n")
        for rec in records:
            f.write(",".join(_fmt_cell(rec.get(c, float("nan")))
                             for c in columns) + "\n")


def train(model: Model, ds: Dataset, cfg: TrainConfig, *, metrics_path=None,
          checkpoint_path=None, config_hash: str = "", log=None):
    """Run the full outer loop; returns (metric records, optimizer).

    The metrics file is a CSV with one row per iteration and fixed columns
    (see :func:`metrics_columns`); reruns with the same inputs reproduce it
    byte for byte.
    """
    ds.validate_against(model.graph)
    levels = eligible_concept_levels(ds, model.graph, cfg)
    opt = SgdOptimizer(model.params, cfg.momentum, cfg.weight_decay)
    records = []
    for it in range(cfg.iterations):
        rec = train_step(model, opt, ds, cfg, levels, it)
        records.append(rec)
        if log and (it % 100 == 0 or it == cfg.iterations - 1):
            log(f"iter {it:5d}  lr {rec['lr']:.4g}  total {rec['total_loss']:.4f}")
    if metrics_path is not None:
        write_metrics(metrics_path, metrics_columns(levels), records)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, opt, iteration=cfg.iterations,
                        config_hash=config_hash, seed=cfg.seed)
    return records, opt


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    mean: float
    half_width: float
    accuracies: np.ndarray


def confidence_interval(accuracies):
    """(mean, 95% half-width) with the half-width 1.96 * sample std / sqrt(n)."""
    a = np.asarray(accuracies, dtype=np.float64)
    m = float(a.mean())
    if a.size < 2:
        return m, 0.0
    return m, float(1.96 * a.std(ddof=1) / np.sqrt(a.size))


def evaluate(model: Model, ds: Dataset, cfg: EvalConfig, *, split: str = "meta-test",
             level: int | None = None) -> EvalResult:
    """Frozen-parameter episodic evaluation.

    Dropout is disabled and model parameters are never written; each episode
    draws its own random streams from (cfg.seed, episode index), so the
    per-episode accuracy vector is independent of execution order.
    """
    g = model.graph
    rng = Rng(cfg.seed).child("eval")
    accs = np.empty(cfg.n_episodes)
    for i in range(cfg.n_episodes):
        ep_rng = rng.child(i)
        if level is None or level == g.entity_level:
            ep = sample_entity_episode(ds, g, split, cfg.n_way, cfg.k_shot,
                                       cfg.n_query, ep_rng.child("sample"))
        else:
            ep = sample_concept_episode(ds, g, level, cfg.n_way, cfg.k_shot,
                                        cfg.n_query, ep_rng.child("sample"))
        _, accs[i] = episode_loss(model, ep, adapt_steps=cfg.adapt_steps,
                                  inner_lr=cfg.inner_lr,
                                  rng=ep_rng.child("drop"), training=False)
    mean, half = confidence_interval(accs)
    return EvalResult(mean=mean, half_width=half, accuracies=accs)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"CSCK"


def save_checkpoint(path, model: Model, opt: SgdOptimizer, *, iteration: int = 0,
                    config_hash: str = "", seed: int = 0):
    """Versioned binary: header (names, shapes, counters) + raw float64 data
    for every parameter and optimizer velocity, in sorted-name order."""
    names = sorted(model.params)
    header = {
        "format": "conceptshot-checkpoint",
        "version": 1,
        "config_hash": config_hash,
        "iteration": int(iteration),
        "seed": int(seed),
        "params": [[n, list(model.params[n].data.shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
        for n in names:
            f.write(np.ascontiguousarray(opt.velocities[n], dtype="<f8").tobytes())


def load_checkpoint(path, model: Model, opt: SgdOptimizer | None = None,
                    expected_hash: str | None = None) -> dict:
    """Restore parameters (and velocities, if ``opt`` given) in place."""
    try:
        raw = open(path, "rb").read()
    except FileNotFoundError:
        raise DataError(f"checkpoint file not found: {path}")
    if raw[:4] != _CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode())
    if header.get("version") != 1:
        raise DataError(f"unsupported checkpoint version {header.get('version')}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise DataError("checkpoint was produced under a different configuration "
                        f"(hash {header['config_hash']!r} != {expected_hash!r})")
    entries = [(n, tuple(s)) for n, s in header["params"]]
    if [n for n, _ in entries] != sorted(model.params):
        raise DataError("checkpoint parameter names do not match the model")
    off = 8 + hlen

    def take(shape):
        nonlocal off
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = off + 8 * count
        if end > len(raw):
            raise DataError("checkpoint file is truncated")
        out = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape)
        off = end
        return out.astype(np.float64)

    for n, shape in entries:
        if model.params[n].data.shape != shape:
            raise DataError(f"checkpoint parameter '{n}' has shape {shape}, "
                            f"model expects {model.params[n].data.shape}")
        model.params[n].data = take(shape)
        model.params[n].grad = None
    if opt is not None:
        for n, shape in entries:
            opt.velocities[n] = take(shape)
    return header
