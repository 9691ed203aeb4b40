"""Objective assembly and the two-phase training loop.

Phase one fits the inference side by maximizing the edge-generation and
KL terms; phase two alternates M task-only generative-side steps against
one full-objective inference-side step per outer epoch, with the
affiliation sample and the edge partition frozen across the inner steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffmath as dm
from .diffmath import Node, ParameterStore, backward
from .distributions import bernoulli_poisson_loglik, kl_weibull_gamma
from .graphs import Graph
from .model import (
    ModelConfig,
    PreparedGraph,
    build_input_features,
    encode_communities,
    encoder_uniforms,
    forward_logits,
    gamma_node,
    partition_edges,
    posterior_predictive,
)
from .rng import substream
from .sparse import degree_vector, induced_adjacency


class TrainingDiverged(RuntimeError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class ElboTerms:
    l_task: float
    l_egen: float
    l_kl: float

    @property
    def total(self) -> float:
        return self.l_task + self.l_egen + self.l_kl


@dataclass
class TrainConfig:
    pretrain_epochs: int = 200
    finetune_epochs: int = 400
    inner_steps: int = 5
    lr_unsup: float = 0.01
    lr_theta: float = 0.01
    lr_phi: float = 0.001
    patience: int = 50
    seed: int = 0
    elbo_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    prior_alpha: float = 1.0
    prior_beta: float = 1.0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise TrainingError("inner_steps must be >= 1")
        if min(self.lr_unsup, self.lr_theta, self.lr_phi) < 0:
            raise TrainingError("learning rates must be nonnegative")
        if self.prior_alpha <= 0 or self.prior_beta <= 0:
            raise TrainingError("prior hyperparameters must be positive")
        self.elbo_weights = tuple(float(w) for w in self.elbo_weights)


@dataclass
class SamplerConfig:
    enabled: bool = False
    n_sub: int = 200
    k_mix: float = 0.9
    alpha_sharp: float = 1.0
    importance: str = "degree"

    def __post_init__(self):
        if not 0.0 <= self.k_mix <= 1.0:
            raise TrainingError("k_mix must lie in [0, 1]")
        if self.alpha_sharp < 0:
            raise TrainingError("alpha_sharp must be nonnegative")
        if self.importance not in ("degree", "uniform"):
            raise TrainingError("importance must be 'degree' or 'uniform'")


# ---------------------------------------------------------------------------
# subgraph sampling


def subsample_probabilities(importance: np.ndarray, k_mix: float,
                            alpha_sharp: float) -> np.ndarray:
    """Mixture of importance-proportional and anti-importance sampling:
    p_i = k q_i + (1-k)(1-q_i)/(N-1) with q_i = f_i^alpha / sum_j f_j^alpha.
    An all-zero importance vector falls back to uniform q."""
    f = np.asarray(importance, dtype=np.float64)
    n = f.size
    if n < 2:
        raise TrainingError("need at least two nodes to subsample")
    powered = f**alpha_sharp
    total = powered.sum()
    q = powered / total if total > 0 else np.full(n, 1.0 / n)
    return k_mix * q + (1.0 - k_mix) * (1.0 - q) / (n - 1)


def sample_subgraph(graph: Graph, sampler: SamplerConfig,
                    rng: np.random.Generator):
    """Draw n_sub nodes with replacement; duplicates collapse for the
    induced subgraph. When n_sub >= N the full graph is returned, which
    keeps the estimator exact at full sample size."""
    n = graph.n_nodes
    if sampler.n_sub >= n:
        nodes = np.arange(n, dtype=np.int64)
        return nodes, nodes, graph.adjacency
    if sampler.importance == "degree":
        imp = degree_vector(graph.adjacency).astype(np.float64)
    else:
        imp = np.ones(n)
    p = subsample_probabilities(imp, sampler.k_mix, sampler.alpha_sharp)
    draws = rng.choice(n, size=sampler.n_sub, replace=True, p=p)
    nodes = np.unique(draws)
    return draws, nodes, induced_adjacency(graph.adjacency, nodes)


def _pair_count(n: int) -> float:
    return n * (n - 1) / 2.0


# ---------------------------------------------------------------------------
# objective


def _task_logprob(prep: PreparedGraph, logits: Node, mask: np.ndarray | None) -> Node:
    """Masked mean log-probability of the observed labels."""
    logp = dm.log_softmax_rows(logits)
    if prep.task == "node":
        if mask is None:
            mask = prep.graph.train_mask
        if mask is None or not mask.any():
            raise TrainingError("empty training mask")
        idx = np.flatnonzero(mask)
        labels = prep.graph.labels[idx]
    else:
        idx = np.arange(prep.n_graphs)
        labels = prep.graph_labels
    onehot = np.zeros((idx.size, logits.value.shape[1]))
    onehot[np.arange(idx.size), labels] = 1.0
    picked = dm.elementwise_mul(dm.gather_rows(logp, idx), dm.constant(onehot))
    return dm.elementwise_mul(dm.reduce_sum(picked), dm.constant(1.0 / idx.size))


def _egen_term(prep: PreparedGraph, z: Node, gamma: Node,
               sub: Optional[tuple] = None) -> Node:
    if sub is not None:
        _draws, nodes, sub_adj = sub
        scale = _pair_count(prep.n_nodes) / max(_pair_count(nodes.size), 1.0)
        z_sub = dm.gather_rows(z, nodes)
        return dm.elementwise_mul(
            bernoulli_poisson_loglik(sub_adj, z_sub, gamma), dm.constant(scale))
    gids = prep.graph_ids if prep.task == "graph" else None
    return bernoulli_poisson_loglik(prep.graph.adjacency, z, gamma,
                                    graph_ids=gids,
                                    n_graphs=prep.n_graphs if gids is not None else 1)


def elbo(prep: PreparedGraph, store: ParameterStore, cfg: ModelConfig,
         uniforms: np.ndarray, tcfg: TrainConfig, *, training: bool = False,
         step: int = 0, seed: int = 0, partition_seed: int = 0,
         mask: np.ndarray | None = None, sub: Optional[tuple] = None,
         include_task: bool = True):
    """Single-sample evidence lower bound.

    Returns (terms, loss_node, aux): `terms` carries the three summands as
    floats, `loss_node` is the weighted negative bound for the backward
    pass, `aux` exposes the posterior and partition of this evaluation.
    """
    w_task, w_egen, w_kl = tcfg.elbo_weights
    post = encode_communities(prep, store, cfg, uniforms, training=training,
                              step=step, seed=seed)
    gamma = gamma_node(store)

    l_egen = _egen_term(prep, post.z, gamma, sub=sub)
    kl_elem = kl_weibull_gamma(post.weibull_shape, post.weibull_scale,
                               tcfg.prior_alpha, tcfg.prior_beta)
    l_kl = dm.negate(dm.reduce_sum(kl_elem))

    partition = None
    if include_task:
        partition = partition_edges(prep.graph.adjacency, post.z, gamma, cfg,
                                    seed=partition_seed)
        logits = forward_logits(prep, post.z, partition, store, cfg,
                                training=training, step=step, seed=seed)
        l_task = _task_logprob(prep, logits, mask)
    else:
        l_task = dm.constant(0.0)

    loss = dm.negate(
        dm.constant(w_task) * l_task
        + dm.constant(w_egen) * l_egen
        + dm.constant(w_kl) * l_kl)
    terms = ElboTerms(l_task=float(l_task.value), l_egen=float(l_egen.value),
                      l_kl=float(l_kl.value))
    return terms, loss, {"posterior": post, "partition": partition}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParameterStore, state: OptimizerState, lr: float,
              names: list[str]):
    """Bias-corrected moment update applied in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in names:
        g = store.grad(name)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        node = store[name]
        node.value = node.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def optimizer_entries(state: OptimizerState, prefix: str):
    out = []
    for name, arr in state.m.items():
        out.append((f"{prefix}.m.{name}", "opt", arr))
    for name, arr in state.v.items():
        out.append((f"{prefix}.v.{name}", "opt", arr))
    return out


def restore_optimizer(state: OptimizerState, prefix: str, entries, t: int):
    state.t = t
    for name, _group, arr in entries:
        if name.startswith(f"{prefix}.m."):
            state.m[name[len(prefix) + 3 :]] = arr.copy()
        elif name.startswith(f"{prefix}.v."):
            state.v[name[len(prefix) + 3 :]] = arr.copy()


# ---------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = ("epoch", "l_task", "l_egen", "l_kl", "train_acc", "val_acc",
                  "test_acc")


def format_metrics(records: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for rec in records:
        cells = []
        for col in METRIC_COLUMNS:
            val = rec.get(col)
            if col == "epoch":
                cells.append(str(val))
            elif val is None:
                cells.append("nan")
            else:
                cells.append(repr(float(val)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_metrics(path: str, records: list[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_metrics(records))


def write_timings(path: str, rows: list[tuple[int, float]]):
    # wall time is inherently non-deterministic, so it lives outside the
    # byte-identical metrics file
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,wall_ms\n")
        for epoch, ms in rows:
            fh.write(f"{epoch},{ms:.3f}\n")


def _check_finite(value: float):
    if not np.isfinite(value):
        raise TrainingDiverged(f"objective became non-finite ({value})")


# ---------------------------------------------------------------------------
# phase one: unsupervised pretraining


@dataclass
class TrainResult:
    records: list[dict]
    timings: list[tuple[int, float]]
    best_epoch: Optional[int] = None
    best_val: Optional[float] = None
    test_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    stopped_early: bool = False
    optimizer: Optional["OptimizerState"] = None
    optimizer_phi: Optional["OptimizerState"] = None


def pretrain(prep: PreparedGraph, store: ParameterStore, cfg: ModelConfig,
             tcfg: TrainConfig, sampler: Optional[SamplerConfig] = None,
             seed: int = 0, epoch_callback: Optional[Callable] = None,
             optimizer: Optional[OptimizerState] = None,
             start_epoch: int = 0) -> TrainResult:
    """Fit the inference side (and activations) on edge generation + KL."""
    sampler = sampler or SamplerConfig()
    names = store.names(("phi", "shared"))
    state = optimizer or OptimizerState()
    _, w_egen, w_kl = tcfg.elbo_weights
    best, stall = -np.inf, 0
    result = TrainResult(records=[], timings=[])
    result.optimizer = state

    for epoch in range(start_epoch, tcfg.pretrain_epochs):
        t0 = time.perf_counter()
        uniforms = encoder_uniforms(prep.n_nodes, cfg.total_communities, seed,
                                    "pretrain", epoch)
        sub = None
        if sampler.enabled and prep.task == "node":
            sub = sample_subgraph(prep.graph, sampler, substream(seed, "sampler", epoch))
        terms, loss, _aux = elbo(prep, store, cfg, uniforms, tcfg, training=True,
                                 step=epoch, seed=seed, sub=sub, include_task=False)
        store.zero_grad(names)
        backward(loss)
        adam_step(store, state, tcfg.lr_unsup, names)

        objective = w_egen * terms.l_egen + w_kl * terms.l_kl
        _check_finite(objective)
        result.records.append({"epoch": epoch, "l_task": None,
                               "l_egen": terms.l_egen, "l_kl": terms.l_kl,
                               "train_acc": None, "val_acc": None,
                               "test_acc": None})
        result.timings.append((epoch, (time.perf_counter() - t0) * 1e3))
        if epoch_callback is not None:
            epoch_callback(epoch=epoch, terms=terms, store=store)
        if objective > best + 1e-4:
            best, stall = objective, 0
        else:
            stall += 1
            if stall >= tcfg.patience:
                result.stopped_early = True
                break
    return result


# ---------------------------------------------------------------------------
# phase two: supervised finetuning


def _mask_accuracy(pred: np.ndarray, labels: np.ndarray, mask) -> Optional[float]:
    if mask is None or not mask.any():
        return None
    idx = np.flatnonzero(mask)
    return float((pred[idx] == labels[idx]).mean())


def _eval_accuracy(prep: PreparedGraph, store: ParameterStore, cfg: ModelConfig,
                   seed: int, partition_seed: int, samples: int = 1) -> float:
    """Whole-batch graph-label accuracy under the posterior predictive."""
    probs = posterior_predictive(prep, store, cfg, samples, seed,
                                 partition_seed=partition_seed)
    pred = np.argmax(probs, axis=1)
    return float((pred == prep.graph_labels).mean())


def finetune(prep: PreparedGraph, store: ParameterStore, cfg: ModelConfig,
             tcfg: TrainConfig, seed: int = 0,
             test_prep: Optional[PreparedGraph] = None,
             val_prep: Optional[PreparedGraph] = None,
             step_callback: Optional[Callable] = None,
             early_stop: bool = True, eval_samples: int = 1,
             optimizers: Optional[tuple] = None,
             start_epoch: int = 0, eval_train: bool = True) -> TrainResult:
    """Alternating optimization of the full bound.

    Per outer epoch: one affiliation sample and one edge partition are
    computed and frozen; M generative-side steps maximize the task term;
    one inference-side step maximizes the full bound, differentiating
    through the reparameterized sample and the partition weights.
    """
    w_task, w_egen, w_kl = tcfg.elbo_weights
    theta_names = store.names(("theta", "shared"))
    phi_names = store.names(("phi", "shared"))
    adam_theta = optimizers[0] if optimizers else OptimizerState()
    adam_phi = optimizers[1] if optimizers else OptimizerState()
    m_steps = tcfg.inner_steps
    result = TrainResult(records=[], timings=[])
    result.optimizer, result.optimizer_phi = adam_theta, adam_phi
    node_task = prep.task == "node"
    best_val, best_snap, stall = -np.inf, None, 0

    for epoch in range(start_epoch, tcfg.finetune_epochs):
        t0 = time.perf_counter()
        base = epoch * (m_steps + 2)
        uniforms = encoder_uniforms(prep.n_nodes, cfg.total_communities, seed,
                                    "finetune", epoch)
        post = encode_communities(prep, store, cfg, uniforms, training=True,
                                  step=base, seed=seed)
        gamma = gamma_node(store)
        z_frozen = dm.constant(post.z.value)
        gamma_frozen = dm.constant(gamma.value)
        partition = partition_edges(prep.graph.adjacency, z_frozen, gamma_frozen,
                                    cfg, seed=seed)
        x_star_frozen = build_input_features(prep, z_frozen, cfg, seed)

        for m in range(m_steps):
            logits = forward_logits(prep, z_frozen, partition, store, cfg,
                                    training=True, step=base + 1 + m, seed=seed,
                                    x_star=x_star_frozen)
            l_task = _task_logprob(prep, logits, None)
            loss = dm.negate(dm.constant(w_task) * l_task)
            store.zero_grad(theta_names)
            backward(loss)
            adam_step(store, adam_theta, tcfg.lr_theta, theta_names)
            if step_callback is not None:
                step_callback(epoch=epoch, phase="theta", inner=m,
                              partition=partition.weight_values(), store=store)

        terms, loss, aux = elbo(prep, store, cfg, uniforms, tcfg, training=True,
                                step=base, seed=seed, partition_seed=seed)
        store.zero_grad(phi_names)
        backward(loss)
        adam_step(store, adam_phi, tcfg.lr_phi, phi_names)
        _check_finite(terms.total)
        if step_callback is not None:
            step_callback(epoch=epoch, phase="phi", inner=None,
                          partition=aux["partition"].weight_values(), store=store)

        rec = {"epoch": epoch, "l_task": terms.l_task, "l_egen": terms.l_egen,
               "l_kl": terms.l_kl, "train_acc": None, "val_acc": None,
               "test_acc": None}
        if node_task:
            g = prep.graph
            probs = posterior_predictive(prep, store, cfg, eval_samples, seed,
                                         partition_seed=seed)
            pred = np.argmax(probs, axis=1)
            rec["train_acc"] = _mask_accuracy(pred, g.labels, g.train_mask)
            rec["val_acc"] = _mask_accuracy(pred, g.labels, g.val_mask)
            rec["test_acc"] = _mask_accuracy(pred, g.labels, g.test_mask)
        else:
            if eval_train:
                rec["train_acc"] = _eval_accuracy(prep, store, cfg, seed, seed,
                                                  samples=eval_samples)
            if val_prep is not None:
                acc = _eval_accuracy(val_prep, store, cfg, seed, seed,
                                     samples=eval_samples)
                rec["val_acc"] = acc
                result.val_curve.append(acc)
            if test_prep is not None:
                acc = _eval_accuracy(test_prep, store, cfg, seed, seed,
                                     samples=eval_samples)
                rec["test_acc"] = acc
                result.test_curve.append(acc)
        result.records.append(rec)
        result.timings.append((epoch, (time.perf_counter() - t0) * 1e3))

        if node_task and early_stop and rec["val_acc"] is not None:
            if rec["val_acc"] > best_val:
                best_val, stall = rec["val_acc"], 0
                best_snap = store.snapshot()
                result.best_epoch = epoch
            else:
                stall += 1
                if stall >= tcfg.patience:
                    result.stopped_early = True
                    break
    if best_snap is not None:
        store.restore(best_snap)
        result.best_val = best_val
    return result
