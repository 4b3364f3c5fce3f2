"""Two-stage alternating training: pairwise ranking plus IB regularizers
on all active parameters, then the contrastive multimedia-preference
update restricted to the user-media embedding and modality projections.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .config import RunConfig
from .data import InteractionSet, ModalityFeatures, TripleBatch, TripleSampler
from .errors import DataError, NumericalError
from .evaluation import MetricsResult, evaluate_representations
from .graphs import (SemanticItemGraph, build_bipartite_adjacency,
                     build_modality_knn, sym_normalize)
from .model import (ForwardOutputs, GraphBundle, ModelParams, TapeParams,
                    active_stage1_names, forward, init_params, predict_scores,
                    stage2_param_names)

CHECKPOINT_MANIFEST = "manifest.json"

_ROLES = {
    "user_latent": "embedding", "item_latent": "embedding",
    "user_media": "embedding", "fusion_logits": "fusion",
    "mask_hidden_w": "mask_mlp", "mask_hidden_b": "mask_mlp",
    "mask_out_w": "mask_mlp", "mask_out_b": "mask_mlp",
}


def component_rng(seed: int, component: str) -> np.random.Generator:
    """One generator per named component, all derived from the run seed."""
    components = ("split", "init", "sample", "mask", "synth", "eval")
    if component not in components:
        raise ValueError(f"unknown rng component {component!r}")
    return np.random.default_rng(
        np.random.SeedSequence((seed, components.index(component))))


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Standard bias-corrected Adam over a fixed set of named parameters."""

    def __init__(self, names: list[str], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.names = list(names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray],
             lr: float) -> None:
        named = params.named()
        self.step_count += 1
        t = self.step_count
        for name in self.names:
            g = grads[name]
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(g), np.zeros_like(g))
            m, v = self.moments[name]
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.moments[name] = (m, v)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params.replace(name, named[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps))


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: Adam, lr: float) -> None:
    state.step(params, grads, lr)


# ---------------------------------------------------------------------------
# loss assembly


def batch_items(batch: TripleBatch) -> np.ndarray:
    """Distinct items of the batch (positives and negatives), sorted."""
    return np.unique(np.concatenate([batch.positives, batch.negatives]))


def build_stage1_loss(tape: ad.Tape, outs: ForwardOutputs, batch: TripleBatch,
                      feature_matrices: list[np.ndarray], cfg: RunConfig,
                      active_names: list[str]) -> tuple[ad.Node, dict]:
    """Ranking loss + L2 + (optional) feature- and graph-level HSIC terms."""
    pos = predict_scores(outs.user_repr, outs.item_repr, batch.users,
                         batch.positives)
    neg = predict_scores(outs.user_repr, outs.item_repr, batch.users,
                         batch.negatives)
    rec = losses.bpr_loss(pos, neg)
    reg = losses.l2_penalty([outs.params[n] for n in active_names],
                            cfg.lambda_reg)

    items = batch_items(batch)
    fib = None
    if cfg.fib_enabled and items.size >= 2:
        projs = [ad.row_gather(p, items) for p in outs.media_projs]
        feats = [tape.constant(fm[items]) for fm in feature_matrices]
        fib = losses.fib_loss(projs, feats, losses.HsicConfig(
            cfg.sigma_sq_fib, cfg.hsic_normalize_inputs))
    gib = None
    if cfg.gib_enabled and outs.item_sem_base is not None and items.size >= 2:
        gib = losses.gib_loss(
            ad.row_gather(outs.item_sem, items),
            ad.row_gather(outs.item_sem_base, items),
            losses.HsicConfig(cfg.sigma_sq_gib, cfg.hsic_normalize_inputs))

    total = losses.stage1_total(rec, fib, gib, reg, cfg.alpha, cfg.beta)
    parts = {"rec": rec, "fib": fib, "gib": gib, "reg": reg}
    return total, parts


def build_stage2_loss(tape: ad.Tape, tp: TapeParams, batch: TripleBatch,
                      feature_matrices: list[np.ndarray],
                      cfg: RunConfig) -> ad.Node:
    """Contrastive alignment of user media embeddings with their positive
    items' mean modality projection (in-batch negatives)."""
    users = ad.row_gather(tp["user_media"], batch.users)
    item_proj = None
    for k, fm in enumerate(feature_matrices):
        feats = tape.constant(fm[batch.positives])
        proj = ad.add_bias(ad.matmul(feats, tp[f"modality_w_{k}"]),
                           tp[f"modality_b_{k}"])
        item_proj = proj if item_proj is None else ad.add(item_proj, proj)
    item_proj = ad.scale(item_proj, 1.0 / len(feature_matrices))
    return losses.stage2_infonce(users, item_proj, cfg.tau)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: ModelParams
    graphs: GraphBundle
    opt_stage1: Adam
    opt_stage2: Adam
    sample_rng: np.random.Generator
    mask_rng: np.random.Generator


def build_graph_bundle(interactions: InteractionSet,
                       modality_matrices: list[np.ndarray],
                       cfg: RunConfig) -> GraphBundle:
    norm_adj = None
    if cfg.backbone in ("vlightgcn", "lattice", "vlattice"):
        norm_adj = sym_normalize(build_bipartite_adjacency(interactions))
    semantic = None
    if cfg.backbone in ("lattice", "vlattice"):
        topologies = [build_modality_knn(m, cfg.knn_topk)
                      for m in modality_matrices]
        semantic = SemanticItemGraph(interactions.num_items, topologies)
    return GraphBundle(norm_adj, semantic)


def train_step(batch: TripleBatch, state: TrainState,
               features: ModalityFeatures, cfg: RunConfig,
               run_stage2: bool = True) -> losses.LossBreakdown:
    """One stage-1 update on all active parameters, then (optionally) one
    stage-2 update on the multimedia-preference subset."""
    tape = ad.Tape()
    tp = TapeParams(tape, state.params)
    outs = forward(tape, tp, state.graphs, features.matrices, cfg,
                   mode="train", rng=state.mask_rng)
    active = active_stage1_names(cfg, features.num_modalities)
    total, parts = build_stage1_loss(tape, outs, batch, features.matrices,
                                     cfg, active)
    tape.backward(total)
    state.opt_stage1.step(state.params, tp.grads(), cfg.learning_rate)

    stage2_value = 0.0
    if cfg.stage2_enabled and run_stage2 and len(batch) >= 2:
        tape2 = ad.Tape()
        tp2 = TapeParams(tape2, state.params)
        loss2 = build_stage2_loss(tape2, tp2, batch, features.matrices, cfg)
        tape2.backward(loss2)
        state.opt_stage2.step(state.params, tp2.grads(), cfg.learning_rate)
        stage2_value = float(loss2.value[0, 0])

    def val(node):
        return float(node.value[0, 0]) if node is not None else 0.0

    return losses.LossBreakdown(rec=val(parts["rec"]), fib=val(parts["fib"]),
                                gib=val(parts["gib"]), reg=val(parts["reg"]),
                                stage2=stage2_value,
                                total_stage1=float(total.value[0, 0]))


def compute_representations(params: ModelParams, graphs: GraphBundle,
                            features: ModalityFeatures,
                            cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forward (expectation mask weights); returns value arrays."""
    tape = ad.Tape()
    tp = TapeParams(tape, params)
    outs = forward(tape, tp, graphs, features.matrices, cfg, mode="eval")
    return outs.user_repr.value.copy(), outs.item_repr.value.copy()


def evaluate_params(params: ModelParams, graphs: GraphBundle,
                    features: ModalityFeatures, interactions: InteractionSet,
                    cfg: RunConfig, split: str) -> MetricsResult:
    user_repr, item_repr = compute_representations(params, graphs, features, cfg)
    return evaluate_representations(user_repr, item_repr, interactions, split,
                                    cfg.eval_topk)


class EarlyStop:
    """Stop when the tracked value has not strictly improved for
    ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_recall: float = -np.inf
    stop_reason: str = ""


@dataclass
class TrainResult:
    report: TrainReport
    params: ModelParams
    graphs: GraphBundle
    config: RunConfig


def _rebuild_semantic(params: ModelParams, features: ModalityFeatures,
                      interactions: InteractionSet,
                      cfg: RunConfig) -> SemanticItemGraph:
    projected = [features.matrices[k] @ params.modality_weights[k]
                 + params.modality_biases[k]
                 for k in range(features.num_modalities)]
    topologies = [build_modality_knn(p, cfg.knn_topk) for p in projected]
    return SemanticItemGraph(interactions.num_items, topologies)


def run_training(interactions: InteractionSet, features: ModalityFeatures,
                 config: RunConfig, out_dir=None) -> TrainResult:
    """Full training loop with per-epoch validation and early stopping.

    Validation uses eval-mode masking (expectation weights). The best
    parameters by validation Recall@{first eval cutoff=20 when present}
    are returned; with an empty validation split a fixed epoch budget is
    used instead and the final parameters are kept.
    """
    cfg = config.resolved()
    init_rng = component_rng(cfg.seed, "init")
    state = TrainState(
        params=init_params(interactions.num_users, interactions.num_items,
                           features.dims, cfg, init_rng),
        graphs=build_graph_bundle(interactions, features.matrices, cfg),
        opt_stage1=Adam(active_stage1_names(cfg, features.num_modalities)),
        opt_stage2=Adam(stage2_param_names(features.num_modalities)),
        sample_rng=component_rng(cfg.seed, "sample"),
        mask_rng=component_rng(cfg.seed, "mask"),
    )
    sampler = TripleSampler(interactions, state.sample_rng)
    has_validation = any(len(v) for v in interactions.val)
    if not has_validation:
        warnings.warn("validation split is empty: training for the fixed "
                      f"epoch budget ({cfg.max_epochs}) without early stopping")
    recall_n = 20 if 20 in cfg.eval_topk else cfg.eval_topk[0]
    stopper = EarlyStop(cfg.early_stop_patience)
    report = TrainReport()
    best_params = state.params.copy()

    steps_per_epoch = max(1, -(-interactions.num_train() // cfg.batch_size))
    log_fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_fh = open(Path(out_dir) / "epochs.jsonl", "w", encoding="utf-8")
    try:
        stop_reason = "max_epochs"
        for epoch in range(1, cfg.max_epochs + 1):
            if cfg.graph_rebuild and state.graphs.semantic is not None and epoch > 1:
                state.graphs = GraphBundle(
                    state.graphs.norm_adj,
                    _rebuild_semantic(state.params, features, interactions, cfg))
            sums = np.zeros(6)
            stage2_per_batch = cfg.stage2_mode == "batch"
            for _ in range(steps_per_epoch):
                breakdown = train_step(sampler.sample(cfg.batch_size), state,
                                       features, cfg,
                                       run_stage2=stage2_per_batch)
                sums += [breakdown.rec, breakdown.fib, breakdown.gib,
                         breakdown.reg, breakdown.stage2,
                         breakdown.total_stage1]
            if cfg.stage2_enabled and cfg.stage2_mode == "epoch":
                for _ in range(steps_per_epoch):
                    batch = sampler.sample(cfg.batch_size)
                    if len(batch) < 2:
                        continue
                    tape2 = ad.Tape()
                    tp2 = TapeParams(tape2, state.params)
                    loss2 = build_stage2_loss(tape2, tp2, batch,
                                              features.matrices, cfg)
                    tape2.backward(loss2)
                    state.opt_stage2.step(state.params, tp2.grads(),
                                          cfg.learning_rate)
                    sums[4] += float(loss2.value[0, 0]) / steps_per_epoch

            means = sums / steps_per_epoch
            record = {"epoch": epoch,
                      "loss": {"rec": means[0], "fib": means[1],
                               "gib": means[2], "reg": means[3],
                               "stage2": means[4], "total_stage1": means[5]}}
            if has_validation:
                metrics = evaluate_params(state.params, state.graphs, features,
                                          interactions, cfg, "val")
                recall = metrics.per_n[recall_n]["recall"]
                record[f"val_recall@{recall_n}"] = recall
                improved = recall > report.best_val_recall
                if improved:
                    report.best_val_recall = recall
                    report.best_epoch = epoch
                    best_params = state.params.copy()
                if stopper.update(epoch, recall):
                    report.epochs.append(record)
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                    stop_reason = "patience_exhausted"
                    break
            report.epochs.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
        else:
            stop_reason = ("max_epochs" if has_validation
                           else "fixed_epochs_no_validation")
        report.stop_reason = stop_reason
    finally:
        if log_fh:
            log_fh.close()
    if not has_validation:
        report.best_epoch = len(report.epochs)
        best_params = state.params.copy()
    return TrainResult(report, best_params, state.graphs, cfg)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(out_dir, params: ModelParams, cfg: RunConfig) -> None:
    from .data import IBMF_F64, save_ibmf

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, arr in params.named().items():
        role = _ROLES.get(name, "projection")
        save_ibmf(out / f"{name}.ibmf", arr, version=IBMF_F64)
        tensors.append({"name": name, "shape": list(arr.shape), "role": role})
    manifest = {"tensors": tensors,
                "num_modalities": params.num_modalities,
                "config": cfg.to_text()}
    (out / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, RunConfig]:
    from .config import loads_config
    from .data import IBMF_F64, load_ibmf

    d = Path(ckpt_dir)
    manifest_path = d / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise DataError(f"{d}: not a checkpoint directory")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    arrays = {}
    for entry in manifest["tensors"]:
        arr = load_ibmf(d / f"{entry['name']}.ibmf", expect_version=IBMF_F64)
        if list(arr.shape) != entry["shape"]:
            raise DataError(f"checkpoint tensor {entry['name']}: shape "
                            f"{arr.shape} does not match manifest {entry['shape']}")
        arrays[entry["name"]] = arr
    k = manifest["num_modalities"]
    params = ModelParams(
        user_latent=arrays["user_latent"], item_latent=arrays["item_latent"],
        user_media=arrays["user_media"],
        modality_weights=[arrays[f"modality_w_{i}"] for i in range(k)],
        modality_biases=[arrays[f"modality_b_{i}"] for i in range(k)],
        fusion_logits=arrays["fusion_logits"],
        mask_hidden_w=arrays["mask_hidden_w"],
        mask_hidden_b=arrays["mask_hidden_b"],
        mask_out_w=arrays["mask_out_w"], mask_out_b=arrays["mask_out_b"])
    cfg = loads_config(manifest["config"], source=str(manifest_path))
    return params, cfg
