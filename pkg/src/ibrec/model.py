"""Model parameters and the forward map: modality projection, bipartite
and item-item graph propagation, representation fusion, and scoring.

Four backbones share one parameter set and differ only in wiring:

* ``vbpr``       — no graphs; score on concatenated latent + media blocks.
* ``vlightgcn``  — bipartite propagation only.
* ``lattice``    — latent-only bipartite propagation plus the item-item
                   semantic branch (no media block in the representations).
* ``vlattice``   — everything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import diags as sparse_diags

from . import autodiff as ad
from . import losses
from .config import RunConfig
from .errors import ConfigError
from .graphs import SemanticItemGraph, SparseMatrix, fuse_and_normalize

INIT_STD = 0.01


@dataclass
class ModelParams:
    """All trainable tensors, stored as plain float64 arrays."""

    user_latent: np.ndarray            # M x d
    item_latent: np.ndarray            # N x d
    user_media: np.ndarray             # M x d
    modality_weights: list[np.ndarray]  # per modality, d_k x d
    modality_biases: list[np.ndarray]   # per modality, 1 x d
    fusion_logits: np.ndarray          # K x 1
    mask_hidden_w: np.ndarray          # 4d x d
    mask_hidden_b: np.ndarray          # 1 x d
    mask_out_w: np.ndarray             # d x 1
    mask_out_b: np.ndarray             # 1 x 1

    @property
    def num_modalities(self) -> int:
        return len(self.modality_weights)

    @property
    def embedding_dim(self) -> int:
        return self.user_latent.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        """Stable name -> array mapping used by optimizers and checkpoints."""
        out = {
            "user_latent": self.user_latent,
            "item_latent": self.item_latent,
            "user_media": self.user_media,
        }
        for k in range(self.num_modalities):
            out[f"modality_w_{k}"] = self.modality_weights[k]
            out[f"modality_b_{k}"] = self.modality_biases[k]
        out["fusion_logits"] = self.fusion_logits
        out["mask_hidden_w"] = self.mask_hidden_w
        out["mask_hidden_b"] = self.mask_hidden_b
        out["mask_out_w"] = self.mask_out_w
        out["mask_out_b"] = self.mask_out_b
        return out

    def replace(self, name: str, value: np.ndarray) -> None:
        if name.startswith("modality_w_"):
            self.modality_weights[int(name.rsplit("_", 1)[1])] = value
        elif name.startswith("modality_b_"):
            self.modality_biases[int(name.rsplit("_", 1)[1])] = value
        else:
            setattr(self, name, value)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.user_latent.copy(), self.item_latent.copy(),
            self.user_media.copy(),
            [w.copy() for w in self.modality_weights],
            [b.copy() for b in self.modality_biases],
            self.fusion_logits.copy(), self.mask_hidden_w.copy(),
            self.mask_hidden_b.copy(), self.mask_out_w.copy(),
            self.mask_out_b.copy())


def init_params(num_users: int, num_items: int, modality_dims: list[int],
                cfg: RunConfig, rng: np.random.Generator) -> ModelParams:
    """Embeddings and weights ~ N(0, 0.01); biases and fusion logits zero."""
    d = cfg.embedding_dim
    return ModelParams(
        user_latent=rng.normal(0.0, INIT_STD, (num_users, d)),
        item_latent=rng.normal(0.0, INIT_STD, (num_items, d)),
        user_media=rng.normal(0.0, INIT_STD, (num_users, d)),
        modality_weights=[rng.normal(0.0, INIT_STD, (dk, d))
                          for dk in modality_dims],
        modality_biases=[np.zeros((1, d)) for _ in modality_dims],
        fusion_logits=np.zeros((len(modality_dims), 1)),
        mask_hidden_w=rng.normal(0.0, INIT_STD, (4 * d, d)),
        mask_hidden_b=np.zeros((1, d)),
        mask_out_w=rng.normal(0.0, INIT_STD, (d, 1)),
        mask_out_b=np.zeros((1, 1)),
    )


def stage2_param_names(num_modalities: int) -> list[str]:
    """The multimedia-preference subset: user media embedding + projections."""
    names = ["user_media"]
    for k in range(num_modalities):
        names += [f"modality_w_{k}", f"modality_b_{k}"]
    return names


def active_stage1_names(cfg: RunConfig, num_modalities: int) -> list[str]:
    """Parameters the stage-1 forward actually touches for this backbone."""
    names = ["user_latent", "item_latent"]
    uses_media_block = cfg.backbone in ("vbpr", "vlightgcn", "vlattice")
    uses_item_graph = cfg.backbone in ("lattice", "vlattice")
    uses_mask = uses_item_graph and cfg.gib_enabled
    if uses_media_block:
        names.append("user_media")
    if uses_media_block or uses_mask:
        for k in range(num_modalities):
            names += [f"modality_w_{k}", f"modality_b_{k}"]
    if uses_item_graph:
        names.append("fusion_logits")
    if uses_mask:
        names += ["mask_hidden_w", "mask_hidden_b", "mask_out_w", "mask_out_b"]
    return names


class TapeParams:
    """One tape's parameter nodes, keyed by the stable names."""

    def __init__(self, tape: ad.Tape, params: ModelParams):
        self.tape = tape
        self.nodes: dict[str, ad.Node] = {
            name: tape.parameter(arr) for name, arr in params.named().items()
        }

    def __getitem__(self, name: str) -> ad.Node:
        return self.nodes[name]

    def grads(self) -> dict[str, np.ndarray]:
        return {name: node.grad for name, node in self.nodes.items()}


@dataclass
class GraphBundle:
    """Static graph structure a forward pass propagates over."""

    norm_adj: SparseMatrix | None          # (M+N)^2, symmetric-normalized
    semantic: SemanticItemGraph | None     # per-modality kNN topologies


@dataclass
class ForwardOutputs:
    media_projs: list[ad.Node]          # per modality, N x d
    media_concat: ad.Node               # N x (K d)
    media_mean: ad.Node                 # N x d
    user_repr: ad.Node                  # M x D
    item_repr: ad.Node                  # N x D (fused; masked graph in train)
    item_sem: ad.Node | None            # semantic-branch output, masked graph
    item_sem_base: ad.Node | None       # same under the original graph,
                                        # gradient-blocked (GIB target)
    mask: losses.MaskedGraph | None
    params: TapeParams


def project_modalities(tape: ad.Tape, tp: TapeParams,
                       feature_matrices: list[np.ndarray]) -> tuple[list[ad.Node], ad.Node, ad.Node]:
    """Affine-map each modality into the embedding space.

    Returns (per-modality projections, their concatenation, their mean);
    the mean is the single media block used by propagation, the edge mask,
    and the stage-2 objective.
    """
    projs = []
    for k, feats in enumerate(feature_matrices):
        w = tp[f"modality_w_{k}"]
        if feats.shape[1] != w.rows:
            raise ConfigError(f"modality {k}: feature dim {feats.shape[1]} "
                              f"does not match projection input {w.rows}")
        projs.append(ad.add_bias(ad.matmul(tape.constant(feats), w),
                                 tp[f"modality_b_{k}"]))
    concat = projs[0]
    for p in projs[1:]:
        concat = ad.concat_cols(concat, p)
    mean = projs[0]
    for p in projs[1:]:
        mean = ad.add(mean, p)
    mean = ad.scale(mean, 1.0 / len(projs))
    return projs, concat, mean


def propagate_user_item(norm_adj: SparseMatrix, user0: ad.Node, item0: ad.Node,
                        layers: int) -> tuple[ad.Node, ad.Node]:
    """Parameter-free propagation over the normalized bipartite graph;
    the output is the mean of layers 0..L. Zero-degree nodes get a unit
    self-loop so isolated embeddings pass through unchanged."""
    num_users = user0.rows
    stacked = ad.concat_rows(user0, item0)
    if norm_adj.shape != (stacked.rows, stacked.rows):
        raise ValueError(f"norm_adj shape {norm_adj.shape} does not match "
                         f"{stacked.rows} nodes")
    csr = norm_adj.to_csr()
    isolated = np.diff(csr.indptr) == 0
    if isolated.any():
        csr = csr + sparse_diags(isolated.astype(np.float64))
    acc = stacked
    layer = stacked
    for _ in range(layers):
        layer = ad.sparse_mat_mul(csr, layer)
        acc = ad.add(acc, layer)
    mean = ad.scale(acc, 1.0 / (layers + 1))
    users = ad.row_gather(mean, np.arange(num_users))
    items = ad.row_gather(mean, np.arange(num_users, num_users + item0.rows))
    return users, items


def propagate_item_item(edge_rows: np.ndarray, edge_cols: np.ndarray,
                        num_items: int, edge_values: ad.Node,
                        item0: ad.Node, layers: int,
                        csr_template: tuple | None = None) -> ad.Node:
    """Item-item propagation; the output is the last layer, not the mean."""
    out = item0
    for _ in range(layers):
        out = ad.edge_spmm(edge_rows, edge_cols, num_items, edge_values, out,
                           csr_template=csr_template)
    return out


def fuse_item_representations(item_bip: ad.Node, item_sem: ad.Node) -> ad.Node:
    """Add the row-normalized semantic branch as a bounded residual."""
    if item_bip.shape != item_sem.shape:
        raise ValueError(f"fuse: shape mismatch {item_bip.shape} vs {item_sem.shape}")
    return ad.add(item_bip, ad.l2_row_normalize(item_sem, losses.ROW_NORM_EPS))


def predict_scores(user_repr: ad.Node, item_repr: ad.Node,
                   users, items) -> ad.Node:
    """Row inner products <user_repr[a], item_repr[i]> as a column."""
    picked_u = ad.row_gather(user_repr, users)
    picked_i = ad.row_gather(item_repr, items)
    return ad.row_sum(ad.mul(picked_u, picked_i))


def forward(tape: ad.Tape, tp: TapeParams, graphs: GraphBundle,
            feature_matrices: list[np.ndarray], cfg: RunConfig, *,
            mode: str = "train", mask_noise: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> ForwardOutputs:
    """Produce user/item representations for the configured backbone.

    Train mode samples relaxed edge-mask multipliers (noise can be pinned
    for gradient checks); eval mode uses expectation weights. When the
    graph-level bottleneck is enabled the unmasked item representation is
    also produced as a gradient-blocked target.
    """
    projs, concat, mean = project_modalities(tape, tp, feature_matrices)
    num_items = feature_matrices[0].shape[0]
    uses_media = cfg.backbone in ("vbpr", "vlightgcn", "vlattice")
    uses_bipartite = cfg.backbone in ("vlightgcn", "lattice", "vlattice")
    uses_item_graph = cfg.backbone in ("lattice", "vlattice")

    if uses_media:
        user0 = ad.concat_cols(tp["user_latent"], tp["user_media"])
        item0 = ad.concat_cols(tp["item_latent"], mean)
    else:
        user0, item0 = tp["user_latent"], tp["item_latent"]

    if uses_bipartite:
        if graphs.norm_adj is None:
            raise ConfigError(f"backbone {cfg.backbone!r} needs the bipartite graph")
        user_repr, item_bip = propagate_user_item(graphs.norm_adj, user0,
                                                  item0, cfg.gcn_layers)
    else:
        user_repr, item_bip = user0, item0

    mask = None
    item_sem = None
    item_sem_base = None
    if uses_item_graph:
        sem = graphs.semantic
        if sem is None:
            raise ConfigError(f"backbone {cfg.backbone!r} needs the semantic graph")
        base_values = fuse_and_normalize(sem, tape, tp["fusion_logits"])
        if cfg.gib_enabled:
            probs, logits = losses.edge_mask_probs(
                tape, sem, mean, tp["item_latent"], tp["mask_hidden_w"],
                tp["mask_hidden_b"], tp["mask_out_w"], tp["mask_out_b"])
            mask = losses.sample_masked_graph(
                base_values, probs, cfg.mask_temperature, mode=mode,
                rng=rng, noise=mask_noise, logits=logits)
            edge_values = mask.edge_values
        else:
            edge_values = base_values
        item_sem = propagate_item_item(sem.edge_rows, sem.edge_cols, num_items,
                                       edge_values, item0, cfg.gcn_layers,
                                       csr_template=sem.csr_template)
        item_repr = fuse_item_representations(item_bip, item_sem)
        if cfg.gib_enabled:
            item_sem_base = ad.stop_gradient(propagate_item_item(
                sem.edge_rows, sem.edge_cols, num_items, base_values, item0,
                cfg.gcn_layers, csr_template=sem.csr_template))
    else:
        item_repr = item_bip

    return ForwardOutputs(projs, concat, mean, user_repr, item_repr,
                          item_sem, item_sem_base, mask, tp)
