"""Loss components: HSIC dependence estimator, feature-level and
graph-level information-bottleneck regularizers, the relaxed edge mask,
pairwise ranking loss, and the stage-2 contrastive objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ROW_NORM_EPS = 1e-12


@dataclass
class HsicConfig:
    sigma_sq: float
    normalize_inputs: bool = True

    def __post_init__(self) -> None:
        if self.sigma_sq <= 0:
            raise ValueError("sigma_sq must be positive")


@dataclass
class MaskedGraph:
    """Per-edge keep probabilities and (relaxed) multipliers on a fixed
    fused topology; ``edge_values`` are the masked, normalized weights."""

    base_values: ad.Node       # E x 1 normalized fused similarities
    keep_probs: ad.Node        # E x 1, in (0, 1)
    multipliers: ad.Node       # E x 1 relaxed samples (train) or probs (eval)
    edge_values: ad.Node       # E x 1 base * multiplier


@dataclass
class LossBreakdown:
    rec: float
    fib: float
    gib: float
    reg: float
    stage2: float
    total_stage1: float

    def as_dict(self) -> dict:
        return {"rec": self.rec, "fib": self.fib, "gib": self.gib,
                "reg": self.reg, "stage2": self.stage2,
                "total_stage1": self.total_stage1}


# ---------------------------------------------------------------------------
# HSIC


def rbf_kernel_matrix(batch: ad.Node, cfg: HsicConfig) -> ad.Node:
    """exp(-||x_i - x_j||^2 / (2 sigma^2)), optionally on L2-normalized rows."""
    if batch.rows < 2:
        raise ValueError(f"kernel needs >= 2 rows, got {batch.rows}")
    if cfg.normalize_inputs:
        batch = ad.l2_row_normalize(batch, ROW_NORM_EPS)
    dist = ad.pairwise_sqdist(batch)
    return ad.exp(ad.scale(dist, -0.5 / cfg.sigma_sq))


def _centered(kernel: ad.Node) -> ad.Node:
    """K -> H K H with H = I - (1/n) 1 1^T, composed so a constant-row
    input centers to an exact zero matrix."""
    tape = kernel.tape
    n = kernel.rows
    n_col = tape.constant(np.full((n, 1), float(n)))
    ones_n1 = tape.constant(np.ones((n, 1)))
    ones_1n = tape.constant(np.ones((1, n)))
    row_means = ad.div(ad.row_sum(kernel), n_col)
    col_means = ad.div(ad.row_sum(ad.transpose(kernel)), n_col)
    total_mean = ad.div(ad.sum_all(kernel),
                        tape.constant([[float(n) * float(n)]]))
    by_row = ad.matmul(row_means, ones_1n)
    by_col = ad.matmul(ones_n1, ad.transpose(col_means))
    by_all = ad.matmul(ones_n1, ad.matmul(total_mean, ones_1n))
    return ad.add(ad.sub(ad.sub(kernel, by_col), by_row), by_all)


def hsic_estimate(x_batch: ad.Node, y_batch: ad.Node, cfg: HsicConfig) -> ad.Node:
    """Biased batch HSIC: (n-1)^-2 Tr(K_x H K_y H), differentiable in both
    inputs. Rows of the two batches must be aligned."""
    n = x_batch.rows
    if n < 2:
        raise ValueError(f"hsic_estimate needs a batch of >= 2, got {n}")
    if y_batch.rows != n:
        raise ValueError("hsic_estimate: batches must have equal row counts")
    kx = _centered(rbf_kernel_matrix(x_batch, cfg))
    ky = _centered(rbf_kernel_matrix(y_batch, cfg))
    return ad.scale(ad.sum_all(ad.mul(kx, ky)), 1.0 / (n - 1) ** 2)


def fib_loss(proj_batches: list[ad.Node], feat_batches: list[ad.Node],
             cfg: HsicConfig) -> ad.Node:
    """Sum over modalities of HSIC(projection batch, raw feature batch)."""
    if len(proj_batches) != len(feat_batches) or not proj_batches:
        raise ValueError("fib_loss: one feature batch per projection batch")
    total = None
    for proj, feat in zip(proj_batches, feat_batches):
        if proj.rows != feat.rows:
            raise ValueError("fib_loss: misaligned item batches")
        term = hsic_estimate(proj, feat, cfg)
        total = term if total is None else ad.add(total, term)
    return total


def gib_loss(item_masked_batch: ad.Node, item_base_batch: ad.Node,
             cfg: HsicConfig) -> ad.Node:
    """HSIC between masked-graph and original-graph item representations.

    The original-graph branch is a constant target: its gradient is
    blocked so the masked structure chases minimal dependence on a fixed
    reference.
    """
    return hsic_estimate(item_masked_batch,
                         ad.stop_gradient(item_base_batch), cfg)


# ---------------------------------------------------------------------------
# preference-guided edge mask


def edge_mask_probs(tape: ad.Tape, semantic_graph, item_media: ad.Node,
                    item_latent: ad.Node, hidden_w: ad.Node, hidden_b: ad.Node,
                    out_w: ad.Node, out_b: ad.Node) -> tuple[ad.Node, ad.Node]:
    """Per-edge keep probability from both endpoints' media + latent rows.

    Returns (probs, logits); the logits feed the relaxed sampler directly.
    """
    rows, cols = semantic_graph.edge_rows, semantic_graph.edge_cols
    feats = ad.concat_cols(
        ad.concat_cols(ad.row_gather(item_media, rows),
                       ad.row_gather(item_latent, rows)),
        ad.concat_cols(ad.row_gather(item_media, cols),
                       ad.row_gather(item_latent, cols)))
    hidden = ad.tanh(ad.add_bias(ad.matmul(feats, hidden_w), hidden_b))
    logits = ad.add_bias(ad.matmul(hidden, out_w), out_b)
    return ad.sigmoid(logits), logits


def sample_masked_graph(base_values: ad.Node, keep_probs: ad.Node,
                        temperature: float, *, mode: str = "train",
                        rng: np.random.Generator | None = None,
                        noise: np.ndarray | None = None,
                        logits: ad.Node | None = None) -> MaskedGraph:
    """Multiply edge values by Bernoulli-keep multipliers.

    Train mode draws binary-concrete relaxations
    sigmoid((log w - log(1-w) + log u - log(1-u)) / temperature) with
    u ~ Uniform(0,1); the logistic noise can be passed explicitly (for
    reproducible gradient checks) or drawn from ``rng``. Eval mode uses
    the expectation w itself.
    """
    if temperature <= 0:
        raise ValueError("mask temperature must be positive")
    tape = base_values.tape
    if mode == "eval":
        multipliers = keep_probs
    elif mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("train-mode masking needs rng or explicit noise")
            noise = rng.logistic(size=base_values.rows)
        noise_node = tape.constant(np.asarray(noise, dtype=np.float64).reshape(-1, 1))
        if logits is None:
            one = tape.constant(np.ones(keep_probs.shape))
            logits = ad.sub(ad.log(keep_probs), ad.log(ad.sub(one, keep_probs)))
        multipliers = ad.sigmoid(ad.scale(ad.add(logits, noise_node),
                                          1.0 / temperature))
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return MaskedGraph(base_values, keep_probs, multipliers,
                       ad.mul(base_values, multipliers))


# ---------------------------------------------------------------------------
# ranking and contrastive objectives


def l2_penalty(params: list[ad.Node], lam: float) -> ad.Node | None:
    """lam * sum of squared entries over the given parameter nodes."""
    if lam == 0.0 or not params:
        return None
    total = None
    for p in params:
        term = ad.sum_all(ad.mul(p, p))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, lam)


def bpr_loss(scores_pos: ad.Node, scores_neg: ad.Node,
             params: list[ad.Node] | None = None, lam: float = 0.0) -> ad.Node:
    """Mean -log sigmoid(pos - neg), plus lam * ||params||^2 when given."""
    if scores_pos.shape != scores_neg.shape:
        raise ValueError("bpr_loss: score lists must be parallel")
    diff = ad.sub(scores_pos, scores_neg)
    loss = ad.scale(ad.sum_all(ad.softplus(ad.neg(diff))), 1.0 / diff.rows)
    reg = l2_penalty(params or [], lam)
    return loss if reg is None else ad.add(loss, reg)


def _infonce_from_logits(logits: ad.Node) -> ad.Node:
    """Mean cross-entropy of each row's diagonal entry under row softmax."""
    n = logits.rows
    diag = ad.take_diag(logits)
    log_denom = ad.log(ad.row_sum(ad.exp(logits)))
    return ad.scale(ad.sum_all(ad.sub(log_denom, diag)), 1.0 / n)


def stage2_infonce(user_media_batch: ad.Node, item_media_batch: ad.Node,
                   tau: float) -> ad.Node:
    """In-batch contrastive loss on cosine similarities / tau.

    Row a of both batches is a positive (user, item) pair; every batch
    item (including the positive itself) is in the denominator.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = user_media_batch.rows
    if n < 2:
        raise ValueError(f"stage2_infonce needs a batch of >= 2, got {n}")
    if item_media_batch.rows != n:
        raise ValueError("stage2_infonce: batches must be parallel")
    users = ad.l2_row_normalize(user_media_batch, ROW_NORM_EPS)
    items = ad.l2_row_normalize(item_media_batch, ROW_NORM_EPS)
    logits = ad.scale(ad.matmul(users, ad.transpose(items)), 1.0 / tau)
    return _infonce_from_logits(logits)


def stage1_total(rec: ad.Node, fib: ad.Node | None, gib: ad.Node | None,
                 reg: ad.Node | None, alpha: float, beta: float) -> ad.Node:
    """rec + alpha * fib + beta * gib + reg; disabled terms are passed as None."""
    total = rec
    if reg is not None:
        total = ad.add(total, reg)
    if fib is not None:
        total = ad.add(total, ad.scale(fib, alpha))
    if gib is not None:
        total = ad.add(total, ad.scale(gib, beta))
    return total
