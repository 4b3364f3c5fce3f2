import numpy as np
import pytest

import ibrec.autodiff as ad
from ibrec.config import RunConfig
from ibrec.data import InteractionSet, ModalityFeatures, TripleBatch
from ibrec.model import (ModelParams, TapeParams, active_stage1_names, forward,
                         init_params, stage2_param_names)
from ibrec.training import (build_graph_bundle, build_stage1_loss,
                            build_stage2_loss, component_rng)


def toy_interactions():
    def arr(items):
        return np.array(items, dtype=np.int64)

    train = [arr([0, 1]), arr([1, 2]), arr([3, 4]), arr([0, 5])]
    val = [arr([2]), arr([4]), arr([]), arr([])]
    test = [arr([3]), arr([5]), arr([0]), arr([])]
    return InteractionSet(4, 6, train, val, test,
                          {f"u{u}": u for u in range(4)},
                          {f"i{i}": i for i in range(6)})


def toy_features(seed=21):
    rng = np.random.default_rng(seed)
    # strictly positive features keep all cosine similarities positive,
    # which keeps the fused-degree |.| away from its kink during checks
    return ModalityFeatures(
        ["visual", "text"],
        [rng.uniform(0.1, 1.0, (6, 5)), rng.uniform(0.1, 1.0, (6, 7))])


def toy_config(**overrides):
    base = dict(embedding_dim=8, gcn_layers=2, knn_topk=2, backbone="vlattice",
                alpha=0.8, beta=0.6, sigma_sq_fib=0.25, sigma_sq_gib=0.25,
                tau=0.2, lambda_reg=1e-3, learning_rate=1e-3, batch_size=8,
                max_epochs=3, early_stop_patience=3, seed=7)
    base.update(overrides)
    return RunConfig(**base).resolved()


def toy_batch():
    return TripleBatch(np.array([0, 1, 2, 3, 0, 1]),
                       np.array([0, 1, 3, 0, 1, 2]),
                       np.array([2, 4, 0, 1, 3, 5]))


PARAM_ORDER_K2 = ["user_latent", "item_latent", "user_media",
                  "modality_w_0", "modality_b_0", "modality_w_1",
                  "modality_b_1", "fusion_logits", "mask_hidden_w",
                  "mask_hidden_b", "mask_out_w", "mask_out_b"]


def params_from_arrays(arrays, num_modalities=2):
    named = dict(zip(PARAM_ORDER_K2, arrays))
    return ModelParams(
        user_latent=named["user_latent"], item_latent=named["item_latent"],
        user_media=named["user_media"],
        modality_weights=[named[f"modality_w_{k}"] for k in range(num_modalities)],
        modality_biases=[named[f"modality_b_{k}"] for k in range(num_modalities)],
        fusion_logits=named["fusion_logits"],
        mask_hidden_w=named["mask_hidden_w"],
        mask_hidden_b=named["mask_hidden_b"],
        mask_out_w=named["mask_out_w"], mask_out_b=named["mask_out_b"])


class ToyProblem:
    def __init__(self, cfg=None, seed=7):
        self.cfg = cfg or toy_config(seed=seed)
        self.interactions = toy_interactions()
        self.features = toy_features()
        self.graphs = build_graph_bundle(self.interactions,
                                         self.features.matrices, self.cfg)
        self.params = init_params(self.interactions.num_users,
                                  self.interactions.num_items,
                                  self.features.dims, self.cfg,
                                  component_rng(self.cfg.seed, "init"))
        # re-draw at trained-parameter scale: the fresh 0.01-std init leaves
        # gradients so small that finite-difference noise dominates them
        scale_rng = np.random.default_rng(self.cfg.seed + 1000)
        for name, arr in self.params.named().items():
            self.params.replace(name, scale_rng.normal(0.0, 0.3, arr.shape))
        self.batch = toy_batch()
        if self.graphs.semantic is not None:
            noise_rng = component_rng(self.cfg.seed, "mask")
            self.mask_noise = noise_rng.logistic(
                size=self.graphs.semantic.num_edges)
        else:
            self.mask_noise = None

    def stage1_objective(self):
        """(f, arrays) for finite_diff_check over every stage-1 parameter.

        The graph-level term's reference representation is gradient-blocked
        in training, so the check differentiates the loss with that
        reference held fixed at the base parameters.
        """
        arrays = [a.copy() for a in
                  (self.params.named()[n] for n in PARAM_ORDER_K2)]
        active = active_stage1_names(self.cfg, 2)
        frozen_target = None
        if self.cfg.gib_enabled and self.graphs.semantic is not None:
            tape0 = ad.Tape()
            outs0 = forward(tape0, TapeParams(tape0, params_from_arrays(arrays)),
                            self.graphs, self.features.matrices, self.cfg,
                            mode="train", mask_noise=self.mask_noise)
            frozen_target = outs0.item_sem_base.value.copy()

        def f(arrs):
            params = params_from_arrays(arrs)
            tape = ad.Tape()
            tp = TapeParams(tape, params)
            outs = forward(tape, tp, self.graphs, self.features.matrices,
                           self.cfg, mode="train", mask_noise=self.mask_noise)
            if frozen_target is not None:
                outs.item_sem_base = tape.constant(frozen_target)
            total, _ = build_stage1_loss(tape, outs, self.batch,
                                         self.features.matrices, self.cfg,
                                         active)
            tape.backward(total)
            return (float(total.value[0, 0]),
                    [tp.nodes[n].grad for n in PARAM_ORDER_K2])

        return f, arrays

    def stage2_objective(self):
        """(f, arrays) restricted to the stage-2 parameter subset."""
        names = stage2_param_names(2)
        arrays = [self.params.named()[n].copy() for n in names]

        def f(arrs):
            params = self.params.copy()
            for name, arr in zip(names, arrs):
                params.replace(name, arr)
            tape = ad.Tape()
            tp = TapeParams(tape, params)
            loss = build_stage2_loss(tape, tp, self.batch,
                                     self.features.matrices, self.cfg)
            tape.backward(loss)
            return (float(loss.value[0, 0]),
                    [tp.nodes[n].grad for n in names])

        return f, arrays


@pytest.fixture
def toy_problem():
    return ToyProblem()
