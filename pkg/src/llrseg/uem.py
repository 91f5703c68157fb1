"""Unknown Estimation Module: projection MLP + two-class head, the
log-likelihood-ratio score and loss, and stage-2 training with a hard
freeze of every stage-1 parameter.

The score is the same three-term expression for both head kinds:
log p_out - log p_in - max_k F_k. Stage-2 training only ever touches the
phi tensors (projection + UEM head); the theta tensors are digest-checked
before and after.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import gmm as gmm_mod
from .datamodel import (
    IGNORE,
    BinaryOutlierMap,
    FeatureMap,
    ModelBundle,
    ScoreMap,
    tensor_digest,
)
from .errors import AllIgnored, DimMismatch, FreezeViolation, LlrsegError
from .gmm import (
    GmmHead,
    component_log_densities,
    em_update,
    sinkhorn_assign,
    uniform_weights,
)
from .inlier import (
    DISCRIMINATIVE,
    GENERATIVE,
    InlierModel,
    inlier_from_bundle,
    max_inlier_logit,
    stage1_tensor_names,
)
from .neuralcore import (
    DenseLayer,
    Mlp,
    make_mlp,
    make_optimizer,
    mlp_backward,
    mlp_forward,
    mlp_grads_dict,
    mlp_params,
    optimizer_step,
    set_mlp_params,
    sigmoid_bce_with_logits,
    xavier_dense,
)

INLIER_CLASS = 0
OUTLIER_CLASS = 1


@dataclass
class UemModel:
    projection: Mlp   # exactly 3 layers, C_e -> C_p
    head: object      # DenseLayer (C_p -> 2) or GmmHead with 2 classes
    head_kind: str

    def __post_init__(self):
        if len(self.projection.layers) != 3:
            raise ValueError("the projection MLP must have exactly 3 layers")
        if self.head_kind == DISCRIMINATIVE:
            if not isinstance(self.head, DenseLayer):
                raise TypeError("discriminative UEM head must be a DenseLayer")
            if self.head.out_dim != 2 or self.head.in_dim != self.projection.out_dim:
                raise DimMismatch("UEM head must map C_p -> 2")
        elif self.head_kind == GENERATIVE:
            if not isinstance(self.head, GmmHead):
                raise TypeError("generative UEM head must be a GmmHead")
            if self.head.classes != 2 or self.head.dim != self.projection.out_dim:
                raise DimMismatch("UEM GMM head must have 2 classes over C_p dims")
        else:
            raise ValueError(f"unknown head kind {self.head_kind!r}")

    @property
    def feature_dim(self) -> int:
        return self.projection.in_dim

    @property
    def projection_dim(self) -> int:
        return self.projection.out_dim

    def parameter_count(self) -> int:
        n = self.projection.parameter_count()
        if self.head_kind == DISCRIMINATIVE:
            n += self.head.weight.size + self.head.bias.size
        else:
            n += self.head.parameter_count()
        return n


def build_uem(feature_dim: int, projection_dim: int, proj_hidden: int,
              head_kind: str, components: int, rng: np.random.Generator) -> UemModel:
    projection = make_mlp([feature_dim, proj_hidden, proj_hidden, projection_dim], rng)
    if head_kind == DISCRIMINATIVE:
        head = xavier_dense(projection_dim, 2, "identity", rng)
    else:
        means = rng.standard_normal((2, components, projection_dim))
        head = GmmHead(means=means,
                       variances=np.ones((2, components, projection_dim)),
                       weights=uniform_weights(2, components))
    return UemModel(projection=projection, head=head, head_kind=head_kind)


def _uem_head_logits(u: UemModel, z: np.ndarray) -> np.ndarray:
    """[N, 2] head outputs over projected features."""
    if u.head_kind == DISCRIMINATIVE:
        return z @ u.head.weight.T + u.head.bias
    return gmm_mod.gmm_all_log_densities(z, u.head)


def uem_forward(u: UemModel, f: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (log p_in, log p_out) maps, each [H, W]."""
    if f.channels != u.feature_dim:
        raise DimMismatch(
            f"feature map has {f.channels} channels, UEM expects {u.feature_dim}")
    z, _ = mlp_forward(u.projection, f.pixels())
    out = _uem_head_logits(u, z)
    h, w = f.height, f.width
    return out[:, INLIER_CLASS].reshape(h, w), out[:, OUTLIER_CLASS].reshape(h, w)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _three_term_llr(log_p_out, log_p_in, max_logit) -> np.ndarray:
    if not (log_p_out.shape == log_p_in.shape == max_logit.shape):
        raise DimMismatch(
            f"score terms differ in shape: {log_p_out.shape}, "
            f"{log_p_in.shape}, {max_logit.shape}")
    return log_p_out - log_p_in - max_logit


def llr_score(log_p_out, log_p_in, max_logit) -> ScoreMap:
    """LLR = log p_out - log p_in - max_k F_k, exact per-pixel subtraction."""
    return ScoreMap(_three_term_llr(np.asarray(log_p_out, dtype=np.float64),
                                    np.asarray(log_p_in, dtype=np.float64),
                                    np.asarray(max_logit, dtype=np.float64)))


def llr_score_generative(log_p_out, log_p_in, max_log_density) -> ScoreMap:
    """Generative derivation: the inlier evidence is the product of the UEM
    inlier density and the best class density, so its log splits into the
    same three-term subtraction."""
    return llr_score(log_p_out, log_p_in, max_log_density)


def llr_score_discriminative(log_p_out, log_p_in, max_logit) -> ScoreMap:
    """Discriminative derivation: the softmax normalizer shifts every class
    logit equally, so it drops from the max and the same three-term
    subtraction remains."""
    return llr_score(log_p_out, log_p_in, max_logit)


def ood_score(log_p_out) -> ScoreMap:
    """Outlier-density-only baseline: identity passthrough."""
    return ScoreMap(np.asarray(log_p_out, dtype=np.float64))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LlrConfig:
    alpha: float = 1.0
    beta: float = 0.01
    lr: float = 1e-2
    epochs: int = 8
    batch_size: int = 1024
    seed: int = 0
    projection_dim: int = 64
    proj_hidden: int = 24
    head_kind: str = GENERATIVE
    gmm_components: int = 5
    gmm_epsilon: float = 0.1
    gmm_sinkhorn_iters: int = 10
    gmm_momentum: float = 0.5
    gmm_max_pixels_per_class: int = 4096

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def uem_params(u: UemModel) -> dict[str, np.ndarray]:
    params = mlp_params(u.projection, "uem.proj")
    if u.head_kind == DISCRIMINATIVE:
        params["uem.head.weight"] = u.head.weight
        params["uem.head.bias"] = u.head.bias
    else:
        for k in range(2):
            for c in range(u.head.components):
                params[f"uem.head.{k}.{c}.mean"] = u.head.means[k, c]
                params[f"uem.head.{k}.{c}.var"] = u.head.variances[k, c]
    return params


def set_uem_params(u: UemModel, params: dict[str, np.ndarray]) -> None:
    set_mlp_params(u.projection, "uem.proj", params)
    if u.head_kind == DISCRIMINATIVE:
        u.head.weight = np.asarray(params["uem.head.weight"], dtype=np.float64)
        u.head.bias = np.asarray(params["uem.head.bias"], dtype=np.float64)
    else:
        comp = u.head.components
        means = np.stack([
            np.stack([params[f"uem.head.{k}.{c}.mean"] for c in range(comp)])
            for k in range(2)])
        variances = np.stack([
            np.stack([params[f"uem.head.{k}.{c}.var"] for c in range(comp)])
            for k in range(2)])
        u.head = GmmHead(means=means,
                         variances=np.maximum(variances, gmm_mod.VAR_FLOOR),
                         weights=u.head.weights)


def _loss_and_grads(u: UemModel, x: np.ndarray, max_logit: np.ndarray,
                    targets: np.ndarray, cfg: LlrConfig):
    """Core of the LLR loss over flattened pixels.

    x: [N, C_e] raw features; max_logit: [N] frozen inlier term;
    targets: [N] in {0, 1, IGNORE}. Returns (loss, grads over phi).
    """
    valid = targets != IGNORE
    if not valid.any():
        raise AllIgnored("every pixel is ignored")

    z, tape = mlp_forward(u.projection, x)
    d_z = np.zeros_like(z)
    grads: dict[str, np.ndarray] = {}

    if u.head_kind == DISCRIMINATIVE:
        logits2 = z @ u.head.weight.T + u.head.bias
    else:
        logits2, gmm_back = gmm_mod.gmm_all_log_densities_with_grad(z, u.head)
    d_logits2 = np.zeros_like(logits2)

    llr = logits2[:, OUTLIER_CLASS] - logits2[:, INLIER_CLASS] - max_logit
    loss, d_llr = sigmoid_bce_with_logits(llr, targets)
    d_logits2[:, OUTLIER_CLASS] += d_llr
    d_logits2[:, INLIER_CLASS] -= d_llr

    if cfg.alpha > 0:
        ce, d_ce = _softmax_ce_rows(logits2, targets)
        loss += cfg.alpha * ce
        d_logits2 += cfg.alpha * d_ce

    contrast_extra = None
    if cfg.alpha > 0 and cfg.beta > 0 and u.head_kind == GENERATIVE:
        c_loss, d_comp, comp_back_inputs = _contrast_loss(u, z, targets, cfg)
        loss += cfg.alpha * cfg.beta * c_loss
        contrast_extra = (cfg.alpha * cfg.beta * d_comp, comp_back_inputs)

    # head backward
    if u.head_kind == DISCRIMINATIVE:
        grads["uem.head.weight"] = d_logits2.T @ z
        grads["uem.head.bias"] = d_logits2.sum(axis=0)
        d_z += d_logits2 @ u.head.weight
    else:
        dz_g, dmeans, dvars = gmm_back(d_logits2)
        d_z += dz_g
        if contrast_extra is not None:
            d_comp, _ = contrast_extra
            dz_c, dmeans_c, dvars_c = _component_backward(u.head, z, d_comp)
            d_z += dz_c
            dmeans = dmeans + dmeans_c
            dvars = dvars + dvars_c
        for k in range(2):
            for c in range(u.head.components):
                grads[f"uem.head.{k}.{c}.mean"] = dmeans[k, c]
                grads[f"uem.head.{k}.{c}.var"] = dvars[k, c]

    proj_grads, _ = mlp_backward(u.projection, tape, d_z)
    grads.update(mlp_grads_dict(proj_grads, "uem.proj"))
    return float(loss), grads


def _softmax_ce_rows(logits2: np.ndarray, targets: np.ndarray):
    """2-class CE over valid rows, gradient zero elsewhere."""
    from .neuralcore import softmax_cross_entropy

    return softmax_cross_entropy(logits2, targets)


def _all_component_logliks(head: GmmHead, z: np.ndarray) -> np.ndarray:
    """[N, 2C] per-component log densities, class-major column order."""
    cols = []
    for k in range(head.classes):
        cols.append(component_log_densities(z, head, k))
    return np.concatenate(cols, axis=1)


def _contrast_loss(u: UemModel, z: np.ndarray, targets: np.ndarray,
                   cfg: LlrConfig):
    """Cross-entropy over all 2C component logits against the
    Sinkhorn-assigned component inside each pixel's own class GMM."""
    head = u.head
    comp = head.components
    comp_ll = _all_component_logliks(head, z)
    assigned = np.full(z.shape[0], IGNORE, dtype=np.int64)
    for k in range(2):
        rows = np.nonzero(targets == k)[0]
        if rows.size == 0:
            continue
        class_ll = comp_ll[rows, k * comp:(k + 1) * comp]
        if rows.size < comp:
            assigned[rows] = k * comp + np.argmax(class_ll, axis=1)
            continue
        plan = sinkhorn_assign(class_ll, cfg.gmm_epsilon, cfg.gmm_sinkhorn_iters)
        assigned[rows] = k * comp + np.argmax(plan.matrix, axis=1)
    from .neuralcore import softmax_cross_entropy

    loss, d_comp = softmax_cross_entropy(comp_ll, assigned)
    return loss, d_comp, None


def _component_backward(head: GmmHead, z: np.ndarray, d_comp: np.ndarray):
    """Backward of the [N, 2C] component log densities wrt z and parameters."""
    comp = head.components
    dz = np.zeros_like(z)
    dmeans = np.zeros_like(head.means)
    dvars = np.zeros_like(head.variances)
    for k in range(head.classes):
        for c in range(comp):
            coeff = d_comp[:, k * comp + c]
            diff = z - head.means[k, c]
            inv = 1.0 / head.variances[k, c]
            g = diff * inv
            dz += coeff[:, None] * (-g)
            dmeans[k, c] = coeff @ g
            dvars[k, c] = coeff @ (0.5 * (diff**2 * inv**2 - inv))
    return dz, dmeans, dvars


def llr_loss(u: UemModel, inlier_model: InlierModel, f: FeatureMap,
             outliers: BinaryOutlierMap, cfg: LlrConfig):
    """LLR training loss and gradients over the phi tensors only.

    The inlier model must be flagged frozen; no theta tensor ever appears
    in the returned gradient record.
    """
    if not inlier_model.frozen:
        raise FreezeViolation("stage-1 model must be frozen before UEM training")
    if (f.height, f.width) != (outliers.height, outliers.width):
        raise DimMismatch("feature map and outlier map dims differ")
    max_logit = max_inlier_logit(inlier_model, f).ravel()
    return _loss_and_grads(u, f.pixels(), max_logit, outliers.labels.ravel(), cfg)


# ---------------------------------------------------------------------------
# stage-2 training
# ---------------------------------------------------------------------------

def _refresh_uem_gmm(head: GmmHead, z: np.ndarray, targets: np.ndarray,
                     cfg: LlrConfig, rng: np.random.Generator,
                     counters: dict) -> GmmHead:
    for k in range(2):
        feats = z[targets == k]
        if feats.shape[0] < head.components:
            continue
        if feats.shape[0] > cfg.gmm_max_pixels_per_class:
            idx = rng.choice(feats.shape[0], cfg.gmm_max_pixels_per_class,
                             replace=False)
            feats = feats[idx]
        comp_ll = component_log_densities(feats, head, k)
        plan = sinkhorn_assign(comp_ll, cfg.gmm_epsilon, cfg.gmm_sinkhorn_iters)
        head = em_update(head, k, feats, plan, cfg.gmm_momentum, counters)
    return head


def train_uem(stage1: ModelBundle, dataset, cfg: LlrConfig) -> ModelBundle:
    """Train the UEM on (FeatureMap, BinaryOutlierMap) pairs.

    The returned stage-2 bundle embeds every stage-1 tensor byte-identically;
    a digest mismatch at entry or exit raises FreezeViolation.
    """
    if stage1.manifest["stage"] != "inlier":
        raise LlrsegError("train_uem needs a stage-1 (inlier) bundle")
    if not dataset:
        raise LlrsegError("empty dataset")

    initial_digests = {name: tensor_digest(stage1.tensors[name])
                       for name in stage1_tensor_names(stage1)}
    declared = stage1.manifest.get("tensors")
    if declared is not None:
        for name, digest in initial_digests.items():
            if declared[name]["digest"] != digest:
                raise FreezeViolation(f"stage-1 tensor {name!r} digest mismatch")

    inlier_model = inlier_from_bundle(stage1)
    inlier_model.frozen = True

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x2]))
    feature_dim = dataset[0][0].channels
    u = build_uem(feature_dim, cfg.projection_dim, cfg.proj_hidden,
                  cfg.head_kind, cfg.gmm_components, rng)

    # frozen inlier term and pixel buffers, precomputed once
    xs, ys, maxes = [], [], []
    for f, omap in dataset:
        if (f.height, f.width) != (omap.height, omap.width):
            raise DimMismatch("feature map and outlier map dims differ")
        keep = omap.labels.ravel() != IGNORE
        xs.append(f.pixels()[keep])
        ys.append(omap.labels.ravel()[keep].astype(np.int64))
        maxes.append(max_inlier_logit(inlier_model, f).ravel()[keep])
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys)
    max_logit = np.concatenate(maxes)
    if x.shape[0] == 0:
        raise AllIgnored("every pixel in the dataset is ignored")

    if cfg.head_kind == GENERATIVE:
        z0, _ = mlp_forward(u.projection, x)
        u.head = _init_uem_gmm(z0, y, cfg, rng)

    params = uem_params(u)
    opt = make_optimizer("adam", cfg.lr)
    counters: dict = {}
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = _loss_and_grads(u, x[idx], max_logit[idx], y[idx], cfg)
            opt, params = optimizer_step(opt, params, grads)
            set_uem_params(u, params)
        if cfg.head_kind == GENERATIVE:
            z, _ = mlp_forward(u.projection, x)
            u.head = _refresh_uem_gmm(u.head, z, y, cfg, rng, counters)
            params = uem_params(u)

    final_digests = {name: tensor_digest(stage1.tensors[name])
                     for name in stage1_tensor_names(stage1)}
    if final_digests != initial_digests:
        raise FreezeViolation("stage-1 tensors changed during UEM training")

    return bundle_from_uem(u, stage1, cfg, initial_digests)


def _init_uem_gmm(z: np.ndarray, targets: np.ndarray, cfg: LlrConfig,
                  rng: np.random.Generator) -> GmmHead:
    comp = cfg.gmm_components
    d = z.shape[1]
    means = np.empty((2, comp, d))
    variances = np.empty((2, comp, d))
    for k in range(2):
        feats = z[targets == k]
        if feats.shape[0] < comp:
            means[k] = rng.standard_normal((comp, d))
            variances[k] = 1.0
            continue
        idx = rng.choice(feats.shape[0], size=comp, replace=False)
        means[k] = feats[idx]
        variances[k] = np.maximum(feats.var(axis=0), gmm_mod.VAR_FLOOR)
    return GmmHead(means=means, variances=variances,
                   weights=uniform_weights(2, comp))


# ---------------------------------------------------------------------------
# bundle conversion
# ---------------------------------------------------------------------------

def bundle_from_uem(u: UemModel, stage1: ModelBundle, cfg: LlrConfig,
                    frozen_digests: dict) -> ModelBundle:
    tensors = {name: stage1.tensors[name] for name in stage1_tensor_names(stage1)}
    f32 = lambda t: np.asarray(t, dtype=np.float32).astype(np.float64)
    for name, t in mlp_params(u.projection, "uem.proj").items():
        tensors[name] = f32(t)
    if u.head_kind == DISCRIMINATIVE:
        tensors["uem.head.weight"] = f32(u.head.weight)
        tensors["uem.head.bias"] = f32(u.head.bias)
        uem_components = 0
    else:
        for k in range(2):
            for c in range(u.head.components):
                tensors[f"uem.head.{k}.{c}.mean"] = f32(u.head.means[k, c])
                tensors[f"uem.head.{k}.{c}.var"] = f32(u.head.variances[k, c])
                tensors[f"uem.head.{k}.{c}.weight"] = f32(
                    np.array([u.head.weights[k, c]]))
        uem_components = u.head.components
    s1 = stage1.manifest
    manifest = {
        "stage": "uem",
        "head_kind": cfg.head_kind,
        "inlier_head_kind": s1["head_kind"],
        "num_classes": s1["num_classes"],
        "feature_dim": s1["feature_dim"],
        "decoder_dim": s1["decoder_dim"],
        "projection_dim": u.projection_dim,
        "gmm_components": s1["gmm_components"],
        "uem_gmm_components": uem_components,
        "decoder_layers": s1["decoder_layers"],
        "decoder_activations": s1["decoder_activations"],
        "proj_activations": [l.activation for l in u.projection.layers],
        "heldout_miou": s1.get("heldout_miou"),
        "config": asdict(cfg),
        "frozen_digests": frozen_digests,
    }
    return ModelBundle(manifest=manifest, tensors=tensors)


def uem_from_bundle(bundle: ModelBundle) -> UemModel:
    man = bundle.manifest
    if man["stage"] != "uem":
        raise LlrsegError("not a stage-2 bundle")
    activations = man["proj_activations"]
    layers = [
        DenseLayer(weight=bundle.tensors[f"uem.proj.{i}.weight"],
                   bias=bundle.tensors[f"uem.proj.{i}.bias"],
                   activation=activations[i])
        for i in range(3)
    ]
    projection = Mlp(layers=layers)
    if man["head_kind"] == DISCRIMINATIVE:
        head = DenseLayer(weight=bundle.tensors["uem.head.weight"],
                          bias=bundle.tensors["uem.head.bias"],
                          activation="identity")
    else:
        comp = man["uem_gmm_components"]
        d = man["projection_dim"]
        means = np.empty((2, comp, d))
        variances = np.empty((2, comp, d))
        weights = np.empty((2, comp))
        for k in range(2):
            for c in range(comp):
                means[k, c] = bundle.tensors[f"uem.head.{k}.{c}.mean"]
                variances[k, c] = bundle.tensors[f"uem.head.{k}.{c}.var"]
                weights[k, c] = bundle.tensors[f"uem.head.{k}.{c}.weight"][0]
        weights = weights / weights.sum(axis=1, keepdims=True)
        head = GmmHead(means=means,
                       variances=np.maximum(variances, gmm_mod.VAR_FLOOR),
                       weights=weights)
    return UemModel(projection=projection, head=head, head_kind=man["head_kind"])


def verify_freeze(stage2: ModelBundle) -> bool:
    """Check that every frozen stage-1 tensor digest still matches."""
    frozen = stage2.manifest.get("frozen_digests", {})
    for name, digest in frozen.items():
        if tensor_digest(stage2.tensors[name]) != digest:
            raise FreezeViolation(f"frozen tensor {name!r} digest mismatch")
    return True
