"""Stage-1 inlier segmentor: pixel-wise decoder + classification head.

The decoder is a 2-layer MLP applied per pixel; the head is either a
linear layer (discriminative) or one diagonal GMM per class (generative,
class log densities used directly as logits). Both heads expose the same
[K, H, W] logit interface.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import gmm as gmm_mod
from .datamodel import (
    FeatureMap,
    LabelMap,
    ModelBundle,
    ScoreMap,
    validate_pair,
)
from .errors import DimMismatch, LlrsegError
from .gmm import (
    GmmHead,
    component_log_densities,
    em_update,
    gmm_all_log_densities,
    gmm_all_log_densities_with_grad,
    sinkhorn_assign,
    uniform_weights,
)
from .metrics import miou
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
    softmax_cross_entropy,
    xavier_dense,
)

GENERATIVE = "generative"
DISCRIMINATIVE = "discriminative"


@dataclass
class InlierModel:
    decoder: Mlp                      # pixel-wise C_e -> C_d
    head: object                      # DenseLayer (disc) or GmmHead (gen)
    num_classes: int
    head_kind: str
    frozen: bool = False

    def __post_init__(self):
        if self.head_kind not in (GENERATIVE, DISCRIMINATIVE):
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.head_kind == DISCRIMINATIVE:
            if not isinstance(self.head, DenseLayer):
                raise TypeError("discriminative head must be a DenseLayer")
            if self.head.in_dim != self.decoder.out_dim:
                raise DimMismatch("head input dim does not match decoder output")
            if self.head.out_dim != self.num_classes:
                raise DimMismatch("head output dim must equal K")
        else:
            if not isinstance(self.head, GmmHead):
                raise TypeError("generative head must be a GmmHead")
            if self.head.dim != self.decoder.out_dim:
                raise DimMismatch("GMM dim does not match decoder output")
            if self.head.classes != self.num_classes:
                raise DimMismatch("GMM class count must equal K")

    @property
    def feature_dim(self) -> int:
        return self.decoder.in_dim

    @property
    def decoder_dim(self) -> int:
        return self.decoder.out_dim

    def parameter_count(self) -> int:
        n = self.decoder.parameter_count()
        if self.head_kind == DISCRIMINATIVE:
            n += self.head.weight.size + self.head.bias.size
        else:
            n += self.head.parameter_count()
        return n


def decode_pixels(m: InlierModel, f: FeatureMap) -> np.ndarray:
    if f.channels != m.feature_dim:
        raise DimMismatch(
            f"feature map has {f.channels} channels, model expects {m.feature_dim}")
    decoded, _ = mlp_forward(m.decoder, f.pixels())
    return decoded


def head_logits(m: InlierModel, decoded: np.ndarray) -> np.ndarray:
    """[N, K] logits from decoded pixel features."""
    if m.head_kind == DISCRIMINATIVE:
        return decoded @ m.head.weight.T + m.head.bias
    return gmm_all_log_densities(decoded, m.head)


def inlier_logits(m: InlierModel, f: FeatureMap) -> np.ndarray:
    """Per-pixel class logits with shape [K, H, W]."""
    logits = head_logits(m, decode_pixels(m, f))
    return logits.T.reshape(m.num_classes, f.height, f.width)


def inlier_predict(m: InlierModel, f: FeatureMap) -> LabelMap:
    """Argmax class per pixel; ties break toward the smaller index."""
    logits = inlier_logits(m, f)
    return LabelMap(np.argmax(logits, axis=0).astype(np.uint8))


def max_inlier_logit(m: InlierModel, f: FeatureMap) -> np.ndarray:
    """Per-pixel max_k logit, shape [H, W]."""
    return inlier_logits(m, f).max(axis=0)


def id_score(m: InlierModel, f: FeatureMap) -> ScoreMap:
    """Inlier-density baseline: negated max logit so higher = more outlier."""
    return ScoreMap(-max_inlier_logit(m, f))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class InlierConfig:
    head_kind: str = GENERATIVE
    decoder_dim: int = 64
    decoder_hidden: int = 1152
    lr: float = 3e-3
    epochs: int = 4
    batch_size: int = 1024
    seed: int = 0
    gmm_components: int = 5
    gmm_epsilon: float = 0.1
    gmm_sinkhorn_iters: int = 10
    gmm_momentum: float = 0.8
    gmm_max_pixels_per_class: int = 4096


@dataclass
class InlierTrainResult:
    bundle: ModelBundle
    miou: float
    loss_history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def holdout_split(n: int) -> tuple[list[int], list[int]]:
    """Deterministic 90/10 split by scene index; at least one held out."""
    n_held = max(1, n // 10)
    train = list(range(n - n_held))
    held = list(range(n - n_held, n))
    if not train:
        train = held
    return train, held


def _gather_pixels(dataset, indices, num_classes):
    feats, labels = [], []
    for i in indices:
        f, l = dataset[i][0], dataset[i][1]
        validate_pair(f, l, num_classes)
        px = f.pixels()
        lab = l.labels.ravel()
        keep = lab != 255
        feats.append(px[keep])
        labels.append(lab[keep].astype(np.int64))
    return np.concatenate(feats, axis=0), np.concatenate(labels)


def _init_gmm_head_from_decoded(decoded, labels, num_classes, cfg, rng) -> GmmHead:
    d = decoded.shape[1]
    comp = cfg.gmm_components
    means = np.empty((num_classes, comp, d))
    variances = np.empty((num_classes, comp, d))
    for k in range(num_classes):
        feats = decoded[labels == k]
        if feats.shape[0] < comp:
            # absent class: leave means at a seeded random init
            means[k] = rng.standard_normal((comp, d))
            variances[k] = 1.0
            continue
        idx = rng.choice(feats.shape[0], size=comp, replace=False)
        means[k] = feats[idx]
        variances[k] = np.maximum(feats.var(axis=0), gmm_mod.VAR_FLOOR)
    return GmmHead(means=means, variances=variances,
                   weights=uniform_weights(num_classes, comp))


def _refresh_gmm(head: GmmHead, decoded, labels, cfg: InlierConfig,
                 rng: np.random.Generator, counters: dict) -> GmmHead:
    """One Sinkhorn-EM round per class on (subsampled) decoded features."""
    for k in range(head.classes):
        feats = decoded[labels == k]
        if feats.shape[0] < head.components:
            counters["absent_classes"] = counters.get("absent_classes", 0) + 1
            continue
        if feats.shape[0] > cfg.gmm_max_pixels_per_class:
            idx = rng.choice(feats.shape[0], cfg.gmm_max_pixels_per_class,
                             replace=False)
            feats = feats[idx]
        comp_ll = component_log_densities(feats, head, k)
        plan = sinkhorn_assign(comp_ll, cfg.gmm_epsilon, cfg.gmm_sinkhorn_iters)
        head = em_update(head, k, feats, plan, cfg.gmm_momentum, counters)
    return head


def train_inlier(dataset, num_classes: int, config: InlierConfig) -> InlierTrainResult:
    """Train decoder + head on (FeatureMap, LabelMap) pairs.

    Discriminative: joint Adam on cross-entropy. Generative: Adam on the
    decoder against CE over GMM log-density logits, alternating with
    Sinkhorn-EM refreshes of the GMM each epoch. Deterministic per seed.
    """
    if not dataset:
        raise LlrsegError("empty dataset")
    feature_dim = dataset[0][0].channels
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1]))
    train_idx, held_idx = holdout_split(len(dataset))
    x, y = _gather_pixels(dataset, train_idx, num_classes)

    present = np.unique(y)
    warnings_list = []
    for k in range(num_classes):
        if k not in present:
            warnings_list.append(f"class {k} absent from training data")

    decoder = make_mlp([feature_dim, config.decoder_hidden, config.decoder_dim], rng)
    counters: dict = {}
    loss_history = []

    if config.head_kind == DISCRIMINATIVE:
        head = xavier_dense(config.decoder_dim, num_classes, "identity", rng)
        params = mlp_params(decoder, "decoder")
        params["head.weight"] = head.weight
        params["head.bias"] = head.bias
        opt = make_optimizer("adam", config.lr)
        for _ in range(config.epochs):
            order = rng.permutation(x.shape[0])
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, x.shape[0], config.batch_size):
                idx = order[start:start + config.batch_size]
                decoded, tape = mlp_forward(decoder, x[idx])
                logits = decoded @ head.weight.T + head.bias
                loss, d_logits = softmax_cross_entropy(logits, y[idx])
                d_decoded = d_logits @ head.weight
                dec_grads, _ = mlp_backward(decoder, tape, d_decoded)
                grads = mlp_grads_dict(dec_grads, "decoder")
                grads["head.weight"] = d_logits.T @ decoded
                grads["head.bias"] = d_logits.sum(axis=0)
                opt, params = optimizer_step(opt, params, grads)
                set_mlp_params(decoder, "decoder", params)
                head.weight = params["head.weight"]
                head.bias = params["head.bias"]
                epoch_loss += loss
                n_batches += 1
            loss_history.append(epoch_loss / max(1, n_batches))
        model = InlierModel(decoder=decoder, head=head,
                            num_classes=num_classes, head_kind=DISCRIMINATIVE)
    else:
        decoded_all, _ = mlp_forward(decoder, x)
        head = _init_gmm_head_from_decoded(decoded_all, y, num_classes, config, rng)
        params = mlp_params(decoder, "decoder")
        opt = make_optimizer("adam", config.lr)
        for _ in range(config.epochs):
            order = rng.permutation(x.shape[0])
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, x.shape[0], config.batch_size):
                idx = order[start:start + config.batch_size]
                decoded, tape = mlp_forward(decoder, x[idx])
                logits, gmm_back = gmm_all_log_densities_with_grad(decoded, head)
                loss, d_logits = softmax_cross_entropy(logits, y[idx])
                d_decoded, _, _ = gmm_back(d_logits)
                dec_grads, _ = mlp_backward(decoder, tape, d_decoded)
                grads = mlp_grads_dict(dec_grads, "decoder")
                opt, params = optimizer_step(opt, params, grads)
                set_mlp_params(decoder, "decoder", params)
                epoch_loss += loss
                n_batches += 1
            loss_history.append(epoch_loss / max(1, n_batches))
            decoded_all, _ = mlp_forward(decoder, x)
            head = _refresh_gmm(head, decoded_all, y, config, rng, counters)
        model = InlierModel(decoder=decoder, head=head,
                            num_classes=num_classes, head_kind=GENERATIVE)

    bundle = bundle_from_inlier(model, config)
    # report mIoU from the bundle so it is reproducible bit-exactly after reload
    reloaded = inlier_from_bundle(bundle)
    miou_value = heldout_miou(reloaded, dataset, held_idx, num_classes)
    bundle.manifest["heldout_miou"] = miou_value
    return InlierTrainResult(bundle=bundle, miou=miou_value,
                             loss_history=loss_history, warnings=warnings_list)


def heldout_miou(model: InlierModel, dataset, held_idx, num_classes: int) -> float:
    values = []
    for i in held_idx:
        f, l = dataset[i][0], dataset[i][1]
        values.append(miou(inlier_predict(model, f), l, num_classes))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# bundle conversion
# ---------------------------------------------------------------------------

def bundle_from_inlier(model: InlierModel, config: InlierConfig) -> ModelBundle:
    tensors = dict(mlp_params(model.decoder, "decoder"))
    if model.head_kind == DISCRIMINATIVE:
        tensors["head.weight"] = model.head.weight
        tensors["head.bias"] = model.head.bias
        components = 0
    else:
        h = model.head
        for k in range(h.classes):
            for c in range(h.components):
                tensors[f"gmm.{k}.{c}.mean"] = h.means[k, c]
                tensors[f"gmm.{k}.{c}.var"] = h.variances[k, c]
                tensors[f"gmm.{k}.{c}.weight"] = np.array([h.weights[k, c]])
        components = h.components
    manifest = {
        "stage": "inlier",
        "head_kind": model.head_kind,
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "decoder_dim": model.decoder_dim,
        "projection_dim": None,
        "gmm_components": components,
        "decoder_layers": len(model.decoder.layers),
        "decoder_activations": [l.activation for l in model.decoder.layers],
        "config": asdict(config),
    }
    # float32 round trip now so in-memory values match any future reload
    bundle = ModelBundle(manifest=manifest, tensors={
        name: np.asarray(t, dtype=np.float32).astype(np.float64)
        for name, t in tensors.items()})
    return bundle


def inlier_from_bundle(bundle: ModelBundle) -> InlierModel:
    man = bundle.manifest
    if man["stage"] not in ("inlier", "uem"):
        raise LlrsegError(f"unexpected bundle stage {man['stage']!r}")
    n_layers = man["decoder_layers"]
    activations = man["decoder_activations"]
    layers = [
        DenseLayer(weight=bundle.tensors[f"decoder.{i}.weight"],
                   bias=bundle.tensors[f"decoder.{i}.bias"],
                   activation=activations[i])
        for i in range(n_layers)
    ]
    decoder = Mlp(layers=layers)
    k = man["num_classes"]
    head_kind = man["inlier_head_kind"] if man["stage"] == "uem" else man["head_kind"]
    if head_kind == DISCRIMINATIVE:
        head = DenseLayer(weight=bundle.tensors["head.weight"],
                          bias=bundle.tensors["head.bias"], activation="identity")
    else:
        comp = man["gmm_components"]
        d = man["decoder_dim"]
        means = np.empty((k, comp, d))
        variances = np.empty((k, comp, d))
        weights = np.empty((k, comp))
        for ki in range(k):
            for c in range(comp):
                means[ki, c] = bundle.tensors[f"gmm.{ki}.{c}.mean"]
                variances[ki, c] = bundle.tensors[f"gmm.{ki}.{c}.var"]
                weights[ki, c] = bundle.tensors[f"gmm.{ki}.{c}.weight"][0]
        weights = weights / weights.sum(axis=1, keepdims=True)
        head = GmmHead(means=means, variances=variances, weights=weights)
    return InlierModel(decoder=decoder, head=head, num_classes=k,
                       head_kind=head_kind, frozen=man["stage"] == "uem")


def stage1_tensor_names(bundle: ModelBundle) -> list[str]:
    """Names of every stage-1 (theta) tensor in a bundle."""
    return [n for n in bundle.tensors
            if n.startswith(("decoder.", "head.", "gmm."))]
