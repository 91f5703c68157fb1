"""Built-in verification battery: gradient checks, density and metric
oracle equivalences, Sinkhorn marginals, the LLR algebraic identity, and
stitching equivalence. Shared by the `selfcheck` CLI command and tests."""
from __future__ import annotations

import numpy as np

from .anomalymix import random_bank, random_spec, synth_scene
from .datamodel import BinaryOutlierMap, FeatureMap
from .gmm import GmmHead, gmm_log_density, sinkhorn_assign, uniform_weights
from .inlier import (
    DISCRIMINATIVE,
    GENERATIVE,
    InlierConfig,
    train_inlier,
)
from .inference import score_image, tile_plan
from .metrics import ScoredPixels, auroc, average_precision, fpr_at_tpr
from .neuralcore import grad_check, make_mlp, mlp_forward, mlp_backward, \
    mlp_grads_dict, mlp_params, set_mlp_params, sigmoid_bce_with_logits
from .uem import (
    LlrConfig,
    build_uem,
    llr_loss,
    llr_score_discriminative,
    llr_score_generative,
    set_uem_params,
    train_uem,
    uem_params,
)
from .inlier import InlierModel


def naive_gmm_log_density(x, means, variances, weights) -> float:
    """Extended-precision direct summation oracle (no log-sum-exp)."""
    total = np.longdouble(0.0)
    d = len(x)
    for mu, var, w in zip(means, variances, weights):
        q = np.longdouble(0.0)
        logdet = np.longdouble(0.0)
        for i in range(d):
            q += np.longdouble((x[i] - mu[i]) ** 2) / np.longdouble(var[i])
            logdet += np.log(np.longdouble(var[i]))
        logn = -0.5 * (d * np.log(np.longdouble(2 * np.pi)) + logdet + q)
        total += np.longdouble(w) * np.exp(logn)
    return float(np.log(total))


def check_gmm_density_oracle(instances: int = 1000, seed: int = 0,
                             tol: float = 1e-10) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(1, 9))
        c = int(rng.integers(1, 5))
        means = rng.normal(0, 2, (1, c, d))
        variances = rng.uniform(0.1, 3.0, (1, c, d))
        head = GmmHead(means=means, variances=variances,
                       weights=uniform_weights(1, c))
        x = rng.normal(0, 2, d)
        got = gmm_log_density(x, head, 0)
        want = naive_gmm_log_density(x, means[0], variances[0],
                                     head.weights[0])
        worst = max(worst, abs(got - want))
    return worst < tol, f"max |lse - naive| = {worst:.3e}"


def check_sinkhorn_marginals(seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        ll = rng.normal(0, 1, (64, 5))
        plan = sinkhorn_assign(ll, epsilon=0.5, iters=50)
        worst = max(worst, plan.marginal_residual())
    uniform = sinkhorn_assign(np.zeros((8, 4)), epsilon=0.5, iters=1)
    exact = np.allclose(uniform.matrix, 1.0 / 32, atol=1e-15)
    return worst < tol and exact, f"max residual = {worst:.3e}, uniform exact = {exact}"


def check_llr_identity(n: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    shape = (n, 1)
    out = rng.normal(0, 10, shape)
    inl = rng.normal(0, 10, shape)
    mx = rng.normal(0, 10, shape)
    a = llr_score_generative(out, inl, mx).scores
    b = llr_score_discriminative(out, inl, mx).scores
    same = np.array_equal(a, b)
    return same, f"bitwise equal on {n} inputs: {same}"


def _tiny_setup(head_kind: str, uem_kind: str, seed: int):
    rng = np.random.default_rng(seed)
    h = w = 6
    c_e = 5
    f = FeatureMap(rng.normal(0, 1, (c_e, h, w)))
    y = rng.integers(0, 2, (h, w)).astype(np.uint8)
    y.ravel()[:3] = 255
    omap = BinaryOutlierMap(y)
    decoder = make_mlp([c_e, 8, 6], rng)
    if head_kind == DISCRIMINATIVE:
        from .neuralcore import xavier_dense
        head = xavier_dense(6, 3, "identity", rng)
    else:
        head = GmmHead(means=rng.normal(0, 1, (3, 2, 6)),
                       variances=np.ones((3, 2, 6)),
                       weights=uniform_weights(3, 2))
    inlier_model = InlierModel(decoder=decoder, head=head, num_classes=3,
                               head_kind=head_kind, frozen=True)
    u = build_uem(c_e, 6, 5, uem_kind, 2, rng)
    cfg = LlrConfig(alpha=1.0, beta=0.01, head_kind=uem_kind,
                    gmm_components=2, projection_dim=6, proj_hidden=5)
    return u, inlier_model, f, omap, cfg


def llr_grad_error(uem_kind: str, seed: int = 0, h: float = 1e-5,
                   max_coords: int = 200) -> float:
    u, inlier_model, f, omap, cfg = _tiny_setup(DISCRIMINATIVE, uem_kind, seed)

    def fn(params):
        set_uem_params(u, params)
        return llr_loss(u, inlier_model, f, omap, cfg)

    return grad_check(fn, {k: v.copy() for k, v in uem_params(u).items()},
                      h=h, max_coords=max_coords, seed=seed)


def check_llr_gradients(seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    errs = [llr_grad_error(kind, seed) for kind in (DISCRIMINATIVE, GENERATIVE)]
    worst = max(errs)
    return worst < tol, f"max relative error = {worst:.3e}"


def check_mlp_bce_gradient(seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    m = make_mlp([4, 6, 1], rng)
    x = rng.normal(0, 1, (12, 4))
    t = rng.integers(0, 2, 12)

    def fn(params):
        set_mlp_params(m, "mlp", params)
        out, tape = mlp_forward(m, x)
        loss, dz = sigmoid_bce_with_logits(out[:, 0], t)
        grads, _ = mlp_backward(m, tape, dz[:, None])
        return loss, mlp_grads_dict(grads, "mlp")

    err = grad_check(fn, {k: v.copy() for k, v in mlp_params(m, "mlp").items()},
                     seed=seed)
    return err < tol, f"max relative error = {err:.3e}"


def brute_force_ap(scores, labels) -> float:
    """O(n^2) threshold-sweep oracle."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = labels.sum()
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        sel = scores >= t
        tp = int((labels[sel] == 1).sum())
        precision = tp / sel.sum()
        recall = tp / p
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def brute_force_auroc(scores, labels) -> float:
    """Pairwise counting oracle."""
    pos = np.asarray(scores)[np.asarray(labels) == 1]
    neg = np.asarray(scores)[np.asarray(labels) == 0]
    correct = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (correct + 0.5 * ties) / (len(pos) * len(neg))


def brute_force_fpr_at_tpr(scores, labels, tpr: float = 0.95) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = labels.sum()
    n = len(labels) - p
    for t in sorted(set(scores), reverse=True):
        sel = scores >= t
        if (labels[sel] == 1).sum() / p >= tpr:
            return (labels[sel] == 0).sum() / n
    return 1.0


def check_metric_oracles(seeds: int = 20, n: int = 300,
                         tol: float = 1e-9) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.normal(0, 1, n), 2)  # rounded to force ties
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            continue
        sp = ScoredPixels(scores=scores, labels=labels)
        worst = max(worst,
                    abs(average_precision(sp) - brute_force_ap(scores, labels)),
                    abs(auroc(sp) - brute_force_auroc(scores, labels)),
                    abs(fpr_at_tpr(sp) - brute_force_fpr_at_tpr(scores, labels)))
    return worst < tol, f"max |fast - oracle| = {worst:.3e}"


def check_stitching(seed: int = 0, tol: float = 1e-12) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    spec = random_spec(3, 6, 16, 16, rng)
    feats, labels = synth_scene(spec, rng)
    dataset = [(feats, labels)]
    cfg = InlierConfig(head_kind=DISCRIMINATIVE, decoder_hidden=16,
                       decoder_dim=8, epochs=1, seed=seed)
    stage1 = train_inlier(dataset, 3, cfg).bundle
    bank = random_bank(spec, 2, rng)
    from .anomalymix import inject_outliers
    mixed, omap, _ = inject_outliers(feats, labels, bank, rng)
    ucfg = LlrConfig(epochs=1, seed=seed, projection_dim=8, proj_hidden=6)
    stage2 = train_uem(stage1, [(mixed, omap)], ucfg)
    whole = score_image(stage2, mixed, tile_plan(16, 16, 16, 16))
    worst = 0.0
    for stride in (1, 2, 4, 8):
        plan = tile_plan(16, 16, 8, stride)
        tiled = score_image(stage2, mixed, plan)
        worst = max(worst, float(np.abs(tiled.scores - whole.scores).max()))
    return worst < tol, f"max |tiled - whole| = {worst:.3e}"


ALL_CHECKS = [
    ("gmm-density-oracle", lambda: check_gmm_density_oracle(instances=200)),
    ("sinkhorn-marginals", check_sinkhorn_marginals),
    ("llr-algebraic-identity", check_llr_identity),
    ("mlp-bce-gradient", check_mlp_bce_gradient),
    ("llr-loss-gradients", check_llr_gradients),
    ("metric-oracles", check_metric_oracles),
    ("stitching-equivalence", check_stitching),
]


def run_selfcheck(verbose: bool = True) -> bool:
    all_ok = True
    for name, fn in ALL_CHECKS:
        ok, detail = fn()
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
