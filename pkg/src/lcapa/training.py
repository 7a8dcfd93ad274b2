"""Dataset generation, surrogate training, and policy training.

Three-stage procedure: the power net (ProjNet) and coupling net (ValueNet)
are trained supervised against quadrature targets; the policy net is then
trained unsupervised by back-propagating the negated sum-SE through the
frozen surrogates (``surrogate`` mode) or through the exact Gram forms
(``analytic`` mode, a reference chain that quantifies surrogate fidelity).
Evaluation always goes through the exact quadrature path; the coupling
surrogate is never used to score a policy.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .gnn import GnnParams, GnnSpec, LayerParams, init_params
from .heads import (
    GnnModel,
    policy_backward,
    policy_forward,
    proj_backward,
    proj_forward,
    value_backward,
    value_forward,
)
from .objective import project_weights, sinr_vector, sum_se
from .optim import Adam
from .quadrature import (
    build_grid,
    channel_matrix,
    gram_pair,
    integral_couplings,
    integral_power,
)
from .scene import Scene, sample_scene

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable, mismatched, or corrupt checkpoint files."""


@dataclass(frozen=True)
class SupervisedSample:
    scene: Scene
    weights: np.ndarray
    target_powers: np.ndarray | None
    target_couplings: np.ndarray | None
    seed_pair: tuple[int, int]


@dataclass
class SupervisedDataset:
    mode: str
    samples: list[SupervisedSample]
    num_nodes: int
    root_seed: int

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    num_nodes: int = 256
    num_train: int = 2000
    lr_decay: float = 1.0       # multiplicative, applied every lr_decay_every epochs
    lr_decay_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.num_train < 1:
            raise ValueError("need at least one training sample")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TrainReport:
    loss_curve: list[float] = field(default_factory=list)
    eval_curve: list[float] = field(default_factory=list)
    best_epoch: int = -1
    final_metrics: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    seeds: dict = field(default_factory=dict)
    skipped_batches: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "loss_curve": self.loss_curve,
            "eval_curve": self.eval_curve,
            "best_epoch": self.best_epoch,
            "final_metrics": self.final_metrics,
            "wall_clock_seconds": self.wall_clock_seconds,
            "seeds": self.seeds,
            "skipped_batches": self.skipped_batches,
        }, indent=1)


# -- dataset generation -------------------------------------------------------

def _sample_rng(root_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([root_seed, index]))


def gen_supervised_dataset(seed: int, count: int, num_users: int, num_nodes: int,
                           mode: str, zeta: float = 1e6,
                           aperture_area: float = 4.0,
                           power_budget: float = 1.0) -> SupervisedDataset:
    """Supervised samples for one surrogate.

    Each sample holds a fresh scene and a random complex-Gaussian weight
    matrix, globally rescaled so its exact total power is log-uniform in
    [0.1, 10] x budget (the operating range of the projection).  ``value``
    mode additionally projects the weights exactly onto the power budget and
    targets the coupling matrix; ``proj`` mode targets the per-user powers of
    the unprojected weights.
    """
    if mode not in ("proj", "value"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    from .scene import square_aperture

    aperture = square_aperture(aperture_area)
    samples = []
    for i in range(count):
        rng = _sample_rng(seed, i)
        scene_seed = int(rng.integers(2 ** 31))
        scene = sample_scene(scene_seed, num_users, aperture=aperture, zeta=zeta,
                             power_budget=power_budget)
        grid = build_grid(aperture, num_nodes)
        grams = gram_pair(channel_matrix(scene, grid).h, grid.cell_area)
        raw = (rng.standard_normal((num_users, num_users))
               + 1j * rng.standard_normal((num_users, num_users)))
        total = integral_power(raw, grams.coupling).sum()
        target_total = power_budget * 10.0 ** rng.uniform(-1.0, 1.0)
        weights = raw * np.sqrt(target_total / total)
        if mode == "proj":
            samples.append(SupervisedSample(
                scene=scene, weights=weights,
                target_powers=integral_power(weights, grams.coupling),
                target_couplings=None, seed_pair=(seed, i)))
        else:
            powers = integral_power(weights, grams.coupling)
            projected = project_weights(weights, powers, power_budget)
            samples.append(SupervisedSample(
                scene=scene, weights=projected, target_powers=None,
                target_couplings=integral_couplings(projected, grams.coupling),
                seed_pair=(seed, i)))
    return SupervisedDataset(mode=mode, samples=samples, num_nodes=num_nodes,
                             root_seed=seed)


def dataset_to_jsonl(dataset: SupervisedDataset, path: str) -> None:
    def cpx(m):
        return [[[f"{v.real:.17g}", f"{v.imag:.17g}"] for v in row] for row in m]

    with open(path, "w") as fh:
        header = {"record": "dataset_header", "mode": dataset.mode,
                  "num_nodes": dataset.num_nodes, "root_seed": dataset.root_seed}
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            rec = {"scene": json.loads(s.scene.to_json()),
                   "weights": cpx(s.weights),
                   "seed_pair": list(s.seed_pair)}
            if s.target_powers is not None:
                rec["target_powers"] = [f"{v:.17g}" for v in s.target_powers]
            if s.target_couplings is not None:
                rec["target_couplings"] = cpx(s.target_couplings)
            fh.write(json.dumps(rec) + "\n")


def dataset_from_jsonl(path: str) -> SupervisedDataset:
    def cpx(data):
        arr = np.asarray(data, dtype=object)
        out = np.empty(arr.shape[:2], dtype=complex)
        for i, row in enumerate(data):
            for j, (re, im) in enumerate(row):
                out[i, j] = complex(float(re), float(im))
        return out

    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("record") != "dataset_header":
        raise ValueError("not a dataset file")
    samples = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        scene = Scene.from_json(json.dumps(rec["scene"]))
        powers = (np.array([float(v) for v in rec["target_powers"]])
                  if "target_powers" in rec else None)
        couplings = (cpx(rec["target_couplings"])
                     if "target_couplings" in rec else None)
        samples.append(SupervisedSample(
            scene=scene, weights=cpx(rec["weights"]), target_powers=powers,
            target_couplings=couplings, seed_pair=tuple(rec["seed_pair"])))
    return SupervisedDataset(mode=header["mode"], samples=samples,
                             num_nodes=header["num_nodes"],
                             root_seed=header["root_seed"])


# -- supervised training ------------------------------------------------------

def _dataset_norms(dataset: SupervisedDataset) -> dict:
    a_rms = np.sqrt(np.mean([np.mean(np.abs(s.weights) ** 2)
                             for s in dataset.samples]))
    norms = {"pos_scale": 30.0, "a_scale": float(a_rms)}
    if dataset.mode == "proj":
        p_rms = np.sqrt(np.mean([np.mean(s.target_powers ** 2)
                                 for s in dataset.samples]))
        norms["out_scale"] = float(p_rms)
    else:
        g_rms = np.sqrt(np.mean([np.mean(np.abs(s.target_couplings) ** 2)
                                 for s in dataset.samples]))
        norms["out_scale"] = float(g_rms)
    return norms


def _stack_dataset(dataset: SupervisedDataset):
    pos = np.stack([s.scene.positions for s in dataset.samples])
    weights = np.stack([s.weights for s in dataset.samples])
    if dataset.mode == "proj":
        targets = np.stack([s.target_powers for s in dataset.samples])
    else:
        targets = np.stack([s.target_couplings for s in dataset.samples])
    return pos, weights, targets


def normalized_mse(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Squared error normalized by target energy (scale-free fidelity)."""
    num = np.sum(np.abs(predictions - targets) ** 2)
    den = np.sum(np.abs(targets) ** 2)
    return float(num / den)


def train_supervised(spec: GnnSpec, dataset: SupervisedDataset,
                     hyper: TrainHyper, seed: int,
                     validation_fraction: float = 0.1
                     ) -> tuple[GnnModel, TrainReport]:
    """Minimize the mean (over samples) summed squared output error.

    Mini-batch order reshuffles deterministically per epoch; returns the
    parameters with the best validation score seen.
    """
    if dataset.mode not in ("proj", "value"):
        raise ValueError("dataset mode must be proj or value")
    if (dataset.mode == "proj") != (spec.kind == "proj"):
        raise ValueError("dataset mode does not match network kind")

    start = time.perf_counter()
    norms = _dataset_norms(dataset)
    model = GnnModel(spec=spec, params=init_params(spec, seed), norms=norms)
    opt = Adam(model.params, lr=hyper.learning_rate, beta1=hyper.beta1,
               beta2=hyper.beta2)

    pos, weights, targets = _stack_dataset(dataset)
    n_total = len(dataset)
    n_val = int(round(validation_fraction * n_total))
    train_idx = np.arange(n_total - n_val)
    val_idx = np.arange(n_total - n_val, n_total)

    out_scale = model.norm("out_scale")
    report = TrainReport(seeds={"init": seed, "dataset": dataset.root_seed})

    def batch_loss_and_grads(idx):
        if dataset.mode == "proj":
            pred, cache = proj_forward(model, pos[idx], weights[idx])
            err = (pred - targets[idx]) / out_scale
            loss = float(np.sum(err ** 2) / len(idx))
            grad_out = 2.0 * err / (out_scale * len(idx))
            grads, _, _ = proj_backward(model, cache, grad_out)
        else:
            pred, cache = value_forward(model, pos[idx], weights[idx])
            err = (pred - targets[idx]) / out_scale
            loss = float(np.sum(err.real ** 2 + err.imag ** 2) / len(idx))
            grads, _, _ = value_backward(
                model, cache,
                2.0 * err.real / (out_scale * len(idx)),
                2.0 * err.imag / (out_scale * len(idx)))
        return loss, grads

    def validation_nmse():
        if len(val_idx) == 0:
            return float("nan")
        if dataset.mode == "proj":
            pred, _ = proj_forward(model, pos[val_idx], weights[val_idx])
        else:
            pred, _ = value_forward(model, pos[val_idx], weights[val_idx])
        return normalized_mse(pred, targets[val_idx])

    best_val = np.inf
    best_epoch = -1
    best_params = model.params.copy()
    for epoch in range(hyper.epochs):
        opt.lr = hyper.lr_at(epoch)
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 7 + epoch])).permutation(train_idx)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            loss, grads = batch_loss_and_grads(idx)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch} (loss={loss})")
            opt.step(grads)
            epoch_loss += loss
            n_batches += 1
        report.loss_curve.append(epoch_loss / max(n_batches, 1))
        val = validation_nmse()
        report.eval_curve.append(val)
        if np.isfinite(val) and val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.params.copy()

    if np.isfinite(best_val):
        model.params = best_params
        report.best_epoch = best_epoch
    report.final_metrics["validation_nmse"] = (best_val if np.isfinite(best_val)
                                               else None)
    report.wall_clock_seconds = time.perf_counter() - start
    return model, report


# -- policy loss and chains ---------------------------------------------------

LN2 = float(np.log(2.0))


def policy_loss(couplings: np.ndarray, user_apertures: np.ndarray,
                noise_vars: np.ndarray) -> float:
    """Negated batch-mean sum SE of (possibly estimated) couplings."""
    g = np.asarray(couplings, dtype=complex)
    if g.ndim == 2:
        g = g[None, ...]
    total = 0.0
    for gi in g:
        total += sum_se(sinr_vector(gi, user_apertures, noise_vars)).sum_se
    return -total / g.shape[0]


def policy_loss_grad(couplings: np.ndarray, user_apertures: np.ndarray,
                     noise_vars: np.ndarray
                     ) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its gradients with respect to (Re G, Im G), batched."""
    g = np.asarray(couplings, dtype=complex)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[None, ...]
    n, k, _ = g.shape
    ap = np.asarray(user_apertures, dtype=float)
    nv = np.asarray(noise_vars, dtype=float)

    weighted = ap[None, None, :] * np.abs(g) ** 2
    idx = np.arange(k)
    signal = weighted[:, idx, idx]
    denom = weighted.sum(axis=2) - signal + nv[None, :]
    gamma = signal / denom
    loss = -float(np.sum(np.log1p(gamma)) / (LN2 * n))

    # d loss / d |g_kj|^2
    coef = np.zeros((n, k, k))
    inv = 1.0 / ((1.0 + gamma) * denom)          # (n, k)
    coef += (gamma * inv)[:, :, None] * ap[None, None, :] / (LN2 * n)
    coef[:, idx, idx] = -inv * ap[None, :] / (LN2 * n)
    grad_re = 2.0 * coef * g.real
    grad_im = 2.0 * coef * g.imag
    if squeeze:
        return loss, grad_re[0], grad_im[0]
    return loss, grad_re, grad_im


def _projection_chain_backward(grad_re_bar, grad_im_bar, weights, scale,
                               total_power):
    """Back-prop through A_bar = s(A) * A given d loss / d A_bar.

    Returns the direct part (s * upstream) plus d loss/d s and d s/d total,
    so callers can add the power path.
    """
    g_re = scale[:, None, None] * grad_re_bar
    g_im = scale[:, None, None] * grad_im_bar
    dl_ds = (np.sum(grad_re_bar * weights.real, axis=(1, 2))
             + np.sum(grad_im_bar * weights.imag, axis=(1, 2)))
    ds_dtotal = -scale / (2.0 * total_power)
    return g_re, g_im, dl_ds * ds_dtotal


def surrogate_chain_loss_and_grads(policy: GnnModel, proj: GnnModel,
                                   value: GnnModel, positions: np.ndarray,
                                   user_apertures: np.ndarray,
                                   noise_vars: np.ndarray,
                                   power_budget: float):
    """Loss of the full policy -> projection -> coupling chain, with exact
    gradients for the policy parameters only (the surrogates stay frozen).

    Returns (loss, policy parameter grads, diagnostics dict).
    """
    a_raw, cache_p = policy_forward(policy, positions)
    powers, cache_proj = proj_forward(proj, positions, a_raw)
    total = powers.sum(axis=1)
    if np.any(total <= 0.0):
        raise DegenerateBatchError("non-positive total power estimate")
    scale = np.sqrt(power_budget / total)
    a_bar = a_raw * scale[:, None, None]
    couplings, cache_v = value_forward(value, positions, a_bar)
    loss, g_re_c, g_im_c = policy_loss_grad(couplings, user_apertures, noise_vars)

    _, g_re_bar, g_im_bar = value_backward(value, cache_v, g_re_c, g_im_c)
    g_re, g_im, dl_dtotal = _projection_chain_backward(
        g_re_bar, g_im_bar, a_raw, scale, total)
    grad_powers = np.repeat(dl_dtotal[:, None], powers.shape[1], axis=1)
    _, g_re_p, g_im_p = proj_backward(proj, cache_proj, grad_powers)
    grads = policy_backward(policy, cache_p, g_re + g_re_p, g_im + g_im_p)
    return loss, grads, {"scale": scale, "couplings": couplings}


class DegenerateBatchError(RuntimeError):
    """Raised when the projection denominator is non-positive for a batch."""


def analytic_chain_loss_and_grads(policy: GnnModel, positions: np.ndarray,
                                  coupling_grams: np.ndarray,
                                  user_apertures: np.ndarray,
                                  noise_vars: np.ndarray, power_budget: float):
    """Loss of the policy through the exact Gram forms, with policy grads.

    Powers and couplings come from the per-scene coupling Gram directly
    (p = a^H C a, G = C A-bar), giving a differentiable exact chain that
    upper-references the surrogate path.
    """
    a_raw, cache_p = policy_forward(policy, positions)
    c = np.asarray(coupling_grams, dtype=complex)
    total = np.einsum("njk,nji,nik->n", np.conj(a_raw), c, a_raw).real
    if np.any(total <= 0.0):
        raise DegenerateBatchError("zero-power policy output")
    scale = np.sqrt(power_budget / total)
    a_bar = a_raw * scale[:, None, None]
    couplings = np.einsum("nki,nij->nkj", c, a_bar)
    loss, g_re_c, g_im_c = policy_loss_grad(couplings, user_apertures, noise_vars)

    # back through G = C A_bar
    g_re_bar = (np.einsum("nki,nkj->nij", c.real, g_re_c)
                + np.einsum("nki,nkj->nij", c.imag, g_im_c))
    g_im_bar = (np.einsum("nki,nkj->nij", c.real, g_im_c)
                - np.einsum("nki,nkj->nij", c.imag, g_re_c))
    g_re, g_im, dl_dtotal = _projection_chain_backward(
        g_re_bar, g_im_bar, a_raw, scale, total)
    # power path: d total / d A = 2 C A (Hermitian C)
    ca = np.einsum("nij,njk->nik", c, a_raw)
    g_re += 2.0 * dl_dtotal[:, None, None] * ca.real
    g_im += 2.0 * dl_dtotal[:, None, None] * ca.imag
    grads = policy_backward(policy, cache_p, g_re, g_im)
    return loss, grads, {"scale": scale, "couplings": couplings}


# -- policy training ----------------------------------------------------------

@dataclass
class ScenePool:
    """Precomputed scenes and their coupling Grams on the training grid."""

    scenes: list[Scene]
    positions: np.ndarray
    coupling_grams: np.ndarray

    @classmethod
    def generate(cls, seed: int, count: int, num_users: int, num_nodes: int,
                 zeta: float, aperture_area: float = 4.0,
                 power_budget: float = 1.0) -> "ScenePool":
        from .scene import square_aperture

        aperture = square_aperture(aperture_area)
        grid = build_grid(aperture, num_nodes)
        scenes, grams = [], []
        for i in range(count):
            rng = _sample_rng(seed, i)
            scene = sample_scene(int(rng.integers(2 ** 31)), num_users,
                                 aperture=aperture, zeta=zeta,
                                 power_budget=power_budget)
            scenes.append(scene)
            grams.append(gram_pair(channel_matrix(scene, grid).h,
                                   grid.cell_area).coupling)
        return cls(scenes=scenes,
                   positions=np.stack([s.positions for s in scenes]),
                   coupling_grams=np.stack(grams))


def exact_policy_se(policy: GnnModel, pool: ScenePool, power_budget: float,
                    user_apertures: np.ndarray, noise_vars: np.ndarray
                    ) -> np.ndarray:
    """Exact-quadrature sum SE of the policy on every scene in a pool.

    The emitted weights are projected with exact powers; the coupling
    surrogate plays no role here.
    """
    a_raw, _ = policy_forward(policy, pool.positions)
    c = pool.coupling_grams
    total = np.einsum("njk,nji,nik->n", np.conj(a_raw), c, a_raw).real
    live = total > 0.0
    scale = np.where(live, np.sqrt(power_budget / np.where(live, total, 1.0)), 0.0)
    a_bar = a_raw * scale[:, None, None]
    couplings = np.einsum("nki,nij->nkj", c, a_bar)
    out = np.zeros(len(pool.scenes))
    for i, g in enumerate(couplings):
        if live[i]:
            out[i] = sum_se(sinr_vector(g, user_apertures, noise_vars)).sum_se
    return out


def train_policy(spec: GnnSpec, proj_model: GnnModel | None,
                 value_model: GnnModel | None, pool: ScenePool,
                 eval_pool: ScenePool, hyper: TrainHyper, seed: int,
                 mode: str, power_budget: float = 1.0) -> tuple[GnnModel, TrainReport]:
    """Unsupervised policy training over a scene pool.

    ``surrogate`` mode chains through the frozen surrogates; ``analytic``
    mode substitutes the exact Gram forms.  Every epoch the exact evaluated
    SE on the held-out pool is recorded, and the best-evaluated parameters
    are returned.  Surrogate parameters are bit-identical on exit.
    """
    if mode not in ("surrogate", "analytic"):
        raise ValueError(f"unknown policy training mode {mode!r}")
    if mode == "surrogate" and (proj_model is None or value_model is None):
        raise ValueError("surrogate mode requires trained surrogates")

    start = time.perf_counter()
    scene0 = pool.scenes[0]
    user_ap = scene0.user_apertures()
    noise = scene0.noise_vars()

    if mode == "surrogate":
        norms = {"pos_scale": proj_model.norm("pos_scale"),
                 "a_scale": proj_model.norm("a_scale"),
                 "out_scale": proj_model.norm("a_scale")}
    else:
        # natural scale of projected weights on this pool
        c_diag = np.mean([np.trace(c).real / c.shape[0]
                          for c in pool.coupling_grams])
        a_nat = np.sqrt(power_budget / (scene0.num_users * c_diag))
        norms = {"pos_scale": 30.0, "a_scale": a_nat, "out_scale": a_nat}

    policy = GnnModel(spec=spec, params=init_params(spec, seed),
                      norms=norms)
    opt = Adam(policy.params, lr=hyper.learning_rate, beta1=hyper.beta1,
               beta2=hyper.beta2)
    report = TrainReport(seeds={"init": seed})

    frozen_fingerprint = None
    if mode == "surrogate":
        frozen_fingerprint = [
            [arr.copy() for _, arr in proj_model.params.iter_arrays()],
            [arr.copy() for _, arr in value_model.params.iter_arrays()]]

    n = len(pool.scenes)
    best_se = -np.inf
    best_epoch = -1
    best_params = policy.params.copy()
    for epoch in range(hyper.epochs):
        opt.lr = hyper.lr_at(epoch)
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 13 + epoch])).permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            try:
                if mode == "surrogate":
                    loss, grads, _ = surrogate_chain_loss_and_grads(
                        policy, proj_model, value_model, pool.positions[idx],
                        user_ap, noise, power_budget)
                else:
                    loss, grads, _ = analytic_chain_loss_and_grads(
                        policy, pool.positions[idx], pool.coupling_grams[idx],
                        user_ap, noise, power_budget)
            except DegenerateBatchError:
                report.skipped_batches += 1
                continue
            if not np.isfinite(loss):
                raise RuntimeError(f"policy training diverged at epoch {epoch}")
            opt.step(grads)
            epoch_loss += loss
            n_batches += 1
        report.loss_curve.append(epoch_loss / max(n_batches, 1))
        se = float(np.mean(exact_policy_se(policy, eval_pool, power_budget,
                                           user_ap, noise)))
        report.eval_curve.append(se)
        if se > best_se:
            best_se = se
            best_epoch = epoch
            best_params = policy.params.copy()

    policy.params = best_params
    report.best_epoch = best_epoch
    report.final_metrics["held_out_exact_se"] = best_se

    if frozen_fingerprint is not None:
        for snap, model in zip(frozen_fingerprint, (proj_model, value_model)):
            for saved, (_, arr) in zip(snap, model.params.iter_arrays()):
                if not np.array_equal(saved, arr):
                    raise AssertionError("frozen surrogate parameters changed")
        # surrogate fidelity on the policy's own outputs (diagnostic)
        a_raw, _ = policy_forward(policy, eval_pool.positions)
        p_exact = np.einsum("njk,nji,nik->nk", np.conj(a_raw),
                            eval_pool.coupling_grams, a_raw).real
        p_hat, _ = proj_forward(proj_model, eval_pool.positions, a_raw)
        report.final_metrics["proj_nmse_on_policy_outputs"] = normalized_mse(
            p_hat, p_exact)
        scale = np.sqrt(power_budget / p_exact.sum(axis=1))
        a_bar = a_raw * scale[:, None, None]
        g_exact = np.einsum("nki,nij->nkj", eval_pool.coupling_grams, a_bar)
        g_hat, _ = value_forward(value_model, eval_pool.positions, a_bar)
        report.final_metrics["value_nmse_on_policy_outputs"] = normalized_mse(
            g_hat, g_exact)

    report.wall_clock_seconds = time.perf_counter() - start
    return policy, report


# -- gradient checking --------------------------------------------------------

def finite_diff_check(loss_fn, params: GnnParams, grads: GnnParams,
                      probes: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes random parameters with step 1e-6 * max(1, |w|); probes whose
    difference quotient is cancellation-limited at that step are re-measured
    at 1e-5 * max(1, |w|) and the better of the two is kept (a genuinely
    wrong adjoint disagrees at every step, so the detector stays sharp).
    Relative error uses a max(|analytic|, |numeric|, 1e-12) denominator.
    """
    rng = np.random.default_rng(seed)
    arrays = list(params.iter_arrays())
    garrays = dict(grads.iter_arrays())
    worst = 0.0
    for _ in range(probes):
        name, arr = arrays[rng.integers(len(arrays))]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        w0 = arr[idx]
        analytic = garrays[name][idx]
        best = np.inf
        for step_scale in (1e-6, 1e-5):
            step = step_scale * max(1.0, abs(w0))
            arr[idx] = w0 + step
            up = loss_fn()
            arr[idx] = w0 - step
            down = loss_fn()
            arr[idx] = w0
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(analytic), abs(numeric), 1e-12)
            best = min(best, abs(analytic - numeric) / denom)
            if best <= 1e-6:
                break
        worst = max(worst, best)
    return worst


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: GnnModel, path: str, report: TrainReport | None = None,
                    seed_lineage: dict | None = None) -> None:
    layers = []
    for lp in model.params.layers:
        entry = {}
        for name in ("w_self", "w_other", "w_ein", "w_eout", "b_v",
                     "u_edge", "u_src", "u_dst", "b_e", "u_agg"):
            arr = getattr(lp, name)
            entry[name] = None if arr is None else {
                "shape": list(arr.shape), "data": arr.ravel().tolist()}
        layers.append(entry)
    rec = {
        "record": "gnn_checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "norms": model.norms,
        "seed_lineage": seed_lineage or {},
        "layers": layers,
    }
    if report is not None:
        rec["report"] = json.loads(report.to_json())
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path: str) -> GnnModel:
    try:
        with open(path) as fh:
            rec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if rec.get("record") != "gnn_checkpoint":
        raise CheckpointError("not a checkpoint file")
    if rec.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {rec.get('format_version')}")
    spec = GnnSpec.from_dict(rec["spec"])
    reference = init_params(spec, 0)
    layers = []
    for t, entry in enumerate(rec["layers"]):
        kwargs = {}
        for name in ("w_self", "w_other", "w_ein", "w_eout", "b_v",
                     "u_edge", "u_src", "u_dst", "b_e", "u_agg"):
            stored = entry.get(name)
            ref = getattr(reference.layers[t], name) if t < len(reference.layers) else None
            if stored is None:
                if ref is not None:
                    raise CheckpointError(f"missing array {name} in layer {t}")
                kwargs[name] = None
                continue
            arr = np.asarray(stored["data"], dtype=float).reshape(stored["shape"])
            if ref is None or arr.shape != ref.shape:
                raise CheckpointError(
                    f"layer {t} array {name} has shape {arr.shape}, "
                    f"spec requires {None if ref is None else ref.shape}")
            kwargs[name] = arr
        layers.append(LayerParams(**kwargs))
    if len(layers) != spec.transitions:
        raise CheckpointError("layer count does not match spec")
    return GnnModel(spec=spec, params=GnnParams(layers=layers),
                    norms=rec.get("norms", {}))
