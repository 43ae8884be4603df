"""Proxy-variable stage (training stage 2) and transported inference.

A shared affine feature adapter plays the trainable backbone; a VAE encodes
source features into a latent z; two linear heads map (z, x) to class logits
and to a predicted proxy vector. Because both heads are affine with isotropic
noise, the conditional-on-confounder predictor has the closed pseudo-inverse
form evaluated by ``solve_h_y``. Inference maps a target sample through every
trained mechanism pair, weights the candidates by a fitted isotropic Gaussian
proxy prior, and combines the per-candidate logits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dcm import MechanismPair
from .errors import ContractError, NumericError, ShapeError
from .graddiff import (
    MlpSpec,
    OptState,
    ParamStore,
    Tape,
    mlp_apply,
    mlp_init,
    optimizer_step,
    softmax,
)
from .numerics import RngStream, gauss_logpdf_rows, pinv, smallest_singular_value
from .scm import Dataset

_PROB_CLAMP = (1e-6, 1.0 - 1e-6)


@dataclass(frozen=True)
class ProxyConfig:
    """Stage-2 knobs; learning rate and trade-off alpha are documented defaults."""

    latent_dim: int = 3
    hidden: int = 16
    iterations: int = 3000
    batch_size: int = 64
    alpha: float = 1.0            # weight of the adversarial feature term
    learning_rate: float = 1e-3   # Nesterov SGD
    momentum: float = 0.9
    weighting: str = "gaussian"   # candidate weighting: "gaussian" | "uniform"
    z_mode: str = "sample"        # "sample" | "mean"
    init_scale: float = 0.02

    def __post_init__(self):
        if self.weighting not in ("gaussian", "uniform"):
            raise ContractError(f"unknown weighting mode {self.weighting!r}")
        if self.z_mode not in ("sample", "mean"):
            raise ContractError(f"unknown z mode {self.z_mode!r}")


# ---------------------------------------------------------------------------
# Components (all trainable state lives in two ParamStores)
# ---------------------------------------------------------------------------


@dataclass
class FeatureAdapter:
    """Shared affine map on observation space, initialized at the identity."""

    n: int
    store: ParamStore

    def apply_node(self, tape: Tape, x: int) -> int:
        w = tape.param(self.store, "adapter.W")
        b = tape.param(self.store, "adapter.b")
        return tape.affine(x, w, b)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.store.get("adapter.W").T + self.store.get("adapter.b")


@dataclass
class VaeParams:
    """Encoder to (mean, log-variance) of z and decoder back to feature space."""

    n: int
    latent_dim: int
    enc_arch: MlpSpec
    dec_arch: MlpSpec
    store: ParamStore

    def __post_init__(self):
        if not (0 < self.latent_dim < self.n):
            raise ContractError(
                f"latent dim must satisfy 0 < l < n, got l={self.latent_dim}, n={self.n}"
            )

    def encode_nodes(self, tape: Tape, x: int) -> tuple[int, int]:
        out = mlp_apply(self.enc_arch, self.store, "enc", x, tape)
        mu = tape.slice_last(out, 0, self.latent_dim)
        logvar = tape.slice_last(out, self.latent_dim, 2 * self.latent_dim)
        return mu, logvar

    def decode_node(self, tape: Tape, z: int) -> int:
        return mlp_apply(self.dec_arch, self.store, "dec", z, tape)

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tape = Tape()
        mu, logvar = self.encode_nodes(tape, tape.constant(x))
        return tape.value(mu), tape.value(logvar)


@dataclass
class LinearHeads:
    """Affine class head and proxy head with fixed unit isotropic variances.

    The product W1 W3^+ that the closed-form predictor needs is cached per
    parameter generation so inference never recomputes the pseudo-inverse.
    """

    c: int
    n: int
    latent_dim: int
    store: ParamStore
    sigma1_sq: float = 1.0
    sigma2_sq: float = 1.0
    _cache_gen: int = field(default=-1, repr=False)
    _cached_w1w3p: np.ndarray | None = field(default=None, repr=False)

    def w(self, name: str) -> np.ndarray:
        return self.store.get(f"heads.{name}")

    def w1_w3_pinv(self) -> np.ndarray:
        if self._cache_gen != self.store.generation:
            self._cached_w1w3p = self.w("W1") @ pinv(self.w("W3"))
            self._cache_gen = self.store.generation
        return self._cached_w1w3p

    def w3_smallest_singular(self) -> float:
        return smallest_singular_value(self.w("W3"))

    def forward_nodes(self, tape: Tape, z: int, x: int) -> tuple[int, int]:
        zero_c = tape.constant(np.zeros(self.c))
        zero_n = tape.constant(np.zeros(self.n))
        logits = tape.add(
            tape.affine(z, tape.param(self.store, "heads.W1"), tape.param(self.store, "heads.b1")),
            tape.affine(x, tape.param(self.store, "heads.W2"), zero_c),
        )
        xhat = tape.add(
            tape.affine(z, tape.param(self.store, "heads.W3"), tape.param(self.store, "heads.b2")),
            tape.affine(x, tape.param(self.store, "heads.W4"), zero_n),
        )
        return logits, xhat


@dataclass
class ProxyDiscriminators:
    """Feature-space realness scorers for Eq.-style adversarial alignment."""

    arch: MlpSpec
    store: ParamStore

    def prob_node(self, tape: Tape, x: int, domain: str) -> int:
        out = mlp_apply(self.arch, self.store, domain, x, tape)
        return tape.clamp(tape.sum_last(out), *_PROB_CLAMP)

    def prob(self, x: np.ndarray, domain: str) -> np.ndarray:
        tape = Tape()
        return tape.value(self.prob_node(tape, tape.constant(x), domain))


@dataclass
class ProxyModel:
    """Everything transported inference needs, including the fitted proxy prior."""

    config: ProxyConfig
    n: int
    c: int
    adapter: FeatureAdapter
    vae: VaeParams
    heads: LinearHeads
    discs: ProxyDiscriminators
    pairs: list[MechanismPair]
    prior_mean: np.ndarray | None = None
    prior_var: float | None = None

    @property
    def store(self) -> ParamStore:
        return self.adapter.store  # adapter, vae, heads share one store

    @property
    def k(self) -> int:
        return len(self.pairs)


def make_proxy_model(
    config: ProxyConfig, n: int, c: int, pairs: list[MechanismPair], rng: RngStream
) -> ProxyModel:
    l = config.latent_dim
    store = ParamStore()
    store.register("adapter.W", np.eye(n))
    store.register("adapter.b", np.zeros(n))
    enc_arch = MlpSpec((n, config.hidden, 2 * l), hidden_act="tanh")
    dec_arch = MlpSpec((l, config.hidden, n), hidden_act="tanh")
    sub = rng.split(3000)
    sub = mlp_init(enc_arch, store, "enc", sub, scale=config.init_scale)
    sub = mlp_init(dec_arch, store, "dec", sub, scale=config.init_scale)
    shapes = {"W1": (c, l), "W2": (c, n), "b1": (c,), "W3": (n, l), "W4": (n, n), "b2": (n,)}
    for name, shape in shapes.items():
        noise, sub = sub.normals(int(np.prod(shape)))
        store.register(f"heads.{name}", config.init_scale * noise.reshape(shape))

    disc_arch = MlpSpec((n, 16, 1), hidden_act="lrelu", out_act="sigmoid")
    disc_store = ParamStore()
    dsub = rng.split(4000)
    dsub = mlp_init(disc_arch, disc_store, "s", dsub, scale=config.init_scale)
    mlp_init(disc_arch, disc_store, "t", dsub, scale=config.init_scale)

    return ProxyModel(
        config=config,
        n=n,
        c=c,
        adapter=FeatureAdapter(n, store),
        vae=VaeParams(n, l, enc_arch, dec_arch, store),
        heads=LinearHeads(c, n, l, store),
        discs=ProxyDiscriminators(disc_arch, disc_store),
        pairs=pairs,
    )


# ---------------------------------------------------------------------------
# Contract-level operations
# ---------------------------------------------------------------------------


def heads_forward(heads: LinearHeads, z, x) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate both affine heads: class logits and predicted proxy."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    logits = z @ heads.w("W1").T + x @ heads.w("W2").T + heads.w("b1")
    xhat = z @ heads.w("W3").T + x @ heads.w("W4").T + heads.w("b2")
    return logits, xhat


def solve_h_y(heads: LinearHeads, x, xhat) -> np.ndarray:
    """Closed-form confounder-adjusted logits from an observation and one proxy.

    b1 - W1 W3^+ b2 + W1 W3^+ xhat + (W2 - W1 W3^+ W4) x, with the
    pseudo-inverse product cached per heads snapshot.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    w1w3p = heads.w1_w3_pinv()
    const = heads.w("b1") - w1w3p @ heads.w("b2")
    return const + xhat @ w1w3p.T + x @ (heads.w("W2") - w1w3p @ heads.w("W4")).T


def vae_loss(vae: VaeParams, x, rng: RngStream) -> tuple[float, float, float]:
    """(total, reconstruction, kl) of the VAE on adapter-space input x.

    One reparameterized draw, unit-variance decoder convention; the KL against
    the standard normal prior is closed-form.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    rows = x.shape[0] if batched else 1
    eps, _ = rng.normals(rows * vae.latent_dim)
    eps = eps.reshape(rows, vae.latent_dim) if batched else eps[: vae.latent_dim]
    tape = Tape()
    total, recon, kl, _ = _vae_nodes(tape, vae, tape.constant(x), eps)
    vals = (float(tape.value(total)), float(tape.value(recon)), float(tape.value(kl)))
    if not all(np.isfinite(vals)):
        raise NumericError("vae loss is non-finite")
    return vals


def _encode_z(tape: Tape, vae: VaeParams, x: int, eps: np.ndarray, z_mode: str):
    mu, logvar = vae.encode_nodes(tape, x)
    if z_mode == "sample":
        std = tape.exp(tape.scale(logvar, 0.5))
        z = tape.add(mu, tape.mul(std, tape.constant(eps)))
    else:
        z = mu
    return mu, logvar, z


def _vae_nodes(tape: Tape, vae: VaeParams, x: int, eps: np.ndarray, z_mode="sample"):
    mu, logvar, z = _encode_z(tape, vae, x, eps, z_mode)
    recon = tape.mean_all(tape.sq_dist(x, vae.decode_node(tape, z)))
    ones = tape.constant(np.ones(tape.value(mu).shape))
    kl_inner = tape.sub(tape.add(tape.square(mu), tape.exp(logvar)), tape.add(logvar, ones))
    kl = tape.scale(tape.mean_all(tape.sum_last(kl_inner)), 0.5)
    total = tape.add(recon, kl)
    return total, recon, kl, z


def classification_loss(
    model: ProxyModel, xs, ys, proxies, rng: RngStream
) -> float:
    """Cross-entropy of the class head plus mean squared proxy-regression error."""
    ys = np.asarray(ys)
    if ys.size == 0 or np.any(ys < 0):
        raise ContractError("classification loss needs labeled source samples")
    if len(proxies) != model.k:
        raise ContractError(f"expected {model.k} proxies per sample, got {len(proxies)}")
    xs = np.asarray(xs, dtype=np.float64)
    rows = xs.shape[0] if xs.ndim == 2 else 1
    eps, _ = rng.normals(rows * model.vae.latent_dim)
    eps = eps.reshape(rows, model.vae.latent_dim) if xs.ndim == 2 else eps[: model.vae.latent_dim]
    tape = Tape()
    xs_node = tape.constant(xs)
    _, _, z = _encode_z(tape, model.vae, xs_node, eps, model.config.z_mode)
    node = _classification_nodes(tape, model, xs_node, ys, [tape.constant(p) for p in proxies], z)
    val = float(tape.value(node))
    if not np.isfinite(val):
        raise NumericError("classification loss is non-finite")
    return val


def _classification_nodes(tape, model, xs_f, ys, proxy_nodes_f, z):
    """xs_f, proxy nodes, and z are tape nodes; features live in adapter space."""
    logits, xhat_pred = model.heads.forward_nodes(tape, z, xs_f)
    ce = tape.mean_all(tape.softmax_ce(logits, ys))
    k = len(proxy_nodes_f)
    mse_terms = None
    for p in proxy_nodes_f:
        term = tape.scale(tape.mean_all(tape.sq_dist(xhat_pred, p)), 1.0 / k)
        mse_terms = term if mse_terms is None else tape.add(mse_terms, term)
    return tape.add(ce, mse_terms)


def proxy_loss(model: ProxyModel, x_s, proxies_s, x_t, proxies_t) -> float:
    """Adversarial feature-resemblance objective over both domains.

    All four inputs are adapter-space features; proxies are length-k lists.
    Maximized in the discriminators, minimized (scaled by alpha) in the
    adapter, via alternating updates.
    """
    if len(proxies_s) != len(proxies_t) or len(proxies_s) != model.k:
        raise ContractError(f"expected {model.k} proxies per sample on both sides")
    tape = Tape()
    node = _proxy_loss_nodes(
        tape,
        model.discs,
        tape.constant(x_s),
        [tape.constant(p) for p in proxies_s],
        tape.constant(x_t),
        [tape.constant(p) for p in proxies_t],
    )
    val = float(tape.value(node))
    if not np.isfinite(val):
        raise NumericError("proxy loss is non-finite")
    return val


def _proxy_loss_nodes(tape, discs, xs_f, proxies_s_f, xt_f, proxies_t_f):
    k = len(proxies_s_f)
    one = tape.constant(1.0)
    total = tape.mean_all(tape.log(discs.prob_node(tape, xs_f, "s")))
    for p in proxies_s_f:
        term = tape.mean_all(tape.log(tape.sub(one, discs.prob_node(tape, p, "t"))))
        total = tape.add(total, tape.scale(term, 1.0 / k))
    total = tape.add(total, tape.mean_all(tape.log(discs.prob_node(tape, xt_f, "t"))))
    for p in proxies_t_f:
        term = tape.mean_all(tape.log(tape.sub(one, discs.prob_node(tape, p, "s"))))
        total = tape.add(total, tape.scale(term, 1.0 / k))
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_stage2(
    config: ProxyConfig,
    pairs: list[MechanismPair],
    source: Dataset,
    target: Dataset,
    rng: RngStream,
) -> tuple[ProxyModel, list[dict]]:
    """Alternating minimization over (heads, adapter, VAE) and maximization over discriminators."""
    if not pairs:
        raise ContractError("stage 2 requires trained mechanism pairs")
    xs_all = source.features()
    ys_all = source.training_labels()
    xt_all = target.features()
    n = xs_all.shape[1]
    c = int(ys_all.max()) + 1
    model = make_proxy_model(config, n, c, pairs, rng.split(1))
    gen_opt = OptState("sgd-nesterov", lr=config.learning_rate, momentum=config.momentum)
    disc_opt = OptState("sgd-nesterov", lr=config.learning_rate, momentum=config.momentum)
    log: list[dict] = []
    k = len(pairs)

    for step in range(config.iterations):
        it_rng = rng.split(20_000 + step)
        si, it_rng = it_rng.integers(0, len(xs_all), config.batch_size)
        ti, it_rng = it_rng.integers(0, len(xt_all), config.batch_size)
        eps, it_rng = it_rng.normals(config.batch_size * config.latent_dim)
        eps = eps.reshape(config.batch_size, config.latent_dim)
        xs_raw, ys = xs_all[si], ys_all[si]
        xt_raw = xt_all[ti]
        proxies_s_raw = [p.forward(xs_raw) for p in pairs]
        proxies_t_raw = [p.reverse(xt_raw) for p in pairs]

        # Generator-side step: minimize L_c + L_v + alpha * L_p over heads, VAE, adapter.
        tape = Tape()
        xs_f = model.adapter.apply_node(tape, tape.constant(xs_raw))
        xt_f = model.adapter.apply_node(tape, tape.constant(xt_raw))
        phs_f = [model.adapter.apply_node(tape, tape.constant(p)) for p in proxies_s_raw]
        pht_f = [model.adapter.apply_node(tape, tape.constant(p)) for p in proxies_t_raw]
        lv, recon, kl, z = _vae_nodes(tape, model.vae, xs_f, eps, config.z_mode)
        lc = _classification_nodes(tape, model, xs_f, ys, phs_f, z)
        lp = _proxy_loss_nodes(tape, model.discs, xs_f, phs_f, xt_f, pht_f)
        total = tape.add(tape.add(lc, lv), tape.scale(lp, config.alpha))
        row = {
            "iteration": step,
            "loss_c": round(float(tape.value(lc)), 10),
            "loss_v": round(float(tape.value(lv)), 10),
            "recon": round(float(tape.value(recon)), 10),
            "kl": round(float(tape.value(kl)), 10),
            "loss_p": round(float(tape.value(lp)), 10),
        }
        if not np.isfinite(row["loss_c"] + row["loss_v"] + row["loss_p"]):
            raise NumericError(f"stage-2 iteration {step}: non-finite loss")
        grads = tape.backward(total)
        gen_grads = {kk: v for kk, v in grads.items() if not kk.startswith(("s.", "t."))}
        optimizer_step(gen_opt, model.store, gen_grads)

        # Discriminator step: maximize L_p over the discriminator parameters.
        dtape = Tape()
        xs_fv = model.adapter.apply(xs_raw)
        xt_fv = model.adapter.apply(xt_raw)
        dnode = _proxy_loss_nodes(
            dtape,
            model.discs,
            dtape.constant(xs_fv),
            [dtape.constant(model.adapter.apply(p)) for p in proxies_s_raw],
            dtape.constant(xt_fv),
            [dtape.constant(model.adapter.apply(p)) for p in proxies_t_raw],
        )
        dgrads = dtape.backward(dnode)
        optimizer_step(disc_opt, model.discs.store, {kk: -v for kk, v in dgrads.items()})

        w3_min = model.heads.w3_smallest_singular()
        if w3_min < 1e-8:
            row["w3_rank_warning"] = w3_min
        log.append(row)
    return model, log


def fit_proxy_prior(
    model: ProxyModel, pairs: list[MechanismPair], target: Dataset
) -> tuple[np.ndarray, float]:
    """Isotropic Gaussian fit over all adapter-space proxies of the target set.

    Pooled population variance over every coordinate of every proxy vector;
    a degenerate (all-identical) proxy cloud is clamped to 1e-8 with a warning.
    """
    if len(target) == 0:
        raise ContractError("target dataset is empty")
    xt = target.features()
    stacked = np.concatenate([model.adapter.apply(p.reverse(xt)) for p in pairs], axis=0)
    if stacked.shape[0] < 2:
        raise ContractError("need at least two proxy vectors to fit a prior")
    mean = stacked.mean(axis=0)
    var = float(((stacked - mean) ** 2).mean())
    if var < 1e-8:
        warnings.warn("proxy prior variance is degenerate; clamping to 1e-8", stacklevel=2)
        var = 1e-8
    model.prior_mean = mean
    model.prior_var = var
    return mean, var


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InferResult:
    combined_logits: np.ndarray
    probabilities: np.ndarray
    predicted: int
    weights: np.ndarray


def infer_rows(model: ProxyModel, xt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized transported inference; returns (preds, probs, logits, weights)."""
    if model.prior_mean is None or model.prior_var is None:
        raise ContractError("proxy prior not fitted; call fit_proxy_prior first")
    xt = np.asarray(xt, dtype=np.float64)
    if xt.ndim != 2:
        raise ShapeError("infer_rows expects a (batch, n) array")
    x_f = model.adapter.apply(xt)
    k, c = model.k, model.c
    logpdfs = np.empty((xt.shape[0], k))
    hys = np.empty((xt.shape[0], k, c))
    for i, pair in enumerate(model.pairs):
        ph_f = model.adapter.apply(pair.reverse(xt))
        logpdfs[:, i] = gauss_logpdf_rows(ph_f, model.prior_mean, model.prior_var)
        hys[:, i, :] = solve_h_y(model.heads, x_f, ph_f)
    if model.config.weighting == "gaussian":
        weights = softmax(logpdfs)
    else:
        weights = np.full((xt.shape[0], k), 1.0 / k)
    logits = np.einsum("bk,bkc->bc", weights, hys)
    probs = softmax(logits)
    return probs.argmax(axis=1), probs, logits, weights


def infer(model: ProxyModel, x_t) -> InferResult:
    """Transported prediction for one target sample."""
    x_t = np.asarray(x_t, dtype=np.float64)
    preds, probs, logits, weights = infer_rows(model, x_t[None, :])
    return InferResult(logits[0], probs[0], int(preds[0]), weights[0])
