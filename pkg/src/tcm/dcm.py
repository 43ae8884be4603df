"""Competitive discovery of cross-domain mechanism pairs (training stage 1).

k pairs of maps (forward: source->target, reverse: target->source) each carry
a CycleGAN-style loss: adversarial term in its written log(1 - D) form, L1
cycle consistency, and L1 identity. Every batch is scored by all pairs; after
a warmup phase in which everyone updates, only the pair with the smallest
batch loss receives a gradient step, with ties broken toward the lowest
index. Two domain discriminators are trained in alternation to tell real
samples from every pair's fakes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .graddiff import MlpSpec, OptState, ParamStore, Tape, adam_step, mlp_apply, mlp_forward, mlp_init
from .numerics import RngStream
from .scm import SOURCE, TARGET, Dataset

_PROB_CLAMP = (1e-6, 1.0 - 1e-6)


@dataclass(frozen=True)
class DcmConfig:
    """Stage-1 knobs; every value is a documented default, not a claim."""

    k_mechanisms: int = 3
    warmup: int = 500            # steps during which every pair updates
    iterations: int = 6000       # competitive steps after warmup
    batch_size: int = 64
    alpha1: float = 10.0         # cycle-consistency weight
    alpha2: float = 5.0          # identity weight
    mechanism_class: str = "affine"  # "affine" | "mlp"
    mlp_hidden: int = 16
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    init_scale: float = 0.02

    def __post_init__(self):
        if self.k_mechanisms < 1:
            raise ContractError("need at least one mechanism pair")
        if self.warmup < 0 or self.iterations < 0:
            raise ContractError("iteration counts must be non-negative")
        if self.mechanism_class not in ("affine", "mlp"):
            raise ContractError(f"unknown mechanism class {self.mechanism_class!r}")


def _mechanism_arch(config: DcmConfig, n: int) -> MlpSpec:
    if config.mechanism_class == "affine":
        return MlpSpec((n, n))
    return MlpSpec((n, config.mlp_hidden, n), hidden_act="tanh")


@dataclass
class MechanismPair:
    """One learnable (forward, reverse) mapping pair plus its training statistics."""

    index: int
    arch: MlpSpec
    store: ParamStore
    wins: dict = field(default_factory=lambda: {SOURCE: 0, TARGET: 0})
    loss_sum: float = 0.0
    loss_count: int = 0

    def direction_prefix(self, domain: str) -> str:
        # Maps *out of* the given domain: forward leaves source, reverse leaves target.
        return "fwd" if domain == SOURCE else "rev"

    def forward_node(self, tape: Tape, x: int) -> int:
        return mlp_apply(self.arch, self.store, "fwd", x, tape)

    def reverse_node(self, tape: Tape, x: int) -> int:
        return mlp_apply(self.arch, self.store, "rev", x, tape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.arch, self.store, "fwd", x)

    def reverse(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.arch, self.store, "rev", x)


@dataclass
class DomainDiscriminators:
    """Per-domain realness scorers; sigmoid outputs clamped away from {0, 1}."""

    arch: MlpSpec
    store: ParamStore

    def prob_node(self, tape: Tape, x: int, domain: str) -> int:
        out = mlp_apply(self.arch, self.store, domain, x, tape)
        return tape.clamp(tape.sum_last(out), *_PROB_CLAMP)

    def prob(self, x: np.ndarray, domain: str) -> np.ndarray:
        tape = Tape()
        return tape.value(self.prob_node(tape, tape.constant(x), domain))


def make_pairs(config: DcmConfig, n: int, rng: RngStream) -> list[MechanismPair]:
    arch = _mechanism_arch(config, n)
    identity = config.mechanism_class == "affine"
    pairs = []
    for i in range(config.k_mechanisms):
        store = ParamStore()
        sub = rng.split(1000 + i)
        sub = mlp_init(arch, store, "fwd", sub, scale=config.init_scale, identity=identity)
        mlp_init(arch, store, "rev", sub, scale=config.init_scale, identity=identity)
        pairs.append(MechanismPair(i, arch, store))
    return pairs


def make_discriminators(config: DcmConfig, n: int, rng: RngStream) -> DomainDiscriminators:
    arch = MlpSpec((n, 16, 1), hidden_act="lrelu", out_act="sigmoid")
    store = ParamStore()
    sub = rng.split(2000)
    sub = mlp_init(arch, store, SOURCE, sub, scale=config.init_scale)
    mlp_init(arch, store, TARGET, sub, scale=config.init_scale)
    return DomainDiscriminators(arch, store)


@dataclass
class DcmTrainerState:
    """Iteration bookkeeping and optimizer states for pairs and discriminators."""

    config: DcmConfig
    iteration: int
    pair_opts: list[OptState]
    disc_opt: OptState

    @property
    def in_warmup(self) -> bool:
        return self.iteration < self.config.warmup


def make_trainer_state(config: DcmConfig) -> DcmTrainerState:
    mk = lambda: OptState(
        "adam", lr=config.learning_rate, beta1=config.adam_beta1, beta2=config.adam_beta2
    )
    return DcmTrainerState(
        config, 0, [mk() for _ in range(config.k_mechanisms)], mk()
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CycleGanParts:
    total: float
    adv: float
    cyc: float
    idt: float


def _other(domain: str) -> str:
    return TARGET if domain == SOURCE else SOURCE


def _cyclegan_nodes(
    tape: Tape,
    pair: MechanismPair,
    disc: DomainDiscriminators,
    x: int,
    domain: str,
    alpha1: float,
    alpha2: float,
) -> tuple[int, int, int, int]:
    """Batch-mean CycleGAN loss nodes (total, adv, cyc, idt) for one pair."""
    if domain == SOURCE:
        out = pair.forward_node(tape, x)
        back = pair.reverse_node(tape, out)
        same = pair.reverse_node(tape, x)
    else:
        out = pair.reverse_node(tape, x)
        back = pair.forward_node(tape, out)
        same = pair.forward_node(tape, x)
    d_fake = disc.prob_node(tape, out, _other(domain))
    n = tape.value(x).shape[-1]
    adv = tape.mean_all(tape.log(tape.sub(tape.constant(1.0), d_fake)))
    # L1 terms use mean reduction over coordinates (the torch L1Loss
    # convention of the reference CycleGAN implementation), so the identity
    # pull does not scale with dimensionality.
    cyc = tape.scale(tape.mean_all(tape.l1_diff(back, x)), 1.0 / n)
    idt = tape.scale(tape.mean_all(tape.l1_diff(same, x)), 1.0 / n)
    total = tape.add(adv, tape.add(tape.scale(cyc, alpha1), tape.scale(idt, alpha2)))
    return total, adv, cyc, idt


def cyclegan_loss(
    pair: MechanismPair,
    disc: DomainDiscriminators,
    x: np.ndarray,
    domain: str,
    weights: tuple[float, float] = (10.0, 5.0),
) -> CycleGanParts:
    """Evaluate the three-part loss on a sample or batch (mean over rows)."""
    tape = Tape()
    nodes = _cyclegan_nodes(tape, pair, disc, tape.constant(x), domain, *weights)
    vals = [float(tape.value(nd)) for nd in nodes]
    if not all(np.isfinite(vals)):
        name = ("total", "adv", "cyc", "idt")[int(np.argmax(~np.isfinite(vals)))]
        raise NumericError(f"cyclegan loss component {name!r} is non-finite")
    return CycleGanParts(*vals)


def discriminator_loss(
    disc: DomainDiscriminators,
    pairs: list[MechanismPair],
    x: np.ndarray,
    domain: str,
) -> float:
    """Discriminator objective (maximized): log D_dom(x) + mean_i adv_i."""
    if not pairs:
        raise ContractError("need at least one mechanism pair")
    tape = Tape()
    node = _discriminator_nodes(tape, disc, pairs, tape.constant(x), domain)
    val = float(tape.value(node))
    if not np.isfinite(val):
        raise NumericError("discriminator loss is non-finite")
    return val


def _discriminator_nodes(
    tape: Tape,
    disc: DomainDiscriminators,
    pairs: list[MechanismPair],
    x: int,
    domain: str,
) -> int:
    real = tape.mean_all(tape.log(disc.prob_node(tape, x, domain)))
    k = len(pairs)
    acc = real
    xv = tape.value(x)
    for pair in pairs:
        # Fakes enter as constants: this loss only trains the discriminators.
        fake = pair.forward(xv) if domain == SOURCE else pair.reverse(xv)
        d_fake = disc.prob_node(tape, tape.constant(fake), _other(domain))
        adv = tape.mean_all(tape.log(tape.sub(tape.constant(1.0), d_fake)))
        acc = tape.add(acc, tape.scale(adv, 1.0 / k))
    return acc


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    losses: tuple
    winner: int
    disc_loss: float


def competitive_step(
    state: DcmTrainerState,
    pairs: list[MechanismPair],
    disc: DomainDiscriminators,
    batch: np.ndarray,
    domain: str,
) -> StepResult:
    """One training step: score all pairs, update winner (or all during warmup), then discriminators."""
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ContractError("batch must be a non-empty (batch, n) array")
    cfg = state.config

    tapes = []
    totals = []
    for pair in pairs:
        tape = Tape()
        total, _, _, _ = _cyclegan_nodes(
            tape, pair, disc, tape.constant(batch), domain, cfg.alpha1, cfg.alpha2
        )
        tapes.append((tape, total))
        totals.append(float(tape.value(total)))
    if not all(np.isfinite(totals)):
        raise NumericError("non-finite pair loss in competitive step")

    winner = int(np.argmin(totals))  # argmin breaks ties toward the lowest index
    to_update = range(len(pairs)) if state.in_warmup else (winner,)
    for i in to_update:
        tape, total = tapes[i]
        grads = tape.backward(total)
        own = {k: v for k, v in grads.items() if k.startswith(("fwd.", "rev."))}
        adam_step(state.pair_opts[i], pairs[i].store, own)

    pairs[winner].wins[domain] += 1
    pairs[winner].loss_sum += totals[winner]
    pairs[winner].loss_count += 1

    dtape = Tape()
    dnode = _discriminator_nodes(dtape, disc, pairs, dtape.constant(batch), domain)
    disc_loss = float(dtape.value(dnode))
    dgrads = dtape.backward(dnode)
    adam_step(state.disc_opt, disc.store, {k: -v for k, v in dgrads.items()})

    state.iteration += 1
    return StepResult(tuple(totals), winner, disc_loss)


def train_dcms(
    config: DcmConfig,
    source: Dataset,
    target: Dataset,
    rng: RngStream,
    win_attributor=None,
) -> tuple[list[MechanismPair], DomainDiscriminators, list[dict]]:
    """Run warmup plus competitive training; returns pairs, discriminators, and a log.

    ``win_attributor(batch, domain, pair)``, when given, labels each winning
    step with the generative factor that best explains the winner's shift;
    the label lands in the log for purity reporting downstream.
    """
    xs = {SOURCE: source.features(), TARGET: target.features()}
    n = xs[SOURCE].shape[1]
    if xs[TARGET].shape[1] != n:
        raise ContractError("source and target dimensionality disagree")
    init_rng = rng.split(1)
    pairs = make_pairs(config, n, init_rng)
    disc = make_discriminators(config, n, init_rng)
    state = make_trainer_state(config)
    log: list[dict] = []

    total_steps = config.warmup + config.iterations
    for step in range(total_steps):
        it_rng = rng.split(10_000 + step)
        coin, it_rng = it_rng.uniforms(1)
        domain = SOURCE if coin[0] < 0.5 else TARGET
        pool = xs[domain]
        idx, _ = it_rng.integers(0, len(pool), config.batch_size)
        batch = pool[idx]
        try:
            result = competitive_step(state, pairs, disc, batch, domain)
        except NumericError as exc:
            raise NumericError(f"iteration {step}: {exc}") from exc
        row = {
            "iteration": step,
            "domain": domain,
            "warmup": step < config.warmup,
            "losses": [round(v, 10) for v in result.losses],
            "winner": result.winner,
            "disc_loss": round(result.disc_loss, 10),
        }
        if win_attributor is not None:
            row["factor"] = int(win_attributor(batch, domain, pairs[result.winner]))
        log.append(row)
    return pairs, disc, log


def apply_dcms(pairs: list[MechanismPair], x: np.ndarray, domain: str) -> list[np.ndarray]:
    """Map a sample (or batch) through every pair, out of the given domain."""
    x = np.asarray(x, dtype=np.float64)
    if domain == SOURCE:
        return [pair.forward(x) for pair in pairs]
    if domain == TARGET:
        return [pair.reverse(x) for pair in pairs]
    raise ContractError(f"unknown domain {domain!r}")
