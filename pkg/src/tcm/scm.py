"""Synthetic two-domain structural causal model with a brute-force transport oracle.

The generative story: per-factor confounder u ~ N(mu_domain, sigma_u^2 I),
observation x = A u + b + eps with small recorded noise, label y drawn from
softmax((W_u u + W_x x) / tau). Because every piece is known, the module can
answer the questions learned components are later tested against: the exact
interventional label distribution on the target domain, the closed-form
per-factor ground-truth mechanisms, and coordinate-leakage scores that make
the disentangled-intervention property executable.
"""

from __future__ import annotations

import hashlib
import io
import json
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ContractError, EvalOnlyError, ShapeError, SpecError
from .graddiff import softmax
from .numerics import RngStream, as_matrix, as_vector, pinv, smallest_singular_value, svd

SOURCE = "s"
TARGET = "t"
_DOMAINS = (SOURCE, TARGET)


@dataclass(frozen=True, eq=False)
class ScmSpec:
    """Fully known selection-diagram SCM: factors U, generator, labeler, domain priors."""

    k: int
    n: int
    c: int
    generator: np.ndarray  # A, (n, k), full column rank
    offset: np.ndarray  # b, (n,)
    label_w_u: np.ndarray  # (c, k)
    label_w_x: np.ndarray  # (c, n)
    mu_s: np.ndarray  # (k,)
    mu_t: np.ndarray  # (k,)
    sigma_u: float
    tau: float
    obs_noise_std: float = 0.01

    def __post_init__(self):
        as_matrix(self.generator, (self.n, self.k))
        as_vector(self.offset, self.n)
        as_matrix(self.label_w_u, (self.c, self.k))
        as_matrix(self.label_w_x, (self.c, self.n))
        as_vector(self.mu_s, self.k)
        as_vector(self.mu_t, self.k)
        if self.sigma_u <= 0:
            raise SpecError(f"sigma_u must be positive, got {self.sigma_u}")
        if self.tau <= 0:
            raise SpecError(f"tau must be positive, got {self.tau}")
        if self.obs_noise_std < 0:
            raise SpecError("obs_noise_std must be non-negative")
        if smallest_singular_value(self.generator) <= 1e-6:
            raise SpecError("generator matrix is rank deficient on its column space")
        if np.array_equal(self.mu_s, self.mu_t):
            warnings.warn("mu_s == mu_t: no domain shift exists", stacklevel=2)

    @cached_property
    def generator_pinv(self) -> np.ndarray:
        return pinv(self.generator)

    def mu(self, domain: str) -> np.ndarray:
        _check_domain(domain)
        return self.mu_s if domain == SOURCE else self.mu_t

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n": self.n,
            "c": self.c,
            "generator": self.generator.tolist(),
            "offset": self.offset.tolist(),
            "label_w_u": self.label_w_u.tolist(),
            "label_w_x": self.label_w_x.tolist(),
            "mu_s": self.mu_s.tolist(),
            "mu_t": self.mu_t.tolist(),
            "sigma_u": self.sigma_u,
            "tau": self.tau,
            "obs_noise_std": self.obs_noise_std,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScmSpec":
        return ScmSpec(
            k=int(d["k"]),
            n=int(d["n"]),
            c=int(d["c"]),
            generator=np.array(d["generator"], dtype=np.float64),
            offset=np.array(d["offset"], dtype=np.float64),
            label_w_u=np.array(d["label_w_u"], dtype=np.float64),
            label_w_x=np.array(d["label_w_x"], dtype=np.float64),
            mu_s=np.array(d["mu_s"], dtype=np.float64),
            mu_t=np.array(d["mu_t"], dtype=np.float64),
            sigma_u=float(d["sigma_u"]),
            tau=float(d["tau"]),
            obs_noise_std=float(d["obs_noise_std"]),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_domain(domain: str) -> None:
    if domain not in _DOMAINS:
        raise ContractError(f"domain must be one of {_DOMAINS}, got {domain!r}")


def make_benchmark_spec(
    seed: int = 0,
    k: int = 3,
    n: int = 8,
    c: int = 3,
    sigma_u: float = 0.3,
    tau: float = 0.5,
    shifts: tuple = (1.5, -1.0, 0.8),
    obs_noise_std: float = 0.01,
    max_condition: float = 5.0,
) -> ScmSpec:
    """Random benchmark spec; the generator's condition number is clamped."""
    if len(shifts) != k:
        raise SpecError(f"need {k} per-factor shifts, got {len(shifts)}")
    rng = RngStream(seed, stream=101)
    a_raw, rng = rng.normals(n * k)
    a = a_raw.reshape(n, k)
    # Clamp the spectrum so abduction stays well conditioned.
    u, s, v = svd(a)
    s = np.maximum(s, s[0] / max_condition)
    a = (u * s) @ v.T
    b_raw, rng = rng.normals(n)
    wu_raw, rng = rng.normals(c * k)
    wx_raw, rng = rng.normals(c * n)
    return ScmSpec(
        k=k,
        n=n,
        c=c,
        generator=a,
        offset=0.5 * b_raw,
        label_w_u=wu_raw.reshape(c, k),
        label_w_x=0.25 * wx_raw.reshape(c, n),
        mu_s=np.zeros(k),
        mu_t=np.array(shifts, dtype=np.float64),
        sigma_u=sigma_u,
        tau=tau,
        obs_noise_std=obs_noise_std,
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSample:
    """One observation; u_true and target-domain y are evaluation-only ground truth."""

    x: np.ndarray
    y: int | None
    domain: str
    u_true: np.ndarray
    eps: np.ndarray


class Dataset:
    """Immutable sample collection for one domain.

    Learner-facing access goes through ``features`` and ``training_labels``;
    the latter refuses to reveal target-domain labels. Ground truth needed by
    evaluation lives behind the eval_* accessors.
    """

    def __init__(self, spec_hash: str, domain: str, xs, ys, u_true, eps, seed: int):
        _check_domain(domain)
        self.spec_hash = spec_hash
        self.domain = domain
        self._xs = np.asarray(xs, dtype=np.float64)
        self._ys = np.asarray(ys, dtype=np.int64)
        self._u_true = np.asarray(u_true, dtype=np.float64)
        self._eps = np.asarray(eps, dtype=np.float64)
        self.seed = seed
        if not (len(self._xs) == len(self._ys) == len(self._u_true) == len(self._eps)):
            raise ShapeError("dataset columns disagree on length")

    def __len__(self) -> int:
        return len(self._xs)

    def __getitem__(self, i: int) -> LabeledSample:
        y = int(self._ys[i]) if self.domain == SOURCE else None
        return LabeledSample(self._xs[i].copy(), y, self.domain, self._u_true[i].copy(), self._eps[i].copy())

    def features(self) -> np.ndarray:
        return self._xs.copy()

    def training_labels(self) -> np.ndarray:
        if self.domain != SOURCE:
            raise EvalOnlyError("target-domain labels are evaluation-only")
        return self._ys.copy()

    def eval_labels(self) -> np.ndarray:
        return self._ys.copy()

    def eval_u_true(self) -> np.ndarray:
        return self._u_true.copy()

    def eval_noise(self) -> np.ndarray:
        return self._eps.copy()


def sample_dataset(spec: ScmSpec, domain: str, count: int, rng: RngStream) -> Dataset:
    """Draw ``count`` samples from one domain of the SCM."""
    _check_domain(domain)
    if count <= 0:
        raise ContractError(f"count must be positive, got {count}")
    r_u = rng.split(1)
    r_eps = rng.split(2)
    r_y = rng.split(3)
    zu, _ = r_u.normals(count * spec.k)
    u = spec.mu(domain)[None, :] + spec.sigma_u * zu.reshape(count, spec.k)
    ze, _ = r_eps.normals(count * spec.n)
    eps = spec.obs_noise_std * ze.reshape(count, spec.n)
    xs = u @ spec.generator.T + spec.offset[None, :] + eps
    probs = label_posterior_rows(spec, xs, u)
    uy, _ = r_y.uniforms(count)
    ys = (np.cumsum(probs, axis=1) < uy[:, None]).sum(axis=1)
    return Dataset(spec.hash(), domain, xs, ys, u, eps, seed=rng.seed)


def label_posterior(spec: ScmSpec, x, u) -> np.ndarray:
    """P(Y | X=x, U=u): softmax((W_u u + W_x x) / tau)."""
    x = as_vector(x, spec.n)
    u = as_vector(u, spec.k)
    return softmax((spec.label_w_u @ u + spec.label_w_x @ x) / spec.tau)


def label_posterior_rows(spec: ScmSpec, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    logits = (us @ spec.label_w_u.T + xs @ spec.label_w_x.T) / spec.tau
    return softmax(logits)


def abduct_rows(spec: ScmSpec, xs: np.ndarray, eps: np.ndarray | None = None) -> np.ndarray:
    """Recover u from observations: A^+ (x - b - eps); exact when eps is the recorded noise."""
    res = xs - spec.offset[None, :]
    if eps is not None:
        res = res - eps
    return res @ spec.generator_pinv.T


def mean_abs_factor_shift(spec: ScmSpec, before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Per-factor mean |delta u| induced by a map, via abduction of the difference."""
    du = (after - before) @ spec.generator_pinv.T
    return np.abs(du).mean(axis=0)


# ---------------------------------------------------------------------------
# Transport oracle
# ---------------------------------------------------------------------------


def confounder_mixture_posterior(
    spec: ScmSpec, x, domain: str, mc_samples: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo E_{u ~ P(U|S=domain)}[P(Y|x,u)]; returns (mean, standard error)."""
    x = as_vector(x, spec.n)
    zu, _ = rng.normals(mc_samples * spec.k)
    u = spec.mu(domain)[None, :] + spec.sigma_u * zu.reshape(mc_samples, spec.k)
    logits = (u @ spec.label_w_u.T + (spec.label_w_x @ x)[None, :]) / spec.tau
    p = softmax(logits)
    mean = p.mean(axis=0)
    se = p.std(axis=0, ddof=1) / np.sqrt(mc_samples)
    return mean / mean.sum(), se


def transport_oracle(
    spec: ScmSpec, x, mc_samples: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force interventional label distribution on the target domain.

    Averages P(Y|x,u) over u drawn from the target prior, which is the
    transport formula evaluated by quadrature rather than by any learned
    component.
    """
    if mc_samples < 1000:
        raise ContractError(f"mc_samples must be at least 1000, got {mc_samples}")
    return confounder_mixture_posterior(spec, x, TARGET, mc_samples, rng)


def marginal_loglik(spec: ScmSpec, xs: np.ndarray, domain: str) -> float:
    """Mean log-density of rows under the exact X marginal of one domain.

    The marginal is Gaussian with mean A mu + b and covariance
    sigma_u^2 A A^T + obs_noise^2 I; used to score how target-like a
    population of transformed samples is.
    """
    _check_domain(domain)
    xs = np.asarray(xs, dtype=np.float64)
    a = spec.generator
    cov = spec.sigma_u**2 * (a @ a.T) + max(spec.obs_noise_std, 1e-6) ** 2 * np.eye(spec.n)
    mean = a @ spec.mu(domain) + spec.offset
    diff = xs - mean[None, :]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise SpecError("domain marginal covariance is not positive definite")
    sol = np.linalg.solve(cov, diff.T)
    quad = np.sum(diff.T * sol, axis=0)
    return float(np.mean(-0.5 * (spec.n * np.log(2 * np.pi) + logdet + quad)))


def discrete_transport(p_y_given_u: np.ndarray, p_u: np.ndarray) -> np.ndarray:
    """Exact transport sum for a finite confounder: sum_u P(Y|x,u) P(u|S).

    Hosts the arithmetic checks; rows of ``p_y_given_u`` index confounder
    values, columns index classes.
    """
    p_y_given_u = as_matrix(p_y_given_u)
    p_u = as_vector(p_u, p_y_given_u.shape[0])
    if np.abs(p_y_given_u.sum(axis=1) - 1.0).max() > 1e-9:
        raise ContractError("rows of p_y_given_u must each sum to 1")
    if abs(float(p_u.sum()) - 1.0) > 1e-9:
        raise ContractError("p_u must sum to 1")
    return p_y_given_u.T @ p_u


# ---------------------------------------------------------------------------
# Ground-truth mechanisms and the executable faithfulness check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineMap:
    """x -> linear @ x + shift, applied row-wise to batched inputs."""

    linear: np.ndarray
    shift: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.linear.T + self.shift


def true_mechanism(spec: ScmSpec, factor: int, direction: str = "s->t") -> AffineMap:
    """Closed-form ground-truth mechanism intervening exactly one factor.

    Abduct-intervene-regenerate collapses to x -> x + delta_i * A[:, i] for
    the affine generator, with delta_i the domain shift of factor i.
    """
    if not (0 <= factor < spec.k):
        raise ContractError(f"factor index {factor} out of range for k={spec.k}")
    if direction not in ("s->t", "t->s"):
        raise ContractError(f"direction must be 's->t' or 't->s', got {direction!r}")
    delta = float(spec.mu_t[factor] - spec.mu_s[factor])
    if direction == "t->s":
        delta = -delta
    return AffineMap(np.eye(spec.n), delta * spec.generator[:, factor])


def disentanglement_score(spec: ScmSpec, mech, factor: int, probe: Dataset) -> tuple[float, float]:
    """Coordinate leakage of a mechanism: (max off-factor |delta u|, on-factor |delta u|).

    A mechanism is a disentangled intervention with respect to the factor iff
    the off score vanishes.
    """
    if len(probe) == 0:
        raise ContractError("probe dataset is empty")
    xs = probe.features()
    shift = mean_abs_factor_shift(spec, xs, np.asarray(mech(xs), dtype=np.float64))
    offch = [shift[j] for j in range(spec.k) if j != factor]
    off = float(max(offch)) if offch else 0.0
    return off, float(shift[factor])


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def dataset_to_csv(ds: Dataset) -> str:
    """Learner-facing CSV: x columns, y (blank for target rows), domain."""
    n = ds.features().shape[1]
    buf = io.StringIO()
    buf.write(",".join([f"x{i}" for i in range(n)] + ["y", "domain"]) + "\n")
    xs = ds._xs
    ys = ds._ys
    for i in range(len(ds)):
        row = [repr(float(v)) for v in xs[i]]
        row.append(str(int(ys[i])) if ds.domain == SOURCE else "")
        row.append(ds.domain)
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def dataset_hidden_columns(ds: Dataset) -> dict:
    return {
        "y": [int(v) for v in ds._ys],
        "u_true": ds._u_true.tolist(),
        "eps": ds._eps.tolist(),
        "seed": ds.seed,
    }


def dataset_from_csv(text: str, spec_hash: str, hidden: dict) -> Dataset:
    """Rebuild a Dataset from its CSV plus the sidecar's hidden columns."""
    lines = [ln for ln in text.strip().split("\n") if ln]
    header = lines[0].split(",")
    if header[-2:] != ["y", "domain"]:
        raise ContractError("unrecognized dataset CSV header")
    n = len(header) - 2
    xs = []
    domain = None
    for ln in lines[1:]:
        parts = ln.split(",")
        xs.append([float(v) for v in parts[:n]])
        domain = parts[-1]
    if domain is None:
        raise ContractError("dataset CSV has no rows")
    return Dataset(
        spec_hash,
        domain,
        np.array(xs, dtype=np.float64),
        np.array(hidden["y"], dtype=np.int64),
        np.array(hidden["u_true"], dtype=np.float64),
        np.array(hidden["eps"], dtype=np.float64),
        seed=int(hidden["seed"]),
    )
