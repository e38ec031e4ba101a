"""Numerical privacy accounting.

Two accounting routes are provided:

* DP-SGD with without-replacement subsampling under the substitute
  neighborhood: the per-step guarantee is expressed as a privacy profile
  built from hockey-stick divergences of a Gaussian dominating pair mixed
  with the subsampling ratio, discretized onto a uniform loss grid
  (connect-the-dots style) and self-composed with FFT convolutions.
* Noisy cyclic mini-batch gradient descent: the closed-form mu-GDP bound
  for strongly convex, smooth losses with fixed disjoint batches.

All operations are pure functions; nothing here holds shared mutable state.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable, Optional

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import log_ndtr, ndtr

from .errors import DomainError, NumericError, ResourceError

logger = logging.getLogger(__name__)

#: Default loss-grid resolution for discretized privacy loss distributions.
DEFAULT_GRID_STEP = 1e-3
#: Probability below which the profile tail is truncated (folded into the
#: infinity atom, which is pessimistic and preserves domination).
DEFAULT_TAIL_TOL = 1e-12
#: Epsilon values above this are reported as "> EPS_MAX" by the CLI.
EPS_MAX = 32.0
#: Hard cap on composed PLD support (in loss units) and on FFT lengths.
DEFAULT_SUPPORT_CAP = 64.0
DEFAULT_MAX_LEN = 1 << 24


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DiscretePLD:
    """A privacy loss distribution on a uniform grid plus an infinity atom.

    Grid point ``i`` carries loss ``loss_grid_origin + i * loss_grid_step``
    and probability ``masses[i]``; ``infinity_mass`` is the probability of an
    infinite privacy loss. Finite masses plus the atom sum to 1 within 1e-12.
    """

    loss_grid_origin: float
    loss_grid_step: float
    masses: np.ndarray
    infinity_mass: float

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        object.__setattr__(self, "masses", masses)
        if self.loss_grid_step <= 0:
            raise DomainError("loss grid step must be positive")
        if np.any(masses < 0):
            raise DomainError("PLD masses must be non-negative")
        if self.infinity_mass < 0:
            raise DomainError("infinity mass must be non-negative")
        total = masses.sum() + self.infinity_mass
        if not (1 - 1e-12 <= total <= 1 + 1e-12):
            raise DomainError(f"PLD not normalized: total mass {total!r}")

    @property
    def losses(self) -> np.ndarray:
        return self.loss_grid_origin + self.loss_grid_step * np.arange(
            len(self.masses)
        )

    def delta(self, eps: float) -> float:
        return pld_delta(self, eps)


@dataclasses.dataclass(frozen=True)
class PrivacyProfile:
    """The curve eps -> delta(eps): non-increasing, convex in exp(eps).

    ``evaluator`` accepts a float or an ndarray of epsilons and returns
    delta values in [0, 1].
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    kind: str
    pld: Optional[DiscretePLD] = None

    def delta(self, eps) -> float:
        return float(np.clip(self.evaluator(float(eps)), 0.0, 1.0))

    def delta_array(self, eps_values: np.ndarray) -> np.ndarray:
        return np.clip(self.evaluator(np.asarray(eps_values, dtype=float)), 0.0, 1.0)

    def __call__(self, eps) -> float:
        return self.delta(eps)


@dataclasses.dataclass(frozen=True)
class GaussianPairSpec:
    """Dominating pair N(mu, 1) vs N(0, 1); mu is the distinguishability."""

    mu: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu > 0):
            raise DomainError(f"mu must be finite and positive, got {self.mu!r}")


@dataclasses.dataclass(frozen=True)
class SubsampledSpec:
    """Gaussian base pair subsampled without replacement at ratio q."""

    base: GaussianPairSpec
    q: float

    def __post_init__(self):
        if not (0 < self.q <= 1):
            raise DomainError(f"subsampling ratio q must be in (0, 1], got {self.q!r}")


@dataclasses.dataclass(frozen=True)
class NoisyCGDSpec:
    """Inputs of the closed-form GDP bound for noisy cyclic mini-batch GD.

    sigma is the std of the noise added to the averaged batch gradient
    (the parameterization of the update equation itself, not the DP-SGD
    noise multiplier). k is the number of disjoint batches per epoch.
    """

    L: float
    b: int
    sigma: float
    eta: float
    lambda_sc: float
    beta_sm: float
    k: int
    E: int

    def __post_init__(self):
        if self.L <= 0:
            raise DomainError("gradient sensitivity L must be positive")
        if self.b < 1 or self.k < 1 or self.E < 1:
            raise DomainError("b, k and E must be positive integers")
        if self.sigma <= 0:
            raise DomainError("sigma must be positive")
        if self.lambda_sc <= 0 or self.beta_sm <= 0:
            raise DomainError("lambda and beta must be positive")
        if self.lambda_sc > self.beta_sm:
            raise DomainError("strong convexity cannot exceed smoothness")
        if not (0 < self.eta < 2.0 / self.beta_sm):
            raise DomainError("eta must lie in (0, 2/beta)")


# ---------------------------------------------------------------------------
# Closed-form Gaussian profile math
# ---------------------------------------------------------------------------


def gaussian_delta(mu: float, eps: float) -> float:
    """delta(eps) of a mu-GDP mechanism.

    Phi(-eps/mu + mu/2) - exp(eps) * Phi(-eps/mu - mu/2), evaluated through
    erfc-based CDFs so the exp(eps) factor cannot overflow.
    """
    if not (math.isfinite(mu) and mu > 0):
        raise DomainError(f"mu must be finite and positive, got {mu!r}")
    if eps < 0:
        raise DomainError(f"eps must be non-negative, got {eps!r}")
    a = -eps / mu + mu / 2.0
    b = -eps / mu - mu / 2.0
    val = ndtr(a) - math.exp(eps + log_ndtr(b))
    return float(min(max(val, 0.0), 1.0))


def gaussian_profile(mu: float) -> PrivacyProfile:
    """Privacy profile of a mu-GDP mechanism."""
    if not (math.isfinite(mu) and mu > 0):
        raise DomainError(f"mu must be finite and positive, got {mu!r}")

    def evaluator(eps):
        eps = np.asarray(eps, dtype=float)
        a = -eps / mu + mu / 2.0
        b = -eps / mu - mu / 2.0
        out = ndtr(a) - np.exp(eps + log_ndtr(b))
        return np.clip(out, 0.0, 1.0)

    return PrivacyProfile(evaluator=evaluator, kind="gaussian")


def hockey_stick_gaussian(alpha, mu: float):
    """Hockey-stick divergence H_alpha(N(mu,1) || N(0,1)), closed form.

    The likelihood ratio exp(mu*t - mu^2/2) is monotone, so the integrand
    has a single sign change at t* = log(alpha)/mu + mu/2 and the divergence
    reduces to signed Gaussian CDF differences. For alpha >= 1 this equals
    gaussian_delta(mu, log(alpha)).
    """
    if not (math.isfinite(mu) and mu > 0):
        raise DomainError(f"mu must be finite and positive, got {mu!r}")
    alpha_arr = np.asarray(alpha, dtype=float)
    if np.any(alpha_arr < 0):
        raise DomainError("alpha must be non-negative")
    scalar = alpha_arr.ndim == 0
    alpha_arr = np.atleast_1d(alpha_arr)
    out = np.ones_like(alpha_arr)
    pos = alpha_arr > 0
    with np.errstate(divide="ignore"):
        log_alpha = np.log(alpha_arr[pos])
    tstar = log_alpha / mu + mu / 2.0
    out[pos] = ndtr(mu - tstar) - np.exp(log_alpha + log_ndtr(-tstar))
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def subsampled_profile(spec: SubsampledSpec, alpha):
    """h(alpha) upper-bounding the subsampled mechanism's divergence.

    h(alpha) = max{ H_alpha(q*P + (1-q)*Q || Q), H_alpha(P || q*Q + (1-q)*P) }
    with P = N(mu, 1), Q = N(0, 1). Because the likelihood ratio of the base
    pair is strictly monotone, each mixture term has a single crossing point
    that is available in closed form, and the mixture divergence factors
    through the base-pair hockey stick exactly.
    """
    mu, q = spec.base.mu, spec.q
    alpha_arr = np.asarray(alpha, dtype=float)
    if np.any(alpha_arr < 0):
        raise DomainError("alpha must be non-negative")
    scalar = alpha_arr.ndim == 0
    alpha_arr = np.atleast_1d(alpha_arr).astype(float)

    # H_alpha(q*P + (1-q)*Q || Q): integrand positive everywhere when
    # alpha <= 1-q, otherwise q * H_{(alpha-1+q)/q}(P || Q).
    up = np.empty_like(alpha_arr)
    low_a = alpha_arr <= 1.0 - q
    up[low_a] = 1.0 - alpha_arr[low_a]
    if np.any(~low_a):
        up[~low_a] = q * hockey_stick_gaussian((alpha_arr[~low_a] - 1.0 + q) / q, mu)

    # H_alpha(P || q*Q + (1-q)*P): zero once alpha*(1-q) >= 1, otherwise
    # (1 - alpha*(1-q)) * H_{alpha*q / (1 - alpha*(1-q))}(P || Q).
    down = np.zeros_like(alpha_arr)
    live = alpha_arr * (1.0 - q) < 1.0
    if np.any(live):
        w = 1.0 - alpha_arr[live] * (1.0 - q)
        down[live] = w * hockey_stick_gaussian(alpha_arr[live] * q / w, mu)

    out = np.maximum(up, down)
    if not np.all(np.isfinite(out)):
        raise NumericError(
            f"subsampled divergence not finite (mu={mu}, q={q}): {out!r}"
        )
    return float(out[0]) if scalar else out


def subsampled_dp_profile(spec: SubsampledSpec) -> PrivacyProfile:
    """Privacy profile eps -> h(exp(eps)) of one subsampled step."""

    def evaluator(eps):
        eps = np.asarray(eps, dtype=float)
        return subsampled_profile(spec, np.exp(eps))

    return PrivacyProfile(evaluator=evaluator, kind="subsampled-mixture")


# ---------------------------------------------------------------------------
# Discretization and composition
# ---------------------------------------------------------------------------


def connect_the_dots(profile: PrivacyProfile, eps_grid: np.ndarray) -> DiscretePLD:
    """Discretize a convex privacy profile onto a uniform epsilon grid.

    Produces masses at the grid points (plus an infinity atom holding the
    right tail delta(eps_max)) whose induced profile matches the input at
    every grid point and dominates it everywhere else; domination follows
    from convexity of the profile in exp(eps), since the induced profile is
    the chordal (piecewise linear in exp(eps)) majorant.

    The triangular system delta(eps_i) = m_inf + sum_{j>i} (1 - e^{eps_i -
    eps_j}) p_j is solved in closed form by the backward difference
    p_{i+1} = (d_i - e^{-s} d_{i+1}) / (1 - e^{-s}) with d_i = delta(eps_i)
    - delta(eps_{i+1}) and s the grid step.
    """
    grid = np.asarray(eps_grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2:
        raise DomainError("eps_grid must be a 1-d array with >= 2 points")
    steps = np.diff(grid)
    step = steps[0]
    if step <= 0 or not np.allclose(steps, step, rtol=0, atol=1e-9 * abs(step)):
        raise DomainError("eps_grid must be strictly increasing and uniform")

    deltas = profile.delta_array(grid)
    if np.any(np.diff(deltas) > 1e-12):
        raise NumericError("profile is increasing on the grid; not a privacy profile")

    m_inf = float(deltas[-1])
    d = -np.diff(deltas)  # d[i] = delta_i - delta_{i+1}, length m-1
    d_next = np.append(d[1:], 0.0)
    decay = math.exp(-step)
    masses = np.zeros(len(grid))
    masses[1:] = (d - decay * d_next) / (1.0 - decay)

    # The backward differences divide by (1 - e^{-step}), amplifying CDF
    # roundoff by ~1/step; tolerate negatives of that magnitude only.
    mass_tol = 1e-12 + 1e-12 / (1.0 - decay)
    if np.any(masses < -mass_tol):
        worst = masses.min()
        raise NumericError(
            f"profile numerically non-convex in exp(eps): mass {worst:.3e} "
            f"< -{mass_tol:.3e}"
        )
    np.clip(masses, 0.0, None, out=masses)
    head = 1.0 - m_inf - masses[1:].sum()
    if head < -mass_tol:
        raise NumericError(f"leftmost mass {head:.3e} negative; widen the grid left")
    masses[0] = max(head, 0.0)
    overshoot = masses.sum() + m_inf - 1.0
    if overshoot > 0:
        masses *= (1.0 - m_inf) / masses.sum()
    return DiscretePLD(
        loss_grid_origin=float(grid[0]),
        loss_grid_step=float(step),
        masses=masses,
        infinity_mass=m_inf,
    )


def pld_delta(pld: DiscretePLD, eps: float) -> float:
    """delta(eps) induced by a discrete PLD.

    m_inf + sum over grid losses l > eps of (1 - e^{eps - l}) * p.
    """
    losses = pld.losses
    above = losses > eps
    if not np.any(above):
        return float(min(max(pld.infinity_mass, 0.0), 1.0))
    contrib = (1.0 - np.exp(eps - losses[above])) * pld.masses[above]
    return float(min(max(pld.infinity_mass + contrib.sum(), 0.0), 1.0))


def _truncate_support(
    origin: float, step: float, masses: np.ndarray, inf_mass: float, cap: float
):
    """Restrict support to [-cap, cap] in loss units, pessimistically.

    Mass above the cap becomes infinite loss; mass below the cap is moved up
    to the lowest kept grid point. Both moves can only increase delta.
    """
    losses = origin + step * np.arange(len(masses))
    hi = losses > cap
    if np.any(hi):
        inf_mass += float(masses[hi].sum())
        masses = masses[~hi]
        losses = losses[~hi]
    lo = losses < -cap
    if np.any(lo):
        folded = float(masses[lo].sum())
        masses = masses[~lo].copy()
        losses = losses[~lo]
        if len(masses) == 0:
            raise NumericError("entire PLD support fell below the cap")
        masses[0] += folded
    # Trim exact-zero edges to keep convolutions short.
    nz = np.nonzero(masses)[0]
    if len(nz) == 0:
        return float(losses[0]) if len(losses) else 0.0, masses[:1], inf_mass
    masses = masses[nz[0] : nz[-1] + 1]
    return float(losses[nz[0]]), masses, inf_mass


def _pld_multiply(
    a: DiscretePLD, b: DiscretePLD, max_len: int, cap: float
) -> DiscretePLD:
    if not math.isclose(a.loss_grid_step, b.loss_grid_step, rel_tol=1e-12):
        raise DomainError("PLDs must share the loss grid step to compose")
    out_len = len(a.masses) + len(b.masses) - 1
    if out_len > max_len:
        raise ResourceError(
            f"composition support would need {out_len} points (> {max_len}); "
            "use a coarser loss grid"
        )
    conv = fftconvolve(a.masses, b.masses)
    if np.any(conv < -1e-12):
        raise NumericError(f"FFT convolution produced {conv.min():.3e} < -1e-12")
    neg = conv < 0
    if np.any(neg):
        target = float(a.masses.sum() * b.masses.sum())
        conv[neg] = 0.0
        total = conv.sum()
        if total > 0:
            conv *= target / total
            logger.info(
                "clamped %d tiny negative convolution values; renormalized by %.3e",
                int(neg.sum()),
                target / total - 1.0,
            )
    inf_mass = 1.0 - (1.0 - a.infinity_mass) * (1.0 - b.infinity_mass)
    origin, masses, inf_mass = _truncate_support(
        a.loss_grid_origin + b.loss_grid_origin, a.loss_grid_step, conv, inf_mass, cap
    )
    # Guard against FFT drift in the total mass.
    total = masses.sum() + inf_mass
    if not (1 - 1e-9 <= total <= 1 + 1e-9):
        raise NumericError(f"composed PLD lost normalization: {total!r}")
    masses = masses * ((1.0 - inf_mass) / masses.sum())
    return DiscretePLD(origin, a.loss_grid_step, masses, inf_mass)


def compose_pld(
    pld: DiscretePLD,
    T: int,
    max_len: int = DEFAULT_MAX_LEN,
    support_cap: float = DEFAULT_SUPPORT_CAP,
) -> DiscretePLD:
    """T-fold self-composition by FFT convolution (binary exponentiation).

    Convolutions are zero-padded (full linear convolution, no wrap-around);
    the infinity mass composes as 1 - (1 - m_inf)^T. Support beyond the cap
    is folded pessimistically, preserving domination.
    """
    if T < 1:
        raise DomainError(f"T must be a positive integer, got {T!r}")
    if T == 1:
        return DiscretePLD(
            pld.loss_grid_origin,
            pld.loss_grid_step,
            pld.masses.copy(),
            pld.infinity_mass,
        )
    result: DiscretePLD | None = None
    base = pld
    t = T
    while t > 0:
        if t & 1:
            result = base if result is None else _pld_multiply(
                result, base, max_len, support_cap
            )
        t >>= 1
        if t:
            base = _pld_multiply(base, base, max_len, support_cap)
    assert result is not None
    return result


def account_dpsgd(
    sigma: float,
    q: float,
    T: int,
    grid_step: float = DEFAULT_GRID_STEP,
    tail_tol: float = DEFAULT_TAIL_TOL,
    eps_max: float = EPS_MAX,
    support_cap: float = DEFAULT_SUPPORT_CAP,
    max_len: int = DEFAULT_MAX_LEN,
) -> PrivacyProfile:
    """Privacy profile of T DP-SGD steps with WOR subsampling, ratio q.

    One step releases the noised average of clipped gradients; normalizing
    by b/C gives per-entry contributions of norm <= 1, substitution
    sensitivity 2 and noise N(0, sigma^2 I), i.e. the base dominating pair
    P = N(2/sigma, 1), Q = N(0, 1). The subsampled profile is discretized
    with connect_the_dots and composed T times.
    """
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    if T < 1:
        raise DomainError(f"T must be a positive integer, got {T!r}")
    spec = SubsampledSpec(base=GaussianPairSpec(mu=2.0 / sigma), q=q)
    step_profile = subsampled_dp_profile(spec)

    # Smallest grid half-width (multiple of the step) whose right tail is
    # below the per-step truncation tolerance.
    m = 1
    m_cap = int(math.ceil(eps_max / grid_step))
    while step_profile.delta(m * grid_step) >= tail_tol and m < m_cap:
        m = min(2 * m, m_cap)
    if step_profile.delta(m * grid_step) >= tail_tol:
        logger.warning(
            "profile tail still %.2e at eps=%.1f; folding into infinity mass",
            step_profile.delta(m * grid_step),
            m * grid_step,
        )
    grid = np.arange(-m, m + 1, dtype=float) * grid_step
    pld = connect_the_dots(step_profile, grid)
    composed = compose_pld(pld, T, max_len=max_len, support_cap=support_cap)

    def evaluator(eps):
        eps = np.asarray(eps, dtype=float)
        if eps.ndim == 0:
            return pld_delta(composed, float(eps))
        return np.array([pld_delta(composed, e) for e in eps.ravel()]).reshape(
            eps.shape
        )

    return PrivacyProfile(evaluator=evaluator, kind="discrete-pld-derived", pld=composed)


# ---------------------------------------------------------------------------
# GDP bound for noisy cyclic mini-batch GD, and conversions
# ---------------------------------------------------------------------------


def noisycgd_mu(spec: NoisyCGDSpec) -> float:
    """mu-GDP constant of noisy cyclic mini-batch GD after E epochs.

    mu = L/(b*sigma) * sqrt(1 + c^{2k-2} (1-c^2)/(1-c^k)^2
                               * (1-c^{k(E-1)})/(1+c^{k(E-1)}))
    with the forgetting constant c = max{|1 - eta*lambda|, |1 - eta*beta|}.
    For E = 1 the last factor vanishes exactly and mu = L/(b*sigma).
    """
    c = max(
        abs(1.0 - spec.eta * spec.lambda_sc), abs(1.0 - spec.eta * spec.beta_sm)
    )
    if c >= 1.0:
        raise DomainError(f"forgetting constant must be < 1, got c={c!r}")
    base = spec.L / (spec.b * spec.sigma)
    if spec.E == 1:
        return base
    k = spec.k
    ck = c**k
    tail = c ** (k * (spec.E - 1))
    inner = 1.0 + c ** (2 * k - 2) * (1.0 - c * c) / (1.0 - ck) ** 2 * (
        1.0 - tail
    ) / (1.0 + tail)
    return base * math.sqrt(inner)


def noisycgd_profile(spec: NoisyCGDSpec) -> PrivacyProfile:
    """Privacy profile of NoisyCGD via its GDP constant."""
    return gaussian_profile(noisycgd_mu(spec))


def rdp_to_dp(alpha: float, eps_rdp: float, eps: float) -> float:
    """delta(eps) of an (alpha, eps_rdp)-RDP mechanism.

    exp((alpha-1)(eps_rdp - eps))/alpha * (1 - 1/alpha)^(alpha-1),
    clamped to [0, 1].
    """
    if alpha <= 1:
        raise DomainError(f"alpha must exceed 1, got {alpha!r}")
    log_val = (
        (alpha - 1.0) * (eps_rdp - eps)
        - math.log(alpha)
        + (alpha - 1.0) * math.log1p(-1.0 / alpha)
    )
    if log_val >= 0:
        return 1.0
    return math.exp(log_val)


def find_epsilon(
    profile: PrivacyProfile, delta_target: float, eps_max: float = EPS_MAX
) -> float:
    """Smallest eps with delta(eps) <= delta_target, by bisection.

    Returns 0 when the target is already met at eps = 0, and inf when it is
    not met at eps_max (the CLI reports such values as "> eps_max").
    """
    if not (0 < delta_target < 1):
        raise DomainError(f"delta target must be in (0, 1), got {delta_target!r}")
    if profile.delta(0.0) <= delta_target:
        return 0.0
    if profile.delta(eps_max) > delta_target:
        return math.inf
    lo, hi = 0.0, min(1.0, eps_max)
    while profile.delta(hi) > delta_target:
        lo, hi = hi, min(2.0 * hi, eps_max)
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        d_mid = profile.delta(mid)
        if abs(d_mid - delta_target) <= 1e-6 * delta_target:
            hi = mid
            break
        if d_mid > delta_target:
            lo = mid
        else:
            hi = mid
    return hi
