"""
Closed-form reference values for the shrinking BBM-sausage.

Asymptotic formulas are returned at leading order: their (1 + o(1)) factors are dropped and
every TheoryValue built from one carries a reference that says so.
"""

import logging
import math
import sys
from dataclasses import dataclass

from scipy import integrate

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329

_EPS = sys.float_info.epsilon
_TINY = sys.float_info.min / _EPS
_MAX_ITERATIONS = 1000
_ACCURACY = 1.0e-15


@dataclass(frozen=True)
class TheoryValue:
    value: float
    ref: str

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"theory value for {self.ref!r} is not finite: {self.value}")

    def __float__(self):
        return self.value


def _check_dim(d: int, minimum: int = 1):
    if int(d) != d or d < minimum:
        raise ValueError(f"dimension must be an integer >= {minimum}, got {d}")


def unit_ball_volume(d: int) -> float:
    _check_dim(d)
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def bbm_speed(beta: float) -> float:
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    return math.sqrt(2.0 * beta)


def displacement_tail_exponent(gamma: float) -> float:
    """Exponential rate of P(sup_{s<=t} |X(s)| > gamma t)."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return gamma * gamma / 2.0


def bramson_centring(beta: float, t: float) -> float:
    """Centring of the one-dimensional BBM maximum, speed*t - 3/(2*speed)*log t, up to O(1)."""
    if t <= 0:
        raise ValueError(f"t must be > 0, got {t}")
    speed = bbm_speed(beta)
    return speed * t - 1.5 / speed * math.log(t)


def expected_population(beta: float, t: float) -> float:
    return math.exp(beta * t)


def population_sd(beta: float, t: float) -> float:
    """Standard deviation of N_t; N_t is geometric with mean e^{beta t}."""
    mean = math.exp(beta * t)
    return math.sqrt(mean * mean - mean)


def subcritical_radius(beta: float, theta: float, t: float) -> float:
    return theta * bbm_speed(beta) * t


def coverage_k_threshold(d: int, theta: float) -> float:
    """
    Largest decay exponent k under which the enlargement covers the subcritical ball.

    A result <= 0 (theta >= 1) means no k >= 0 qualifies: the ball outruns the BBM front.
    """
    _check_dim(d)
    if not theta > 0.0:
        raise ValueError(f"theta must be > 0, got {theta}")
    return (1.0 - theta * theta) / d


def _check_rates(beta: float, k: float):
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")


def limit_sausage(d: int, beta: float, k: float) -> TheoryValue:
    """Almost-sure limit of vol(sausage with radius r_t) / t^d."""
    _check_dim(d)
    _check_rates(beta, k)
    if d == 1:
        return TheoryValue(2.0 * bbm_speed(beta), "d=1 sausage limit 2*sqrt(2*beta)")
    if d == 2:
        return TheoryValue(2.0 * math.pi * beta, "d=2 sausage limit 2*pi*beta, k-independent")
    if k * (d - 2) >= 1.0:
        return TheoryValue(0.0, f"d={d} sausage limit, supercritical decay k >= 1/(d-2)")
    base = 2.0 * beta * (1.0 - k * (d - 2))
    return TheoryValue(
        base ** (d / 2.0) * unit_ball_volume(d),
        f"d={d} sausage limit [2*beta*(1-k(d-2))]^(d/2)*omega_d",
    )


def limit_enlargement(d: int, beta: float, k: float) -> TheoryValue:
    """Almost-sure limit of vol(r_t-enlargement of the time-t support) / t^d."""
    _check_dim(d)
    _check_rates(beta, k)
    if d == 1:
        if k > 1.0:
            return TheoryValue(0.0, "d=1 enlargement limit, k > 1")
        return TheoryValue(
            2.0 * math.sqrt(2.0 * beta * (1.0 - k)), "d=1 enlargement limit 2*sqrt(2*beta*(1-k))"
        )
    if k * d >= 1.0:
        return TheoryValue(0.0, f"d={d} enlargement limit, k >= 1/d")
    base = 2.0 * beta * (1.0 - k * d)
    return TheoryValue(
        base ** (d / 2.0) * unit_ball_volume(d),
        f"d={d} enlargement limit [2*beta*(1-kd)]^(d/2)*omega_d",
    )


def newtonian_capacity(d: int, r: float) -> TheoryValue:
    _check_dim(d, 3)
    if r <= 0:
        raise ValueError(f"radius must be > 0, got {r}")
    value = r ** (d - 2) * 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0 - 1.0)
    return TheoryValue(value, f"Newtonian capacity of B(0,{r}) in d={d}")


def expected_wiener_sausage(d: int, r: float, t: float) -> TheoryValue:
    """Leading-order E_0[vol(X^r(t))] for a fixed radius r."""
    _check_dim(d)
    if r <= 0 or t <= 0:
        raise ValueError(f"radius and time must be > 0, got r={r}, t={t}")
    if d == 1:
        return TheoryValue(math.sqrt(8.0 * t / math.pi), "leading order sqrt(8t/pi), d=1")
    if d == 2:
        if t <= 1.0:
            raise ValueError(f"the d=2 form 2*pi*t/log(t) needs t > 1, got {t}")
        return TheoryValue(2.0 * math.pi * t / math.log(t), "leading order 2*pi*t/log t, d=2")
    return TheoryValue(
        newtonian_capacity(d, r).value * t, f"leading order kappa_r*t, d={d}"
    )


def expected_shrinking_sausage(d: int, beta: float, k: float, r0: float, t: float) -> TheoryValue:
    """Leading-order expected volume of the Wiener sausage with radius r0*exp(-beta*k*t)."""
    _check_dim(d)
    if k <= 0 or t <= 0 or beta <= 0:
        raise ValueError(f"need beta, k, t > 0, got beta={beta}, k={k}, t={t}")
    if d == 1:
        return TheoryValue(math.sqrt(8.0 * t / math.pi), "shrinking sausage sqrt(8t/pi), d=1")
    if d == 2:
        return TheoryValue(math.pi / (beta * k), "shrinking sausage pi/(beta*k), d=2")
    kappa = newtonian_capacity(d, r0).value
    return TheoryValue(
        kappa * t * math.exp(-(d - 2) * beta * k * t),
        f"shrinking sausage kappa_r0*t*exp(-(d-2)*beta*k*t), d={d}",
    )


def expected_shrinking_sausage_scaled(
    d: int, beta: float, k: float, r0: float, t: float
) -> TheoryValue:
    """
    Shrinking-sausage expectation through Brownian scaling: exp(-beta*k*d*t) times the
    fixed-radius expectation at time t*exp(2*beta*k*t). Equal to
    `expected_shrinking_sausage` up to (1 + o(1)).
    """
    if k <= 0 or t <= 0:
        raise ValueError(f"need k, t > 0, got k={k}, t={t}")
    scaled_time = t * math.exp(2.0 * beta * k * t)
    fixed = expected_wiener_sausage(d, r0, scaled_time).value
    return TheoryValue(
        math.exp(-beta * k * d * t) * fixed, f"scaled fixed-radius sausage at s={scaled_time:.6g}"
    )


# Special functions. Series below the switch point, modified Lentz continued fraction above.


def exp_integral_e1(x: float) -> float:
    """Exponential integral E1(x) = int_x^inf e^{-u}/u du for x > 0."""
    if not x > 0:
        raise ValueError(f"E1 needs x > 0, got {x}")
    if x <= 1.0:
        total = 0.0
        term = 1.0
        for n in range(1, _MAX_ITERATIONS):
            term *= -x / n
            delta = -term / n
            total += delta
            if abs(delta) < abs(total) * _ACCURACY:
                break
        else:
            raise ArithmeticError(f"E1 series did not converge at x={x}")
        return -EULER_GAMMA - math.log(x) + total
    b = x + 1.0
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITERATIONS):
        a = -float(i * i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < _ACCURACY:
            return h * math.exp(-x)
    raise ArithmeticError(f"E1 continued fraction did not converge at x={x}")


def _lower_gamma_series(v: float, x: float) -> float:
    """Regularized lower incomplete gamma P(v, x) by its power series."""
    ap = v
    delta = 1.0 / v
    total = delta
    for _ in range(_MAX_ITERATIONS):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _ACCURACY:
            return total * math.exp(-x + v * math.log(x) - math.lgamma(v))
    raise ArithmeticError(f"incomplete gamma series did not converge at v={v}, x={x}")


def _upper_gamma_fraction(v: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(v, x) by its continued fraction."""
    b = x + 1.0 - v
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITERATIONS):
        an = -i * (i - v)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _ACCURACY:
            return math.exp(-x + v * math.log(x) - math.lgamma(v)) * h
    raise ArithmeticError(f"incomplete gamma fraction did not converge at v={v}, x={x}")


def upper_incomplete_gamma(v: float, x: float) -> float:
    """Non-regularized upper incomplete gamma Gamma(v, x) for v > 0, x > 0."""
    if not v > 0:
        raise ValueError(f"incomplete gamma needs v > 0, got {v}")
    if not x > 0:
        raise ValueError(f"incomplete gamma needs x > 0, got {x}")
    if x < v + 1.0:
        return math.gamma(v) * (1.0 - _lower_gamma_series(v, x))
    return math.gamma(v) * _upper_gamma_fraction(v, x)


def hitting_integral(d: int, R: float, t: float = 1.0) -> float:
    """
    Small-radius limit of P_rho(min_{s<=t} |X(s)| < r), normalised by its r-dependence:
    the log(1/r) prefactor in d=2, r^{2v} with v=(d-2)/2 in d>=3.
    """
    _check_dim(d, 2)
    if R <= 0 or t <= 0:
        raise ValueError(f"need R, t > 0, got R={R}, t={t}")
    x = R * R / (2.0 * t)
    if d == 2:
        return 0.5 * exp_integral_e1(x)
    v = (d - 2) / 2.0
    return R ** (-2.0 * v) * upper_incomplete_gamma(v, x) / math.gamma(v)


def hitting_constant(d: int, r0: float, R: float) -> TheoryValue:
    _check_dim(d, 3)
    if not 0 < r0 < R:
        raise ValueError(f"need 0 < r0 < R (start outside the ball), got r0={r0}, R={R}")
    v = (d - 2) / 2.0
    value = r0 ** (2.0 * v) * hitting_integral(d, R, 1.0)
    return TheoryValue(value, f"hitting constant (r0/R)^(2v)*Gamma(v,R^2/2)/Gamma(v), d={d}")


def hitting_constant_quadrature(d: int, r0: float, R: float, t: float = 1.0) -> float:
    """r0^{2v}/(2^v Gamma(v)) * int_0^t exp(-R^2/(2x)) / x^{1+v} dx, by adaptive quadrature."""
    _check_dim(d, 3)
    v = (d - 2) / 2.0

    def integrand(x: float) -> float:
        if x <= 0.0:
            return 0.0
        return math.exp(-R * R / (2.0 * x) - (1.0 + v) * math.log(x))

    value, _ = integrate.quad(integrand, 0.0, t, epsabs=0.0, epsrel=1e-12, limit=200)
    return r0 ** (2.0 * v) * value / (2.0**v * math.gamma(v))


def hitting_prob_shrinking(
    d: int, R: float, r0: float, beta: float, k: float, t: float
) -> TheoryValue:
    """Leading-order P_rho(min_{0<=s<=1} |X(s)| < r_t) for a start at distance R."""
    if d == 1:
        raise ValueError("hitting probabilities of shrinking balls are not defined for d=1")
    _check_dim(d, 2)
    if not 0 < r0 < R:
        raise ValueError(f"need 0 < r0 < R, got r0={r0}, R={R}")
    if k <= 0 or beta <= 0 or t <= 0:
        raise ValueError(f"need beta, k, t > 0, got beta={beta}, k={k}, t={t}")
    if r0 * math.exp(-beta * k * t) >= R:
        raise ValueError("the shrinking radius must be below R")
    if d == 2:
        return TheoryValue(
            hitting_integral(2, R, 1.0) / (beta * k * t), "d=2 hitting c_R/(beta*k*t)"
        )
    c = hitting_constant(d, r0, R).value
    return TheoryValue(
        c * math.exp(-beta * k * (d - 2) * t), f"d={d} hitting c*exp(-beta*k*(d-2)*t)"
    )
