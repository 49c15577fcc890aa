#include "fomox/special.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "fomox/errors.hpp"

namespace fomox {

double normal_cdf(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
}

double gelu_scalar(double x) {
    return x * normal_cdf(x);
}

double gelu_grad_scalar(double x) {
    static const double inv_sqrt_2pi = 0.3989422804014327;
    return normal_cdf(x) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

namespace {

constexpr int kMaxIter = 500;
constexpr double kEps = 1e-16;

// Series expansion of P(a,x), valid for x < a + 1.
double gamma_p_series(double a, double x) {
    double ap = a;
    double term = 1.0 / a;
    double sum = term;
    for (int n = 0; n < kMaxIter; ++n) {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if (std::fabs(term) < std::fabs(sum) * kEps) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Continued fraction for Q(a,x) = 1 - P(a,x), valid for x >= a + 1.
// Modified Lentz's method.
double gamma_q_contfrac(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= kMaxIter; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < kEps) break;
    }
    return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

} // namespace

double gamma_p(double a, double x) {
    if (!(a > 0.0) || x < 0.0) {
        throw DomainError("gamma_p: require a > 0 and x >= 0");
    }
    if (x == 0.0) return 0.0;
    if (x < a + 1.0) return gamma_p_series(a, x);
    return 1.0 - gamma_q_contfrac(a, x);
}

double chi2_cdf(int d, double t) {
    if (t <= 0.0) return 0.0;
    return gamma_p(0.5 * d, 0.5 * t);
}

double chi2_pdf(int d, double t) {
    if (t <= 0.0) return 0.0;
    const double a = 0.5 * d;
    return std::exp((a - 1.0) * std::log(t) - 0.5 * t - a * std::log(2.0) - std::lgamma(a));
}

double chi2_quantile(int d, double q) {
    if (d < 1) {
        throw DomainError("chi2_quantile: dof must be >= 1, got " + std::to_string(d));
    }
    if (!(q > 0.0 && q < 1.0)) {
        throw DomainError("chi2_quantile: q must lie in (0,1), got " + std::to_string(q));
    }

    // Bracket the root, then refine with Newton steps clipped to the bracket.
    double lo = 0.0;
    double hi = d + 10.0 * std::sqrt(2.0 * d) + 10.0;
    while (chi2_cdf(d, hi) < q) {
        hi *= 2.0;
        if (hi > 1e12) break;
    }
    double t = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        const double f = chi2_cdf(d, t) - q;
        if (f > 0.0) {
            hi = t;
        } else {
            lo = t;
        }
        const double pdf = chi2_pdf(d, t);
        double next;
        if (pdf > 0.0) {
            next = t - f / pdf;
            if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        } else {
            next = 0.5 * (lo + hi);
        }
        const double step = std::fabs(next - t);
        t = next;
        if (step < 1e-13 * std::max(1.0, t) && std::fabs(f) < 1e-12) break;
    }
    return t;
}

} // namespace fomox
