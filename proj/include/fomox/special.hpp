#pragma once

namespace fomox {

// Standard normal CDF via the error function.
double normal_cdf(double x);

// Exact Gaussian-CDF GELU, x * Phi(x).
double gelu_scalar(double x);

// Derivative of gelu_scalar: Phi(x) + x * phi(x).
double gelu_grad_scalar(double x);

// Regularized lower incomplete gamma P(a, x), a > 0, x >= 0.
// Series expansion for x < a + 1, continued fraction otherwise.
double gamma_p(double a, double x);

// Chi-square CDF with d degrees of freedom.
double chi2_cdf(int d, double t);

// Chi-square density with d degrees of freedom.
double chi2_pdf(int d, double t);

// Quantile of the chi-square distribution: the t with P(chi2_d <= t) = q,
// accurate to 1e-9 absolute. Bracketed Newton on the regularized lower
// incomplete gamma. Throws DomainError for q outside (0,1) or d < 1.
double chi2_quantile(int d, double q);

} // namespace fomox
